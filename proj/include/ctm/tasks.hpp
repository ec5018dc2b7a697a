#pragma once

// Task generators and oracles: cumulative parity, 2D mazes and sorting.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctm/config.hpp"
#include "ctm/losses.hpp"
#include "ctm/random.hpp"
#include "ctm/tensor.hpp"
#include "json.hpp"

namespace ctm {

// ---- parity ----

// Prefix-product signs of a +1/-1 sequence.
std::vector<int> parity_oracle(std::span<const int> values);

struct ParityInstance {
  std::vector<int> values;   // +1 / -1
  std::vector<int> targets;  // cumulative parity, +1 / -1
};

ParityInstance parity_generate(std::size_t length, Rng& rng);

// Class id used for a parity sign: +1 -> 0, -1 -> 1.
inline std::size_t parity_class(int sign) { return sign < 0 ? 1 : 0; }

// ---- mazes ----

enum Move : std::size_t { kLeft = 0, kRight = 1, kUp = 2, kDown = 3, kWait = 4 };
inline constexpr std::size_t kMoveClasses = 5;
std::string move_name(std::size_t m);

// Image categories (one-hot channels of the rendering).
enum MazePixel : std::size_t { kWall = 0, kOpen = 1, kStart = 2, kGoal = 3 };
inline constexpr std::size_t kMazeChannels = 4;

// Wall bits stored per cell; a set bit means the wall is present.
enum WallBit : std::uint8_t { kWallNorth = 1, kWallEast = 2, kWallSouth = 4, kWallWest = 8 };

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const Cell&) const = default;
};

// An n x n pixel maze (n odd) over a c x c cell lattice, c = (n - 1) / 2.
// Cell (r, c) sits at pixel (2r + 1, 2c + 1); the pixel between two adjacent
// cells is open when the wall between them is absent.
struct MazeInstance {
  std::size_t size = 0;                // n, pixels per side
  std::size_t cells = 0;               // c, cells per side
  std::vector<std::uint8_t> walls;     // [c x c] wall bitmasks
  Cell start;
  Cell goal;
  std::vector<std::size_t> route;      // pixel-step moves, wait-padded to the route length
  std::size_t path_length = 0;         // start -> goal length in pixel steps (unpadded)
};

std::size_t maze_open_edges(const MazeInstance& maze);

// Randomized depth-first spanning tree; start and goal at least `size` pixel steps apart.
// `route_steps` is P, the padded route length.
MazeInstance maze_generate(std::size_t size, std::size_t route_steps, Rng& rng);

// [n x n] pixel categories.
std::vector<std::size_t> maze_pixels(const MazeInstance& maze);

// One-hot rendering [n x n x 4].
Tensor maze_render(const MazeInstance& maze);

// Breadth-first shortest path over open pixels, as pixel-step moves.
std::vector<std::size_t> maze_solve_bfs(const MazeInstance& maze);

// ---- sorting ----

struct SortInstance {
  std::vector<double> values;
  std::vector<std::size_t> target;  // stable argsort
};

std::vector<std::size_t> stable_argsort(std::span<const double> values);
SortInstance sort_generate(std::size_t count, double mean, double std_dev, Rng& rng);

struct WaitStats {
  std::vector<double> mean_wait;          // per output index
  std::vector<std::size_t> count;         // samples contributing to each index
  std::vector<std::array<double, 2>> delta_wait;  // (data delta, wait) pairs
  double correlation = 0.0;               // Pearson over delta_wait (0 if undefined)
};

// emission_ticks[i] holds the one-based tick of each emitted output of instance i;
// deltas[i][k] is the gap between the k-th and (k-1)-th sorted values (0 for k = 0).
// Wait for output k is ticks since the previous emission (since tick 0 for k = 0).
WaitStats wait_time_stats(const std::vector<std::vector<std::size_t>>& emission_ticks,
                          const std::vector<std::vector<double>>& deltas);

// ---- task plumbing ----

struct TaskConfig {
  std::string name = "parity";  // parity | maze | sort
  std::size_t length = 8;       // parity sequence length
  std::size_t maze_size = 9;    // n
  std::size_t route_steps = 25;  // P for mazes
  std::size_t sort_count = 30;
  double sort_mean = 0.0;
  double sort_std = 1.0;

  void validate() const;
};

nlohmann::json to_json(const TaskConfig& cfg);
TaskConfig task_config_from_json(const nlohmann::json& j);

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> targets;               // [B*P] class ids (parity, maze)
  std::vector<std::vector<std::size_t>> labels;   // CTC label sequences (sort)
  std::size_t size() const { return inputs.rank() ? inputs.shape[0] : 0; }
};

class Task {
 public:
  virtual ~Task() = default;
  virtual const TaskConfig& config() const = 0;
  virtual std::size_t out_positions() const = 0;
  virtual std::size_t out_classes() const = 0;
  virtual LossMode default_loss() const = 0;
  // Fills the backbone and output shape of a model config for this task.
  virtual void configure(CtmConfig& cfg) const = 0;
  virtual Batch sample(std::size_t batch, Rng& rng) const = 0;
  // Fraction of correct output positions given per-sample logits [B x P x C]
  // (CTC tasks: per-tick logits [B x T x C] are decoded first).
  virtual double accuracy(const Tensor& logits, const Batch& batch) const;
};

std::unique_ptr<Task> make_task(const TaskConfig& cfg);

// Fixed evaluation sets: container file plus a JSON sidecar at `path` + ".json".
void save_dataset(const std::filesystem::path& path, const TaskConfig& cfg, std::uint64_t seed,
                  const Batch& batch);
Batch load_dataset(const std::filesystem::path& path, TaskConfig* cfg = nullptr);

}  // namespace ctm
