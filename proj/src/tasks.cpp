#include "ctm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <stdexcept>

#include "ctm/autodiff.hpp"
#include "ctm/io.hpp"

namespace ctm {

// ---- parity ----

std::vector<int> parity_oracle(std::span<const int> values) {
  std::vector<int> out;
  out.reserve(values.size());
  int acc = 1;
  for (int v : values) {
    if (v != 1 && v != -1) throw std::invalid_argument("parity values must be +1 or -1");
    acc *= v;
    out.push_back(acc);
  }
  return out;
}

ParityInstance parity_generate(std::size_t length, Rng& rng) {
  if (length < 1) throw std::invalid_argument("parity length must be >= 1");
  ParityInstance p;
  p.values.resize(length);
  for (auto& v : p.values) v = rng.bernoulli(0.5) ? 1 : -1;
  p.targets = parity_oracle(p.values);
  return p;
}

// ---- mazes ----

std::string move_name(std::size_t m) {
  static const char* names[] = {"left", "right", "up", "down", "wait"};
  if (m >= kMoveClasses) throw std::out_of_range("move id " + std::to_string(m));
  return names[m];
}

namespace {

struct Step {
  int dr, dc;
  std::uint8_t wall, opposite;
  std::size_t move;
};

// Neighbour order used everywhere: left, right, up, down (the move ids).
constexpr Step kSteps[] = {{0, -1, kWallWest, kWallEast, kLeft},
                           {0, 1, kWallEast, kWallWest, kRight},
                           {-1, 0, kWallNorth, kWallSouth, kUp},
                           {1, 0, kWallSouth, kWallNorth, kDown}};

std::vector<std::size_t> cell_distances(const MazeInstance& m, Cell from) {
  const std::size_t c = m.cells;
  std::vector<std::size_t> dist(c * c, SIZE_MAX);
  std::deque<Cell> q{from};
  dist[from.row * c + from.col] = 0;
  while (!q.empty()) {
    Cell cur = q.front();
    q.pop_front();
    for (const auto& s : kSteps) {
      if (m.walls[cur.row * c + cur.col] & s.wall) continue;
      Cell nb{cur.row + s.dr, cur.col + s.dc};
      if (dist[nb.row * c + nb.col] != SIZE_MAX) continue;
      dist[nb.row * c + nb.col] = dist[cur.row * c + cur.col] + 1;
      q.push_back(nb);
    }
  }
  return dist;
}

void carve(MazeInstance& m, Rng& rng) {
  const std::size_t c = m.cells;
  m.walls.assign(c * c, kWallNorth | kWallEast | kWallSouth | kWallWest);
  std::vector<bool> seen(c * c, false);
  std::vector<Cell> stack{{rng.index(c), rng.index(c)}};
  seen[stack[0].row * c + stack[0].col] = true;
  while (!stack.empty()) {
    const Cell cur = stack.back();
    std::vector<const Step*> options;
    for (const auto& s : kSteps) {
      const long r = static_cast<long>(cur.row) + s.dr, k = static_cast<long>(cur.col) + s.dc;
      if (r < 0 || k < 0 || r >= static_cast<long>(c) || k >= static_cast<long>(c)) continue;
      if (!seen[static_cast<std::size_t>(r) * c + static_cast<std::size_t>(k)]) options.push_back(&s);
    }
    if (options.empty()) {
      stack.pop_back();
      continue;
    }
    const Step& s = *options[rng.index(options.size())];
    Cell nb{cur.row + s.dr, cur.col + s.dc};
    m.walls[cur.row * c + cur.col] &= static_cast<std::uint8_t>(~s.wall);
    m.walls[nb.row * c + nb.col] &= static_cast<std::uint8_t>(~s.opposite);
    seen[nb.row * c + nb.col] = true;
    stack.push_back(nb);
  }
}

}  // namespace

std::size_t maze_open_edges(const MazeInstance& m) {
  std::size_t open = 0;
  for (std::size_t r = 0; r < m.cells; ++r) {
    for (std::size_t k = 0; k < m.cells; ++k) {
      const auto w = m.walls[r * m.cells + k];
      if (k + 1 < m.cells && !(w & kWallEast)) ++open;
      if (r + 1 < m.cells && !(w & kWallSouth)) ++open;
    }
  }
  return open;
}

MazeInstance maze_generate(std::size_t size, std::size_t route_steps, Rng& rng) {
  if (size < 5 || size % 2 == 0) {
    throw std::invalid_argument("maze size must be odd and >= 5, got " + std::to_string(size));
  }
  if (route_steps < 1) throw std::invalid_argument("maze route length must be >= 1");
  MazeInstance m;
  m.size = size;
  m.cells = (size - 1) / 2;
  const std::size_t c = m.cells;
  for (;;) {
    carve(m, rng);
    for (int attempt = 0; attempt < 64; ++attempt) {
      const Cell s{rng.index(c), rng.index(c)};
      const auto dist = cell_distances(m, s);
      std::vector<std::size_t> far;
      for (std::size_t i = 0; i < dist.size(); ++i) {
        if (2 * dist[i] >= size) far.push_back(i);
      }
      if (far.empty()) continue;
      const std::size_t g = far[rng.index(far.size())];
      m.start = s;
      m.goal = {g / c, g % c};
      m.route = maze_solve_bfs(m);
      m.path_length = m.route.size();
      m.route.resize(route_steps, kWait);
      return m;
    }
  }
}

std::vector<std::size_t> maze_pixels(const MazeInstance& m) {
  const std::size_t n = m.size, c = m.cells;
  std::vector<std::size_t> px(n * n, kWall);
  for (std::size_t r = 0; r < c; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t pr = 2 * r + 1, pc = 2 * k + 1;
      px[pr * n + pc] = kOpen;
      const auto w = m.walls[r * c + k];
      if (!(w & kWallEast)) px[pr * n + pc + 1] = kOpen;
      if (!(w & kWallSouth)) px[(pr + 1) * n + pc] = kOpen;
    }
  }
  px[(2 * m.start.row + 1) * n + 2 * m.start.col + 1] = kStart;
  px[(2 * m.goal.row + 1) * n + 2 * m.goal.col + 1] = kGoal;
  return px;
}

Tensor maze_render(const MazeInstance& m) {
  const auto px = maze_pixels(m);
  Tensor img({m.size, m.size, kMazeChannels});
  for (std::size_t i = 0; i < px.size(); ++i) img[i * kMazeChannels + px[i]] = 1.0;
  return img;
}

std::vector<std::size_t> maze_solve_bfs(const MazeInstance& m) {
  const std::size_t n = m.size;
  const auto px = maze_pixels(m);
  const std::size_t from = (2 * m.start.row + 1) * n + 2 * m.start.col + 1;
  const std::size_t to = (2 * m.goal.row + 1) * n + 2 * m.goal.col + 1;
  std::vector<std::size_t> parent(n * n, SIZE_MAX), via(n * n, kWait);
  std::deque<std::size_t> q{from};
  parent[from] = from;
  while (!q.empty() && parent[to] == SIZE_MAX) {
    const std::size_t cur = q.front();
    q.pop_front();
    const long r = static_cast<long>(cur / n), k = static_cast<long>(cur % n);
    for (const auto& s : kSteps) {
      const long nr = r + s.dr, nk = k + s.dc;
      if (nr < 0 || nk < 0 || nr >= static_cast<long>(n) || nk >= static_cast<long>(n)) continue;
      const std::size_t nb = static_cast<std::size_t>(nr) * n + static_cast<std::size_t>(nk);
      if (px[nb] == kWall || parent[nb] != SIZE_MAX) continue;
      parent[nb] = cur;
      via[nb] = s.move;
      q.push_back(nb);
    }
  }
  if (parent[to] == SIZE_MAX) throw std::logic_error("maze has no path from start to goal");
  std::vector<std::size_t> moves;
  for (std::size_t cur = to; cur != from; cur = parent[cur]) moves.push_back(via[cur]);
  std::reverse(moves.begin(), moves.end());
  return moves;
}

// ---- sorting ----

std::vector<std::size_t> stable_argsort(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

SortInstance sort_generate(std::size_t count, double mean, double std_dev, Rng& rng) {
  if (!(std_dev > 0.0)) throw std::invalid_argument("sort std must be > 0");
  if (count < 1) throw std::invalid_argument("sort count must be >= 1");
  SortInstance s;
  s.values.resize(count);
  for (auto& v : s.values) v = rng.normal(mean, std_dev);
  s.target = stable_argsort(s.values);
  return s;
}

WaitStats wait_time_stats(const std::vector<std::vector<std::size_t>>& emission_ticks,
                          const std::vector<std::vector<double>>& deltas) {
  WaitStats w;
  std::size_t total = 0;
  for (std::size_t i = 0; i < emission_ticks.size(); ++i) {
    const auto& ticks = emission_ticks[i];
    for (std::size_t k = 0; k < ticks.size(); ++k) {
      const std::size_t prev = k == 0 ? 0 : ticks[k - 1];
      if (ticks[k] < prev) throw std::invalid_argument("emission ticks must be nondecreasing");
      const double wait = static_cast<double>(ticks[k] - prev);
      if (w.mean_wait.size() <= k) {
        w.mean_wait.resize(k + 1, 0.0);
        w.count.resize(k + 1, 0);
      }
      w.mean_wait[k] += wait;
      ++w.count[k];
      ++total;
      if (k > 0 && i < deltas.size() && k < deltas[i].size()) w.delta_wait.push_back({deltas[i][k], wait});
    }
  }
  if (total == 0) throw std::invalid_argument("wait_time_stats: no emissions decoded");
  for (std::size_t k = 0; k < w.mean_wait.size(); ++k) w.mean_wait[k] /= static_cast<double>(w.count[k]);
  if (w.delta_wait.size() >= 2) {
    double mx = 0, my = 0;
    for (auto [x, y] : w.delta_wait) {
      mx += x;
      my += y;
    }
    mx /= static_cast<double>(w.delta_wait.size());
    my /= static_cast<double>(w.delta_wait.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (auto [x, y] : w.delta_wait) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
      syy += (y - my) * (y - my);
    }
    if (sxx > 0 && syy > 0) w.correlation = sxy / std::sqrt(sxx * syy);
  }
  return w;
}

// ---- task plumbing ----

void TaskConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("invalid task config: " + msg); };
  if (name == "parity") {
    if (length < 1) fail("parity length must be >= 1");
  } else if (name == "maze") {
    if (maze_size < 5 || maze_size % 2 == 0) fail("maze_size must be odd and >= 5");
    if (route_steps < 1) fail("route_steps must be >= 1");
  } else if (name == "sort") {
    if (sort_count < 1) fail("sort_count must be >= 1");
    if (!(sort_std > 0.0)) fail("sort_std must be > 0");
  } else {
    fail("unknown task '" + name + "' (expected parity, maze or sort)");
  }
}

nlohmann::json to_json(const TaskConfig& c) {
  return {{"name", c.name},         {"length", c.length},       {"maze_size", c.maze_size},
          {"route_steps", c.route_steps}, {"sort_count", c.sort_count}, {"sort_mean", c.sort_mean},
          {"sort_std", c.sort_std}};
}

TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "name") c.name = it->get<std::string>();
    else if (k == "length") c.length = it->get<std::size_t>();
    else if (k == "maze_size") c.maze_size = it->get<std::size_t>();
    else if (k == "route_steps") c.route_steps = it->get<std::size_t>();
    else if (k == "sort_count") c.sort_count = it->get<std::size_t>();
    else if (k == "sort_mean") c.sort_mean = it->get<double>();
    else if (k == "sort_std") c.sort_std = it->get<double>();
    else throw std::invalid_argument("unknown key 'task." + k + "'");
  }
  c.validate();
  return c;
}

double Task::accuracy(const Tensor& logits, const Batch& batch) const {
  const auto pred = ad::argmax(logits, -1);
  if (pred.size() != batch.targets.size()) throw std::invalid_argument("accuracy: shape mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.targets[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

namespace {

class ParityTask : public Task {
 public:
  explicit ParityTask(TaskConfig c) : cfg_(std::move(c)) {}
  const TaskConfig& config() const override { return cfg_; }
  std::size_t out_positions() const override { return cfg_.length; }
  std::size_t out_classes() const override { return 2; }
  LossMode default_loss() const override { return LossMode::two_tick; }
  void configure(CtmConfig& m) const override {
    m.backbone.kind = BackboneKind::parity_embed;
    m.backbone.sequence_length = cfg_.length;
    m.out_positions = cfg_.length;
    m.out_classes = 2;
  }
  Batch sample(std::size_t batch, Rng& rng) const override {
    Batch b;
    b.inputs = Tensor({batch, cfg_.length});
    b.targets.reserve(batch * cfg_.length);
    for (std::size_t i = 0; i < batch; ++i) {
      auto inst = parity_generate(cfg_.length, rng);
      for (std::size_t j = 0; j < cfg_.length; ++j) {
        b.inputs[i * cfg_.length + j] = inst.values[j];
        b.targets.push_back(parity_class(inst.targets[j]));
      }
    }
    return b;
  }

 private:
  TaskConfig cfg_;
};

class MazeTask : public Task {
 public:
  explicit MazeTask(TaskConfig c) : cfg_(std::move(c)) {}
  const TaskConfig& config() const override { return cfg_; }
  std::size_t out_positions() const override { return cfg_.route_steps; }
  std::size_t out_classes() const override { return kMoveClasses; }
  LossMode default_loss() const override { return LossMode::curriculum; }
  void configure(CtmConfig& m) const override {
    m.backbone.kind = BackboneKind::patch_embed;
    m.backbone.image_size = cfg_.maze_size;
    m.backbone.channels = kMazeChannels;
    m.out_positions = cfg_.route_steps;
    m.out_classes = kMoveClasses;
  }
  Batch sample(std::size_t batch, Rng& rng) const override {
    const std::size_t n = cfg_.maze_size, per = n * n * kMazeChannels;
    Batch b;
    b.inputs = Tensor({batch, n, n, kMazeChannels});
    for (std::size_t i = 0; i < batch; ++i) {
      auto m = maze_generate(n, cfg_.route_steps, rng);
      const Tensor img = maze_render(m);
      std::copy(img.data.begin(), img.data.end(), b.inputs.data.begin() + i * per);
      b.targets.insert(b.targets.end(), m.route.begin(), m.route.end());
    }
    return b;
  }

 private:
  TaskConfig cfg_;
};

class SortTask : public Task {
 public:
  explicit SortTask(TaskConfig c) : cfg_(std::move(c)) {}
  const TaskConfig& config() const override { return cfg_; }
  std::size_t out_positions() const override { return 1; }
  std::size_t out_classes() const override { return cfg_.sort_count + 1; }
  LossMode default_loss() const override { return LossMode::ctc; }
  void configure(CtmConfig& m) const override {
    m.backbone.kind = BackboneKind::direct;
    m.backbone.input_width = cfg_.sort_count;
    m.out_positions = 1;
    m.out_classes = cfg_.sort_count + 1;
  }
  Batch sample(std::size_t batch, Rng& rng) const override {
    Batch b;
    b.inputs = Tensor({batch, cfg_.sort_count});
    for (std::size_t i = 0; i < batch; ++i) {
      auto s = sort_generate(cfg_.sort_count, cfg_.sort_mean, cfg_.sort_std, rng);
      std::copy(s.values.begin(), s.values.end(), b.inputs.data.begin() + i * cfg_.sort_count);
      b.labels.push_back(std::move(s.target));
    }
    return b;
  }
  // logits: [B x T x (N+1)] per-tick emissions.
  double accuracy(const Tensor& logits, const Batch& batch) const override {
    const std::size_t b = logits.shape[0], t = logits.shape[1], v = logits.shape[2];
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < b; ++i) {
      Tensor row({t, v}, std::vector<double>(logits.data.begin() + i * t * v,
                                             logits.data.begin() + (i + 1) * t * v));
      const auto d = ctc_greedy_decode(row, cfg_.sort_count);
      const auto& want = batch.labels[i];
      for (std::size_t k = 0; k < want.size(); ++k) hit += k < d.symbols.size() && d.symbols[k] == want[k];
      total += want.size();
    }
    return static_cast<double>(hit) / static_cast<double>(total);
  }

 private:
  TaskConfig cfg_;
};

constexpr char kDatasetMagic[] = "CTMDATA1";

}  // namespace

std::unique_ptr<Task> make_task(const TaskConfig& cfg) {
  cfg.validate();
  if (cfg.name == "parity") return std::make_unique<ParityTask>(cfg);
  if (cfg.name == "maze") return std::make_unique<MazeTask>(cfg);
  return std::make_unique<SortTask>(cfg);
}

void save_dataset(const std::filesystem::path& path, const TaskConfig& cfg, std::uint64_t seed,
                  const Batch& batch) {
  std::vector<NamedTensor> tensors{{"inputs", batch.inputs}};
  const std::size_t n = batch.size();
  if (!batch.targets.empty()) {
    const std::size_t p = batch.targets.size() / std::max<std::size_t>(n, 1);
    Tensor t({n, p});
    for (std::size_t i = 0; i < batch.targets.size(); ++i) t[i] = static_cast<double>(batch.targets[i]);
    tensors.push_back({"targets", std::move(t)});
  }
  if (!batch.labels.empty()) {
    const std::size_t s = batch.labels[0].size();
    Tensor t({n, s});
    for (std::size_t i = 0; i < n; ++i) {
      if (batch.labels[i].size() != s) throw std::invalid_argument("save_dataset: ragged labels");
      for (std::size_t k = 0; k < s; ++k) t[i * s + k] = static_cast<double>(batch.labels[i][k]);
    }
    tensors.push_back({"labels", std::move(t)});
  }
  nlohmann::json header{{"format", "ctm-dataset"}, {"version", 1}, {"task", to_json(cfg)},
                        {"seed", seed}, {"count", n}};
  write_tensor_file(path, kDatasetMagic, header, tensors);
  nlohmann::json sidecar = header;
  sidecar["container"] = path.filename().string();
  sidecar["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    sidecar["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape}, {"dtype", "float64-le"}});
  }
  auto side = path;
  side += ".json";
  write_text_file(side, sidecar.dump(2) + "\n");
}

Batch load_dataset(const std::filesystem::path& path, TaskConfig* cfg) {
  const TensorFile f = read_tensor_file(path, kDatasetMagic);
  if (cfg) *cfg = task_config_from_json(f.header.at("task"));
  Batch b;
  for (const auto& t : f.tensors) {
    if (t.name == "inputs") {
      b.inputs = t.value;
    } else if (t.name == "targets") {
      for (double v : t.value.data) b.targets.push_back(static_cast<std::size_t>(v));
    } else if (t.name == "labels") {
      const std::size_t n = t.value.shape[0], s = t.value.shape[1];
      b.labels.assign(n, {});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < s; ++k) b.labels[i].push_back(static_cast<std::size_t>(t.value[i * s + k]));
    }
  }
  return b;
}

}  // namespace ctm
