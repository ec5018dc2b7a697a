#pragma once

// Optimisation loop: AdamW, warmup + cosine schedule, global-norm clipping,
// checkpoints and periodic evaluation on a frozen set.

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctm/model.hpp"
#include "ctm/run_config.hpp"
#include "ctm/tasks.hpp"

namespace ctm {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

  // Updates `params` in place. Throws NumericError (leaving params untouched)
  // if any gradient is non-finite.
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);

  const AdamWHyper& hyper() const { return hyper_; }
  std::size_t steps() const { return steps_; }

 private:
  AdamWHyper hyper_;
  std::size_t steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Linear 0 -> lr over the warmup, then cosine lr -> 0 over the remaining iterations.
double lr_schedule(std::size_t iter, const TrainConfig& cfg);

double global_norm(const std::vector<Tensor>& grads);

// Scales every gradient by max_norm / g when the global norm g exceeds max_norm.
// Returns g (the pre-clip norm).
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

// ---- checkpoints ----

inline constexpr const char* kCheckpointMagic = "CTMCKPT1";

struct Checkpoint {
  RunConfig config;
  std::size_t iteration = 0;
  nlohmann::json header;
  std::unique_ptr<SequenceModel> model;
};

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                     const SequenceModel& model, std::size_t iteration, const AdamWHyper& hyper);

// Rebuilds the model from the echoed config and restores every parameter.
// Throws ConfigError listing mismatched names or shapes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- evaluation ----

struct EvalResult {
  double accuracy = 0.0;                 // at the tick chosen by the loss mode
  std::vector<double> tick_accuracy;     // per tick (classification tasks)
  Tensor certainties;                    // [N x T], averaged over positions
  std::vector<std::size_t> chosen_tick;  // per sample
  std::vector<Tensor> probs;             // per tick, [N*P x C]
  std::vector<std::size_t> labels;       // [N*P]
};

// Per-sample logits [N x P x C] at the tick the loss mode reports: the final tick
// for final-tick, the most certain tick otherwise. For ctc, per-tick logits [N x T x C].
Tensor report_logits(const std::vector<Tensor>& tick_logits, LossMode mode,
                     std::vector<std::size_t>* chosen = nullptr);

EvalResult evaluate(const SequenceModel& model, const Task& task, const Batch& batch,
                    LossMode mode, std::size_t chunk = 128);

// Rows [begin, end) of a batch.
Batch slice_batch(const Batch& batch, std::size_t begin, std::size_t end);

// ---- training ----

struct LogRecord {
  std::size_t iter = 0;  // iterations completed
  double loss = 0.0;     // mean training loss since the previous record
  double accuracy = 0.0;  // frozen eval set
  double lr = 0.0;
  std::optional<double> wallclock;  // seconds since start, when enabled
};

std::string to_ndjson(const LogRecord& r);

struct TrainResult {
  std::vector<LogRecord> log;
  std::size_t iterations = 0;
  double best_accuracy = 0.0;
  std::size_t best_iteration = 0;
  double final_accuracy = 0.0;
  bool reached_target = false;
  double seconds = 0.0;
};

// Output file names inside the run directory.
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kMetricsFile = "metrics.ndjson";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kFinalCheckpoint = "final.ckpt";
inline constexpr const char* kDiagnosticCheckpoint = "diagnostic.ckpt";

// Trains `model` on batches of `run.task`. `run` must be resolved. With an output
// directory, writes the config echo, the metric log and checkpoints. A non-finite
// loss or gradient saves a diagnostic checkpoint and rethrows NumericError.
TrainResult train(SequenceModel& model, const RunConfig& run,
                  const std::optional<std::filesystem::path>& output_dir = std::nullopt,
                  const std::function<void(const LogRecord&)>& on_log = {});

// Training loss of one batch as a differentiable scalar.
ad::DiffArray batch_loss(const ForwardOutput& out, const Batch& batch, LossMode mode);

}  // namespace ctm
