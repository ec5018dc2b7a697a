#pragma once

// Run configuration file: task, model and training sections as one JSON tree.
// Parsing is strict (unknown keys are errors) and serialization writes every
// field, so an echoed config fully describes a run.

#include <cstdint>
#include <optional>
#include <string>

#include "ctm/baselines.hpp"
#include "ctm/losses.hpp"
#include "ctm/tasks.hpp"
#include "json.hpp"

namespace ctm {

struct TrainConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t warmup = 100;
  double weight_decay = 0.0;
  double grad_clip = 0.0;          // global-norm threshold; 0 disables
  std::size_t eval_interval = 100;
  std::size_t eval_size = 256;
  std::uint64_t seed = 0;
  std::string loss_mode;           // empty: the task's default
  bool log_wallclock = false;      // wallclock breaks byte-identical logs, so off by default
  double target_accuracy = 0.0;    // stop once eval accuracy reaches this; 0 disables

  void validate() const;
};

struct RunConfig {
  TaskConfig task;
  ModelSpec model;
  std::size_t param_budget = 0;  // match model width to this count; 0 disables
  TrainConfig train;
  std::string output_dir = "runs/default";

  // Fills task-dependent model fields and applies the parameter budget.
  void resolve();
  LossMode loss_mode() const;
};

// Thrown for malformed or invalid configuration (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ModelSpec& s);
nlohmann::json to_json(const RunConfig& c);

TrainConfig train_config_from_json(const nlohmann::json& j);
ModelSpec model_spec_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

// Parses config text; syntax errors report line and column.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

}  // namespace ctm
