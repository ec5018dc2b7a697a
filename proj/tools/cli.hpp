#pragma once

// Command-line front end: train, eval, trace, plot and dataset subcommands.

#include <iosfwd>
#include <string>
#include <vector>

#include "ctm/trainer.hpp"
#include "json.hpp"

namespace ctm::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

// Environment variable that overrides the config's output directory.
inline constexpr const char* kOutputDirEnv = "CTM_OUTPUT_DIR";

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Evaluation report: per-tick accuracy, halting at `threshold`, calibration at the
// final tick. Ticks are zero-based.
nlohmann::json eval_report(const EvalResult& r, double threshold, std::size_t bins);

// Differences between the checkpoint's model shape and the shape `task` requires,
// one "key: checkpoint X, task Y" line each. Empty when compatible.
std::vector<std::string> config_diff(const ModelSpec& model, const TaskConfig& task);

}  // namespace ctm::cli
