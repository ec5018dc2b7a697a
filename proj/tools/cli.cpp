#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ctm/io.hpp"
#include "svg.hpp"

namespace ctm::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

inline constexpr const char* kTraceSchema = "ctm-trace/1";
inline constexpr const char* kNeuronSchema = "ctm-neurons/1";

void walk_diff(const json& a, const json& b, const std::string& path, std::vector<std::string>& out) {
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it)
      walk_diff(it.value(), b.contains(it.key()) ? b.at(it.key()) : json(), path + "." + it.key(), out);
    return;
  }
  if (a != b) out.push_back(path + ": checkpoint " + a.dump() + ", task " + b.dump());
}

TaskConfig read_task_file(const std::string& path) {
  const json j = json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) throw ConfigError("'" + path + "' is not valid JSON");
  try {
    return task_config_from_json(j.contains("task") ? j.at("task") : j);
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

struct EvalInput {
  Checkpoint ck;
  std::unique_ptr<Task> task;
  Batch batch;
};

// Checkpoint plus the evaluation batch: a saved dataset, or fresh samples of the
// checkpoint's task (optionally replaced by a task file).
EvalInput load_eval_input(const std::string& checkpoint, const std::string& dataset,
                          const std::string& task_file, std::size_t samples, std::uint64_t seed) {
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint '" + checkpoint + "' not found");
  EvalInput in{load_checkpoint(checkpoint), nullptr, {}};
  TaskConfig task = in.ck.config.task;
  if (!dataset.empty()) {
    if (!fs::exists(dataset)) throw ConfigError("dataset '" + dataset + "' not found");
    in.batch = load_dataset(dataset, &task);
  } else if (!task_file.empty()) {
    task = read_task_file(task_file);
  }
  const auto diff = config_diff(in.ck.config.model, task);
  if (!diff.empty()) {
    std::string msg = "task is incompatible with the checkpoint model:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  in.task = make_task(task);
  if (dataset.empty()) {
    Rng rng(seed);
    in.batch = in.task->sample(samples, rng);
  }
  return in;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path probe = dir / ".write_probe";
  std::ofstream f(probe);
  if (ec || !f) throw std::runtime_error("output directory '" + dir.string() + "' is not writable");
  f.close();
  fs::remove(probe);
}

// ---- subcommands ----

int cmd_train(const std::string& config_path, const std::string& output_flag, bool quiet,
              std::ostream& out, std::ostream& err) {
  RunConfig run = load_run_config(config_path);
  if (!output_flag.empty()) {
    run.output_dir = output_flag;
  } else if (const char* env = std::getenv(kOutputDirEnv); env && *env) {
    run.output_dir = env;
  }
  if (run.output_dir.empty()) throw ConfigError("output_dir is empty");
  run.resolve();
  ensure_writable_dir(run.output_dir);

  auto model = make_model(run.model, run.train.seed);
  if (!quiet)
    err << "training " << model->kind() << " (" << model->params().total_count() << " parameters) on "
        << run.task.name << " for " << run.train.iterations << " iterations\n";
  auto on_log = [&](const LogRecord& r) {
    if (!quiet) err << "iter " << r.iter << " loss " << r.loss << " accuracy " << r.accuracy << " lr " << r.lr << "\n";
  };
  const TrainResult r = train(*model, run, fs::path(run.output_dir), on_log);
  json summary = {{"output_dir", run.output_dir},
                  {"iterations", r.iterations},
                  {"best_accuracy", r.best_accuracy},
                  {"best_iteration", r.best_iteration},
                  {"final_accuracy", r.final_accuracy},
                  {"reached_target", r.reached_target}};
  out << summary.dump() << "\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& task_file,
             std::size_t samples, std::uint64_t seed, double threshold, std::size_t bins,
             const std::string& out_path, std::ostream& out) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("--threshold must lie in (0, 1], got " + fmt(threshold));
  if (bins == 0) throw ConfigError("--bins must be positive");
  if (samples == 0) throw ConfigError("--samples must be positive");
  auto in = load_eval_input(checkpoint, dataset, task_file, samples, seed);
  const LossMode mode = in.ck.config.loss_mode();
  const EvalResult r = evaluate(*in.ck.model, *in.task, in.batch, mode);
  json report = eval_report(r, threshold, bins);
  report["checkpoint"] = checkpoint;
  report["iteration"] = in.ck.iteration;
  report["model_kind"] = in.ck.model->kind();
  report["task"] = to_json(in.task->config());
  report["loss_mode"] = to_string(mode);
  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
  } else {
    write_text_file(out_path, text);
  }
  return kOk;
}

int cmd_trace(const std::string& checkpoint, const std::string& dataset, const std::string& task_file,
              std::size_t samples, std::uint64_t seed, std::size_t instance, std::size_t neurons,
              const std::string& out_dir, std::ostream& out) {
  if (samples == 0) throw ConfigError("--samples must be positive");
  auto in = load_eval_input(checkpoint, dataset, task_file, samples, seed);
  const std::size_t n = in.batch.size();
  if (instance >= n)
    throw ConfigError("instance " + std::to_string(instance) + " out of range [0, " + std::to_string(n) + ")");
  ensure_writable_dir(out_dir);

  const Batch one = slice_batch(in.batch, instance, instance + 1);
  ad::Tape tape(false);
  ParamBinding binding(tape, in.ck.model->params());
  ForwardOptions opts;
  opts.trace = true;
  const ForwardOutput fo = in.ck.model->forward(binding, one.inputs, opts);
  const std::size_t t_count = fo.logits.size();
  const std::size_t p = in.ck.model->out_positions(), c = in.ck.model->out_classes();
  const bool has_attention = !fo.attention.empty() && fo.attention[0].size() > 0;
  const std::size_t heads = has_attention ? fo.attention[0].shape[1] : 0;
  const std::size_t locs = has_attention ? fo.attention[0].shape[2] : 0;

  const std::string stem = std::to_string(instance);
  std::ostringstream csv;
  csv << "# schema: " << kTraceSchema << "; instance=" << instance << "; ticks=" << t_count
      << "; positions=" << p << "; classes=" << c << "; heads=" << heads << "; locations=" << locs << "\n";
  csv << "tick";
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t k = 0; k < c; ++k) csv << ",y_p" << a << "_c" << k;
  csv << ",certainty";
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < locs; ++l) csv << ",attn_h" << h << "_l" << l;
  csv << "\n";

  std::vector<svg::Series> attn_series(heads);
  for (std::size_t h = 0; h < heads; ++h) attn_series[h].name = "head " + std::to_string(h);
  for (std::size_t t = 0; t < t_count; ++t) {
    const Tensor& y = fo.logits[t].value();
    const auto cert = certainty_from_logits(y);
    double mean_cert = 0.0;
    for (double v : cert) mean_cert += v;
    mean_cert /= static_cast<double>(cert.size());
    csv << t;
    for (double v : y.data) csv << "," << fmt(v);
    csv << "," << fmt(mean_cert);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* w = fo.attention[t].data.data() + h * locs;
      for (std::size_t l = 0; l < locs; ++l) csv << "," << fmt(w[l]);
      attn_series[h].xs.push_back(static_cast<double>(t));
      attn_series[h].ys.push_back(static_cast<double>(std::max_element(w, w + locs) - w));
    }
    csv << "\n";
  }
  json written = json::array();
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text_file(fs::path(out_dir) / name, text);
    written.push_back((fs::path(out_dir) / name).string());
  };
  emit("trace_" + stem + ".csv", csv.str());

  if (has_attention) {
    svg::Chart chart{"Attention argmax per head, instance " + stem, "internal tick", "attended location",
                     attn_series, true};
    emit("attention_" + stem + ".svg", svg::line_chart(chart));
  }

  const bool has_neurons = !fo.post_activations.empty() && fo.post_activations[0].size() > 0;
  if (has_neurons && neurons > 0) {
    const std::size_t d = fo.post_activations[0].shape[1];
    const std::size_t k = std::min(neurons, d);
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < k; ++i) picked.push_back(i * d / k);
    std::ostringstream ncsv;
    ncsv << "# schema: " << kNeuronSchema << "; instance=" << instance << "; ticks=" << t_count
         << "; neurons=" << d << "\n";
    ncsv << "tick";
    for (auto i : picked) ncsv << ",z" << i;
    ncsv << "\n";
    std::vector<svg::Series> series;
    for (auto i : picked) series.push_back({"neuron " + std::to_string(i), {}, {}});
    for (std::size_t t = 0; t < t_count; ++t) {
      ncsv << t;
      for (std::size_t j = 0; j < picked.size(); ++j) {
        const double z = fo.post_activations[t][picked[j]];
        ncsv << "," << fmt(z);
        series[j].xs.push_back(static_cast<double>(t));
        series[j].ys.push_back(z);
      }
      ncsv << "\n";
    }
    emit("neurons_" + stem + ".csv", ncsv.str());
    svg::Chart chart{"Neuron post-activations, instance " + stem, "internal tick", "activation", series};
    emit("neurons_" + stem + ".svg", svg::line_chart(chart));
  }
  out << json{{"files", written}}.dump() << "\n";
  return kOk;
}

int cmd_plot(const std::string& metrics, const std::string& report, const std::string& out_path,
             std::ostream& out) {
  if (metrics.empty() == report.empty()) throw ConfigError("plot needs exactly one of --metrics or --report");
  std::string text;
  if (!metrics.empty()) {
    if (!fs::exists(metrics)) throw ConfigError("metrics log '" + metrics + "' not found");
    svg::Series loss{"train loss", {}, {}}, acc{"eval accuracy", {}, {}};
    std::istringstream lines(read_text_file(metrics));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      const json r = json::parse(line, nullptr, false);
      if (r.is_discarded() || !r.contains("iter"))
        throw ConfigError(metrics + ":" + std::to_string(lineno) + ": not a metric record");
      const double it = r.at("iter").get<double>();
      loss.xs.push_back(it);
      loss.ys.push_back(r.at("loss").get<double>());
      acc.xs.push_back(it);
      acc.ys.push_back(r.at("accuracy").get<double>());
    }
    text = svg::line_chart({"Training curves", "iteration", "value", {loss, acc}, true});
  } else {
    if (!fs::exists(report)) throw ConfigError("report '" + report + "' not found");
    const json r = json::parse(read_text_file(report));
    if (!r.contains("calibration") || r.at("calibration").is_null())
      throw ConfigError("report has no calibration section");
    svg::Series ideal{"ideal", {0.0, 1.0}, {0.0, 1.0}}, model{"model", {}, {}};
    for (const auto& b : r.at("calibration").at("bins")) {
      if (b.at("count").get<std::size_t>() == 0) continue;
      model.xs.push_back(b.at("confidence").get<double>());
      model.ys.push_back(b.at("accuracy").get<double>());
    }
    text = svg::line_chart({"Reliability (ECE " + fmt(r.at("calibration").at("ece").get<double>()) + ")",
                            "confidence", "accuracy", {ideal, model}, true});
  }
  write_text_file(out_path, text);
  out << json{{"files", {out_path}}}.dump() << "\n";
  return kOk;
}

int cmd_dataset(const std::string& config_path, const std::string& task_file, std::size_t samples,
                std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  if (config_path.empty() == task_file.empty()) throw ConfigError("dataset needs exactly one of --config or --task");
  if (samples == 0) throw ConfigError("--samples must be positive");
  const TaskConfig task = config_path.empty() ? read_task_file(task_file) : load_run_config(config_path).task;
  const auto t = make_task(task);
  Rng rng(seed);
  const Batch b = t->sample(samples, rng);
  if (fs::path(out_path).has_parent_path()) ensure_writable_dir(fs::path(out_path).parent_path());
  save_dataset(out_path, task, seed, b);
  out << json{{"files", {out_path, out_path + ".json"}}, {"samples", samples}}.dump() << "\n";
  return kOk;
}

}  // namespace

std::vector<std::string> config_diff(const ModelSpec& model, const TaskConfig& task) {
  ModelSpec want = model;
  make_task(task)->configure(want.cfg);
  std::vector<std::string> out;
  walk_diff(to_json(model), to_json(want), "model", out);
  return out;
}

json eval_report(const EvalResult& r, double threshold, std::size_t bins) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("threshold must lie in (0, 1]");
  json report = {{"samples", r.certainties.rank() ? r.certainties.shape[0] : 0},
                 {"accuracy", r.accuracy},
                 {"per_tick_accuracy", r.tick_accuracy},
                 {"chosen_tick_histogram", json::array()}};
  const std::size_t n = r.certainties.shape[0], t_count = r.certainties.shape[1];
  std::vector<std::size_t> chosen_hist(t_count, 0);
  for (auto t : r.chosen_tick) ++chosen_hist[t];
  report["chosen_tick_histogram"] = chosen_hist;

  if (r.probs.empty()) {
    report["halting"] = nullptr;
    report["calibration"] = nullptr;
    return report;
  }
  const std::size_t c = r.probs[0].shape[1], p = r.labels.size() / n;
  std::vector<std::size_t> hist(t_count, 0);
  std::size_t hit = 0;
  double tick_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(r.certainties.data.begin() + i * t_count,
                            r.certainties.data.begin() + (i + 1) * t_count);
    const std::size_t h = adaptive_halt(row, threshold);
    ++hist[h];
    tick_sum += static_cast<double>(h);
    for (std::size_t a = 0; a < p; ++a) {
      const double* q = r.probs[h].data.data() + (i * p + a) * c;
      hit += static_cast<std::size_t>(std::max_element(q, q + c) - q) == r.labels[i * p + a];
    }
  }
  report["halting"] = {{"threshold", threshold},
                       {"accuracy_at_halt", static_cast<double>(hit) / static_cast<double>(n * p)},
                       {"mean_halt_tick", tick_sum / static_cast<double>(n)},
                       {"histogram", hist}};

  const Calibration cal = calibration_curve(r.probs, r.labels, t_count - 1, bins);
  json jb = json::array();
  for (const auto& b : cal.bins)
    jb.push_back({{"lower", b.lower},
                  {"upper", b.upper},
                  {"confidence", b.confidence},
                  {"accuracy", b.accuracy},
                  {"count", b.count}});
  report["calibration"] = {{"tick", t_count - 1}, {"n_bins", bins}, {"ece", cal.ece}, {"bins", jb}};
  return report;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Continuous thought machine: train, evaluate and inspect models", "ctm"};
  app.require_subcommand(1);

  std::string config, output_dir, checkpoint, dataset, task_file, out_path, metrics, report;
  std::size_t samples = 256, bins = 10, instance = 0, neurons = 16;
  std::uint64_t seed = 1234;
  double threshold = 0.8;
  bool quiet = false;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("config", config, "Run config (JSON)")->required();
  train_cmd->add_option("--output-dir", output_dir, "Override the output directory");
  train_cmd->add_flag("--quiet", quiet, "No progress output");

  auto add_source = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    auto* ds = cmd->add_option("--dataset", dataset, "Saved dataset to evaluate on");
    cmd->add_option("--task", task_file, "Task section (JSON) replacing the checkpoint's task")->excludes(ds);
    cmd->add_option("--samples", samples, "Generated instances when no dataset is given");
    cmd->add_option("--seed", seed, "Seed for generated instances");
  };
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_source(eval_cmd);
  eval_cmd->add_option("--threshold", threshold, "Certainty threshold for adaptive halting");
  eval_cmd->add_option("--bins", bins, "Calibration bins");
  eval_cmd->add_option("--out", out_path, "Write the report here instead of stdout");

  auto* trace_cmd = app.add_subcommand("trace", "Export per-tick traces and plots for one instance");
  add_source(trace_cmd);
  trace_cmd->add_option("--instance", instance, "Instance index");
  trace_cmd->add_option("--neurons", neurons, "Neurons sampled for the activation trace (0 disables)");
  trace_cmd->add_option("--out", output_dir, "Output directory")->required();

  auto* plot_cmd = app.add_subcommand("plot", "Plot a metric log or an eval report as SVG");
  plot_cmd->add_option("--metrics", metrics, "metrics.ndjson from a training run");
  plot_cmd->add_option("--report", report, "Eval report (reliability diagram)");
  plot_cmd->add_option("--out", out_path, "SVG file")->required();

  auto* data_cmd = app.add_subcommand("dataset", "Generate and save a frozen evaluation set");
  data_cmd->add_option("--config", config, "Run config whose task section is used");
  data_cmd->add_option("--task", task_file, "Task section (JSON)");
  data_cmd->add_option("--samples", samples, "Number of instances");
  data_cmd->add_option("--seed", seed, "Generation seed");
  data_cmd->add_option("--out", out_path, "Dataset file")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(config, output_dir, quiet, out, err);
    if (*eval_cmd) return cmd_eval(checkpoint, dataset, task_file, samples, seed, threshold, bins, out_path, out);
    if (*trace_cmd)
      return cmd_trace(checkpoint, dataset, task_file, samples, seed, instance, neurons, output_dir, out);
    if (*plot_cmd) return cmd_plot(metrics, report, out_path, out);
    if (*data_cmd) return cmd_dataset(config, task_file, samples, seed, out_path, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::domain_error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace ctm::cli
