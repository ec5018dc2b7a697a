#include "ctm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include "ctm/io.hpp"

namespace ctm {

using nlohmann::json;

void AdamW::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw std::invalid_argument("adamw: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape != params[i].shape)
      throw std::invalid_argument("adamw: gradient shape mismatch for parameter " + std::to_string(i));
    for (double g : grads[i].data)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + std::to_string(i));
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape, 0.0);
      v_.emplace_back(p.shape, 0.0);
    }
  }
  ++steps_;
  const double b1 = hyper_.beta1, b2 = hyper_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + hyper_.eps);
      p[k] -= lr * (update + hyper_.weight_decay * p[k]);
    }
  }
}

double lr_schedule(std::size_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.iterations) throw std::out_of_range("lr_schedule: iteration past the end of training");
  if (iter < cfg.warmup) return cfg.lr * static_cast<double>(iter) / static_cast<double>(cfg.warmup);
  const double progress =
      static_cast<double>(iter - cfg.warmup) / static_cast<double>(cfg.iterations - cfg.warmup);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g.data) s += x * x;
  return std::sqrt(s);
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  const double g = global_norm(grads);
  if (g > max_norm) {
    const double f = max_norm / g;
    for (auto& t : grads)
      for (double& x : t.data) x *= f;
  }
  return g;
}

// ---- checkpoints ----

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                     const SequenceModel& model, std::size_t iteration, const AdamWHyper& hyper) {
  json header = {{"format", "ctm-checkpoint"},
                 {"config", to_json(config)},
                 {"iteration", iteration},
                 {"model_kind", model.kind()},
                 {"param_count", model.params().total_count()},
                 {"optimizer",
                  {{"name", "adamw"},
                   {"beta1", hyper.beta1},
                   {"beta2", hyper.beta2},
                   {"eps", hyper.eps},
                   {"weight_decay", hyper.weight_decay}}}};
  std::vector<NamedTensor> tensors;
  const auto& store = model.params();
  for (std::size_t i = 0; i < store.size(); ++i) tensors.push_back({store.name(i), store.value(i)});
  write_tensor_file(path, kCheckpointMagic, header, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  TensorFile f = read_tensor_file(path, kCheckpointMagic);
  Checkpoint ck;
  ck.header = f.header;
  ck.config = run_config_from_json(f.header.at("config"));
  ck.iteration = f.header.at("iteration").get<std::size_t>();
  ck.model = make_model(ck.config.model, ck.config.train.seed);

  auto& store = ck.model->params();
  std::vector<std::string> problems;
  std::vector<bool> restored(store.size(), false);
  for (const auto& t : f.tensors) {
    auto id = store.find(t.name);
    if (!id) {
      problems.push_back("unexpected tensor '" + t.name + "'");
      continue;
    }
    if (store.value(*id).shape != t.value.shape) {
      problems.push_back("'" + t.name + "': checkpoint " + shape_string(t.value.shape) + " vs model " +
                         shape_string(store.value(*id).shape));
      continue;
    }
    store.value(*id) = t.value;
    restored[*id] = true;
  }
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!restored[i] && store.value(i).size() > 0) problems.push_back("missing tensor '" + store.name(i) + "'");
  if (!problems.empty()) {
    std::string msg = "checkpoint '" + path.string() + "' does not match its config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  return ck;
}

// ---- evaluation ----

Batch slice_batch(const Batch& batch, std::size_t begin, std::size_t end) {
  const std::size_t n = batch.size();
  if (begin > end || end > n) throw std::out_of_range("slice_batch: bad range");
  Batch out;
  Shape shape = batch.inputs.shape;
  const std::size_t row = batch.inputs.size() / n;
  shape[0] = end - begin;
  out.inputs = Tensor(shape, std::vector<double>(batch.inputs.data.begin() + begin * row,
                                                 batch.inputs.data.begin() + end * row));
  if (!batch.targets.empty()) {
    const std::size_t p = batch.targets.size() / n;
    out.targets.assign(batch.targets.begin() + begin * p, batch.targets.begin() + end * p);
  }
  if (!batch.labels.empty()) out.labels.assign(batch.labels.begin() + begin, batch.labels.begin() + end);
  return out;
}

Tensor report_logits(const std::vector<Tensor>& tick_logits, LossMode mode,
                     std::vector<std::size_t>* chosen) {
  if (tick_logits.empty()) throw std::invalid_argument("report_logits: no ticks");
  const Shape& s = tick_logits[0].shape;  // [N x P x C]
  const std::size_t n = s[0], p = s[1], c = s[2], t_count = tick_logits.size();
  if (chosen) chosen->assign(n, 0);

  if (mode == LossMode::ctc) {
    Tensor out({n, t_count * p, c});
    const std::size_t block = p * c;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < t_count; ++t)
        std::copy_n(tick_logits[t].data.begin() + i * block, block,
                    out.data.begin() + (i * t_count + t) * block);
    return out;
  }

  std::vector<std::size_t> pick(n, t_count - 1);
  if (mode != LossMode::final_tick) {
    std::vector<double> best(n, -1.0);
    for (std::size_t t = 0; t < t_count; ++t) {
      const auto cert = certainty_from_logits(tick_logits[t]);
      for (std::size_t i = 0; i < n; ++i) {
        double m = 0.0;
        for (std::size_t k = 0; k < p; ++k) m += cert[i * p + k];
        m /= static_cast<double>(p);
        if (m > best[i]) {
          best[i] = m;
          pick[i] = t;
        }
      }
    }
  }
  Tensor out({n, p, c});
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(tick_logits[pick[i]].data.begin() + i * p * c, p * c, out.data.begin() + i * p * c);
  if (chosen) *chosen = pick;
  return out;
}

namespace {

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t c = logits.shape.back(), rows = logits.size() / c;
  Tensor out({rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = logits.data.data() + r * c;
    double mx = x[0];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, x[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) z += out.data[r * c + k] = std::exp(x[k] - mx);
    for (std::size_t k = 0; k < c; ++k) out.data[r * c + k] /= z;
  }
  return out;
}

}  // namespace

EvalResult evaluate(const SequenceModel& model, const Task& task, const Batch& batch,
                    LossMode mode, std::size_t chunk) {
  const std::size_t n = batch.size(), t_count = model.ticks();
  if (n == 0) throw std::invalid_argument("evaluate: empty batch");
  std::vector<Tensor> ticks(t_count);
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    const Batch part = slice_batch(batch, begin, end);
    ad::Tape tape(false);
    ParamBinding binding(tape, model.params());
    const ForwardOutput out = model.forward(binding, part.inputs, ForwardOptions{});
    for (std::size_t t = 0; t < t_count; ++t) {
      const Tensor& v = out.logits[t].value();
      if (begin == 0) {
        Shape s = v.shape;
        s[0] = n;
        ticks[t] = Tensor(s);
      }
      std::copy(v.data.begin(), v.data.end(), ticks[t].data.begin() + begin * (v.size() / (end - begin)));
    }
  }

  EvalResult r;
  const Tensor chosen = report_logits(ticks, mode, &r.chosen_tick);
  r.accuracy = task.accuracy(chosen, batch);

  const std::size_t p = ticks[0].shape[1];
  r.certainties = Tensor({n, t_count});
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto cert = certainty_from_logits(ticks[t]);
    for (std::size_t i = 0; i < n; ++i) {
      double m = 0.0;
      for (std::size_t k = 0; k < p; ++k) m += cert[i * p + k];
      r.certainties[i * t_count + t] = m / static_cast<double>(p);
    }
  }
  if (mode != LossMode::ctc) {
    for (std::size_t t = 0; t < t_count; ++t) {
      r.tick_accuracy.push_back(task.accuracy(ticks[t], batch));
      r.probs.push_back(softmax_rows(ticks[t]));
    }
    r.labels = batch.targets;
  }
  return r;
}

// ---- training ----

std::string to_ndjson(const LogRecord& r) {
  json j = {{"iter", r.iter}, {"loss", r.loss}, {"accuracy", r.accuracy}, {"lr", r.lr}};
  j["wallclock"] = r.wallclock ? json(*r.wallclock) : json(nullptr);
  return j.dump();
}

ad::DiffArray batch_loss(const ForwardOutput& out, const Batch& batch, LossMode mode) {
  if (mode == LossMode::ctc) {
    const ad::DiffArray stacked = ad::concat(out.logits, 1);
    return ctc_loss(stacked, batch.labels, stacked.shape().back() - 1);
  }
  return sequence_loss(out.logits, batch.targets, mode).loss;
}

TrainResult train(SequenceModel& model, const RunConfig& run,
                  const std::optional<std::filesystem::path>& output_dir,
                  const std::function<void(const LogRecord&)>& on_log) {
  const TrainConfig& cfg = run.train;
  cfg.validate();
  const auto task = make_task(run.task);
  const LossMode mode = run.loss_mode();
  if (model.out_positions() != task->out_positions() || model.out_classes() != task->out_classes())
    throw ConfigError("model output shape does not match task '" + run.task.name + "'");

  // Separate streams so evaluation never perturbs the training batches.
  Rng data_rng = Rng::derive(cfg.seed, 11);
  Rng dropout_rng = Rng::derive(cfg.seed, 12);
  Rng eval_rng = Rng::derive(cfg.seed, 13);
  const Batch eval_set = task->sample(cfg.eval_size, eval_rng);

  AdamWHyper hyper;
  hyper.weight_decay = cfg.weight_decay;
  AdamW opt(hyper);

  std::ofstream log_file;
  if (output_dir) {
    std::filesystem::create_directories(*output_dir);
    write_text_file(*output_dir / kConfigFile, to_json(run).dump(2) + "\n");
    log_file.open(*output_dir / kMetricsFile, std::ios::binary | std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write " + (*output_dir / kMetricsFile).string());
  }

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  TrainResult result;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  bool have_best = false;
  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    const double lr = lr_schedule(iter, cfg);
    const Batch batch = task->sample(cfg.batch_size, data_rng);
    try {
      ad::Tape tape;
      ParamBinding binding(tape, model.params());
      ForwardOptions opts;
      opts.train = true;
      opts.rng = &dropout_rng;
      const ForwardOutput out = model.forward(binding, batch.inputs, opts);
      const ad::DiffArray loss = batch_loss(out, batch, mode);
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite training loss at iteration " + std::to_string(iter));
      tape.backward(loss);
      std::vector<Tensor> grads = binding.gradients();
      if (cfg.grad_clip > 0.0) clip_grad_norm(grads, cfg.grad_clip);
      opt.step(model.params().values(), grads, lr);
      loss_sum += loss.item();
      ++loss_count;
    } catch (const NumericError&) {
      if (output_dir) save_checkpoint(*output_dir / kDiagnosticCheckpoint, run, model, iter, hyper);
      throw;
    }
    result.iterations = iter + 1;

    const bool last = iter + 1 == cfg.iterations;
    if ((iter + 1) % cfg.eval_interval != 0 && !last) continue;
    LogRecord rec;
    rec.iter = iter + 1;
    rec.loss = loss_sum / static_cast<double>(loss_count);
    rec.accuracy = evaluate(model, *task, eval_set, mode).accuracy;
    rec.lr = lr;
    if (cfg.log_wallclock) rec.wallclock = elapsed();
    loss_sum = 0.0;
    loss_count = 0;
    result.log.push_back(rec);
    result.final_accuracy = rec.accuracy;
    if (log_file.is_open()) log_file << to_ndjson(rec) << "\n" << std::flush;
    if (on_log) on_log(rec);
    if (!have_best || rec.accuracy > result.best_accuracy) {
      have_best = true;
      result.best_accuracy = rec.accuracy;
      result.best_iteration = rec.iter;
      if (output_dir) save_checkpoint(*output_dir / kBestCheckpoint, run, model, rec.iter, hyper);
    }
    if (cfg.target_accuracy > 0.0 && rec.accuracy >= cfg.target_accuracy) {
      result.reached_target = true;
      break;
    }
  }
  if (output_dir) save_checkpoint(*output_dir / kFinalCheckpoint, run, model, result.iterations, hyper);
  result.seconds = elapsed();
  return result;
}

}  // namespace ctm
