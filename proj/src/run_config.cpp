#include "ctm/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace ctm {

using nlohmann::json;

namespace {

// Reads the keys of one JSON object section, rejecting anything not consumed.
class SectionReader {
 public:
  SectionReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!it->is_number_unsigned())
        throw ConfigError("'" + where(key) + "' must be a nonnegative integer");
    }
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("'" + where(key) + "': " + e.what());
    }
  }

  // Calls `parse` on a nested section when present.
  template <class F>
  void section(const char* key, F&& parse) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    parse(*it, where(key));
  }

  // Converts a string field through `from_string`, reporting the key on failure.
  template <class T, class F>
  void get_enum(const char* key, T& out, F&& from_string) {
    std::string s;
    get(key, s);
    if (!seen_.count(key)) return;
    try {
      out = from_string(s);
    } catch (const std::exception& e) {
      throw ConfigError("'" + where(key) + "': " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + where(it.key()) + "'");
  }

 private:
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json pairing_json(const PairingConfig& p) {
  return {{"strategy", to_string(p.strategy)},
          {"j_out", p.j_out},
          {"j_action", p.j_action},
          {"j1_out", p.j1_out},
          {"j2_out", p.j2_out},
          {"j1_action", p.j1_action},
          {"j2_action", p.j2_action},
          {"d_out", p.d_out},
          {"d_action", p.d_action},
          {"n_self", p.n_self}};
}

json backbone_json(const BackboneConfig& b) {
  return {{"kind", to_string(b.kind)},
          {"d_feature", b.d_feature},
          {"sequence_length", b.sequence_length},
          {"image_size", b.image_size},
          {"channels", b.channels},
          {"patch_size", b.patch_size},
          {"input_width", b.input_width}};
}

template <class F>
auto checked(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const std::domain_error& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations == 0) throw ConfigError("train.iterations must be positive");
  if (warmup >= iterations) throw ConfigError("train.warmup must be smaller than train.iterations");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (eval_interval == 0) throw ConfigError("train.eval_interval must be positive");
  if (eval_size == 0) throw ConfigError("train.eval_size must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
  if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be nonnegative");
  if (target_accuracy < 0.0 || target_accuracy > 1.0)
    throw ConfigError("train.target_accuracy must lie in [0, 1]");
  if (!loss_mode.empty()) checked([&] { return loss_mode_from_string(loss_mode); });
}

void RunConfig::resolve() {
  checked([&] {
    task.validate();
    make_task(task)->configure(model.cfg);
    model.validate();
    if (param_budget > 0) model = match_spec(model, param_budget);
    return 0;
  });
  train.validate();
  const LossMode mode = loss_mode();
  if ((mode == LossMode::ctc) != (task.name == "sort"))
    throw ConfigError("train.loss_mode '" + to_string(mode) + "' does not fit task '" + task.name + "'");
}

LossMode RunConfig::loss_mode() const {
  if (train.loss_mode.empty()) return checked([&] { return make_task(task)->default_loss(); });
  return checked([&] { return loss_mode_from_string(train.loss_mode); });
}

json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"eval_interval", c.eval_interval},
          {"eval_size", c.eval_size},
          {"seed", c.seed},
          {"loss_mode", c.loss_mode},
          {"log_wallclock", c.log_wallclock},
          {"target_accuracy", c.target_accuracy}};
}

json to_json(const ModelSpec& s) {
  const CtmConfig& c = s.cfg;
  return {{"kind", to_string(s.kind)},
          {"d_model", c.d_model},
          {"ticks", c.ticks},
          {"memory", c.memory},
          {"synapse_depth", c.synapse_depth},
          {"d_input", c.d_input},
          {"d_hidden", c.d_hidden},
          {"n_heads", c.n_heads},
          {"p_dropout", c.p_dropout},
          {"activation", ad::to_string(c.activation)},
          {"ff_linear", s.ff_linear},
          {"pairing", pairing_json(c.pairing)},
          {"backbone", backbone_json(c.backbone)},
          {"out_positions", c.out_positions},
          {"out_classes", c.out_classes}};
}

json to_json(const RunConfig& c) {
  return {{"task", to_json(c.task)},
          {"model", to_json(c.model)},
          {"param_budget", c.param_budget},
          {"train", to_json(c.train)},
          {"output_dir", c.output_dir}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  SectionReader r(j, "train");
  r.get("iterations", c.iterations);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("warmup", c.warmup);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("eval_interval", c.eval_interval);
  r.get("eval_size", c.eval_size);
  r.get("seed", c.seed);
  r.get("loss_mode", c.loss_mode);
  r.get("log_wallclock", c.log_wallclock);
  r.get("target_accuracy", c.target_accuracy);
  r.finish();
  return c;
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec s;
  CtmConfig& c = s.cfg;
  SectionReader r(j, "model");
  r.get_enum("kind", s.kind, model_kind_from_string);
  r.get("d_model", c.d_model);
  r.get("ticks", c.ticks);
  r.get("memory", c.memory);
  r.get("synapse_depth", c.synapse_depth);
  r.get("d_input", c.d_input);
  r.get("d_hidden", c.d_hidden);
  r.get("n_heads", c.n_heads);
  r.get("p_dropout", c.p_dropout);
  r.get_enum("activation", c.activation, ad::activation_from_string);
  r.get("ff_linear", s.ff_linear);
  r.section("pairing", [&](const json& pj, const std::string& path) {
    PairingConfig& p = c.pairing;
    SectionReader pr(pj, path);
    pr.get_enum("strategy", p.strategy, pairing_from_string);
    pr.get("j_out", p.j_out);
    pr.get("j_action", p.j_action);
    pr.get("j1_out", p.j1_out);
    pr.get("j2_out", p.j2_out);
    pr.get("j1_action", p.j1_action);
    pr.get("j2_action", p.j2_action);
    pr.get("d_out", p.d_out);
    pr.get("d_action", p.d_action);
    pr.get("n_self", p.n_self);
    pr.finish();
  });
  r.section("backbone", [&](const json& bj, const std::string& path) {
    BackboneConfig& b = c.backbone;
    SectionReader br(bj, path);
    br.get_enum("kind", b.kind, backbone_from_string);
    br.get("d_feature", b.d_feature);
    br.get("sequence_length", b.sequence_length);
    br.get("image_size", b.image_size);
    br.get("channels", b.channels);
    br.get("patch_size", b.patch_size);
    br.get("input_width", b.input_width);
    br.finish();
  });
  r.get("out_positions", c.out_positions);
  r.get("out_classes", c.out_classes);
  r.finish();
  return s;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  SectionReader r(j, "");
  r.section("task", [&](const json& tj, const std::string&) {
    c.task = checked([&] { return task_config_from_json(tj); });
  });
  r.section("model", [&](const json& mj, const std::string&) { c.model = model_spec_from_json(mj); });
  r.get("param_budget", c.param_budget);
  r.section("train", [&](const json& tj, const std::string&) { c.train = train_config_from_json(tj); });
  r.get("output_dir", c.output_dir);
  r.finish();
  return c;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // Map the byte offset onto a line/column pair.
    std::size_t line = 1, col = 1;
    const std::size_t stop = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::ostringstream msg;
    msg << source << ":" << line << ":" << col << ": syntax error: " << e.what();
    throw ConfigError(msg.str());
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

}  // namespace ctm
