#include "ctm/ctm.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

void require_finite(const Tensor& t, const std::string& what, std::size_t tick) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError("non-finite " + what + " at tick " + std::to_string(tick) +
                         " (entry " + std::to_string(i) + " of " + shape_string(t.shape) +
                         " = " + std::to_string(t[i]) + ")");
    }
  }
}

std::size_t CtmModel::effective_synapse_depth(const CtmConfig& cfg) {
  if (cfg.variant != CtmVariant::no_nlm) return cfg.synapse_depth;
  return cfg.synapse_depth == 1 ? 2 : cfg.synapse_depth + 2;
}

std::size_t CtmModel::param_count(const CtmConfig& cfg) {
  const std::size_t d = cfg.d_model;
  std::size_t n = Backbone::param_count(cfg.backbone);
  if (cfg.uses_attention()) n += CrossAttention::param_count(cfg.backbone.d_feature, cfg.d_input);
  n += SynapseNet::param_count(d, cfg.observation_width(), effective_synapse_depth(cfg));
  n += d;  // initial z
  if (cfg.variant != CtmVariant::no_nlm) {
    n += d * cfg.memory;                                 // initial history
    n += d * cfg.memory * cfg.d_hidden + 2 * d * cfg.d_hidden + d;  // NLM bank
  }
  if (cfg.variant == CtmVariant::no_sync) {
    n += Linear::count(d, cfg.out_width());
    if (cfg.uses_attention()) n += Linear::count(d, cfg.d_input);
  } else {
    const std::size_t po = cfg.pairing.out_pairs();
    n += po + Linear::count(po, cfg.out_width());
    if (cfg.uses_attention()) {
      const std::size_t pa = cfg.pairing.action_pairs();
      n += pa + Linear::count(pa, cfg.d_input);
    }
  }
  return n;
}

CtmModel::CtmModel(CtmConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const std::size_t m = cfg_.memory;
  const std::size_t h = cfg_.d_hidden;
  Rng rng = Rng::derive(seed, 1);
  if (cfg_.variant != CtmVariant::no_sync) {
    std::tie(out_pairs_, action_pairs_) = build_pairs(cfg_, seed);
    if (!cfg_.uses_attention()) action_pairs_.pairs.clear();
  }
  backbone_ = Backbone(params_, "backbone", cfg_.backbone, rng);
  if (cfg_.uses_attention()) {
    attention_ = CrossAttention(params_, "attention", cfg_.backbone.d_feature, cfg_.d_input,
                                cfg_.n_heads, rng);
  }
  synapse_ = SynapseNet(params_, "synapse", d, cfg_.observation_width(),
                        effective_synapse_depth(cfg_), cfg_.activation, cfg_.p_dropout, rng);

  const double start_bound = std::sqrt(1.0 / static_cast<double>(d + m));
  Tensor z0({d});
  for (auto& v : z0.data) v = rng.uniform(-start_bound, start_bound);
  z_init_ = params_.add("start.z", std::move(z0));
  if (cfg_.variant != CtmVariant::no_nlm) {
    Tensor a0({d, m});
    for (auto& v : a0.data) v = rng.uniform(-start_bound, start_bound);
    history_init_ = params_.add("start.history", std::move(a0));
    nlm_w1_ = params_.add("nlm.w1", fan_in_uniform({d, m, h}, m, rng));
    nlm_b1_ = params_.add("nlm.b1", fan_in_uniform({d, h}, m, rng));
    nlm_w2_ = params_.add("nlm.w2", fan_in_uniform({d, h}, h, rng, 0.1));
    nlm_b2_ = params_.add("nlm.b2", Tensor({d}, 0.0));
  }
  if (cfg_.variant == CtmVariant::no_sync) {
    out_proj_ = Linear::create(params_, "out", d, cfg_.out_width(), rng);
    if (cfg_.uses_attention()) query_proj_ = Linear::create(params_, "query", d, cfg_.d_input, rng);
  } else {
    decay_out_ = params_.add("decay.out", Tensor({out_pairs_.size()}, 0.0));
    out_proj_ = Linear::create(params_, "out", out_pairs_.size(), cfg_.out_width(), rng);
    if (cfg_.uses_attention()) {
      decay_action_ = params_.add("decay.action", Tensor({action_pairs_.size()}, 0.0));
      query_proj_ = Linear::create(params_, "query", action_pairs_.size(), cfg_.d_input, rng);
    }
  }
}

std::string CtmModel::kind() const {
  switch (cfg_.variant) {
    case CtmVariant::standard: return "ctm";
    case CtmVariant::no_nlm: return "ctm-no-nlm";
    case CtmVariant::no_sync: return "ctm-no-sync";
  }
  return "ctm";
}

CtmState CtmModel::initial_state(ParamBinding& p, std::size_t batch) const {
  CtmState s;
  s.z = ad::expand_leading(p(z_init_), batch);
  if (cfg_.variant != CtmVariant::no_nlm) {
    s.history = ad::expand_leading(p(history_init_), batch);
  }
  if (cfg_.variant != CtmVariant::no_sync) {
    s.out_sync = SyncAccumulator(out_pairs_);
    s.action_sync = SyncAccumulator(action_pairs_);
  }
  return s;
}

Observation CtmModel::observe(ParamBinding& p, const Tensor& inputs) const {
  Observation obs;
  auto features = backbone_.forward(p, inputs);
  if (cfg_.uses_attention()) {
    obs.memory = attention_.prepare(p, features);
  } else {
    obs.direct = features;
  }
  return obs;
}

ad::DiffArray CtmModel::push_history(const ad::DiffArray& history, const ad::DiffArray& a) {
  const Shape& hs = history.shape();
  const std::size_t m = hs.back();
  Shape column = a.shape();
  column.push_back(1);
  std::vector<ad::DiffArray> parts{ad::slice(history, -1, 1, m), ad::reshape(a, column)};
  return ad::concat(parts, -1);
}

TickOutput CtmModel::tick(ParamBinding& p, CtmState& state, const Observation& obs,
                          const ForwardOptions& opts) const {
  if (state.tick >= cfg_.ticks) {
    throw std::logic_error("ctm tick " + std::to_string(state.tick + 1) + " exceeds T = " +
                           std::to_string(cfg_.ticks));
  }
  const std::size_t batch = state.z.shape()[0];
  const bool sync = cfg_.variant != CtmVariant::no_sync;
  TickOutput out;

  ad::DiffArray o;
  if (obs.memory) {
    ad::DiffArray action_rep =
        sync ? state.action_sync.update(state.z, p(decay_action_)) : state.z;
    auto q = query_proj_(p, action_rep);
    auto res = attention_.attend(p, q, *obs.memory);
    o = res.output;
    out.attention = res.weights;
  } else {
    o = *obs.direct;
  }

  std::vector<ad::DiffArray> in{state.z, o};
  auto a = synapse_.forward(p, ad::concat(in, -1), opts.train, opts.rng);

  if (cfg_.variant == CtmVariant::no_nlm) {
    state.z = a;
  } else {
    state.history = push_history(state.history, a);
    state.z = ad::batched_nlm_contract(state.history, p(nlm_w1_), p(nlm_b1_), p(nlm_w2_),
                                       p(nlm_b2_), cfg_.activation);
  }
  ++state.tick;
  require_finite(state.z.value(), "post-activation", state.tick);

  ad::DiffArray rep = state.z;
  if (sync) {
    rep = state.out_sync.update(state.z, p(decay_out_));
    out.sync_out = rep;
  }
  out.logits = ad::reshape(out_proj_(p, rep), {batch, cfg_.out_positions, cfg_.out_classes});
  require_finite(out.logits.value(), "logits", state.tick);
  return out;
}

ForwardOutput CtmModel::forward(ParamBinding& p, const Tensor& inputs,
                                const ForwardOptions& opts) const {
  if (inputs.rank() < 1) throw std::invalid_argument("ctm forward: inputs need a batch axis");
  const std::size_t batch = inputs.shape[0];
  Observation obs = observe(p, inputs);
  CtmState state = initial_state(p, batch);
  ForwardOutput result;
  if (opts.trace) result.initial_state = state.z.value();
  for (std::size_t t = 0; t < cfg_.ticks; ++t) {
    TickOutput step = tick(p, state, obs, opts);
    result.logits.push_back(step.logits);
    if (opts.trace) {
      result.attention.push_back(step.attention ? step.attention->value() : Tensor());
      result.post_activations.push_back(state.z.value());
      result.sync_out.push_back(step.sync_out ? step.sync_out->value() : Tensor());
    }
  }
  return result;
}

}  // namespace ctm
