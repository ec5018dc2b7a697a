#include "ctm/baselines.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::ctm: return "ctm";
    case ModelKind::ctm_no_nlm: return "ctm-no-nlm";
    case ModelKind::ctm_no_sync: return "ctm-no-sync";
    case ModelKind::lstm: return "lstm";
    case ModelKind::lstm_sync: return "lstm-sync";
    case ModelKind::ff: return "ff";
  }
  return "ctm";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (auto k : {ModelKind::ctm, ModelKind::ctm_no_nlm, ModelKind::ctm_no_sync, ModelKind::lstm,
                 ModelKind::lstm_sync, ModelKind::ff}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown model kind '" + s +
                              "' (expected ctm, ctm-no-nlm, ctm-no-sync, lstm, lstm-sync or ff)");
}

CtmConfig ModelSpec::ctm_config() const {
  CtmConfig c = cfg;
  switch (kind) {
    case ModelKind::ctm: c.variant = CtmVariant::standard; break;
    case ModelKind::ctm_no_nlm: c.variant = CtmVariant::no_nlm; break;
    case ModelKind::lstm_sync: c.variant = CtmVariant::standard; break;
    default: c.variant = CtmVariant::no_sync; break;
  }
  return c;
}

void ModelSpec::validate() const { ctm_config().validate(); }

std::size_t analytic_param_count(const ModelSpec& spec) {
  const CtmConfig c = spec.ctm_config();
  switch (spec.kind) {
    case ModelKind::ctm:
    case ModelKind::ctm_no_nlm:
    case ModelKind::ctm_no_sync: return CtmModel::param_count(c);
    case ModelKind::lstm: return LstmModel::param_count(c, false);
    case ModelKind::lstm_sync: return LstmModel::param_count(c, true);
    case ModelKind::ff: return FeedForwardModel::param_count(c, spec.ff_linear);
  }
  return 0;
}

std::unique_ptr<SequenceModel> make_model(const ModelSpec& spec, std::uint64_t seed) {
  const CtmConfig c = spec.ctm_config();
  switch (spec.kind) {
    case ModelKind::ctm:
    case ModelKind::ctm_no_nlm:
    case ModelKind::ctm_no_sync: return std::make_unique<CtmModel>(c, seed);
    case ModelKind::lstm: return std::make_unique<LstmModel>(c, seed, false);
    case ModelKind::lstm_sync: return std::make_unique<LstmModel>(c, seed, true);
    case ModelKind::ff: return std::make_unique<FeedForwardModel>(c, seed, spec.ff_linear);
  }
  throw std::logic_error("unhandled model kind");
}

// ---- LSTM ----

namespace {

std::size_t observation_width(const CtmConfig& c) {
  return c.uses_attention() ? c.d_input : c.backbone.input_width;
}

}  // namespace

std::size_t LstmModel::param_count(const CtmConfig& c, bool with_sync) {
  const std::size_t h = c.d_model;
  std::size_t n = Backbone::param_count(c.backbone);
  n += Linear::count(observation_width(c) + h, 4 * h);
  if (with_sync) {
    const std::size_t po = c.pairing.out_pairs();
    n += po + Linear::count(po, c.out_width());
    if (c.uses_attention()) {
      const std::size_t pa = c.pairing.action_pairs();
      n += CrossAttention::param_count(c.backbone.d_feature, c.d_input);
      n += pa + Linear::count(pa, c.d_input);
    }
  } else {
    n += Linear::count(h, c.out_width());
    if (c.uses_attention()) {
      n += CrossAttention::param_count(c.backbone.d_feature, c.d_input);
      n += Linear::count(h, c.d_input);
    }
  }
  return n;
}

LstmModel::LstmModel(CtmConfig config, std::uint64_t seed, bool with_sync)
    : cfg_(std::move(config)), with_sync_(with_sync) {
  cfg_.variant = with_sync_ ? CtmVariant::standard : CtmVariant::no_sync;
  cfg_.validate();
  const std::size_t h = cfg_.d_model;
  Rng rng = Rng::derive(seed, 2);
  if (with_sync_) {
    std::tie(out_pairs_, action_pairs_) = build_pairs(cfg_, seed);
    if (!cfg_.uses_attention()) action_pairs_.pairs.clear();
  }
  backbone_ = Backbone(params_, "backbone", cfg_.backbone, rng);
  if (cfg_.uses_attention()) {
    attention_ = CrossAttention(params_, "attention", cfg_.backbone.d_feature, cfg_.d_input,
                                cfg_.n_heads, rng);
  }
  cell_ = Linear::create(params_, "lstm.cell", observation_width(cfg_) + h, 4 * h, rng);
  if (with_sync_) {
    decay_out_ = params_.add("decay.out", Tensor({out_pairs_.size()}, 0.0));
    out_ = Linear::create(params_, "out", out_pairs_.size(), cfg_.out_width(), rng);
    if (cfg_.uses_attention()) {
      decay_action_ = params_.add("decay.action", Tensor({action_pairs_.size()}, 0.0));
      query_ = Linear::create(params_, "query", action_pairs_.size(), cfg_.d_input, rng);
    }
  } else {
    out_ = Linear::create(params_, "out", h, cfg_.out_width(), rng);
    if (cfg_.uses_attention()) query_ = Linear::create(params_, "query", h, cfg_.d_input, rng);
  }
}

ForwardOutput LstmModel::forward(ParamBinding& p, const Tensor& inputs,
                                 const ForwardOptions& opts) const {
  if (inputs.rank() < 1) throw std::invalid_argument("lstm forward: inputs need a batch axis");
  ad::Tape& tape = p.tape();
  const std::size_t b = inputs.shape[0], h = cfg_.d_model;
  auto features = backbone_.forward(p, inputs);
  std::optional<AttentionMemory> memory;
  if (cfg_.uses_attention()) memory = attention_.prepare(p, features);

  auto hs = tape.constant(Tensor({b, h}, 0.0));
  auto cs = tape.constant(Tensor({b, h}, 0.0));
  SyncAccumulator out_sync(out_pairs_), action_sync(action_pairs_);
  ForwardOutput result;
  if (opts.trace) result.initial_state = hs.value();
  for (std::size_t t = 0; t < cfg_.ticks; ++t) {
    ad::DiffArray o;
    std::optional<ad::DiffArray> weights;
    if (memory) {
      auto rep = with_sync_ ? action_sync.update(hs, p(decay_action_)) : hs;
      auto res = attention_.attend(p, query_(p, rep), *memory);
      o = res.output;
      weights = res.weights;
    } else {
      o = features;
    }
    std::vector<ad::DiffArray> in{o, hs};
    auto gates = cell_(p, ad::concat(in, -1));
    auto ig = ad::sigmoid(ad::slice(gates, -1, 0, h));
    auto fg = ad::sigmoid(ad::slice(gates, -1, h, 2 * h));
    auto gg = ad::tanh(ad::slice(gates, -1, 2 * h, 3 * h));
    auto og = ad::sigmoid(ad::slice(gates, -1, 3 * h, 4 * h));
    cs = ad::add(ad::mul(fg, cs), ad::mul(ig, gg));
    hs = ad::mul(og, ad::tanh(cs));
    require_finite(hs.value(), "lstm hidden state", t + 1);

    ad::DiffArray rep = hs;
    std::optional<ad::DiffArray> sync;
    if (with_sync_) {
      rep = out_sync.update(hs, p(decay_out_));
      sync = rep;
    }
    auto y = ad::reshape(out_(p, rep), {b, cfg_.out_positions, cfg_.out_classes});
    require_finite(y.value(), "logits", t + 1);
    result.logits.push_back(y);
    if (opts.trace) {
      result.attention.push_back(weights ? weights->value() : Tensor());
      result.post_activations.push_back(hs.value());
      result.sync_out.push_back(sync ? sync->value() : Tensor());
    }
  }
  return result;
}

// ---- feed-forward ----

std::size_t FeedForwardModel::pooled_width(const CtmConfig& c) {
  return c.uses_attention() ? c.backbone.d_feature : c.backbone.input_width;
}

std::size_t FeedForwardModel::param_count(const CtmConfig& c, bool linear) {
  const std::size_t w = c.d_model, f = pooled_width(c);
  return Backbone::param_count(c.backbone) + Linear::count(f, linear ? w : 2 * w) +
         Linear::count(w, c.out_width());
}

FeedForwardModel::FeedForwardModel(CtmConfig config, std::uint64_t seed, bool linear)
    : cfg_(std::move(config)), linear_(linear) {
  cfg_.variant = CtmVariant::no_sync;
  cfg_.validate();
  Rng rng = Rng::derive(seed, 3);
  backbone_ = Backbone(params_, "backbone", cfg_.backbone, rng);
  const std::size_t w = cfg_.d_model;
  hidden_ = Linear::create(params_, "ff.hidden", pooled_width(cfg_), linear_ ? w : 2 * w, rng);
  out_ = Linear::create(params_, "out", w, cfg_.out_width(), rng);
}

ForwardOutput FeedForwardModel::forward(ParamBinding& p, const Tensor& inputs,
                                        const ForwardOptions& opts) const {
  if (inputs.rank() < 1) throw std::invalid_argument("ff forward: inputs need a batch axis");
  const std::size_t b = inputs.shape[0], w = cfg_.d_model;
  auto features = backbone_.forward(p, inputs);
  auto pooled = cfg_.uses_attention() ? ad::mean(features, 1) : features;
  auto pre = hidden_(p, pooled);
  ad::DiffArray hidden = pre;
  if (!linear_) hidden = ad::mul(ad::slice(pre, -1, 0, w), ad::sigmoid(ad::slice(pre, -1, w, 2 * w)));
  auto y = ad::reshape(out_(p, hidden), {b, cfg_.out_positions, cfg_.out_classes});
  require_finite(y.value(), "logits", 1);
  ForwardOutput result;
  result.logits.push_back(y);
  if (opts.trace) {
    result.attention.emplace_back();
    result.post_activations.push_back(hidden.value());
    result.sync_out.emplace_back();
  }
  return result;
}

// ---- parameter matching ----

MatchResult match_parameters(const std::function<std::size_t(std::size_t)>& count_at,
                             std::size_t target, std::size_t min_width, std::size_t max_width,
                             double tolerance) {
  if (target == 0) throw std::invalid_argument("match_parameters: target must be > 0");
  if (min_width > max_width) throw std::invalid_argument("match_parameters: empty width range");
  // Smallest width whose count reaches the target.
  std::size_t lo = min_width, hi = max_width;
  if (count_at(hi) < target) {
    lo = hi;
  } else {
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (count_at(mid) >= target) hi = mid;
      else lo = mid + 1;
    }
  }
  auto gap = [&](std::size_t c) {
    const double d = static_cast<double>(c) - static_cast<double>(target);
    return std::abs(d) / static_cast<double>(target);
  };
  MatchResult best{lo, count_at(lo), 0.0};
  best.gap = gap(best.count);
  if (lo > min_width) {
    const std::size_t below = count_at(lo - 1);
    if (gap(below) < best.gap) best = {lo - 1, below, gap(below)};
  }
  if (best.gap > tolerance) {
    throw std::domain_error("parameter budget " + std::to_string(target) +
                            " unreachable within " + std::to_string(tolerance * 100) +
                            "%: nearest achievable count is " + std::to_string(best.count) +
                            " at width " + std::to_string(best.width));
  }
  return best;
}

ModelSpec match_spec(ModelSpec spec, std::size_t target, double tolerance) {
  std::size_t min_width = 1;
  const bool paired = spec.kind == ModelKind::ctm || spec.kind == ModelKind::ctm_no_nlm ||
                      spec.kind == ModelKind::lstm_sync;
  if (paired && spec.cfg.pairing.strategy != PairingStrategy::random) {
    min_width = std::max<std::size_t>(1, spec.cfg.pairing.neurons_required());
  }
  if (paired && spec.cfg.pairing.strategy == PairingStrategy::random) {
    min_width = std::max<std::size_t>(1, spec.cfg.pairing.n_self);
  }
  auto count_at = [&](std::size_t w) {
    ModelSpec s = spec;
    s.cfg.d_model = w;
    return analytic_param_count(s);
  };
  const auto r = match_parameters(count_at, target, min_width, 1u << 16, tolerance);
  spec.cfg.d_model = r.width;
  return spec;
}

}  // namespace ctm
