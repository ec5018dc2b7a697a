#pragma once

// LSTM and feed-forward baselines, the LSTM + synchronization ablation, and
// parameter matching across model families.

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "ctm/ctm.hpp"

namespace ctm {

enum class ModelKind { ctm, ctm_no_nlm, ctm_no_sync, lstm, lstm_sync, ff };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

// Model family plus shared hyperparameters. For the baselines `cfg.d_model`
// is the hidden width; backbone, attention widths, T and output shape are shared.
struct ModelSpec {
  ModelKind kind = ModelKind::ctm;
  CtmConfig cfg;
  bool ff_linear = false;  // feed-forward hidden layer without gating (linear map)

  // Config with the CTM variant matching `kind`.
  CtmConfig ctm_config() const;
  void validate() const;
};

std::size_t analytic_param_count(const ModelSpec& spec);
std::unique_ptr<SequenceModel> make_model(const ModelSpec& spec, std::uint64_t seed);

// Single-layer LSTM unrolled over internal ticks. Gates are [i, f, g, o] from one
// Linear over concat(observation, h); h0 = c0 = 0. With attention, the query is
// projected from h (or from its action synchronization when `with_sync`).
class LstmModel : public SequenceModel {
 public:
  LstmModel(CtmConfig config, std::uint64_t seed, bool with_sync);

  static std::size_t param_count(const CtmConfig& cfg, bool with_sync);

  std::string kind() const override { return with_sync_ ? "lstm-sync" : "lstm"; }
  std::size_t ticks() const override { return cfg_.ticks; }
  std::size_t out_positions() const override { return cfg_.out_positions; }
  std::size_t out_classes() const override { return cfg_.out_classes; }
  std::size_t analytic_param_count() const override { return param_count(cfg_, with_sync_); }
  ForwardOutput forward(ParamBinding& p, const Tensor& inputs,
                        const ForwardOptions& opts) const override;

  const CtmConfig& config() const { return cfg_; }
  const PairSelection& out_pairs() const { return out_pairs_; }

 private:
  CtmConfig cfg_;
  bool with_sync_;
  PairSelection out_pairs_;
  PairSelection action_pairs_;
  Backbone backbone_;
  CrossAttention attention_;
  Linear cell_;
  Linear query_;
  Linear out_;
  ParamId decay_out_ = 0;
  ParamId decay_action_ = 0;
};

// Mean-pooled backbone features -> Linear(2W) -> GLU -> Linear -> logits.
// The same logits are reported for every tick (T = 1).
class FeedForwardModel : public SequenceModel {
 public:
  FeedForwardModel(CtmConfig config, std::uint64_t seed, bool linear = false);

  static std::size_t param_count(const CtmConfig& cfg, bool linear = false);

  std::string kind() const override { return "ff"; }
  std::size_t ticks() const override { return 1; }
  std::size_t out_positions() const override { return cfg_.out_positions; }
  std::size_t out_classes() const override { return cfg_.out_classes; }
  std::size_t analytic_param_count() const override { return param_count(cfg_, linear_); }
  ForwardOutput forward(ParamBinding& p, const Tensor& inputs,
                        const ForwardOptions& opts) const override;

  // Feature width after pooling.
  static std::size_t pooled_width(const CtmConfig& cfg);

 private:
  CtmConfig cfg_;
  bool linear_;
  Backbone backbone_;
  Linear hidden_;
  Linear out_;
};

struct MatchResult {
  std::size_t width = 0;
  std::size_t count = 0;
  double gap = 0.0;  // |count - target| / target
};

// Width in [min_width, max_width] whose count is closest to `target`, assuming
// `count_at` is nondecreasing. Throws std::domain_error (naming the nearest
// achievable count) when the best gap exceeds `tolerance`.
MatchResult match_parameters(const std::function<std::size_t(std::size_t)>& count_at,
                             std::size_t target, std::size_t min_width = 1,
                             std::size_t max_width = 1u << 16, double tolerance = 0.02);

// Adjusts spec.cfg.d_model so the model's analytic count matches `target`.
ModelSpec match_spec(ModelSpec spec, std::size_t target, double tolerance = 0.02);

}  // namespace ctm
