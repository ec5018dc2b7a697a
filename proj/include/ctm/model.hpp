#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctm/params.hpp"

namespace ctm {

// Non-finite value encountered during a forward or optimisation step.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // dropout; required when train and dropout > 0
  bool trace = false;  // record per-tick activations for analysis
};

struct ForwardOutput {
  std::vector<ad::DiffArray> logits;  // per tick, [B x P x C]
  // Filled when ForwardOptions::trace is set (empty entries otherwise).
  std::vector<Tensor> attention;        // per tick, [B x H x L]
  std::vector<Tensor> post_activations;  // per tick, state after the tick [B x D]
  std::vector<Tensor> sync_out;          // per tick, [B x D_out]
  Tensor initial_state;                  // [B x D] before the first tick
};

// Anything the trainer and CLI can run: CTM, its ablations and the baselines.
class SequenceModel {
 public:
  virtual ~SequenceModel() = default;

  virtual std::string kind() const = 0;
  virtual std::size_t ticks() const = 0;
  virtual std::size_t out_positions() const = 0;
  virtual std::size_t out_classes() const = 0;
  // Closed-form parameter count for this model's configuration.
  virtual std::size_t analytic_param_count() const = 0;

  virtual ForwardOutput forward(ParamBinding& p, const Tensor& inputs,
                                const ForwardOptions& opts) const = 0;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 protected:
  ParamStore params_;
};

// Throws NumericError naming `what` and `tick` if any entry is non-finite.
void require_finite(const Tensor& t, const std::string& what, std::size_t tick);

}  // namespace ctm
