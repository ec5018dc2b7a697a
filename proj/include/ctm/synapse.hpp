#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ctm/params.hpp"

namespace ctm {

// Synapse model mixing concat(z, o) into D pre-activations.
//
// k = 1: one hidden layer, a = W2 act(W1 x + b1) + b2 (hidden width D).
// k even: U-Net MLP. An input projection maps D + d_obs to D, then k/2 down
// layers shrink linearly to a bottleneck of 16 and k/2 up layers grow back to
// D. Each layer is Linear -> LayerNorm -> act; every up layer's output is added
// to the mirrored down activation and layer-normed.
class SynapseNet {
 public:
  static constexpr std::size_t kBottleneck = 16;

  SynapseNet() = default;
  SynapseNet(ParamStore& store, const std::string& name, std::size_t d_model,
             std::size_t d_obs, std::size_t depth, ad::Activation act, double p_dropout,
             Rng& rng);

  // Widths along the network: [D + d_obs, D, ..., 16, ..., D] for even k,
  // [D + d_obs, D, D] for k = 1.
  static std::vector<std::size_t> width_schedule(std::size_t d_model, std::size_t d_obs,
                                                 std::size_t depth);
  static std::size_t param_count(std::size_t d_model, std::size_t d_obs, std::size_t depth);

  // `rng` is consulted only when `train` is set and dropout is non-zero.
  ad::DiffArray forward(ParamBinding& p, const ad::DiffArray& x, bool train, Rng* rng) const;

  std::size_t depth() const { return depth_; }

 private:
  ad::DiffArray dropout(const ad::DiffArray& x, bool train, Rng* rng) const;

  std::size_t depth_ = 1;
  ad::Activation act_ = ad::Activation::silu;
  double p_dropout_ = 0.0;
  std::vector<Linear> layers_;      // k=1: [hidden, out]; else [input, down..., up...]
  std::vector<LayerNorm> norms_;    // one per layer (U-Net only)
  std::vector<LayerNorm> skip_norms_;
};

}  // namespace ctm
