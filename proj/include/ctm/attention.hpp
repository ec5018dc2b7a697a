#pragma once

#include <cstddef>
#include <string>

#include "ctm/params.hpp"

namespace ctm {

struct AttentionResult {
  ad::DiffArray output;   // [B x d_model]
  ad::DiffArray weights;  // [B x H x L]
};

// Keys/values after their projections, laid out [B x H x L x d_head].
struct AttentionMemory {
  ad::DiffArray keys;
  ad::DiffArray values;
  std::size_t locations = 0;
};

// Multi-head cross attention with a single query per sequence.
// Per head h: w = softmax(q_h K_h^T / sqrt(d_head)); heads are concatenated and
// passed through an output projection.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(ParamStore& store, const std::string& name, std::size_t d_feature,
                 std::size_t d_model, std::size_t n_heads, Rng& rng);

  static std::size_t param_count(std::size_t d_feature, std::size_t d_model);

  // features: [B x L x d_feature]. Done once per forward pass.
  AttentionMemory prepare(ParamBinding& p, const ad::DiffArray& features) const;
  // q: [B x d_model]
  AttentionResult attend(ParamBinding& p, const ad::DiffArray& q, const AttentionMemory& mem) const;

  std::size_t heads() const { return n_heads_; }
  std::size_t width() const { return d_model_; }

 private:
  std::size_t d_model_ = 0;
  std::size_t n_heads_ = 1;
  Linear key_proj_;
  Linear value_proj_;
  Linear out_proj_;
};

// Unprojected single-sequence attention core: q [d], keys [L x d], values
// [L x dv] split into n_heads along the feature axis. Returns the concatenated
// head outputs [dv] and weights [n_heads x L].
AttentionResult cross_attention(const ad::DiffArray& q, const ad::DiffArray& keys,
                                const ad::DiffArray& values, std::size_t n_heads);

}  // namespace ctm
