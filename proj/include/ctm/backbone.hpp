#pragma once

#include <cstddef>
#include <string>

#include "ctm/config.hpp"
#include "ctm/params.hpp"

namespace ctm {

// Task front-ends producing attention features [B x L x d_feature].
//
// parity-embed: +1/-1 tokens -> learned embeddings + sinusoidal absolute
//   positions -> Linear -> LayerNorm. Input [B x L].
// patch-embed: one-hot maze image [B x n x n x C] cut into p x p patches
//   (padded with the wall category) -> shared Linear -> LayerNorm. No positional
//   information is added.
// direct: raw inputs [B x N] are used as the observation itself.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore& store, const std::string& name, const BackboneConfig& cfg, Rng& rng);

  static std::size_t param_count(const BackboneConfig& cfg);

  // [B x L x d_feature] for attention backbones, [B x N] for direct.
  ad::DiffArray forward(ParamBinding& p, const Tensor& inputs) const;

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  ParamId embedding_ = 0;
  Linear proj_;
  LayerNorm norm_;
};

// Sinusoidal table [length x width]: sin on even columns, cos on odd columns.
Tensor sinusoidal_positions(std::size_t length, std::size_t width);

// Rearranges [B x n x n x C] into [B x patches x (p*p*C)], padding with the
// category-0 one-hot.
Tensor patchify(const Tensor& images, std::size_t patch);

}  // namespace ctm
