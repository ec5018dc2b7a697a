#include "ctm/synapse.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

std::vector<std::size_t> SynapseNet::width_schedule(std::size_t d_model, std::size_t d_obs,
                                                    std::size_t depth) {
  if (depth != 1 && depth % 2 != 0) {
    throw std::invalid_argument("synapse depth must be 1 or even, got " + std::to_string(depth));
  }
  std::vector<std::size_t> w{d_model + d_obs, d_model};
  if (depth == 1) {
    w.push_back(d_model);
    return w;
  }
  const std::size_t half = depth / 2;
  std::vector<std::size_t> down;
  for (std::size_t i = 0; i <= half; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(half);
    const double width = static_cast<double>(d_model) +
                         (static_cast<double>(kBottleneck) - static_cast<double>(d_model)) * frac;
    down.push_back(static_cast<std::size_t>(std::lround(width)));
  }
  for (std::size_t i = 1; i <= half; ++i) w.push_back(down[i]);
  for (std::size_t i = half; i-- > 0;) w.push_back(down[i]);
  return w;
}

std::size_t SynapseNet::param_count(std::size_t d_model, std::size_t d_obs, std::size_t depth) {
  const auto w = width_schedule(d_model, d_obs, depth);
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) n += Linear::count(w[i], w[i + 1]);
  if (depth == 1) return n;
  for (std::size_t i = 1; i < w.size(); ++i) n += LayerNorm::count(w[i]);  // per-layer norms
  const std::size_t half = depth / 2;
  for (std::size_t i = 0; i < half; ++i) n += LayerNorm::count(w[1 + i]);  // skip norms
  return n;
}

SynapseNet::SynapseNet(ParamStore& store, const std::string& name, std::size_t d_model,
                       std::size_t d_obs, std::size_t depth, ad::Activation act,
                       double p_dropout, Rng& rng)
    : depth_(depth), act_(act), p_dropout_(p_dropout) {
  const auto w = width_schedule(d_model, d_obs, depth);
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    layers_.push_back(
        Linear::create(store, name + ".layer" + std::to_string(i), w[i], w[i + 1], rng));
  }
  if (depth == 1) return;
  for (std::size_t i = 1; i < w.size(); ++i) {
    norms_.push_back(LayerNorm::create(store, name + ".norm" + std::to_string(i - 1), w[i]));
  }
  for (std::size_t i = 0; i < depth / 2; ++i) {
    skip_norms_.push_back(LayerNorm::create(store, name + ".skip" + std::to_string(i), w[1 + i]));
  }
}

ad::DiffArray SynapseNet::dropout(const ad::DiffArray& x, bool train, Rng* rng) const {
  if (!train || p_dropout_ <= 0.0) return x;
  if (!rng) throw std::logic_error("synapse dropout in training mode needs an rng");
  Tensor mask(x.shape());
  const double keep = 1.0 - p_dropout_;
  for (auto& m : mask.data) m = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return ad::mul_constant(x, mask);
}

ad::DiffArray SynapseNet::forward(ParamBinding& p, const ad::DiffArray& x, bool train,
                                  Rng* rng) const {
  if (depth_ == 1) {
    auto h = ad::activate(layers_[0](p, dropout(x, train, rng)), act_);
    return layers_[1](p, h);
  }
  auto block = [&](std::size_t i, const ad::DiffArray& in) {
    return ad::activate(norms_[i](p, layers_[i](p, dropout(in, train, rng))), act_);
  };
  const std::size_t half = depth_ / 2;
  std::vector<ad::DiffArray> down{block(0, x)};
  for (std::size_t i = 1; i <= half; ++i) down.push_back(block(i, down.back()));
  ad::DiffArray up = down.back();
  for (std::size_t u = 0; u < half; ++u) {
    const std::size_t layer = half + 1 + u;
    const std::size_t mirror = half - 1 - u;
    up = skip_norms_[mirror](p, ad::add(block(layer, up), down[mirror]));
  }
  return up;
}

}  // namespace ctm
