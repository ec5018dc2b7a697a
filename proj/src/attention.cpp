#include "ctm/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

CrossAttention::CrossAttention(ParamStore& store, const std::string& name, std::size_t d_feature,
                               std::size_t d_model, std::size_t n_heads, Rng& rng)
    : d_model_(d_model), n_heads_(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("attention: " + std::to_string(n_heads) +
                                " heads do not divide width " + std::to_string(d_model));
  }
  key_proj_ = Linear::create(store, name + ".key", d_feature, d_model, rng);
  value_proj_ = Linear::create(store, name + ".value", d_feature, d_model, rng);
  out_proj_ = Linear::create(store, name + ".out", d_model, d_model, rng);
}

std::size_t CrossAttention::param_count(std::size_t d_feature, std::size_t d_model) {
  return 2 * Linear::count(d_feature, d_model) + Linear::count(d_model, d_model);
}

AttentionMemory CrossAttention::prepare(ParamBinding& p, const ad::DiffArray& features) const {
  const Shape& s = features.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("attention: features must be [B x L x F], got " + shape_string(s));
  }
  const std::size_t b = s[0], l = s[1], dh = d_model_ / n_heads_;
  auto split = [&](const ad::DiffArray& x) {
    return ad::permute(ad::reshape(x, {b, l, n_heads_, dh}), {0, 2, 1, 3});
  };
  return {split(key_proj_(p, features)), split(value_proj_(p, features)), l};
}

AttentionResult CrossAttention::attend(ParamBinding& p, const ad::DiffArray& q,
                                       const AttentionMemory& mem) const {
  const std::size_t b = q.shape()[0];
  const std::size_t dh = d_model_ / n_heads_;
  if (q.shape() != Shape{b, d_model_}) {
    throw std::invalid_argument("attention: query must be [B x " + std::to_string(d_model_) +
                                "], got " + shape_string(q.shape()));
  }
  auto qh = ad::reshape(q, {b, n_heads_, 1, dh});
  auto scores = ad::scale(ad::bmm(qh, mem.keys, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto weights = ad::softmax(scores, -1);                      // [B x H x 1 x L]
  auto heads = ad::reshape(ad::bmm(weights, mem.values), {b, d_model_});
  return {out_proj_(p, heads), ad::reshape(weights, {b, n_heads_, mem.locations})};
}

AttentionResult cross_attention(const ad::DiffArray& q, const ad::DiffArray& keys,
                                const ad::DiffArray& values, std::size_t n_heads) {
  const Shape& ks = keys.shape();
  const Shape& vs = values.shape();
  if (q.shape().size() != 1 || ks.size() != 2 || vs.size() != 2 || ks[0] != vs[0] ||
      ks[1] != q.shape()[0] || ks[0] == 0) {
    throw std::invalid_argument("cross_attention: q " + shape_string(q.shape()) + ", keys " +
                                shape_string(ks) + ", values " + shape_string(vs) +
                                " are inconsistent");
  }
  const std::size_t d = ks[1], dv = vs[1], l = ks[0];
  if (n_heads == 0 || d % n_heads != 0 || dv % n_heads != 0) {
    throw std::invalid_argument("cross_attention: " + std::to_string(n_heads) +
                                " heads do not divide widths " + std::to_string(d) + "/" +
                                std::to_string(dv));
  }
  const std::size_t dh = d / n_heads, dvh = dv / n_heads;
  auto qh = ad::reshape(q, {n_heads, 1, dh});
  auto kh = ad::permute(ad::reshape(keys, {l, n_heads, dh}), {1, 0, 2});
  auto vh = ad::permute(ad::reshape(values, {l, n_heads, dvh}), {1, 0, 2});
  auto w = ad::softmax(ad::scale(ad::bmm(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(dh))), -1);
  auto o = ad::reshape(ad::bmm(w, vh), {dv});
  return {o, ad::reshape(w, {n_heads, l})};
}

}  // namespace ctm
