#include "ctm/params.hpp"

#include <cmath>
#include <stdexcept>

namespace ctm {

ParamId ParamStore::add(std::string name, Tensor init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  names_.push_back(std::move(name));
  values_.push_back(std::move(init));
  return values_.size() - 1;
}

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::optional<ParamId> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  Tensor t(shape);
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

ad::DiffArray ParamBinding::operator()(ParamId id) {
  auto& slot = leaves_.at(id);
  if (!slot) slot = tape_.variable(store_.value(id));
  return *slot;
}

std::vector<Tensor> ParamBinding::gradients() const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    if (leaves_[i]) {
      out.push_back(tape_.grad(*leaves_[i]));
    } else {
      out.emplace_back(store_.value(i).shape, 0.0);
    }
  }
  return out;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng, double gain) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", fan_in_uniform({in, out}, in, rng, gain));
  l.bias = store.add(name + ".bias", fan_in_uniform({out}, in, rng, gain));
  return l;
}

ad::DiffArray Linear::operator()(ParamBinding& p, const ad::DiffArray& x) const {
  return ad::add(ad::matmul(x, p(weight)), p(bias));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.width = width;
  ln.gain = store.add(name + ".gain", Tensor({width}, 1.0));
  ln.shift = store.add(name + ".shift", Tensor({width}, 0.0));
  return ln;
}

ad::DiffArray LayerNorm::operator()(ParamBinding& p, const ad::DiffArray& x) const {
  return ad::add(ad::mul(ad::layernorm(x, -1), p(gain)), p(shift));
}

}  // namespace ctm
