#include "ctm/sync.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "ctm/random.hpp"

namespace ctm {

std::vector<std::size_t> PairSelection::left() const {
  std::vector<std::size_t> v;
  v.reserve(pairs.size());
  for (const auto& p : pairs) v.push_back(p.i);
  return v;
}

std::vector<std::size_t> PairSelection::right() const {
  std::vector<std::size_t> v;
  v.reserve(pairs.size());
  for (const auto& p : pairs) v.push_back(p.j);
  return v;
}

namespace {

std::vector<NeuronPair> dense_pairs(std::span<const std::size_t> neurons) {
  std::vector<NeuronPair> out;
  for (std::size_t a = 0; a < neurons.size(); ++a)
    for (std::size_t b = a; b < neurons.size(); ++b) out.push_back({neurons[a], neurons[b]});
  return out;
}

std::vector<NeuronPair> cross_pairs(std::span<const std::size_t> left,
                                    std::span<const std::size_t> right) {
  std::vector<NeuronPair> out;
  for (auto i : left)
    for (auto j : right) out.push_back({i, j});
  return out;
}

std::vector<NeuronPair> random_pairs(std::size_t d, std::size_t count, std::size_t n_self,
                                     Rng& rng) {
  std::vector<NeuronPair> out;
  const auto distinct = rng.permutation(d);
  for (std::size_t s = 0; s < n_self; ++s) out.push_back({distinct[s], distinct[s]});
  while (out.size() < count) out.push_back({rng.index(d), rng.index(d)});
  return out;
}

}  // namespace

std::pair<PairSelection, PairSelection> build_pairs(const CtmConfig& config, std::uint64_t seed) {
  const auto& p = config.pairing;
  const std::size_t d = config.d_model;
  PairSelection out{PairRole::output, p.strategy, {}};
  PairSelection action{PairRole::action, p.strategy, {}};
  Rng rng = Rng::derive(seed, 0x5a17);
  auto take = [](const std::vector<std::size_t>& perm, std::size_t& cursor, std::size_t n) {
    std::vector<std::size_t> v(perm.begin() + static_cast<long>(cursor),
                               perm.begin() + static_cast<long>(cursor + n));
    cursor += n;
    return v;
  };
  auto too_many = [d](std::size_t need) {
    throw std::invalid_argument("pairing requests " + std::to_string(need) +
                                " distinct neurons but D = " + std::to_string(d));
  };
  switch (p.strategy) {
    case PairingStrategy::dense: {
      if (p.j_out + p.j_action > d) too_many(p.j_out + p.j_action);
      const auto perm = rng.permutation(d);
      std::size_t cursor = 0;
      out.pairs = dense_pairs(take(perm, cursor, p.j_out));
      action.pairs = dense_pairs(take(perm, cursor, p.j_action));
      break;
    }
    case PairingStrategy::semi_dense: {
      if (p.neurons_required() > d) too_many(p.neurons_required());
      const auto perm = rng.permutation(d);
      std::size_t cursor = 0;
      const auto l_out = take(perm, cursor, p.j1_out);
      const auto r_out = take(perm, cursor, p.j2_out);
      const auto l_act = take(perm, cursor, p.j1_action);
      const auto r_act = take(perm, cursor, p.j2_action);
      out.pairs = cross_pairs(l_out, r_out);
      action.pairs = cross_pairs(l_act, r_act);
      break;
    }
    case PairingStrategy::random: {
      if (p.n_self > p.d_out || p.n_self > p.d_action) {
        throw std::invalid_argument("n_self (" + std::to_string(p.n_self) +
                                    ") exceeds D_out or D_action");
      }
      if (p.n_self > d) too_many(p.n_self);
      out.pairs = random_pairs(d, p.d_out, p.n_self, rng);
      action.pairs = random_pairs(d, p.d_action, p.n_self, rng);
      break;
    }
  }
  return {std::move(out), std::move(action)};
}

std::vector<double> sync_direct(const Tensor& z, std::span<const NeuronPair> pairs,
                                std::span<const double> decays) {
  if (z.rank() != 2 || z.shape[1] == 0) {
    throw std::invalid_argument("sync_direct: need a non-empty [D x t] history, got " +
                                shape_string(z.shape));
  }
  if (decays.size() != pairs.size()) {
    throw std::invalid_argument("sync_direct: one decay per pair required");
  }
  const std::size_t d = z.shape[0];
  const std::size_t t = z.shape[1];
  std::vector<double> out(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [i, j] = pairs[k];
    if (i >= d || j >= d) throw std::out_of_range("sync_direct: pair index outside D");
    const double r = decays[k];
    if (r < 0.0) throw std::invalid_argument("sync_direct: negative decay");
    // R^t_tau = exp(-r (t - tau)), tau = 1..t
    double num = 0.0;
    double den = 0.0;
    for (std::size_t tau = 1; tau <= t; ++tau) {
      const double w = std::exp(-r * static_cast<double>(t - tau));
      num += w * z[i * t + tau - 1] * z[j * t + tau - 1];
      den += w;
    }
    out[k] = num / std::sqrt(den);
  }
  return out;
}

SyncStep sync_recursive_step(double alpha, double beta, double zi, double zj, double decay) {
  if (beta < 0.0) throw std::logic_error("sync_recursive_step: negative beta accumulator");
  if (decay < 0.0) throw std::invalid_argument("sync_recursive_step: negative decay");
  const double keep = std::exp(-decay);
  SyncStep s;
  s.alpha = keep * alpha + zi * zj;
  s.beta = keep * beta + 1.0;
  s.value = s.alpha / std::sqrt(s.beta);
  return s;
}

SyncAccumulator::SyncAccumulator(const PairSelection& pairs)
    : left_(pairs.left()), right_(pairs.right()) {}

ad::DiffArray SyncAccumulator::update(const ad::DiffArray& z, const ad::DiffArray& raw_decay) {
  auto product = ad::mul(ad::take(z, -1, left_), ad::take(z, -1, right_));
  if (!alpha_) {
    alpha_ = product;
    beta_ = z.tape().constant(Tensor(Shape{left_.size()}, 1.0));
  } else {
    auto keep = ad::exp(ad::neg(ad::clamp_min_zero(raw_decay)));
    alpha_ = ad::add(ad::mul(*alpha_, keep), product);
    beta_ = ad::add_scalar(ad::mul(*beta_, keep), 1.0);
  }
  return ad::div(*alpha_, ad::sqrt(*beta_));
}

}  // namespace ctm
