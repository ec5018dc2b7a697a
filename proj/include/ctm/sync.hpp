#pragma once

// Neuron-pair selection and decay-weighted synchronization.
//
// For a pair (i, j) with decay r >= 0 and post-activation history z^1..z^t:
//
//   S_ij^t = sum_tau e^{-r(t-tau)} z_i^tau z_j^tau / sqrt(sum_tau e^{-r(t-tau)})
//
// The recursive form keeps alpha (numerator) and beta (denominator sum):
//   alpha' = e^{-r} alpha + z_i z_j,  beta' = e^{-r} beta + 1,  S = alpha' / sqrt(beta')
// starting from alpha = beta = 0, so the first step yields alpha = z_i z_j, beta = 1.

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ctm/autodiff.hpp"
#include "ctm/config.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

enum class PairRole { output, action };

struct NeuronPair {
  std::size_t i = 0;
  std::size_t j = 0;
  bool operator==(const NeuronPair&) const = default;
};

struct PairSelection {
  PairRole role = PairRole::output;
  PairingStrategy strategy = PairingStrategy::dense;
  std::vector<NeuronPair> pairs;

  std::size_t size() const { return pairs.size(); }
  std::vector<std::size_t> left() const;
  std::vector<std::size_t> right() const;
};

// Samples both selections once; the same seed always gives the same pairs.
std::pair<PairSelection, PairSelection> build_pairs(const CtmConfig& config, std::uint64_t seed);

// Direct evaluation from a full history `z` of shape [D x t] (columns are ticks).
std::vector<double> sync_direct(const Tensor& z, std::span<const NeuronPair> pairs,
                                std::span<const double> decays);

struct SyncStep {
  double alpha = 0.0;
  double beta = 0.0;
  double value = 0.0;
};

SyncStep sync_recursive_step(double alpha, double beta, double zi, double zj, double decay);

// Tape-resident recursive accumulator for one pair set over a batch.
class SyncAccumulator {
 public:
  SyncAccumulator() = default;
  explicit SyncAccumulator(const PairSelection& pairs);

  // z: [B x D]; raw_decay: [P] learnable, r = clamp_min_zero(raw). Returns S [B x P].
  ad::DiffArray update(const ad::DiffArray& z, const ad::DiffArray& raw_decay);

  bool started() const { return alpha_.has_value(); }
  const ad::DiffArray& alpha() const { return *alpha_; }
  const ad::DiffArray& beta() const { return *beta_; }

 private:
  std::vector<std::size_t> left_;
  std::vector<std::size_t> right_;
  std::optional<ad::DiffArray> alpha_;
  std::optional<ad::DiffArray> beta_;
};

}  // namespace ctm
