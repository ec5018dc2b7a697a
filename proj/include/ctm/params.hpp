#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ctm/autodiff.hpp"
#include "ctm/random.hpp"
#include "ctm/tensor.hpp"

namespace ctm {

using ParamId = std::size_t;

// Ordered collection of named trainable tensors.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor init);

  std::size_t size() const { return values_.size(); }
  std::size_t total_count() const;

  Tensor& value(ParamId id) { return values_.at(id); }
  const Tensor& value(ParamId id) const { return values_.at(id); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  std::optional<ParamId> find(const std::string& name) const;

  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scaled by `gain`.
Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

// Lazily places parameters on a tape, one leaf per parameter per pass.
class ParamBinding {
 public:
  ParamBinding(ad::Tape& tape, const ParamStore& store)
      : tape_(tape), store_(store), leaves_(store.size()) {}

  ad::DiffArray operator()(ParamId id);
  ad::Tape& tape() { return tape_; }

  // Gradients aligned with the store; zeros for parameters not reached.
  std::vector<Tensor> gradients() const;

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  std::vector<std::optional<ad::DiffArray>> leaves_;
};

// y = x W + b over the last axis.
struct Linear {
  ParamId weight = 0;
  ParamId bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng, double gain = 1.0);
  ad::DiffArray operator()(ParamBinding& p, const ad::DiffArray& x) const;
  static std::size_t count(std::size_t in, std::size_t out) { return in * out + out; }
};

// Layer norm over the last axis with learned gain and shift.
struct LayerNorm {
  ParamId gain = 0;
  ParamId shift = 0;
  std::size_t width = 0;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t width);
  ad::DiffArray operator()(ParamBinding& p, const ad::DiffArray& x) const;
  static std::size_t count(std::size_t width) { return 2 * width; }
};

}  // namespace ctm
