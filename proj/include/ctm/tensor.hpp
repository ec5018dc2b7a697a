#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ctm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Resolves a possibly negative axis against a rank; throws std::out_of_range.
std::size_t normalize_axis(int axis, std::size_t rank);

// Dense row-major float64 array. Plain value type: no tape, no gradient.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);
  Tensor(Shape s, std::initializer_list<double> values);

  static Tensor scalar(double v);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(int axis) const { return shape[normalize_axis(axis, shape.size())]; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // Value of a single-element tensor.
  double item() const;

  std::span<double> span() { return data; }
  std::span<const double> span() const { return data; }

  bool all_finite() const;
};

// Splits a shape around `axis` into (outer, axis length, inner) strides.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};
AxisSplit split_at(const Shape& shape, std::size_t axis);

}  // namespace ctm
