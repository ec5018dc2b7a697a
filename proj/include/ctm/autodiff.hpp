#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// A Tape owns every intermediate value produced during a forward pass. Ops are
// free functions on DiffArray handles; each records its value and, when the
// tape is recording, a closure that propagates the output gradient to its
// inputs. Nodes are appended in evaluation order, so the tape is topologically
// sorted by construction and backward is a single reverse sweep.
//
// Broadcasting: a binary op accepts operands whose shapes are equal, or where
// the shorter shape is a suffix of the longer one (trailing-dimension
// broadcast, e.g. [B x D] + [D]). A rank-0 array broadcasts against anything.
// Every other combination is rejected; reshape explicitly instead.

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctm/tensor.hpp"

namespace ctm::ad {

class Tape;

// Handle to a value living on a Tape. Cheap to copy; invalid once the tape dies.
class DiffArray {
 public:
  DiffArray() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }

 private:
  friend class Tape;
  DiffArray(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, std::size_t self)>;

class Tape {
 public:
  // A non-recording tape keeps forward values only (evaluation mode).
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  DiffArray constant(Tensor value);
  // Leaf that receives a gradient during backward.
  DiffArray variable(Tensor value);

  // Runs the reverse sweep from a scalar loss. Allowed once per tape.
  void backward(const DiffArray& loss);
  bool backward_done() const { return backward_done_; }

  // Gradient of a node after backward; zeros when nothing flowed into it.
  Tensor grad(const DiffArray& x) const;

  // --- op-author interface ---
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, zero-initialised on first access.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& grad_of(std::size_t id) const { return nodes_[id].grad; }

  // Appends an op result. `backward` is dropped if no input requires grad or
  // the tape is not recording.
  DiffArray push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
  };

  bool recording_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
};

// Activation used inside neuron-level models and synapse layers.
enum class Activation { identity, silu, relu, tanh, sigmoid };
Activation activation_from_string(const std::string& name);
std::string to_string(Activation act);
double apply_activation(Activation act, double x);
double activation_derivative(Activation act, double x);

// ---- elementwise ----
DiffArray add(const DiffArray& x, const DiffArray& y);
DiffArray sub(const DiffArray& x, const DiffArray& y);
DiffArray mul(const DiffArray& x, const DiffArray& y);
DiffArray div(const DiffArray& x, const DiffArray& y);
DiffArray neg(const DiffArray& x);
DiffArray exp(const DiffArray& x);
DiffArray log(const DiffArray& x);
DiffArray sqrt(const DiffArray& x);
DiffArray sigmoid(const DiffArray& x);
DiffArray tanh(const DiffArray& x);
DiffArray silu(const DiffArray& x);
// max(x, 0); the subgradient at exactly 0 is taken as 1.
DiffArray clamp_min_zero(const DiffArray& x);
DiffArray activate(const DiffArray& x, Activation act);
DiffArray scale(const DiffArray& x, double c);
DiffArray add_scalar(const DiffArray& x, double c);

inline DiffArray operator+(const DiffArray& x, const DiffArray& y) { return add(x, y); }
inline DiffArray operator-(const DiffArray& x, const DiffArray& y) { return sub(x, y); }
inline DiffArray operator*(const DiffArray& x, const DiffArray& y) { return mul(x, y); }
inline DiffArray operator/(const DiffArray& x, const DiffArray& y) { return div(x, y); }
inline DiffArray operator-(const DiffArray& x) { return neg(x); }

// ---- linear algebra ----
// a: [... x k] (leading dims flattened into rows), b: [k x n] -> [... x n].
DiffArray matmul(const DiffArray& a, const DiffArray& b);
// Batched: a [... x m x k], b [... x k x n] (or [... x n x k] with
// transpose_b) with identical leading dims -> [... x m x n].
DiffArray bmm(const DiffArray& a, const DiffArray& b, bool transpose_b = false);

// ---- shape ----
DiffArray reshape(const DiffArray& x, Shape shape);
DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& order);
DiffArray concat(std::span<const DiffArray> parts, int axis);
DiffArray slice(const DiffArray& x, int axis, std::size_t begin, std::size_t end);
// Gathers entries along `axis` (indices may repeat).
DiffArray take(const DiffArray& x, int axis, std::span<const std::size_t> indices);
// Row-wise gather: x [N x C], index[n] in [0, C) -> [N].
DiffArray pick(const DiffArray& x, std::span<const std::size_t> index);
// Prepends `count` copies along a new leading axis: [..] -> [count x ..].
DiffArray expand_leading(const DiffArray& x, std::size_t count);

// ---- reductions ----
DiffArray sum(const DiffArray& x);
DiffArray sum(const DiffArray& x, int axis);
DiffArray mean(const DiffArray& x);
DiffArray mean(const DiffArray& x, int axis);
// Gradient flows to the first maximal entry.
DiffArray max(const DiffArray& x, int axis);
// Index of the first maximum along `axis`; result flattened over other dims.
std::vector<std::size_t> argmax(const Tensor& x, int axis);
std::vector<std::size_t> argmin(const Tensor& x, int axis);

// ---- normalisation ----
DiffArray softmax(const DiffArray& x, int axis = -1);
DiffArray log_softmax(const DiffArray& x, int axis = -1);
// Zero-mean unit-variance over `axis`, no affine terms.
DiffArray layernorm(const DiffArray& x, int axis = -1, double eps = 1e-5);

// ---- model-specific fused ops ----
// Per-neuron two-layer perceptron over a pre-activation history.
// history [.. x D x M], w1 [D x M x H], b1 [D x H], w2 [D x H], b2 [D] -> [.. x D].
DiffArray batched_nlm_contract(const DiffArray& history, const DiffArray& w1,
                               const DiffArray& b1, const DiffArray& w2,
                               const DiffArray& b2, Activation act);

// Multiplies by a constant mask (dropout, masking).
DiffArray mul_constant(const DiffArray& x, const Tensor& mask);

}  // namespace ctm::ad
