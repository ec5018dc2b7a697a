#include "ctm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ctm::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Eigen chooses vectorized paths from pointer alignment, so products over mapped
// heap buffers can round differently from one allocation to the next. Operands
// are copied into Eigen-owned storage so results depend only on shapes.
RowMat owned(const double* p, std::size_t rows, std::size_t cols) { return ConstMap(p, rows, cols); }
RowMat owned_t(const double* p, std::size_t rows, std::size_t cols) {
  return ConstMap(p, rows, cols).transpose();
}

// dst[m x n] (+)= a * b
void product_into(double* dst, const RowMat& a, const RowMat& b, bool accumulate) {
  RowMat r(a.rows(), b.cols());
  r.noalias() = a * b;
  MutMap d(dst, r.rows(), r.cols());
  if (accumulate) {
    d += r;
  } else {
    d = r;
  }
}

Tape& common_tape(const DiffArray& x, const DiffArray& y) {
  if (!x.valid() || !y.valid()) throw std::logic_error("op on an unbound DiffArray");
  if (&x.tape() != &y.tape()) throw std::logic_error("operands live on different tapes");
  return x.tape();
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape of a trailing-dimension broadcast.
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (is_suffix(a, b)) return b;
  if (is_suffix(b, a)) return a;
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_string(a) + " and " +
                              shape_string(b) + " are not trailing-broadcast compatible");
}

double sigm(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class Fwd, class Bwd>
DiffArray unary(const DiffArray& x, Fwd fwd, Bwd dfdx) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xi = x.id();
  return tape.push(std::move(out), {xi}, [xi, dfdx](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

// dfdx(x, y, out) and dfdy(x, y, out) are the local partials.
template <class Fwd, class Dx, class Dy>
DiffArray binary(const DiffArray& x, const DiffArray& y, const char* name, Fwd fwd, Dx dfdx,
                 Dy dfdy) {
  Tape& tape = common_tape(x, y);
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  Tensor out(broadcast_shape(xv.shape, yv.shape, name));
  const std::size_t nx = xv.size();
  const std::size_t ny = yv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i % nx], yv[i % ny]);
  const std::size_t xi = x.id();
  const std::size_t yi = y.id();
  return tape.push(std::move(out), {xi, yi}, [xi, yi, dfdx, dfdy](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(yi);
    const Tensor& ov = t.value(self);
    const std::size_t nx = xv.size();
    const std::size_t ny = yv.size();
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad_buffer(xi);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx[i % nx] += g[i] * dfdx(xv[i % nx], yv[i % ny], ov[i]);
    }
    if (t.requires_grad(yi)) {
      Tensor& gy = t.grad_buffer(yi);
      for (std::size_t i = 0; i < g.size(); ++i)
        gy[i % ny] += g[i] * dfdy(xv[i % nx], yv[i % ny], ov[i]);
    }
  });
}

// Reduction-style ops along one axis share this decomposition.
struct AxisView {
  std::size_t axis;
  AxisSplit split;
};

AxisView axis_view(const Shape& shape, int axis) {
  const std::size_t a = normalize_axis(axis, shape.size());
  return {a, split_at(shape, a)};
}

}  // namespace

// ---------------------------------------------------------------- DiffArray

Tape& DiffArray::tape() const {
  if (!tape_) throw std::logic_error("DiffArray is not bound to a tape");
  return *tape_;
}

const Tensor& DiffArray::value() const { return tape().value(id_); }

// ---------------------------------------------------------------- Tape

DiffArray Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  return DiffArray(this, nodes_.size() - 1);
}

DiffArray Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, recording_});
  return DiffArray(this, nodes_.size() - 1);
}

DiffArray Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  if (recording_) {
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  }
  Node node{std::move(value), {}, {}, {}, needs};
  if (needs) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return DiffArray(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape != n.value.shape || n.grad.size() != n.value.size()) {
    n.grad = Tensor(n.value.shape, 0.0);
  }
  return n.grad;
}

void Tape::backward(const DiffArray& loss) {
  if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  if (nodes_.empty()) throw std::logic_error("backward: empty tape");
  if (backward_done_) {
    throw std::logic_error("backward: already called on this tape; run a new forward pass");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(loss.shape()));
  }
  if (!recording_) throw std::logic_error("backward: tape is not recording");
  backward_done_ = true;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, k);
  }
}

Tensor Tape::grad(const DiffArray& x) const {
  const Node& n = nodes_.at(x.id());
  if (n.grad.size() == n.value.size() && n.grad.shape == n.value.shape) return n.grad;
  return Tensor(n.value.shape, 0.0);
}

// ---------------------------------------------------------------- activations

Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "silu") return Activation::silu;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::silu: return "silu";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

double apply_activation(Activation act, double x) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::silu: return x * sigm(x);
    case Activation::relu: return x > 0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid: return sigm(x);
  }
  return x;
}

double activation_derivative(Activation act, double x) {
  switch (act) {
    case Activation::identity: return 1.0;
    case Activation::silu: {
      const double s = sigm(x);
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::relu: return x >= 0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double th = std::tanh(x);
      return 1.0 - th * th;
    }
    case Activation::sigmoid: {
      const double s = sigm(x);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

// ---------------------------------------------------------------- elementwise

DiffArray add(const DiffArray& x, const DiffArray& y) {
  return binary(
      x, y, "add", [](double a, double b) { return a + b; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

DiffArray sub(const DiffArray& x, const DiffArray& y) {
  return binary(
      x, y, "sub", [](double a, double b) { return a - b; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

DiffArray mul(const DiffArray& x, const DiffArray& y) {
  return binary(
      x, y, "mul", [](double a, double b) { return a * b; },
      [](double, double b, double) { return b; }, [](double a, double, double) { return a; });
}

DiffArray div(const DiffArray& x, const DiffArray& y) {
  return binary(
      x, y, "div", [](double a, double b) { return a / b; },
      [](double, double b, double) { return 1.0 / b; },
      [](double, double b, double o) { return -o / b; });
}

DiffArray neg(const DiffArray& x) {
  return unary(x, [](double a) { return -a; }, [](double, double) { return -1.0; });
}

DiffArray exp(const DiffArray& x) {
  return unary(x, [](double a) { return std::exp(a); }, [](double, double y) { return y; });
}

DiffArray log(const DiffArray& x) {
  return unary(x, [](double a) { return std::log(a); }, [](double a, double) { return 1.0 / a; });
}

DiffArray sqrt(const DiffArray& x) {
  return unary(
      x, [](double a) { return std::sqrt(a); }, [](double, double y) { return 0.5 / y; });
}

DiffArray sigmoid(const DiffArray& x) {
  return unary(x, sigm, [](double, double y) { return y * (1.0 - y); });
}

DiffArray tanh(const DiffArray& x) {
  return unary(
      x, [](double a) { return std::tanh(a); }, [](double, double y) { return 1.0 - y * y; });
}

DiffArray silu(const DiffArray& x) {
  return unary(
      x, [](double a) { return a * sigm(a); },
      [](double a, double) { return activation_derivative(Activation::silu, a); });
}

DiffArray clamp_min_zero(const DiffArray& x) {
  return unary(
      x, [](double a) { return a > 0 ? a : 0.0; },
      [](double a, double) { return a >= 0 ? 1.0 : 0.0; });
}

DiffArray activate(const DiffArray& x, Activation act) {
  switch (act) {
    case Activation::identity: return x;
    case Activation::silu: return silu(x);
    case Activation::relu: return clamp_min_zero(x);
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}

DiffArray scale(const DiffArray& x, double c) {
  return unary(x, [c](double a) { return a * c; }, [c](double, double) { return c; });
}

DiffArray add_scalar(const DiffArray& x, double c) {
  return unary(x, [c](double a) { return a + c; }, [](double, double) { return 1.0; });
}

DiffArray mul_constant(const DiffArray& x, const Tensor& mask) {
  if (mask.shape != x.shape()) {
    throw std::invalid_argument("mul_constant: mask shape " + shape_string(mask.shape) +
                                " vs " + shape_string(x.shape()));
  }
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, mask](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------- linear algebra

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || bv.rank() != 2) {
    throw std::invalid_argument("matmul: expected [.. x k] and [k x n], got " +
                                shape_string(av.shape) + " and " + shape_string(bv.shape));
  }
  const std::size_t k = av.shape.back();
  if (k != bv.shape[0]) {
    throw std::invalid_argument("matmul: inner dimensions differ: " + shape_string(av.shape) +
                                " and " + shape_string(bv.shape));
  }
  const std::size_t m = av.size() / std::max<std::size_t>(k, 1);
  const std::size_t n = bv.shape[1];
  Shape out_shape(av.shape.begin(), av.shape.end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape);
  product_into(out.data.data(), owned(av.data.data(), m, k), owned(bv.data.data(), k, n), false);
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.push(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const double* g = t.grad_of(self).data.data();
    if (t.requires_grad(ai)) {
      product_into(t.grad_buffer(ai).data.data(), owned(g, m, n), owned_t(t.value(bi).data.data(), k, n), true);
    }
    if (t.requires_grad(bi)) {
      product_into(t.grad_buffer(bi).data.data(), owned_t(t.value(ai).data.data(), m, k), owned(g, m, n), true);
    }
  });
}

DiffArray bmm(const DiffArray& a, const DiffArray& b, bool transpose_b) {
  Tape& tape = common_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 2 || bv.rank() != av.rank() ||
      !std::equal(av.shape.begin(), av.shape.end() - 2, bv.shape.begin())) {
    throw std::invalid_argument("bmm: incompatible batch shapes " + shape_string(av.shape) +
                                " and " + shape_string(bv.shape));
  }
  const std::size_t r = av.rank();
  const std::size_t m = av.shape[r - 2];
  const std::size_t k = av.shape[r - 1];
  const std::size_t bk = transpose_b ? bv.shape[r - 1] : bv.shape[r - 2];
  const std::size_t n = transpose_b ? bv.shape[r - 2] : bv.shape[r - 1];
  if (bk != k) {
    throw std::invalid_argument("bmm: inner dimensions differ: " + shape_string(av.shape) +
                                " and " + shape_string(bv.shape));
  }
  const std::size_t batch = av.size() / std::max<std::size_t>(m * k, 1);
  Shape out_shape(av.shape.begin(), av.shape.end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (std::size_t p = 0; p < batch; ++p) {
    const RowMat am = owned(av.data.data() + p * m * k, m, k);
    double* om = out.data.data() + p * m * n;
    if (transpose_b) {
      product_into(om, am, owned_t(bv.data.data() + p * n * k, n, k), false);
    } else {
      product_into(om, am, owned(bv.data.data() + p * k * n, k, n), false);
    }
  }
  const std::size_t ai = a.id();
  const std::size_t bi = b.id();
  return tape.push(std::move(out), {ai, bi},
                   [ai, bi, batch, m, k, n, transpose_b](Tape& t, std::size_t self) {
                     const Tensor& gv = t.grad_of(self);
                     const Tensor& av = t.value(ai);
                     const Tensor& bv = t.value(bi);
                     const bool ga = t.requires_grad(ai);
                     const bool gb = t.requires_grad(bi);
                     double* gad = ga ? t.grad_buffer(ai).data.data() : nullptr;
                     double* gbd = gb ? t.grad_buffer(bi).data.data() : nullptr;
                     for (std::size_t p = 0; p < batch; ++p) {
                       const double* g = gv.data.data() + p * m * n;
                       const double* am = av.data.data() + p * m * k;
                       if (transpose_b) {
                         const double* bm = bv.data.data() + p * n * k;
                         if (ga) product_into(gad + p * m * k, owned(g, m, n), owned(bm, n, k), true);
                         if (gb) product_into(gbd + p * n * k, owned_t(g, m, n), owned(am, m, k), true);
                       } else {
                         const double* bm = bv.data.data() + p * k * n;
                         if (ga) product_into(gad + p * m * k, owned(g, m, n), owned_t(bm, k, n), true);
                         if (gb) product_into(gbd + p * k * n, owned_t(am, m, k), owned(g, m, n), true);
                       }
                     }
                   });
}

// ---------------------------------------------------------------- shape

DiffArray reshape(const DiffArray& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_string(x.shape()) + " as " +
                                shape_string(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For every output position, the flat source index under a permutation.
std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& order) {
  const auto in_strides = strides_of(in);
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = in[order[i]];
  const std::size_t n = numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(order.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < order.size(); ++d) src += idx[d] * in_strides[order[d]];
    map[flat] = src;
    for (std::size_t d = order.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

DiffArray permute(const DiffArray& x, const std::vector<std::size_t>& order) {
  const Shape& in = x.shape();
  if (order.size() != in.size()) {
    throw std::invalid_argument("permute: order length does not match rank of " +
                                shape_string(in));
  }
  std::vector<bool> seen(order.size(), false);
  for (auto o : order) {
    if (o >= order.size() || seen[o]) throw std::invalid_argument("permute: invalid order");
    seen[o] = true;
  }
  Shape out_shape(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = in[order[i]];
  auto map = permutation_map(in, order);
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[map[i]];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, map = std::move(map)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
  });
}

DiffArray concat(std::span<const DiffArray> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Tape& tape = parts[0].tape();
  const Shape& first = parts[0].shape();
  const std::size_t a = normalize_axis(axis, first.size());
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    if (&p.tape() != &tape) throw std::logic_error("concat: operands on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == a || s[d] == first[d];
    if (!ok) {
      throw std::invalid_argument("concat: shape " + shape_string(s) + " incompatible with " +
                                  shape_string(first) + " along axis " + std::to_string(a));
    }
    total += s[a];
    ids.push_back(p.id());
    lens.push_back(s[a]);
  }
  Shape out_shape = first;
  out_shape[a] = total;
  const AxisSplit sp = split_at(out_shape, a);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    const std::size_t chunk = lens[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data.begin() + o * chunk, chunk,
                  out.data.begin() + (o * total + offset) * sp.inner);
    }
    offset += lens[p];
  }
  return tape.push(std::move(out), ids, [ids, lens, sp, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t chunk = lens[p] * sp.inner;
      if (t.requires_grad(ids[p])) {
        Tensor& gp = t.grad_buffer(ids[p]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = g.data.data() + (o * total + offset) * sp.inner;
          double* dst = gp.data.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += lens[p];
    }
  });
}

DiffArray slice(const DiffArray& x, int axis, std::size_t begin, std::size_t end) {
  const Shape& in = x.shape();
  const std::size_t a = normalize_axis(axis, in.size());
  if (begin > end || end > in[a]) {
    throw std::out_of_range("slice: range [" + std::to_string(begin) + ", " +
                            std::to_string(end) + ") outside axis of length " +
                            std::to_string(in[a]));
  }
  const AxisSplit sp = split_at(in, a);
  Shape out_shape = in;
  out_shape[a] = end - begin;
  Tensor out(out_shape);
  const std::size_t chunk = (end - begin) * sp.inner;
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data.begin() + (o * sp.len + begin) * sp.inner, chunk,
                out.data.begin() + o * chunk);
  }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, sp, begin, chunk](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = gx.data.data() + (o * sp.len + begin) * sp.inner;
      const double* src = g.data.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

DiffArray take(const DiffArray& x, int axis, std::span<const std::size_t> indices) {
  const Shape& in = x.shape();
  const std::size_t a = normalize_axis(axis, in.size());
  const AxisSplit sp = split_at(in, a);
  for (auto i : indices) {
    if (i >= sp.len) {
      throw std::out_of_range("take: index " + std::to_string(i) + " outside axis of length " +
                              std::to_string(sp.len));
    }
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Shape out_shape = in;
  out_shape[a] = idx.size();
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  const std::size_t k = idx.size();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * k + j) * sp.inner + i] = xv[(o * sp.len + idx[j]) * sp.inner + i];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, sp, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    const std::size_t k = idx.size();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.len + idx[j]) * sp.inner + i] += g[(o * k + j) * sp.inner + i];
  });
}

DiffArray pick(const DiffArray& x, std::span<const std::size_t> index) {
  const Shape& in = x.shape();
  if (in.empty()) throw std::invalid_argument("pick: rank-0 input");
  const std::size_t c = in.back();
  const std::size_t rows = x.size() / std::max<std::size_t>(c, 1);
  if (index.size() != rows) {
    throw std::invalid_argument("pick: " + std::to_string(index.size()) + " indices for " +
                                std::to_string(rows) + " rows of " + shape_string(in));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  for (auto i : idx) {
    if (i >= c) throw std::out_of_range("pick: class index " + std::to_string(i) + " >= " +
                                        std::to_string(c));
  }
  Tensor out(Shape(in.begin(), in.end() - 1));
  const Tensor& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) out[r] = xv[r * c + idx[r]];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, c, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < idx.size(); ++r) gx[r * c + idx[r]] += g[r];
  });
}

DiffArray expand_leading(const DiffArray& x, std::size_t count) {
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t c = 0; c < count; ++c) std::copy(xv.data.begin(), xv.data.end(), out.data.begin() + c * xv.size());
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, count](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    const std::size_t n = gx.size();
    for (std::size_t c = 0; c < count; ++c)
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[c * n + i];
  });
}

// ---------------------------------------------------------------- reductions

DiffArray sum(const DiffArray& x) {
  if (x.size() == 0) throw std::invalid_argument("sum: zero-length reduction");
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::size_t xi = x.id();
  return x.tape().push(Tensor::scalar(s), {xi}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad_of(self)[0];
    Tensor& gx = t.grad_buffer(xi);
    for (auto& v : gx.data) v += g;
  });
}

DiffArray mean(const DiffArray& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: zero-length reduction");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

DiffArray sum(const DiffArray& x, int axis) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("sum: zero-length reduction");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(a));
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, sp = sp](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gx[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
  });
}

DiffArray mean(const DiffArray& x, int axis) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("mean: zero-length reduction");
  return scale(sum(x, axis), 1.0 / static_cast<double>(sp.len));
}

DiffArray max(const DiffArray& x, int axis) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("max: zero-length reduction");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(a));
  Tensor out(out_shape);
  std::vector<std::size_t> where(sp.outer * sp.inner);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < sp.len; ++l)
        if (xv[(o * sp.len + l) * sp.inner + i] > xv[(o * sp.len + best) * sp.inner + i]) best = l;
      where[o * sp.inner + i] = (o * sp.len + best) * sp.inner + i;
      out[o * sp.inner + i] = xv[where[o * sp.inner + i]];
    }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, where = std::move(where)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t k = 0; k < where.size(); ++k) gx[where[k]] += g[k];
  });
}

namespace {

template <class Better>
std::vector<std::size_t> arg_extreme(const Tensor& x, int axis, Better better) {
  const std::size_t a = normalize_axis(axis, x.rank());
  const AxisSplit sp = split_at(x.shape, a);
  if (sp.len == 0) throw std::invalid_argument("argmax/argmin: zero-length reduction");
  std::vector<std::size_t> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      for (std::size_t l = 1; l < sp.len; ++l)
        if (better(x[(o * sp.len + l) * sp.inner + i], x[(o * sp.len + best) * sp.inner + i]))
          best = l;
      out[o * sp.inner + i] = best;
    }
  return out;
}

}  // namespace

std::vector<std::size_t> argmax(const Tensor& x, int axis) {
  return arg_extreme(x, axis, [](double a, double b) { return a > b; });
}

std::vector<std::size_t> argmin(const Tensor& x, int axis) {
  return arg_extreme(x, axis, [](double a, double b) { return a < b; });
}

// ---------------------------------------------------------------- normalisation

DiffArray softmax(const DiffArray& x, int axis) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("softmax: zero-length axis");
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, xv[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        out[at(l)] = std::exp(xv[at(l)] - m);
        z += out[at(l)];
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] /= z;
    }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, sp = sp](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[at(l)] * y[at(l)];
        for (std::size_t l = 0; l < sp.len; ++l) gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
      }
  });
}

DiffArray log_softmax(const DiffArray& x, int axis) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("log_softmax: zero-length axis");
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) m = std::max(m, xv[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) z += std::exp(xv[at(l)] - m);
      const double lse = m + std::log(z);
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] = xv[at(l)] - lse;
    }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi}, [xi, sp = sp](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
        double gs = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) gs += g[at(l)];
        for (std::size_t l = 0; l < sp.len; ++l) gx[at(l)] += g[at(l)] - std::exp(y[at(l)]) * gs;
      }
  });
}

DiffArray layernorm(const DiffArray& x, int axis, double eps) {
  const auto [a, sp] = axis_view(x.shape(), axis);
  if (sp.len == 0) throw std::invalid_argument("layernorm: zero-length axis");
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  std::vector<double> inv_std(sp.outer * sp.inner);
  const double n = static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
      double mu = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) mu += xv[at(l)];
      mu /= n;
      double var = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) var += (xv[at(l)] - mu) * (xv[at(l)] - mu);
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * sp.inner + i] = is;
      for (std::size_t l = 0; l < sp.len; ++l) out[at(l)] = (xv[at(l)] - mu) * is;
    }
  const std::size_t xi = x.id();
  return x.tape().push(std::move(out), {xi},
                       [xi, sp = sp, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                         const Tensor& g = t.grad_of(self);
                         const Tensor& y = t.value(self);
                         Tensor& gx = t.grad_buffer(xi);
                         const double n = static_cast<double>(sp.len);
                         for (std::size_t o = 0; o < sp.outer; ++o)
                           for (std::size_t i = 0; i < sp.inner; ++i) {
                             auto at = [&](std::size_t l) { return (o * sp.len + l) * sp.inner + i; };
                             double gm = 0.0;
                             double gy = 0.0;
                             for (std::size_t l = 0; l < sp.len; ++l) {
                               gm += g[at(l)];
                               gy += g[at(l)] * y[at(l)];
                             }
                             gm /= n;
                             gy /= n;
                             const double is = inv_std[o * sp.inner + i];
                             for (std::size_t l = 0; l < sp.len; ++l)
                               gx[at(l)] += is * (g[at(l)] - gm - y[at(l)] * gy);
                           }
                       });
}

// ---------------------------------------------------------------- NLM bank

DiffArray batched_nlm_contract(const DiffArray& history, const DiffArray& w1, const DiffArray& b1,
                               const DiffArray& w2, const DiffArray& b2, Activation act) {
  Tape& tape = history.tape();
  const Shape& hs = history.shape();
  if (hs.size() < 2 || w1.shape().size() != 3) {
    throw std::invalid_argument("batched_nlm_contract: history must be [.. x D x M] and w1 "
                                "[D x M x H], got " +
                                shape_string(hs) + " and " + shape_string(w1.shape()));
  }
  const std::size_t d = hs[hs.size() - 2];
  const std::size_t m = hs.back();
  const std::size_t h = w1.shape()[2];
  auto expect = [](const DiffArray& a, const Shape& s, const char* name) {
    if (a.shape() != s) {
      throw std::invalid_argument(std::string("batched_nlm_contract: ") + name + " has shape " +
                                  shape_string(a.shape()) + ", expected " + shape_string(s));
    }
  };
  expect(w1, Shape{d, m, h}, "w1");
  expect(b1, Shape{d, h}, "b1");
  expect(w2, Shape{d, h}, "w2");
  expect(b2, Shape{d}, "b2");
  for (const auto* p : {&w1, &b1, &w2, &b2}) {
    if (&p->tape() != &tape) throw std::logic_error("batched_nlm_contract: mixed tapes");
  }
  const std::size_t rows = history.size() / (d * m);
  Shape out_shape(hs.begin(), hs.end() - 1);
  Tensor out(out_shape);
  const double* A = history.value().data.data();
  const double* W1 = w1.value().data.data();
  const double* B1 = b1.value().data.data();
  const double* W2 = w2.value().data.data();
  const double* B2 = b2.value().data.data();
  std::vector<double> pre(h);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t n = 0; n < d; ++n) {
      const double* a = A + (r * d + n) * m;
      for (std::size_t k = 0; k < h; ++k) pre[k] = B1[n * h + k];
      for (std::size_t j = 0; j < m; ++j) {
        const double* w = W1 + (n * m + j) * h;
        for (std::size_t k = 0; k < h; ++k) pre[k] += a[j] * w[k];
      }
      double z = B2[n];
      for (std::size_t k = 0; k < h; ++k) z += W2[n * h + k] * apply_activation(act, pre[k]);
      out[r * d + n] = z;
    }
  const std::size_t ids[5] = {history.id(), w1.id(), b1.id(), w2.id(), b2.id()};
  return tape.push(
      std::move(out), {ids, ids + 5},
      [ids = std::vector<std::size_t>(ids, ids + 5), rows, d, m, h, act](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_of(self);
        const double* A = t.value(ids[0]).data.data();
        const double* W1 = t.value(ids[1]).data.data();
        const double* B1 = t.value(ids[2]).data.data();
        const double* W2 = t.value(ids[3]).data.data();
        auto buf = [&](int k) -> double* {
          return t.requires_grad(ids[k]) ? t.grad_buffer(ids[k]).data.data() : nullptr;
        };
        double* gA = buf(0);
        double* gW1 = buf(1);
        double* gB1 = buf(2);
        double* gW2 = buf(3);
        double* gB2 = buf(4);
        std::vector<double> pre(h);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t n = 0; n < d; ++n) {
            const double go = g[r * d + n];
            if (go == 0.0) continue;
            const double* a = A + (r * d + n) * m;
            for (std::size_t k = 0; k < h; ++k) pre[k] = B1[n * h + k];
            for (std::size_t j = 0; j < m; ++j) {
              const double* w = W1 + (n * m + j) * h;
              for (std::size_t k = 0; k < h; ++k) pre[k] += a[j] * w[k];
            }
            if (gB2) gB2[n] += go;
            for (std::size_t k = 0; k < h; ++k) {
              if (gW2) gW2[n * h + k] += go * apply_activation(act, pre[k]);
              const double dpre = go * W2[n * h + k] * activation_derivative(act, pre[k]);
              if (gB1) gB1[n * h + k] += dpre;
              for (std::size_t j = 0; j < m; ++j) {
                if (gW1) gW1[(n * m + j) * h + k] += dpre * a[j];
                if (gA) gA[(r * d + n) * m + j] += dpre * W1[(n * m + j) * h + k];
              }
            }
          }
      });
}

}  // namespace ctm::ad
