#include <cmath>
#include <cstring>
#include <string>

#include "ctm/autodiff.hpp"
#include "ctm/random.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"

using namespace ctm;
using namespace ctm::ad;
using ctm::testing::gradcheck;
using ctm::testing::GraphFn;
using ctm::testing::random_tensor;

namespace {

// Independent per-neuron loop used as the NLM oracle.
Tensor nlm_loop_oracle(const Tensor& hist, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                       const Tensor& b2, Activation act) {
  const std::size_t d = w1.shape[0], m = w1.shape[1], h = w1.shape[2];
  const std::size_t rows = hist.size() / (d * m);
  Tensor out(Shape(hist.shape.begin(), hist.shape.end() - 1));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t n = 0; n < d; ++n) {
      double z = b2[n];
      for (std::size_t k = 0; k < h; ++k) {
        double pre = b1[n * h + k];
        for (std::size_t j = 0; j < m; ++j) pre += hist[(r * d + n) * m + j] * w1[(n * m + j) * h + k];
        z += w2[n * h + k] * apply_activation(act, pre);
      }
      out[r * d + n] = z;
    }
  }
  return out;
}

void check_grad(const GraphFn& f, const std::vector<Tensor>& inputs) {
  auto res = gradcheck(f, inputs);
  INFO(res.worst);
  CHECK(res.failed == 0);
  CHECK(res.max_rel_error < 1e-4);
}

}  // namespace

TEST_CASE("elementwise examples") {
  Tape tape;
  auto e = exp(tape.constant(Tensor({2}, {0.0, 0.0})));
  CHECK(e.value()[0] == 1.0);
  CHECK(e.value()[1] == 1.0);

  auto s = add(tape.constant(Tensor({2}, {1, 2})), tape.constant(Tensor({2}, {3, 4})));
  CHECK(s.value()[0] == 4.0);
  CHECK(s.value()[1] == 6.0);

  const double oracle = 1.0 / (1.0 + std::exp(-1.0));  // x * sigma(x) at x = 1
  auto si = silu(tape.constant(Tensor::scalar(1.0)));
  CHECK(si.item() == doctest::Approx(oracle).epsilon(1e-15));
  CHECK(si.item() == doctest::Approx(0.731058).epsilon(1e-6));
}

TEST_CASE("trailing broadcast and shape errors") {
  Tape tape;
  auto x = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.constant(Tensor({3}, {10, 20, 30}));
  auto y = add(x, b);
  CHECK(y.value()[4] == 25.0);
  auto z = mul(tape.constant(Tensor::scalar(2.0)), x);
  CHECK(z.value()[5] == 12.0);

  auto bad = tape.constant(Tensor({2}, {1, 2}));
  try {
    add(x, bad);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& err) {
    const std::string msg = err.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
}

TEST_CASE("matmul examples") {
  Tape tape;
  auto id = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  auto p = matmul(id, m);
  CHECK(p.value().data == std::vector<double>{1, 2, 3, 4});

  auto r = matmul(tape.constant(Tensor({1, 2}, {1, 2})), tape.constant(Tensor({2, 1}, {3, 4})));
  CHECK(r.value().shape == Shape{1, 1});
  CHECK(r.item() == 11.0);

  CHECK_THROWS_AS(matmul(m, tape.constant(Tensor({3, 1}, {1, 2, 3}))), std::invalid_argument);
}

TEST_CASE("matmul results do not depend on buffer placement") {
  Rng rng(3);
  const Tensor a = random_tensor({7, 13}, rng, -1, 1), b = random_tensor({13, 5}, rng, -1, 1);
  std::vector<double> first, first_grad;
  std::vector<std::vector<double>> padding;
  for (int rep = 0; rep < 40; ++rep) {
    padding.emplace_back(1 + rep % 7);  // shifts where the next buffers land
    Tape tape;
    auto x = tape.variable(a), y = tape.variable(b);
    auto p = matmul(x, y);
    tape.backward(sum(mul(p, p)));
    if (rep == 0) {
      first = p.value().data;
      first_grad = tape.grad(x).data;
    }
    CHECK(std::memcmp(p.value().data.data(), first.data(), first.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(tape.grad(x).data.data(), first_grad.data(), first_grad.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("matmul gradient against finite differences") {
  GraphFn f = [](Tape&, const std::vector<DiffArray>& in) { return sum(matmul(in[0], in[1])); };
  Tensor a({1, 2}, {1, 1});
  Tensor b({2, 1}, {2, 5});
  auto grads = ctm::testing::analytic_gradients(f, {a, b});
  // numeric oracle for d sum(AB)/dA
  const double h = 1e-5;
  for (std::size_t i = 0; i < 2; ++i) {
    Tensor up = a, dn = a;
    up[i] += h;
    dn[i] -= h;
    const double num =
        (ctm::testing::evaluate(f, {up, b}) - ctm::testing::evaluate(f, {dn, b})) / (2 * h);
    CHECK(grads[0][i] == doctest::Approx(num).epsilon(1e-8));
  }
  CHECK(grads[0][0] == doctest::Approx(2.0));
  CHECK(grads[0][1] == doctest::Approx(5.0));
}

TEST_CASE("batched_nlm_contract examples") {
  SUBCASE("zero weights give the output bias") {
    Tape tape;
    const std::size_t d = 3, m = 4, h = 2;
    auto out = batched_nlm_contract(tape.constant(Tensor({d, m}, 0.7)),
                                    tape.constant(Tensor({d, m, h}, 0.0)),
                                    tape.constant(Tensor({d, h}, 0.3)),
                                    tape.constant(Tensor({d, h}, 0.0)),
                                    tape.constant(Tensor({d}, 1.25)), Activation::silu);
    for (std::size_t i = 0; i < d; ++i) CHECK(out.value()[i] == 1.25);
  }
  SUBCASE("unit identity network returns its input") {
    Tape tape;
    auto out = batched_nlm_contract(
        tape.constant(Tensor({1, 1}, {-0.4})), tape.constant(Tensor({1, 1, 1}, {1.0})),
        tape.constant(Tensor({1, 1}, {0.0})), tape.constant(Tensor({1, 1}, {1.0})),
        tape.constant(Tensor({1}, {0.0})), Activation::identity);
    CHECK(out.item() == -0.4);
  }
  SUBCASE("matches the per-neuron loop oracle") {
    Rng rng(11);
    for (auto act : {Activation::silu, Activation::identity, Activation::tanh}) {
      const Tensor hist = random_tensor({5, 3, 4}, rng);  // batch of 5
      const Tensor w1 = random_tensor({3, 4, 2}, rng);
      const Tensor b1 = random_tensor({3, 2}, rng);
      const Tensor w2 = random_tensor({3, 2}, rng);
      const Tensor b2 = random_tensor({3}, rng);
      Tape tape;
      auto out = batched_nlm_contract(tape.constant(hist), tape.constant(w1), tape.constant(b1),
                                      tape.constant(w2), tape.constant(b2), act);
      const Tensor expect = nlm_loop_oracle(hist, w1, b1, w2, b2, act);
      REQUIRE(out.shape() == Shape{5, 3});
      for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(out.value()[i] - expect[i]) < 1e-12);
    }
  }
  SUBCASE("dimension mismatch") {
    Tape tape;
    CHECK_THROWS_AS(batched_nlm_contract(tape.constant(Tensor({3, 4}, 0.0)),
                                         tape.constant(Tensor({3, 5, 2}, 0.0)),
                                         tape.constant(Tensor({3, 2}, 0.0)),
                                         tape.constant(Tensor({3, 2}, 0.0)),
                                         tape.constant(Tensor({3}, 0.0)), Activation::silu),
                    std::invalid_argument);
  }
}

TEST_CASE("normalisation and reduction examples") {
  Tape tape;
  auto s = softmax(tape.constant(Tensor({2}, {0, 0})));
  CHECK(s.value()[0] == 0.5);
  CHECK(s.value()[1] == 0.5);

  auto ln = layernorm(tape.constant(Tensor({3}, {1, 1, 1})));
  for (double v : ln.value().data) CHECK(v == 0.0);

  CHECK(argmax(Tensor({3}, {2, 7, 7}), 0) == std::vector<std::size_t>{1});
  CHECK(argmin(Tensor({3}, {4, 1, 1}), 0) == std::vector<std::size_t>{1});

  CHECK_THROWS_AS(softmax(tape.constant(Tensor({2}, {0, 0})), 1), std::out_of_range);
  CHECK_THROWS_AS(sum(tape.constant(Tensor({0}))), std::invalid_argument);
  CHECK_THROWS_AS(sum(tape.constant(Tensor({2, 0})), 1), std::invalid_argument);

  Rng rng(3);
  auto wide = layernorm(tape.constant(random_tensor({4, 6}, rng, -3, 3)));
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mu += wide.value()[r * 6 + c];
    mu /= 6;
    for (std::size_t c = 0; c < 6; ++c) var += std::pow(wide.value()[r * 6 + c] - mu, 2);
    var /= 6;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps inside the sqrt
  }
}

TEST_CASE("softmax rows are distributions") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape(false);
    auto p = softmax(tape.constant(random_tensor({3, 7}, rng, -30, 30)), -1);
    for (std::size_t r = 0; r < 3; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        CHECK(p.value()[r * 7 + c] >= 0.0);
        total += p.value()[r * 7 + c];
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("backward examples and errors") {
  SUBCASE("sum gives ones") {
    Tape tape;
    auto x = tape.variable(Tensor({2, 3}, 0.5));
    tape.backward(sum(x));
    for (double g : tape.grad(x).data) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares") {
    Tape tape;
    auto x = tape.variable(Tensor({2}, {1, 2}));
    tape.backward(sum(mul(x, x)));
    CHECK(tape.grad(x).data == std::vector<double>{2, 4});
  }
  SUBCASE("non-scalar loss") {
    Tape tape;
    auto x = tape.variable(Tensor({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
  SUBCASE("second backward is rejected") {
    Tape tape;
    auto x = tape.variable(Tensor({2}, {1, 2}));
    auto l = sum(x);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), std::logic_error);
  }
  SUBCASE("constants receive no gradient") {
    Tape tape;
    auto c = tape.constant(Tensor({2}, {1, 2}));
    auto x = tape.variable(Tensor({2}, {3, 4}));
    tape.backward(sum(mul(c, x)));
    CHECK(tape.grad(c).data == std::vector<double>{0, 0});
    CHECK(tape.grad(x).data == std::vector<double>{1, 2});
  }
}

TEST_CASE("clamp_min_zero passes gradient at zero") {
  Tape tape;
  auto x = tape.variable(Tensor({3}, {-1.0, 0.0, 2.0}));
  tape.backward(sum(clamp_min_zero(x)));
  CHECK(tape.grad(x).data == std::vector<double>{0, 1, 1});
}

TEST_CASE("finite-difference check of every differentiable op over 100 seeds") {
  const auto cases = ctm::testing::primitive_cases();
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::size_t failures = 0;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto res = gradcheck(c.f, ctm::testing::primitive_inputs(c, seed));
      failures += res.failed;
      worst = std::max(worst, res.max_rel_error);
    }
    CHECK(failures == 0);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("random composite graph matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> inputs{random_tensor({4, 3}, rng), random_tensor({3, 5}, rng),
                               random_tensor({5}, rng)};
    GraphFn f = [](Tape& t, const std::vector<DiffArray>& in) {
      auto h = silu(add(matmul(in[0], in[1]), in[2]));
      auto p = softmax(layernorm(h, -1), -1);
      auto q = log(add_scalar(p, 0.1));
      return mean(mul(q, tanh(h)));
    };
    check_grad(f, inputs);
  }
}

TEST_CASE("tape-free forward replay is bit-identical") {
  Rng rng(9);
  const Tensor a = random_tensor({4, 8}, rng);
  const Tensor b = random_tensor({8, 8}, rng);
  auto run = [&] {
    Tape tape(false);
    auto h = softmax(tanh(matmul(tape.constant(a), tape.constant(b))), -1);
    return h.value();
  };
  const Tensor r1 = run();
  const Tensor r2 = run();
  CHECK(std::memcmp(r1.data.data(), r2.data.data(), r1.size() * sizeof(double)) == 0);
}
