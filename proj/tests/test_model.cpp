#include <cmath>
#include <cstring>
#include <set>

#include "ctm/ctm.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "model_gradcheck.hpp"

using namespace ctm;

namespace {

CtmConfig toy_config() {
  CtmConfig c;
  c.d_model = 8;
  c.ticks = 3;
  c.memory = 3;
  c.synapse_depth = 1;
  c.d_input = 8;
  c.d_hidden = 2;
  c.n_heads = 2;
  c.pairing.strategy = PairingStrategy::dense;
  c.pairing.j_out = 4;
  c.pairing.j_action = 4;
  c.backbone.kind = BackboneKind::parity_embed;
  c.backbone.d_feature = 8;
  c.backbone.sequence_length = 4;
  c.out_positions = 4;
  c.out_classes = 2;
  return c;
}

Tensor parity_inputs(std::size_t batch, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({batch, len});
  for (auto& v : x.data) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
  return x;
}

Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Moves every raw decay away from the clamp kink so finite differences are smooth.
void randomize_decays(CtmModel& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const char* name : {"decay.out", "decay.action"}) {
    if (auto id = model.params().find(name)) {
      for (auto& v : model.params().value(*id).data) v = rng.uniform(0.1, 1.5);
    }
  }
}

}  // namespace

TEST_CASE("build_pairs: dense, semi-dense and random") {
  SUBCASE("dense J_out = 32 gives 528 pairs") {
    CtmConfig c = toy_config();
    c.d_model = 80;
    c.pairing.j_out = 32;
    c.pairing.j_action = 32;
    auto [out, action] = build_pairs(c, 1);
    CHECK(out.size() == 528);
    CHECK(out.size() == 32 * 33 / 2);
    std::set<std::size_t> a_neurons, b_neurons;
    for (auto p : out.pairs) a_neurons.insert({p.i, p.j});
    for (auto p : action.pairs) b_neurons.insert({p.i, p.j});
    CHECK(a_neurons.size() == 32);
    for (auto n : a_neurons) CHECK(b_neurons.count(n) == 0);
  }
  SUBCASE("dense J = 1 gives the self pair") {
    CtmConfig c = toy_config();
    c.pairing.j_out = 1;
    c.pairing.j_action = 1;
    auto [out, action] = build_pairs(c, 3);
    REQUIRE(out.size() == 1);
    CHECK(out.pairs[0].i == out.pairs[0].j);
  }
  SUBCASE("semi-dense gives J1 x J2 cross pairs on disjoint sets") {
    CtmConfig c = toy_config();
    c.d_model = 20;
    c.pairing.strategy = PairingStrategy::semi_dense;
    c.pairing.j1_out = 3;
    c.pairing.j2_out = 4;
    c.pairing.j1_action = 2;
    c.pairing.j2_action = 5;
    auto [out, action] = build_pairs(c, 4);
    CHECK(out.size() == 12);
    CHECK(action.size() == 10);
    std::set<std::size_t> lo, ro, all_out, all_action;
    for (auto p : out.pairs) {
      lo.insert(p.i);
      ro.insert(p.j);
      all_out.insert({p.i, p.j});
    }
    for (auto p : action.pairs) all_action.insert({p.i, p.j});
    CHECK(lo.size() == 3);
    CHECK(ro.size() == 4);
    for (auto n : lo) CHECK(ro.count(n) == 0);
    for (auto n : all_out) CHECK(all_action.count(n) == 0);
  }
  SUBCASE("random pairing leads with n_self distinct self pairs") {
    CtmConfig c = toy_config();
    c.d_model = 16;
    c.pairing.strategy = PairingStrategy::random;
    c.pairing.d_out = 8;
    c.pairing.d_action = 8;
    c.pairing.n_self = 3;
    auto [out, action] = build_pairs(c, 5);
    REQUIRE(out.size() == 8);
    std::set<std::size_t> selfs;
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(out.pairs[k].i == out.pairs[k].j);
      selfs.insert(out.pairs[k].i);
    }
    CHECK(selfs.size() == 3);
    for (auto p : out.pairs) {
      CHECK(p.i < 16);
      CHECK(p.j < 16);
    }
  }
  SUBCASE("fixed by seed") {
    CtmConfig c = toy_config();
    auto a = build_pairs(c, 9);
    auto b = build_pairs(c, 9);
    CHECK(a.first.pairs == b.first.pairs);
    CHECK(a.second.pairs == b.second.pairs);
  }
  SUBCASE("errors") {
    CtmConfig c = toy_config();
    c.pairing.j_out = 6;  // 6 + 4 > 8
    CHECK_THROWS_AS(build_pairs(c, 0), std::invalid_argument);
    c = toy_config();
    c.pairing.strategy = PairingStrategy::random;
    c.pairing.d_out = 2;
    c.pairing.n_self = 3;
    CHECK_THROWS_AS(build_pairs(c, 0), std::invalid_argument);
  }
}

TEST_CASE("synapse width schedule and shallow form") {
  // D=8, d_obs=4, k=4: input 12, then linear steps 8 -> 16 over k/2 = 2 layers and back.
  std::vector<std::size_t> expect{12, 8};
  for (int i = 1; i <= 2; ++i) expect.push_back(static_cast<std::size_t>(8 + (16 - 8) * i / 2));
  for (int i = 1; i >= 0; --i) expect.push_back(static_cast<std::size_t>(8 + (16 - 8) * i / 2));
  CHECK(SynapseNet::width_schedule(8, 4, 4) == expect);
  CHECK(SynapseNet::width_schedule(8, 4, 4) == std::vector<std::size_t>{12, 8, 12, 16, 12, 8});
  CHECK(SynapseNet::width_schedule(64, 16, 1) == std::vector<std::size_t>{80, 64, 64});
  CHECK_THROWS_AS(SynapseNet::width_schedule(8, 4, 3), std::invalid_argument);

  SUBCASE("k = 1 with zero weights returns the output bias") {
    ParamStore store;
    Rng rng(1);
    SynapseNet net(store, "syn", 5, 3, 1, ad::Activation::silu, 0.0, rng);
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.name(i).find("weight") != std::string::npos) {
        for (auto& v : store.value(i).data) v = 0.0;
      }
    }
    const Tensor bias = store.value(*store.find("syn.layer1.bias"));
    ad::Tape tape(false);
    ParamBinding p(tape, store);
    Rng data(2);
    auto a = net.forward(p, tape.constant(random_tensor({2, 8}, data)), false, nullptr);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 5; ++i) CHECK(a.value()[b * 5 + i] == bias[i]);
  }
  SUBCASE("eval mode ignores dropout and is repeatable") {
    ParamStore store;
    Rng rng(1);
    SynapseNet net(store, "syn", 8, 4, 4, ad::Activation::silu, 0.5, rng);
    CHECK(store.total_count() == SynapseNet::param_count(8, 4, 4));
    Rng data(3);
    const Tensor x = random_tensor({3, 12}, data);
    auto run = [&] {
      ad::Tape tape(false);
      ParamBinding p(tape, store);
      return net.forward(p, tape.constant(x), false, nullptr).value();
    };
    const Tensor r1 = run(), r2 = run();
    CHECK(r1.shape == Shape{3, 8});
    CHECK(std::memcmp(r1.data.data(), r2.data.data(), r1.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("sync_direct examples") {
  const std::vector<NeuronPair> pair{{0, 1}};
  SUBCASE("t = 1 is the plain product") {
    for (double r : {0.0, 0.7, 30.0}) {
      const std::vector<double> decay{r};
      CHECK(sync_direct(Tensor({2, 1}, {1.5, -2.0}), pair, decay)[0] == -3.0);
    }
  }
  const Tensor z({2, 2}, {1, 2, 3, 4});  // z_i = [1, 2], z_j = [3, 4]
  SUBCASE("r = 0") {
    const std::vector<double> decay{0.0};
    CHECK(sync_direct(z, pair, decay)[0] == doctest::Approx((3.0 + 8.0) / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(sync_direct(z, pair, decay)[0] == doctest::Approx(7.77817).epsilon(1e-6));
  }
  SUBCASE("r = 50 keeps only the last tick") {
    const std::vector<double> decay{50.0};
    CHECK(std::abs(sync_direct(z, pair, decay)[0] - 8.0) < 1e-9);
  }
  SUBCASE("errors") {
    const std::vector<double> decay{0.0};
    CHECK_THROWS_AS(sync_direct(Tensor({2, 0}), pair, decay), std::invalid_argument);
    const std::vector<double> negative{-1.0};
    CHECK_THROWS_AS(sync_direct(z, pair, negative), std::invalid_argument);
  }
}

TEST_CASE("sync_recursive_step examples") {
  auto s1 = sync_recursive_step(0.0, 0.0, 1.0, 3.0, 0.0);
  CHECK(s1.alpha == 3.0);
  CHECK(s1.beta == 1.0);
  CHECK(s1.value == 3.0);
  auto s2 = sync_recursive_step(s1.alpha, s1.beta, 2.0, 4.0, 0.0);
  CHECK(s2.alpha == 11.0);
  CHECK(s2.beta == 2.0);
  CHECK(s2.value == doctest::Approx(11.0 / std::sqrt(2.0)).epsilon(1e-15));
  const std::vector<NeuronPair> pair{{0, 1}};
  const std::vector<double> zero{0.0};
  CHECK(std::abs(s2.value - sync_direct(Tensor({2, 2}, {1, 2, 3, 4}), pair, zero)[0]) < 1e-12);

  auto big = sync_recursive_step(3.0, 1.0, 2.0, 4.0, 50.0);
  CHECK(std::abs(big.value - 8.0) < 1e-9);
  CHECK_THROWS_AS(sync_recursive_step(0.0, -1.0, 1.0, 1.0, 0.0), std::logic_error);
}

TEST_CASE("recursive synchronization equals the direct form") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.index(16);
    const std::size_t t = 1 + rng.index(50);
    const Tensor z = random_tensor({d, t}, rng, -2.0, 2.0);
    std::vector<NeuronPair> pairs;
    std::vector<double> decays;
    for (int k = 0; k < 6; ++k) {
      pairs.push_back({rng.index(d), rng.index(d)});
      decays.push_back(rng.uniform(0.0, 5.0));
    }
    const auto direct = sync_direct(z, pairs, decays);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      double alpha = 0.0, beta = 0.0, s = 0.0;
      for (std::size_t tau = 0; tau < t; ++tau) {
        auto step = sync_recursive_step(alpha, beta, z[pairs[k].i * t + tau],
                                        z[pairs[k].j * t + tau], decays[k]);
        alpha = step.alpha;
        beta = step.beta;
        s = step.value;
        CHECK(beta > 0.0);
      }
      worst = std::max(worst, std::abs(s - direct[k]));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("synchronization properties") {
  Rng rng(77);
  SUBCASE("r = 0 reduces to the scaled inner product") {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t t = 1 + rng.index(20);
      const Tensor z = random_tensor({2, t}, rng);
      double dot = 0.0;
      for (std::size_t k = 0; k < t; ++k) dot += z[k] * z[t + k];
      const std::vector<NeuronPair> pair{{0, 1}};
      const std::vector<double> zero{0.0};
      CHECK(sync_direct(z, pair, zero)[0] ==
            doctest::Approx(dot / std::sqrt(static_cast<double>(t))).epsilon(1e-13));
    }
  }
  SUBCASE("self pairs without decay are nonnegative") {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t t = 1 + rng.index(20);
      const Tensor z = random_tensor({1, t}, rng, -3, 3);
      const std::vector<NeuronPair> pair{{0, 0}};
      const std::vector<double> zero{0.0};
      CHECK(sync_direct(z, pair, zero)[0] >= 0.0);
    }
  }
  SUBCASE("larger decay moves S toward the latest product") {
    // Products nonincreasing in time and ending at a nonnegative value.
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t t = 2 + rng.index(10);
      Tensor z({2, t});
      double prod = rng.uniform(2.0, 4.0);
      for (std::size_t k = 0; k < t; ++k) {
        z[k] = 1.0;
        z[t + k] = prod;
        prod = std::max(0.0, prod - rng.uniform(0.0, 0.5));
      }
      const double last = z[t + t - 1];
      const std::vector<NeuronPair> pair{{0, 1}};
      double prev = std::numeric_limits<double>::infinity();
      for (double r = 0.0; r <= 6.0; r += 0.25) {
        const std::vector<double> decay{r};
        const double gap = std::abs(sync_direct(z, pair, decay)[0] - last);
        CHECK(gap <= prev + 1e-15);
        prev = gap;
      }
    }
  }
}

TEST_CASE("pre-activation FIFO keeps the M most recent entries") {
  const std::size_t d = 3, m = 4;
  ad::Tape tape(false);
  auto hist = tape.constant(Tensor({1, d, m}, -1.0));
  for (std::size_t step = 0; step < m + 3; ++step) {
    Tensor a({1, d});
    for (std::size_t i = 0; i < d; ++i) a[i] = static_cast<double>(10 * step + i);
    hist = CtmModel::push_history(hist, tape.constant(a));
  }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < m; ++k)
      CHECK(hist.value()[i * m + k] == static_cast<double>(10 * (k + 3) + i));
}

TEST_CASE("cross attention core") {
  SUBCASE("single location returns that value with weight 1") {
    ad::Tape tape(false);
    Rng rng(1);
    auto q = tape.constant(random_tensor({4}, rng));
    auto k = tape.constant(random_tensor({1, 4}, rng));
    const Tensor v = random_tensor({1, 6}, rng);
    auto res = cross_attention(q, k, tape.constant(v), 2);
    for (std::size_t i = 0; i < 6; ++i) CHECK(res.output.value()[i] == doctest::Approx(v[i]).epsilon(1e-15));
    CHECK(res.weights.value().data == std::vector<double>{1.0, 1.0});
  }
  SUBCASE("identical keys give uniform weights") {
    ad::Tape tape(false);
    Rng rng(2);
    Tensor keys({5, 4});
    const Tensor row = random_tensor({4}, rng);
    for (std::size_t l = 0; l < 5; ++l)
      for (std::size_t c = 0; c < 4; ++c) keys[l * 4 + c] = row[c];
    auto res = cross_attention(tape.constant(random_tensor({4}, rng)), tape.constant(keys),
                               tape.constant(random_tensor({5, 4}, rng)), 2);
    for (double w : res.weights.value().data) CHECK(w == doctest::Approx(0.2).epsilon(1e-14));
  }
  SUBCASE("matches a hand-rolled single-head loop") {
    Rng rng(3);
    const Tensor q = random_tensor({4}, rng), k = random_tensor({3, 4}, rng),
                 v = random_tensor({3, 5}, rng);
    double score[3], mx = -1e300, z = 0.0;
    for (int l = 0; l < 3; ++l) {
      score[l] = 0.0;
      for (int c = 0; c < 4; ++c) score[l] += q[c] * k[l * 4 + c];
      score[l] /= 2.0;  // sqrt(4)
      mx = std::max(mx, score[l]);
    }
    for (double& s : score) z += (s = std::exp(s - mx));
    ad::Tape tape(false);
    auto res = cross_attention(tape.constant(q), tape.constant(k), tape.constant(v), 1);
    for (int l = 0; l < 3; ++l) CHECK(std::abs(res.weights.value()[l] - score[l] / z) < 1e-12);
    for (int c = 0; c < 5; ++c) {
      double o = 0.0;
      for (int l = 0; l < 3; ++l) o += score[l] / z * v[l * 5 + c];
      CHECK(std::abs(res.output.value()[c] - o) < 1e-12);
    }
  }
  SUBCASE("heads must divide the widths") {
    ad::Tape tape(false);
    CHECK_THROWS_AS(cross_attention(tape.constant(Tensor({6}, 0.0)), tape.constant(Tensor({2, 6}, 0.0)),
                                    tape.constant(Tensor({2, 6}, 0.0)), 4),
                    std::invalid_argument);
  }
  SUBCASE("batched module agrees with the core on projected inputs") {
    ParamStore store;
    Rng rng(4);
    CrossAttention attn(store, "attn", 6, 8, 2, rng);
    const Tensor feats = random_tensor({2, 5, 6}, rng), q = random_tensor({2, 8}, rng);
    ad::Tape tape(false);
    ParamBinding p(tape, store);
    auto mem = attn.prepare(p, tape.constant(feats));
    auto res = attn.attend(p, tape.constant(q), mem);
    for (std::size_t b = 0; b < 2; ++b) {
      double total[2] = {0, 0};
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t l = 0; l < 5; ++l) total[h] += res.weights.value()[(b * 2 + h) * 5 + l];
      CHECK(std::abs(total[0] - 1.0) < 1e-12);
      CHECK(std::abs(total[1] - 1.0) < 1e-12);
    }
    // Per-sample recomputation through the unbatched core.
    auto keys = ad::matmul(tape.constant(feats), p(*store.find("attn.key.weight")));
    keys = ad::add(keys, p(*store.find("attn.key.bias")));
    auto vals = ad::add(ad::matmul(tape.constant(feats), p(*store.find("attn.value.weight"))),
                        p(*store.find("attn.value.bias")));
    for (std::size_t b = 0; b < 2; ++b) {
      auto kb = ad::reshape(ad::slice(keys, 0, b, b + 1), {5, 8});
      auto vb = ad::reshape(ad::slice(vals, 0, b, b + 1), {5, 8});
      auto qb = ad::reshape(ad::slice(tape.constant(q), 0, b, b + 1), {8});
      auto core = cross_attention(qb, kb, vb, 2);
      for (std::size_t i = 0; i < 10; ++i)
        CHECK(std::abs(core.weights.value()[i] - res.weights.value()[b * 10 + i]) < 1e-12);
    }
  }
}

TEST_CASE("ctm forward contract") {
  CtmConfig cfg = toy_config();
  const Tensor x = parity_inputs(3, 4, 5);
  SUBCASE("T = 1 emits one output and one attention map") {
    cfg.ticks = 1;
    CtmModel model(cfg, 1);
    ad::Tape tape(false);
    ParamBinding p(tape, model.params());
    auto out = model.forward(p, x, {.trace = true});
    CHECK(out.logits.size() == 1);
    CHECK(out.attention.size() == 1);
    CHECK(out.attention[0].shape == Shape{3, 2, 4});
  }
  SUBCASE("trace length equals T and attention rows are distributions") {
    cfg.ticks = 5;
    CtmModel model(cfg, 2);
    ad::Tape tape(false);
    ParamBinding p(tape, model.params());
    auto out = model.forward(p, x, {.trace = true});
    CHECK(out.logits.size() == 5);
    for (const auto& y : out.logits) CHECK(y.shape() == Shape{3, 4, 2});
    for (const auto& w : out.attention) {
      for (std::size_t r = 0; r < 3 * 2; ++r) {
        double s = 0.0;
        for (std::size_t l = 0; l < 4; ++l) s += w[r * 4 + l];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("eval forward is bit-identical across calls") {
    cfg.p_dropout = 0.3;
    CtmModel model(cfg, 3);
    auto run = [&] {
      ad::Tape tape(false);
      ParamBinding p(tape, model.params());
      return model.forward(p, x, {}).logits.back().value();
    };
    const Tensor a = run(), b = run();
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(double)) == 0);
  }
  SUBCASE("trace synchronization equals the direct form over recorded z") {
    cfg.ticks = 6;
    CtmModel model(cfg, 4);
    randomize_decays(model, 8);
    ad::Tape tape(false);
    ParamBinding p(tape, model.params());
    auto out = model.forward(p, x, {.trace = true});
    const auto& pairs = model.out_pairs().pairs;
    const Tensor& raw = model.params().value(*model.params().find("decay.out"));
    std::vector<double> decays(raw.data);
    for (auto& r : decays) r = std::max(r, 0.0);
    const std::size_t d = cfg.d_model;
    for (std::size_t t = 0; t < cfg.ticks; ++t) {
      for (std::size_t b = 0; b < 3; ++b) {
        // Output synchronization covers the states produced by ticks 1..t+1.
        Tensor hist({d, t + 1});
        for (std::size_t tau = 0; tau <= t; ++tau)
          for (std::size_t i = 0; i < d; ++i) hist[i * (t + 1) + tau] = out.post_activations[tau][b * d + i];
        const auto direct = sync_direct(hist, pairs, decays);
        for (std::size_t k = 0; k < pairs.size(); ++k)
          CHECK(std::abs(direct[k] - out.sync_out[t][b * pairs.size() + k]) < 1e-9);
      }
    }
  }
  SUBCASE("non-finite activations abort with a diagnostic") {
    CtmModel model(cfg, 5);
    model.params().value(*model.params().find("nlm.b2"))[0] = std::nan("");
    ad::Tape tape(false);
    ParamBinding p(tape, model.params());
    CHECK_THROWS_AS(model.forward(p, x, {}), NumericError);
  }
  SUBCASE("tick overflow") {
    CtmModel model(cfg, 6);
    ad::Tape tape(false);
    ParamBinding p(tape, model.params());
    auto obs = model.observe(p, x);
    auto state = model.initial_state(p, 3);
    for (std::size_t t = 0; t < cfg.ticks; ++t) model.tick(p, state, obs, {});
    CHECK_THROWS_AS(model.tick(p, state, obs, {}), std::logic_error);
  }
  SUBCASE("analytic parameter count matches the enumerated tensors") {
    for (auto variant : {CtmVariant::standard, CtmVariant::no_nlm, CtmVariant::no_sync}) {
      for (std::size_t k : {1u, 2u, 4u}) {
        CtmConfig c = toy_config();
        c.variant = variant;
        c.synapse_depth = k;
        CtmModel model(c, 7);
        CHECK(model.params().total_count() == CtmModel::param_count(c));
      }
    }
  }
}

TEST_CASE("single-location attention in the model passes the value through") {
  // n_heads = 1, L = 1: attention weights are exactly 1 for any query.
  CtmConfig cfg = toy_config();
  cfg.n_heads = 1;
  cfg.backbone.sequence_length = 1;
  cfg.out_positions = 1;
  CtmModel model(cfg, 2);
  ad::Tape tape(false);
  ParamBinding p(tape, model.params());
  auto out = model.forward(p, parity_inputs(2, 1, 1), {.trace = true});
  for (const auto& w : out.attention)
    for (double v : w.data) CHECK(v == 1.0);
}

TEST_CASE("full tick gradients match finite differences") {
  CtmConfig cfg = toy_config();  // D=8, M=3, dense J=4
  SUBCASE("single tick") {
    cfg.ticks = 1;
    CtmModel model(cfg, 11);
    randomize_decays(model, 3);
    auto res = ctm::testing::model_gradcheck(model, parity_inputs(2, 4, 3),
                                             ctm::testing::weighted_logit_sum);
    INFO(res.result.worst);
    CHECK(res.result.failed == 0);
  }
  SUBCASE("T = 3 with U-Net synapses") {
    cfg.synapse_depth = 2;
    CtmModel model(cfg, 12);
    randomize_decays(model, 4);
    auto res = ctm::testing::model_gradcheck(model, parity_inputs(2, 4, 4),
                                             ctm::testing::weighted_logit_sum);
    INFO(res.result.worst);
    CHECK(res.result.failed == 0);
    CHECK(res.params_checked == model.params().size());
  }
}
