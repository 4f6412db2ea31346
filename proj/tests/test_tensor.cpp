#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "ipt/optim.hpp"
#include "ipt/rng.hpp"
#include "ipt/tensor.hpp"

using namespace ipt;

namespace {

// Scalar probe: weighted sum of an op output, so every output coordinate
// contributes to the checked gradient.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

Tensor random_weights(const Shape& shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(shape, rng, 1.0);
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS(Tensor({2, 3}, {1.0, 2.0}));
  Tensor t({2, 2}, {1, 2, 3, 4}, true);
  CHECK(t.size() == 4);
  CHECK_FALSE(t.has_grad());
  t.grad_buffer();
  CHECK(t.grad().size() == t.values().size());
}

TEST_CASE("softmax examples") {
  Tensor a = softmax(Tensor({1, 2}, {0.0, 0.0}));
  CHECK(a.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(a.data()[1] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor b = softmax(Tensor({1, 2}, {0.0, std::log(3.0)}));
  CHECK(b.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(b.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  // shift invariance at c = 1e6 (dyadic entries so the shift is exact)
  Tensor x({1, 3}, {0.25, -1.5, 2.0});
  Tensor shifted({1, 3}, {0.25 + 1e6, -1.5 + 1e6, 2.0 + 1e6});
  Tensor sx = softmax(x), ss = softmax(shifted);
  for (int i = 0; i < 3; ++i) CHECK(sx.data()[i] == doctest::Approx(ss.data()[i]).epsilon(1e-12));

  // rows nonnegative, sum to 1 +- 1e-12
  Rng rng(7);
  Tensor r = Tensor::randn({5, 9}, rng, 3.0);
  Tensor sr = softmax(r);
  for (int64_t row = 0; row < 5; ++row) {
    double s = 0.0;
    for (int64_t c = 0; c < 9; ++c) {
      CHECK(sr.data()[row * 9 + c] >= 0.0);
      s += sr.data()[row * 9 + c];
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  CHECK_THROWS_WITH_AS(softmax(Tensor({1, 2}, {std::nan(""), 0.0})),
                       "softmax: non-finite logits", std::invalid_argument);
}

TEST_CASE("cross entropy examples") {
  // uniform logits, C=4 -> ln 4
  Tensor u = cross_entropy(Tensor({1, 4}, {0.7, 0.7, 0.7, 0.7}), {2});
  CHECK(u.item() == doctest::Approx(1.3862943611198906).epsilon(1e-12));

  // saturated correct class -> ~0
  Tensor s = cross_entropy(Tensor({1, 2}, {1e3, -1e3}), {0});
  CHECK(s.item() >= 0.0);
  CHECK(s.item() < 1e-12);

  // frozen scalar oracle: -log(e^2 / (e^1 + e^2 + e^0.5))
  Tensor d = cross_entropy(Tensor({1, 3}, {1.0, 2.0, 0.5}), {1});
  CHECK(d.item() == doctest::Approx(0.46436878410794484).epsilon(1e-14));

  // mean over batch
  Tensor m = cross_entropy(Tensor({2, 2}, {0.0, 0.0, 0.0, 0.0}), {0, 1});
  CHECK(m.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS(cross_entropy(Tensor({1, 3}, {0, 0, 0}), {3}));
  CHECK_THROWS(cross_entropy(Tensor({1, 3}, {0, 0, 0}), {-1}));

  // CE >= 0, equality only at probability 1
  Rng rng(3);
  Tensor r = Tensor::randn({4, 6}, rng, 2.0);
  CHECK(cross_entropy(r, {0, 1, 2, 3}).item() > 0.0);
}

TEST_CASE("backward basics") {
  SUBCASE("sum of squares") {
    Tensor x({1, 2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-14));
  }
  SUBCASE("cross entropy gradient is p - y") {
    Tensor logits({1, 2}, {0.0, 0.0}, true);
    Tape tape;
    Tensor loss = cross_entropy(logits, {0});
    tape.backward(loss);
    CHECK(logits.grad()[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(logits.grad()[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("backward on non-scalar fails") {
    Tensor x({1, 2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS(tape.backward(y));
  }
  SUBCASE("double backward fails") {
    Tensor x({1, 2}, {1.0, 2.0}, true);
    Tape tape;
    Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK_THROWS(tape.backward(loss));
  }
  SUBCASE("requires_grad=false never accumulates") {
    Tensor x({1, 2}, {1.0, 2.0}, false);
    Tensor w({1, 2}, {3.0, 4.0}, true);
    Tape tape;
    Tensor loss = sum(mul(x, w));
    tape.backward(loss);
    CHECK_FALSE(x.has_grad());
    CHECK(w.has_grad());
  }
}

TEST_CASE("two layer mlp matches finite differences") {
  Rng rng(11);
  Tensor x = Tensor::randn({2, 4}, rng, 1.0);
  Tensor w1 = Tensor::randn({4, 8}, rng, 0.7);
  Tensor w2 = Tensor::randn({8, 3}, rng, 0.7);
  const std::vector<int64_t> targets = {1, 2};

  auto loss_wrt = [&](Tensor* slot) {
    return [&, slot](const Tensor& p) {
      Tensor saved = *slot;
      *slot = p;
      Tensor out = cross_entropy(matmul(ipt::tanh(matmul(x, w1)), w2), targets);
      *slot = saved;
      return out;
    };
  };
  CHECK(finite_diff_check(loss_wrt(&w1), w1) < 1e-6);
  CHECK(finite_diff_check(loss_wrt(&w2), w2) < 1e-6);
  CHECK(finite_diff_check(loss_wrt(&x), x) < 1e-6);
}

TEST_CASE("finite_diff_check contract") {
  // exact quadratic
  Tensor p({1, 3}, {0.5, -1.0, 2.0});
  double err = finite_diff_check([](const Tensor& t) { return sum(mul(t, t)); }, p);
  CHECK(err < 1e-9);

  // non-finite output reported, not thrown
  double bad = finite_diff_check(
      [](const Tensor& t) { return scale(sum(t), std::numeric_limits<double>::infinity()); }, p);
  CHECK(std::isinf(bad));
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(23);
  auto check = [&](const char* name, const std::function<Tensor(const Tensor&)>& f,
                   const Tensor& point, double tol = 1e-6) {
    INFO(name);
    CHECK(finite_diff_check(f, point) < tol);
  };

  Tensor a = Tensor::randn({3, 4}, rng, 1.0);
  Tensor b = Tensor::randn({3, 4}, rng, 1.0);
  Tensor wsum = random_weights({3, 4}, 101);

  check("add", [&](const Tensor& p) { return probe(add(p, b), wsum); }, a);
  check("sub", [&](const Tensor& p) { return probe(sub(b, p), wsum); }, a);
  check("mul", [&](const Tensor& p) { return probe(mul(p, b), wsum); }, a);
  check("scale", [&](const Tensor& p) { return probe(scale(p, -2.5), wsum); }, a);
  check("add_rows.a", [&](const Tensor& p) { return probe(add_rows(p, slice_rows(b, 0, 1)), wsum); }, a);
  check("add_rows.row", [&](const Tensor& p) { return probe(add_rows(a, p), wsum); },
        Tensor::randn({1, 4}, rng, 1.0));

  Tensor m1 = Tensor::randn({3, 5}, rng, 1.0);
  Tensor m2 = Tensor::randn({5, 2}, rng, 1.0);
  Tensor wmm = random_weights({3, 2}, 102);
  check("matmul.lhs", [&](const Tensor& p) { return probe(matmul(p, m2), wmm); }, m1);
  check("matmul.rhs", [&](const Tensor& p) { return probe(matmul(m1, p), wmm); }, m2);
  check("transpose", [&](const Tensor& p) { return probe(transpose(p), random_weights({4, 3}, 103)); }, a);

  // gather with duplicate ids accumulates
  Tensor table = Tensor::randn({6, 3}, rng, 1.0);
  const std::vector<int64_t> dup_ids = {2, 4, 2, 0};
  check("gather_rows", [&](const Tensor& p) { return probe(gather_rows(p, dup_ids), random_weights({4, 3}, 104)); }, table);
  check("select_columns", [&](const Tensor& p) { return probe(select_columns(p, {0, 2, 2}), random_weights({3, 3}, 105)); }, a);
  check("slice_rows", [&](const Tensor& p) { return probe(slice_rows(p, 1, 3), random_weights({2, 4}, 106)); }, a);
  check("slice_cols", [&](const Tensor& p) { return probe(slice_cols(p, 1, 4), random_weights({3, 3}, 107)); }, a);
  check("concat_rows", [&](const Tensor& p) { return probe(concat_rows({p, b}), random_weights({6, 4}, 108)); }, a);
  check("concat_cols", [&](const Tensor& p) { return probe(concat_cols({p, b}), random_weights({3, 8}, 109)); }, a);

  Tensor gain = Tensor::randn({1, 4}, rng, 0.5);
  Tensor bias = Tensor::randn({1, 4}, rng, 0.5);
  check("layer_norm.x", [&](const Tensor& p) { return probe(layer_norm(p, gain, bias), wsum); }, a, 1e-5);
  check("layer_norm.gain", [&](const Tensor& p) { return probe(layer_norm(a, p, bias), wsum); }, gain);
  check("layer_norm.bias", [&](const Tensor& p) { return probe(layer_norm(a, gain, p), wsum); }, bias);

  // keep activation inputs away from kinks
  Tensor act({2, 3}, {0.7, -1.3, 2.1, -0.4, 1.9, -2.6});
  Tensor wact = random_weights({2, 3}, 110);
  check("relu", [&](const Tensor& p) { return probe(relu(p), wact); }, act);
  check("gelu", [&](const Tensor& p) { return probe(gelu(p), wact); }, act);
  check("sigmoid", [&](const Tensor& p) { return probe(sigmoid(p), wact); }, act);
  check("tanh", [&](const Tensor& p) { return probe(ipt::tanh(p), wact); }, act);

  Tensor cx = Tensor::randn({7, 3}, rng, 1.0);
  Tensor cw = Tensor::randn({2, 3, 3}, rng, 0.8);
  Tensor cb = Tensor::randn({1, 2}, rng, 0.5);
  Tensor wconv = random_weights({7, 2}, 111);
  check("conv1d.x", [&](const Tensor& p) { return probe(conv1d(p, cw, cb, 1), wconv); }, cx);
  check("conv1d.w", [&](const Tensor& p) { return probe(conv1d(cx, p, cb, 1), wconv); }, cw);
  check("conv1d.b", [&](const Tensor& p) { return probe(conv1d(cx, cw, p, 1), wconv); }, cb);

  check("maxpool1d", [&](const Tensor& p) { return probe(maxpool1d(p, 2, 2), random_weights({4, 3}, 112)); }, cx);
  check("adaptive_maxpool1d", [&](const Tensor& p) { return probe(adaptive_maxpool1d(p, 4), random_weights({4, 3}, 113)); }, cx);
  check("adaptive_maxpool1d.expand", [&](const Tensor& p) { return probe(adaptive_maxpool1d(p, 5), random_weights({5, 4}, 114)); },
        Tensor::randn({2, 4}, rng, 1.0));

  check("softmax", [&](const Tensor& p) { return probe(softmax(p), wsum); }, a, 1e-5);
  check("log_softmax", [&](const Tensor& p) { return probe(log_softmax(p), wsum); }, a, 1e-5);
  check("cross_entropy", [&](const Tensor& p) { return cross_entropy(p, {1, 0, 3}); }, a, 1e-5);

  check("sum", [&](const Tensor& p) { return sum(p); }, a);
  check("mean", [&](const Tensor& p) { return mean(p); }, a);
  check("mean_rows", [&](const Tensor& p) { return probe(mean_rows(p), random_weights({1, 4}, 115)); }, a);

  // LSTM cell: check every weight and the input
  Tensor lx = Tensor::randn({1, 3}, rng, 1.0);
  Tensor lh = Tensor::randn({1, 2}, rng, 0.5);
  Tensor lc = Tensor::randn({1, 2}, rng, 0.5);
  Tensor wih = Tensor::randn({3, 8}, rng, 0.6);
  Tensor whh = Tensor::randn({2, 8}, rng, 0.6);
  Tensor lb = Tensor::randn({1, 8}, rng, 0.4);
  Tensor wlstm = random_weights({1, 2}, 116);
  auto lstm_probe = [&](const Tensor& x_, const Tensor& wih_, const Tensor& whh_, const Tensor& b_) {
    LstmState s = lstm_cell(x_, {lh, lc}, wih_, whh_, b_);
    return add(probe(s.h, wlstm), probe(s.c, random_weights({1, 2}, 117)));
  };
  check("lstm.x", [&](const Tensor& p) { return lstm_probe(p, wih, whh, lb); }, lx);
  check("lstm.w_ih", [&](const Tensor& p) { return lstm_probe(lx, p, whh, lb); }, wih);
  check("lstm.w_hh", [&](const Tensor& p) { return lstm_probe(lx, wih, p, lb); }, whh);
  check("lstm.b", [&](const Tensor& p) { return lstm_probe(lx, wih, whh, p); }, lb);
}

TEST_CASE("frozen parameters pass gradients through unchanged") {
  Rng rng(5);
  Tensor x = Tensor::randn({2, 3}, rng, 1.0, true);
  Tensor w = Tensor::randn({3, 4}, rng, 1.0, true);
  Tensor v = Tensor::randn({4, 2}, rng, 1.0, true);

  auto grad_x = [&](bool freeze_w) {
    x.zero_grad();
    w.zero_grad();
    v.zero_grad();
    w.set_frozen(freeze_w);
    Tape tape;
    Tensor loss = cross_entropy(matmul(matmul(x, w), v), {0, 1});
    tape.backward(loss);
    return x.grad();
  };
  const auto g_unfrozen = grad_x(false);
  const auto g_frozen = grad_x(true);
  REQUIRE(g_unfrozen.size() == g_frozen.size());
  for (size_t i = 0; i < g_unfrozen.size(); ++i) CHECK(g_unfrozen[i] == g_frozen[i]);
  // the frozen parameter still receives its own gradient
  CHECK(w.has_grad());
}

TEST_CASE("adam optimizer") {
  SUBCASE("first step moves by -lr * sign(g)") {
    Tensor t({1, 3}, {1.0, 2.0, 3.0}, true);
    Parameter p{"p", t};
    t.grad_buffer() = {0.5, -2.0, 1e-3};
    Adam opt({p}, {.lr = 0.1, .warmup_steps = 0});
    opt.step();
    CHECK(t.data()[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
    CHECK(t.data()[1] == doctest::Approx(2.0 + 0.1).epsilon(1e-6));
    CHECK(t.data()[2] == doctest::Approx(3.0 - 0.1).epsilon(1e-4));
  }
  SUBCASE("frozen parameter is bit-identical after steps") {
    Tensor t({1, 2}, {1.5, -0.5}, true);
    t.set_frozen(true);
    Parameter p{"frozen", t};
    Adam opt({p}, {.lr = 0.5});
    for (int s = 0; s < 3; ++s) {
      t.grad_buffer()[0] = 1.0;
      t.grad_buffer()[1] = -4.0;
      opt.step();
    }
    CHECK(t.data()[0] == 1.5);
    CHECK(t.data()[1] == -0.5);
  }
  SUBCASE("linear warmup ramp") {
    Tensor t({1, 1}, {0.0}, true);
    Parameter p{"p", t};
    Adam opt({p}, {.lr = 1.0, .warmup_steps = 10});
    CHECK(opt.effective_lr(1) == doctest::Approx(0.1));
    CHECK(opt.effective_lr(5) == doctest::Approx(0.5));
    CHECK(opt.effective_lr(10) == doctest::Approx(1.0));
    CHECK(opt.effective_lr(50) == doctest::Approx(1.0));
    t.grad_buffer() = {2.0};
    opt.step();  // step 1: |delta| = eff_lr ~ 0.1
    CHECK(std::abs(t.data()[0]) == doctest::Approx(0.1).epsilon(1e-6));
  }
  SUBCASE("invalid lr") {
    Tensor t({1, 1}, {0.0}, true);
    CHECK_THROWS(Adam({Parameter{"p", t}}, {.lr = 0.0}));
    CHECK_THROWS(Adam({Parameter{"p", t}}, {.lr = -1.0}));
  }
}

TEST_CASE("determinism under identical seeds") {
  auto run = [] {
    Rng rng(42);
    Tensor x = Tensor::randn({4, 4}, rng, 1.0, true);
    Tensor w = Tensor::randn({4, 4}, rng, 1.0, true);
    Parameter p{"w", w};
    Adam opt({p}, {.lr = 0.01});
    for (int s = 0; s < 5; ++s) {
      Tape tape;
      Tensor loss = cross_entropy(matmul(x, w), {0, 1, 2, 3});
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
    return w.values();
  };
  const auto r1 = run();
  const auto r2 = run();
  REQUIRE(r1.size() == r2.size());
  for (size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}
