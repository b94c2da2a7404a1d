#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "disjoint/nn.hpp"
#include "disjoint/ops.hpp"
#include "oracles.hpp"

using namespace disjoint;
using D = double;
using Ctx = Context<double>;
using V = Var<double>;

namespace {

Tensor<double> grad_of(const std::function<V(Ctx&, V)>& f, const Tensor<double>& x) {
  Ctx ctx;
  V xv = ctx.leaf(x);
  V loss = f(ctx, xv);
  return grad(loss, {xv})[0].value();
}

// FD check of sum(op(x) * r) so every output element carries weight.
void check_first_order(const char* what, const std::function<V(Ctx&, V)>& op,
                       const Tensor<double>& x, uint64_t seed, double tol = 1e-4) {
  Tensor<double> r;
  {
    Ctx probe;
    V y = op(probe, probe.constant(x));
    RngStream rng(seed);
    r = oracle::random_tensor(y.value().shape, rng, 0.1, 1.0);
  }
  auto weighted = [&](Ctx& ctx, V xv) { return sum_all(mul(op(ctx, xv), ctx.constant(r))); };
  Tensor<double> got = grad_of(weighted, x);
  Tensor<double> want = oracle::finite_diff(
      [&](const Tensor<double>& xt) {
        Ctx ctx;
        return weighted(ctx, ctx.leaf(xt)).value().item();
      },
      x);
  INFO(std::string(what));
  CHECK(oracle::max_rel_err(got, want) < tol);
}

}  // namespace

TEST_CASE("primitive forward values") {
  Ctx ctx;
  CHECK(tanh_(ctx.leaf(Tensor<D>::scalar(0))).value().item() == 0.0);
  CHECK(relu(ctx.leaf(Tensor<D>::scalar(-2.5))).value().item() == 0.0);
  CHECK(relu(ctx.leaf(Tensor<D>::scalar(3))).value().item() == 3.0);
  CHECK(sign_(ctx.leaf(make_tensor<D>({3}, {-0.2, 0.0, 5.0}))).value().v[0] == -1.0);
  CHECK(sign_(ctx.leaf(make_tensor<D>({3}, {-0.2, 0.0, 5.0}))).value().v[1] == 0.0);
  CHECK(clamp_(ctx.leaf(Tensor<D>::scalar(1.7)), 0.0, 1.0).value().item() == 1.0);
  CHECK(max_with(ctx.leaf(Tensor<D>::scalar(-0.3)), 0.0).value().item() == 0.0);
}

TEST_CASE("matmul matches the brute-force triple loop") {
  RngStream rng(11);
  Tensor<D> a = Tensor<D>::zeros({2, 3});
  Tensor<D> b = Tensor<D>::zeros({3, 4});
  for (Index i = 0; i < a.size(); ++i) a.v[i] = std::floor(rng.uniform(-5, 5));
  for (Index i = 0; i < b.size(); ++i) b.v[i] = std::floor(rng.uniform(-5, 5));
  Ctx ctx;
  Tensor<D> got = matmul(ctx.constant(a), ctx.constant(b)).value();
  Tensor<D> want = oracle::matmul_ref(a, b);
  CHECK(got.shape == Shape{2, 4});
  CHECK((got.v == want.v).all());
}

TEST_CASE("matmul shape mismatch names the primitive and both shapes") {
  Ctx ctx;
  V a = ctx.constant(Tensor<D>::zeros({2, 3}));
  V b = ctx.constant(Tensor<D>::zeros({4, 2}));
  CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: inner dimensions differ, [2x3] vs [4x2]", ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("cross entropy examples") {
  SUBCASE("uniform logits over 10 classes give ln 10") {
    Ctx ctx;
    V z = ctx.constant(Tensor<D>::full({3, 10}, 0.7));
    V ce = cross_entropy(z, {1, 5, 9});
    CHECK(ce.value().item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  }
  SUBCASE("dominant correct logit drives the loss to zero") {
    Tensor<D> z = Tensor<D>::zeros({1, 10});
    z.v[3] = 60.0;
    Ctx ctx;
    CHECK(cross_entropy(ctx.constant(z), {3}).value().item() < 1e-12);
  }
  SUBCASE("random 4x3 logits match the direct formula") {
    RngStream rng(7);
    Tensor<D> z = oracle::random_tensor({4, 3}, rng, -2, 2);
    std::vector<int> y{0, 2, 1, 2};
    Ctx ctx;
    CHECK(cross_entropy(ctx.constant(z), y).value().item() ==
          doctest::Approx(oracle::cross_entropy_ref(z, y)).epsilon(1e-12));
  }
  SUBCASE("label out of range is rejected") {
    Ctx ctx;
    CHECK_THROWS_AS(cross_entropy(ctx.constant(Tensor<D>::zeros({2, 3})), {0, 3}), ValueError);
  }
  SUBCASE("gradient rows sum to zero (softmax minus one-hot)") {
    RngStream rng(8);
    Tensor<D> z = oracle::random_tensor({5, 4}, rng, -3, 3);
    Ctx ctx;
    V zv = ctx.leaf(z);
    Tensor<D> g = grad(cross_entropy(zv, {0, 1, 2, 3, 0}), {zv})[0].value();
    for (Index i = 0; i < 5; ++i) {
      double row = 0;
      for (Index j = 0; j < 4; ++j) row += g.v[i * 4 + j];
      CHECK(std::abs(row) < 1e-12);
    }
  }
}

TEST_CASE("grad of x^2 at 3 is 6") {
  Ctx ctx;
  V x = ctx.leaf(Tensor<D>::scalar(3));
  V loss = square(x);
  CHECK(grad(loss, {x})[0].value().item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("first-order finite differences across primitives") {
  RngStream rng(42);
  Tensor<D> x23 = oracle::random_tensor({2, 3}, rng);
  Tensor<D> x23b = oracle::random_tensor({2, 3}, rng);
  Tensor<D> safe = oracle::random_tensor_away_from({2, 3}, rng, 0.05);
  Tensor<D> pos = oracle::random_tensor({2, 3}, rng, 0.3, 2.0);

  check_first_order("add", [&](Ctx& c, V x) { return add(x, c.constant(x23b)); }, x23, 1);
  check_first_order("sub", [&](Ctx& c, V x) { return sub(c.constant(x23b), x); }, x23, 2);
  check_first_order("mul", [&](Ctx& c, V x) { return mul(x, c.constant(x23b)); }, x23, 3);
  check_first_order("div", [&](Ctx& c, V x) { return div(c.constant(x23b), x); }, pos, 4);
  check_first_order("neg", [](Ctx&, V x) { return neg(x); }, x23, 5);
  check_first_order("relu", [](Ctx&, V x) { return relu(x); }, safe, 6);
  check_first_order("tanh", [](Ctx&, V x) { return tanh_(x); }, x23, 7);
  check_first_order("exp", [](Ctx&, V x) { return exp_(x); }, x23, 8);
  check_first_order("log", [](Ctx&, V x) { return log_(x); }, pos, 9);
  check_first_order("sqrt", [](Ctx&, V x) { return sqrt_(x); }, pos, 10);
  check_first_order("square", [](Ctx&, V x) { return square(x); }, x23, 11);
  check_first_order("abs", [](Ctx&, V x) { return abs_(x); }, safe, 12);
  check_first_order("add_scalar", [](Ctx&, V x) { return add_scalar(x, 0.31); }, x23, 13);
  check_first_order("mul_scalar", [](Ctx&, V x) { return mul_scalar(x, -1.7); }, x23, 14);
  check_first_order("max_with", [](Ctx&, V x) { return max_with(x, 0.0); }, safe, 15);
  check_first_order("clamp", [](Ctx&, V x) { return clamp_(x, -0.5, 0.5); },
                    oracle::random_tensor_away_from({2, 3}, rng, 0.02), 16);
  Tensor<D> m34 = oracle::random_tensor({3, 4}, rng);
  Tensor<D> m42 = oracle::random_tensor({4, 2}, rng);
  Tensor<D> m24 = oracle::random_tensor({2, 4}, rng);
  Tensor<D> m43 = oracle::random_tensor({4, 3}, rng);
  check_first_order("matmul-lhs", [&](Ctx& c, V x) { return matmul(x, c.constant(m34)); }, x23, 17);
  check_first_order("matmul-rhs", [&](Ctx& c, V x) { return matmul(c.constant(m42), x); }, x23, 18);
  check_first_order("matmul_tn-lhs", [&](Ctx& c, V x) { return matmul_tn(x, c.constant(m24)); }, x23, 44);
  check_first_order("matmul_tn-rhs", [&](Ctx& c, V x) { return matmul_tn(c.constant(m24), x); }, x23, 45);
  check_first_order("matmul_nt-lhs", [&](Ctx& c, V x) { return matmul_nt(x, c.constant(m43)); }, x23, 46);
  check_first_order("matmul_nt-rhs", [&](Ctx& c, V x) { return matmul_nt(c.constant(m43), x); }, x23, 47);
  check_first_order("transpose2", [](Ctx&, V x) { return transpose2(x); }, x23, 19);
  check_first_order("reshape", [](Ctx&, V x) { return reshape(x, {3, 2}); }, x23, 20);
  check_first_order("row_sum", [](Ctx&, V x) { return row_sum(x); }, x23, 21);
  check_first_order("col_sum", [](Ctx&, V x) { return col_sum(x); }, x23, 22);
  check_first_order("sum_all", [](Ctx&, V x) { return sum_all(x); }, x23, 23);
  check_first_order("row_bcast", [](Ctx&, V x) { return row_bcast(x, 4); },
                    oracle::random_tensor({3}, rng), 24);
  check_first_order("col_bcast", [](Ctx&, V x) { return col_bcast(x, 4); },
                    oracle::random_tensor({3}, rng), 25);
  check_first_order("bcast_to", [](Ctx&, V x) { return bcast_to(x, {2, 2}); },
                    oracle::random_tensor({1}, rng), 26);
  check_first_order("softmax", [](Ctx&, V x) { return softmax_rows(x); }, x23, 27);
  check_first_order("l1_norm", [](Ctx&, V x) { return l1_norm(x); }, safe, 28);
  check_first_order("l2_norm", [](Ctx&, V x) { return l2_norm(x); }, x23, 29);
  check_first_order("gather_cols", [](Ctx&, V x) { return gather_cols(x, {2, 0}); }, x23, 30);
  check_first_order("cross_entropy", [](Ctx&, V x) { return cross_entropy(x, {1, 2}); }, x23, 31);

  Tensor<D> img = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor<D> w = oracle::random_tensor({5, 27}, rng);
  Tensor<D> bias = oracle::random_tensor({5}, rng);
  check_first_order("conv2d-x", [&](Ctx& c, V x) { return conv2d(x, c.constant(w), c.constant(bias), 3, 1, 1); }, img, 32);
  check_first_order("conv2d-w", [&](Ctx& c, V wv) { return conv2d(c.constant(img), wv, c.constant(bias), 3, 1, 1); }, w, 33);
  check_first_order("avgpool2", [](Ctx&, V x) { return avgpool2(x); }, img, 34);
}

TEST_CASE("first-order finite differences on a random 2-layer network") {
  RngStream rng(99);
  Tensor<D> x = oracle::random_tensor({4, 6}, rng);
  Tensor<D> w1 = oracle::random_tensor({6, 5}, rng);
  Tensor<D> b1 = oracle::random_tensor({5}, rng, -0.1, 0.1);
  Tensor<D> w2 = oracle::random_tensor({5, 3}, rng);
  Tensor<D> b2 = oracle::random_tensor({3}, rng, -0.1, 0.1);
  std::vector<int> y{0, 1, 2, 1};

  auto net_loss = [&](const Tensor<D>& w1t) {
    Ctx ctx;
    V h = relu(dense(ctx.constant(x), ctx.leaf(w1t), ctx.constant(b1)));
    V z = dense(h, ctx.constant(w2), ctx.constant(b2));
    return cross_entropy(z, y);
  };
  Ctx ctx;
  V w1v = ctx.leaf(w1);
  V h = relu(dense(ctx.constant(x), w1v, ctx.constant(b1)));
  V loss = cross_entropy(dense(h, ctx.constant(w2), ctx.constant(b2)), y);
  Tensor<D> got = grad(loss, {w1v})[0].value();
  Tensor<D> want =
      oracle::finite_diff([&](const Tensor<D>& t) { return net_loss(t).value().item(); }, w1);
  CHECK(oracle::max_rel_err(got, want) < 1e-4);
}

TEST_CASE("second-order: gradient of a function of an input-gradient") {
  // loss(w) = sum(g^2) with g = d/dx sum(tanh(x*w)); checked against central
  // finite differences of the whole loss in w.
  RngStream rng(17);
  Tensor<D> x = oracle::random_tensor({3, 4}, rng);
  Tensor<D> w = oracle::random_tensor({4, 2}, rng);

  auto loss_value = [&](const Tensor<D>& wt) {
    Ctx ctx;
    V xv = ctx.leaf(x);
    V inner = sum_all(tanh_(matmul(xv, ctx.constant(wt))));
    V g = grad(inner, {xv}, /*differentiable=*/true)[0];
    return sum_all(square(g)).value().item();
  };

  Ctx ctx;
  V xv = ctx.leaf(x);
  V wv = ctx.leaf(w);
  V inner = sum_all(tanh_(matmul(xv, wv)));
  V g = grad(inner, {xv}, /*differentiable=*/true)[0];
  V loss = sum_all(square(g));
  Tensor<D> got = grad(loss, {wv})[0].value();
  Tensor<D> want = oracle::finite_diff(loss_value, w);
  CHECK(oracle::max_rel_err(got, want) < 1e-4);
}

TEST_CASE("second-order through a network input-gradient wrt parameters") {
  RngStream rng(23);
  Tensor<D> x = oracle::random_tensor({2, 5}, rng);
  Tensor<D> w1 = oracle::random_tensor({5, 4}, rng);
  Tensor<D> b1 = Tensor<D>::zeros({4});
  Tensor<D> w2 = oracle::random_tensor({4, 3}, rng);
  Tensor<D> b2 = Tensor<D>::zeros({3});
  std::vector<int> y{0, 2};

  auto loss_value = [&](const Tensor<D>& w1t) {
    Ctx ctx;
    V xv = ctx.leaf(x);
    V h = tanh_(dense(xv, ctx.leaf(w1t), ctx.constant(b1)));
    V ce = cross_entropy(dense(h, ctx.constant(w2), ctx.constant(b2)), y);
    V g = grad(ce, {xv}, true)[0];
    return sum_all(square(g)).value().item();
  };

  Ctx ctx;
  V xv = ctx.leaf(x);
  V w1v = ctx.leaf(w1);
  V h = tanh_(dense(xv, w1v, ctx.constant(b1)));
  V ce = cross_entropy(dense(h, ctx.constant(w2), ctx.constant(b2)), y);
  V g = grad(ce, {xv}, true)[0];
  V loss = sum_all(square(g));
  Tensor<D> got = grad(loss, {w1v})[0].value();
  Tensor<D> want = oracle::finite_diff(loss_value, w1);
  CHECK(oracle::max_rel_err(got, want) < 1e-3);
}

TEST_CASE("subgradients at kinks are zero") {
  Ctx ctx;
  V x = ctx.leaf(Tensor<D>::scalar(0));
  CHECK(grad(relu(x), {x})[0].value().item() == 0.0);
  CHECK(grad(max_with(x, 0.0), {x})[0].value().item() == 0.0);
  CHECK(grad(abs_(x), {x})[0].value().item() == 0.0);
  V at_hi = ctx.leaf(Tensor<D>::scalar(1.0));
  CHECK(grad(clamp_(at_hi, 0.0, 1.0), {at_hi})[0].value().item() == 0.0);
}

TEST_CASE("sign is forward-only and detached tensors get zero gradients") {
  Ctx ctx;
  V x = ctx.leaf(make_tensor<D>({2}, {0.5, -0.25}));
  V loss = sum_all(mul(sign_(x), x));
  // d/dx (sign(x)*x) with sign detached = sign(x)
  Tensor<D> g = grad(loss, {x})[0].value();
  CHECK(g.v[0] == 1.0);
  CHECK(g.v[1] == -1.0);

  V c = ctx.constant(make_tensor<D>({2}, {1.0, 2.0}));
  Tensor<D> gc = grad(sum_all(mul(c, x)), {c})[0].value();
  CHECK((gc.v == 0.0).all());
}

TEST_CASE("l2 norm gradient is guarded at degenerate inputs") {
  Ctx ctx;
  V z = ctx.leaf(Tensor<D>::zeros({4}));
  Tensor<D> g = grad(l2_norm(z), {z})[0].value();
  CHECK((g.v == 0.0).all());
}

TEST_CASE("grad error paths") {
  Ctx ctx;
  V x = ctx.leaf(Tensor<D>::zeros({2, 2}));
  CHECK_THROWS_AS(grad(add_scalar(x, 1.0), {x}), ValueError);

  V reached = ctx.leaf(Tensor<D>::scalar(2));
  V unreached = ctx.leaf(Tensor<D>::zeros({3}));
  auto gs = grad(square(reached), {reached, unreached});
  CHECK(gs[0].value().item() == doctest::Approx(4.0));
  CHECK(gs[1].value().shape == Shape{3});
  CHECK((gs[1].value().v == 0.0).all());
}

TEST_CASE("determinism and tape replay") {
  auto run = [] {
    RngStream rng(5);
    Tensor<D> x = oracle::random_tensor({3, 3}, rng);
    Ctx ctx;
    V xv = ctx.leaf(x);
    V loss = cross_entropy(matmul(xv, xv), {0, 1, 2});
    Tensor<D> g = grad(loss, {xv})[0].value();
    return std::pair{loss.value().item(), g};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1.v == g2.v).all());

  RngStream rng(6);
  Ctx ctx;
  V xv = ctx.leaf(oracle::random_tensor({4, 4}, rng));
  V loss = mean_all(softmax_rows(relu(matmul(xv, xv))));
  grad(loss, {xv});
  CHECK(ctx.replay_matches());
}

TEST_CASE("gradient of mean matches 1/n") {
  Ctx ctx;
  V x = ctx.leaf(Tensor<D>::full({5}, 2.0));
  Tensor<D> g = grad(mean_all(x), {x})[0].value();
  CHECK((g.v == 0.2).all());
}
