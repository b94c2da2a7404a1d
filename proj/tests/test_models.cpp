#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "disjoint/nn.hpp"
#include "oracles.hpp"

using namespace disjoint;
using D = double;
using Ctx = Context<double>;
using V = Var<double>;

namespace {

ModelConfig mlp_config(Index in, std::vector<Index> hidden, int classes) {
  ModelConfig c;
  c.arch = Arch::kMlp;
  c.input_shape = {in};
  c.hidden = std::move(hidden);
  c.classes = classes;
  return c;
}

// Plain-loop reimplementation of the mlp stack, independent of the tape.
Tensor<D> mlp_forward_ref(const ModelConfig& mc, const Params<D>& p, const Tensor<D>& x) {
  const Index b = x.shape[0];
  std::vector<double> h(x.v.data(), x.v.data() + x.size());
  Index width = x.shape[1];
  for (size_t l = 0; l < p.tensors.size(); l += 2) {
    const Tensor<D>& w = p.tensors[l].t;
    const Tensor<D>& bias = p.tensors[l + 1].t;
    const Index in = w.shape[0], out = w.shape[1];
    std::vector<double> next(b * out, 0.0);
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < out; ++j) {
        double s = bias.v[j];
        for (Index k = 0; k < in; ++k) s += h[i * width + k] * w.v[k * out + j];
        next[i * out + j] = l + 2 < p.tensors.size() ? std::max(0.0, s) : s;
      }
    h = std::move(next);
    width = out;
  }
  Tensor<D> out = Tensor<D>::zeros({b, width});
  for (Index i = 0; i < b * width; ++i) out.v[i] = h[i];
  return out;
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
  ModelConfig mc = mlp_config(4, {8}, 3);
  Params<D> a = init_model<D>(mc, 12);
  Params<D> b = init_model<D>(mc, 12);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (size_t i = 0; i < a.tensors.size(); ++i) CHECK((a.tensors[i].t.v == b.tensors[i].t.v).all());
}

TEST_CASE("different seeds give different weights in >= 99% of elements") {
  ModelConfig mc = mlp_config(16, {32, 16}, 10);
  Params<D> a = init_model<D>(mc, 1);
  Params<D> b = init_model<D>(mc, 2);
  Index differ = 0, total = 0;
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name.ends_with("_b")) continue;  // biases are pinned to zero
    differ += (a.tensors[i].t.v != b.tensors[i].t.v).count();
    total += a.tensors[i].t.size();
  }
  CHECK(static_cast<double>(differ) / total >= 0.99);
}

TEST_CASE("mlp [4,8,3] has 67 parameters") {
  CHECK(init_model<D>(mlp_config(4, {8}, 3), 0).count() == 67);
}

TEST_CASE("zero final layer gives zero logits and a uniform softmax") {
  ModelConfig mc = mlp_config(4, {8}, 3);
  Params<D> p = init_model<D>(mc, 5);
  p.tensors[2].t.v.setZero();
  p.tensors[3].t.v.setZero();
  RngStream rng(3);
  Tensor<D> x = oracle::random_tensor({2, 4}, rng, 0, 1);
  Ctx ctx;
  V logits = forward(mc, register_params(ctx, p, false), ctx.constant(x));
  CHECK((logits.value().v == 0.0).all());
  V sm = softmax_rows(logits);
  CHECK((sm.value().v - 1.0 / 3).abs().maxCoeff() < 1e-15);
}

TEST_CASE("a batch of one matches the corresponding row of a larger batch") {
  ModelConfig mc = mlp_config(6, {5}, 4);
  Params<D> p = init_model<D>(mc, 9);
  RngStream rng(4);
  Tensor<D> x = oracle::random_tensor({3, 6}, rng, 0, 1);
  ModelView<D> view{&mc, {&p}};
  Tensor<D> all = view_logits(view, x);
  Tensor<D> row1(Shape{1, 6}, x.v.segment(6, 6));
  Tensor<D> one = view_logits(view, row1);
  CHECK((one.v - all.v.segment(4, 4)).abs().maxCoeff() == 0.0);
}

TEST_CASE("forward matches an independent reimplementation of the stack") {
  ModelConfig mc = mlp_config(7, {9, 5}, 3);
  Params<D> p = init_model<D>(mc, 21);
  RngStream rng(6);
  Tensor<D> x = oracle::random_tensor({4, 7}, rng, 0, 1);
  Tensor<D> got = view_logits(ModelView<D>{&mc, {&p}}, x);
  Tensor<D> want = mlp_forward_ref(mc, p, x);
  CHECK(oracle::max_rel_err(got, want) < 1e-12);
}

TEST_CASE("small_conv forward runs and is finite") {
  ModelConfig mc;
  mc.arch = Arch::kSmallConv;
  mc.input_shape = {3, 8, 8};
  mc.classes = 10;
  mc.conv1_channels = 4;
  mc.conv2_channels = 6;
  mc.dense_width = 16;
  Params<D> p = init_model<D>(mc, 2);
  RngStream rng(8);
  Tensor<D> x = oracle::random_tensor({2, 3, 8, 8}, rng, 0, 1);
  Tensor<D> logits = view_logits(ModelView<D>{&mc, {&p}}, x);
  CHECK(logits.shape == Shape{2, 10});
  CHECK(logits.all_finite());
}

TEST_CASE("forward rejects mismatched input shapes") {
  ModelConfig mc = mlp_config(4, {}, 2);
  Params<D> p = init_model<D>(mc, 0);
  Ctx ctx;
  auto pv = register_params(ctx, p, false);
  CHECK_THROWS_AS(forward(mc, pv, ctx.constant(Tensor<D>::zeros({2, 5}))), ShapeError);
}

TEST_CASE("ensemble forward") {
  ModelConfig mc = mlp_config(4, {}, 3);  // single linear layer: logits = xW + b
  Params<D> a = init_model<D>(mc, 1);
  Params<D> b = init_model<D>(mc, 2);
  Params<D> c = init_model<D>(mc, 3);
  RngStream rng(5);
  Tensor<D> x = oracle::random_tensor({3, 4}, rng, 0, 1);

  ModelSet<D> set;
  set.config = mc;
  set.members = {a, b, c};

  SUBCASE("m=1 equals the member's forward") {
    Tensor<D> ens = view_logits(ModelView<D>::ensemble(set, {1}), x);
    Tensor<D> solo = view_logits(ModelView<D>::single(set, 1), x);
    CHECK((ens.v == solo.v).all());
  }
  SUBCASE("members with logits L and -L average to zero") {
    Params<D> neg = a;
    for (auto& nt : neg.tensors) nt.t.v = -nt.t.v;
    ModelSet<D> pm;
    pm.config = mc;
    pm.members = {a, neg};
    Tensor<D> ens = view_logits(ModelView<D>::ensemble(pm, {0, 1}), x);
    CHECK(ens.v.abs().maxCoeff() < 1e-15);
  }
  SUBCASE("m=3 matches the externally computed elementwise average") {
    Tensor<D> ens = view_logits(ModelView<D>::ensemble(set, {0, 1, 2}), x);
    Tensor<D> la = view_logits(ModelView<D>::single(set, 0), x);
    Tensor<D> lb = view_logits(ModelView<D>::single(set, 1), x);
    Tensor<D> lc = view_logits(ModelView<D>::single(set, 2), x);
    Tensor<D> avg(la.shape, (la.v + lb.v + lc.v) / 3.0);
    CHECK(oracle::max_rel_err(ens, avg) < 1e-14);
  }
  SUBCASE("ensemble of all members is permutation-invariant, exactly") {
    Tensor<D> e1 = view_logits(ModelView<D>::ensemble(set, {0, 1, 2}), x);
    Tensor<D> e2 = view_logits(ModelView<D>::ensemble(set, {2, 0, 1}), x);
    Tensor<D> e3 = view_logits(ModelView<D>::ensemble(set, {1, 2, 0}), x);
    CHECK((e1.v == e2.v).all());
    CHECK((e1.v == e3.v).all());
  }
  SUBCASE("empty subset is rejected") {
    Ctx ctx;
    std::vector<std::vector<V>> none;
    CHECK_THROWS_AS(ensemble_forward(mc, none, ctx.constant(x)), ValueError);
  }
}

TEST_CASE("forward is pure: parameters unchanged by evaluation") {
  ModelConfig mc = mlp_config(5, {6}, 3);
  Params<D> p = init_model<D>(mc, 11);
  Params<D> before = p;
  RngStream rng(7);
  Tensor<D> x = oracle::random_tensor({4, 5}, rng, 0, 1);
  view_logits(ModelView<D>{&mc, {&p}}, x);
  for (size_t i = 0; i < p.tensors.size(); ++i)
    CHECK((p.tensors[i].t.v == before.tensors[i].t.v).all());
}
