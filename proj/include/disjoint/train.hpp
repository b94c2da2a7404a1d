// Joint training of a model set for classification plus minimal attack
// transferability: averaged per-member cross-entropy, pairwise gradient
// cosine penalty, and the two hinge transfer penalties built on
// differentiable input gradients. Also the fast adversarial-training and
// independent baselines.
#pragma once

#include "disjoint/attacks.hpp"
#include "disjoint/data.hpp"
#include "disjoint/nn.hpp"

#include <map>
#include <optional>

namespace disjoint {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TrainVariant { kJoint, kAddOne, kSampling, kAngleOnly, kTransferOnly };

inline const char* variant_name(TrainVariant v) {
  switch (v) {
    case TrainVariant::kJoint: return "joint";
    case TrainVariant::kAddOne: return "add_one";
    case TrainVariant::kSampling: return "sampling";
    case TrainVariant::kAngleOnly: return "angle_only";
    case TrainVariant::kTransferOnly: return "transfer_only";
  }
  return "?";
}

struct DisjointTrainConfig {
  int n = 3;
  double w1 = 1.0;   // classification
  double w2 = 0.5;   // angular deviation
  double w3 = 0.5;   // l2 transfer penalty
  double w4 = 0.5;   // tanh/linf transfer penalty
  double eps1 = 6.0;
  double eps2 = 0.031;
  int epochs = 30;
  Index batch_size = 64;
  double peak_lr = 0.2;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int angle_warmup_epochs = 8;
  int sample_size = 0;  // members drawn per iteration for gradient losses; 0 = all
  TrainVariant variant = TrainVariant::kJoint;
  uint64_t seed = 0;

  void validate() const {
    if (w1 < 0 || w2 < 0 || w3 < 0 || w4 < 0)
      throw ValueError("train config: loss weights must be >= 0");
    if (eps1 < 0 || eps2 < 0) throw ValueError("train config: eps1/eps2 must be >= 0");
    if (sample_size != 0 && (sample_size <= 0 || sample_size > n))
      throw ValueError("train config: sample_size must be 0 or in (0, n]");
    if (batch_size < 1 || epochs < 0) throw ValueError("train config: bad schedule");
  }
};

struct LossReport {
  int epoch = 0;
  int iteration = 0;  // global iteration index
  double lr = 0;
  double l_class = 0;
  double l_angle = 0;
  double l_transfer1 = 0;
  double l_transfer2 = 0;
  double l_total = 0;
};

using TrainLog = std::vector<LossReport>;

// Cyclic schedule: 0 at t=0, peak at t=T/2, back to 0 at t=T.
inline double cyclic_lr(Index t, Index total, double peak) {
  if (total <= 0) return 0;
  const double u = 2.0 * static_cast<double>(t) / static_cast<double>(total);
  return peak * (1.0 - std::abs(u - 1.0));
}

// ---- loss graph -------------------------------------------------------------

using MemberPair = std::pair<int, int>;

struct LossSwitches {
  double w1 = 1, w2 = 0.5, w3 = 0.5, w4 = 0.5;
  double eps1 = 6.0, eps2 = 0.031;
  bool angle = true, transfer1 = true, transfer2 = true;
  std::vector<int> grad_members;         // members whose input gradients are built
  std::vector<MemberPair> angle_pairs;   // unordered (i < j)
  std::vector<MemberPair> transfer_pairs;  // ordered (target i, gradient source j)

  // all pairs among `members`, both directions for the transfer losses
  void all_pairs(const std::vector<int>& members) {
    grad_members = members;
    angle_pairs.clear();
    transfer_pairs.clear();
    for (size_t a = 0; a < members.size(); ++a)
      for (size_t b = 0; b < members.size(); ++b) {
        if (a == b) continue;
        if (a < b) angle_pairs.emplace_back(members[a], members[b]);
        transfer_pairs.emplace_back(members[a], members[b]);
      }
  }
};

template <typename S>
struct SetLosses {
  std::vector<Var<S>> ce;  // per-member mean cross-entropy
  Var<S> l_class;
  std::optional<Var<S>> l_angle, l_transfer1, l_transfer2;
  Var<S> total;
  LossReport parts;  // epoch/iteration/lr filled by the trainer
};

// Mean over members of the per-member cross-entropy (Eq. 1 averaged).
template <typename S>
Var<S> classification_loss(const std::vector<Var<S>>& member_ce) {
  if (member_ce.empty()) throw ValueError("classification_loss: no members");
  Var<S> acc = member_ce[0];
  for (size_t i = 1; i < member_ce.size(); ++i) acc = add(acc, member_ce[i]);
  return mul_scalar(acc, S(1) / static_cast<S>(member_ce.size()));
}

// Mean pairwise cosine of flattened input gradients (Eq. 2 averaged). Pairs
// with a degenerate (near-zero) gradient contribute zero.
template <typename S>
Var<S> angular_deviation_loss(const std::vector<Var<S>>& grads,
                              const std::vector<MemberPair>* pairs = nullptr) {
  std::vector<MemberPair> dense;
  if (!pairs) {
    for (size_t i = 0; i < grads.size(); ++i)
      for (size_t j = i + 1; j < grads.size(); ++j) dense.emplace_back(int(i), int(j));
    pairs = &dense;
  }
  if (pairs->empty()) throw ValueError("angular_deviation_loss: needs at least one pair");
  Context<S>& ctx = *grads.at(pairs->front().first).ctx;
  Var<S> acc = ctx.constant(S(0));
  for (const auto& [i, j] : *pairs) {
    const double ni = std::sqrt(static_cast<double>(grads[i].value().v.square().sum()));
    const double nj = std::sqrt(static_cast<double>(grads[j].value().v.square().sum()));
    if (ni < 1e-12 || nj < 1e-12) continue;
    acc = add(acc, div(dot(grads[i], grads[j]), mul(l2_norm(grads[i]), l2_norm(grads[j]))));
  }
  return mul_scalar(acc, S(1) / static_cast<S>(pairs->size()));
}

namespace detail {

// Hinge on the loss increase of member i at x perturbed by member j's
// gradient direction (Eqs. 3/4), averaged over the ordered pairs. Grads are
// indexed by member id; perturbed inputs are shared per source member.
template <typename S>
Var<S> transfer_loss(const ModelConfig& mc, const std::vector<std::vector<Var<S>>>& params,
                     Var<S> x, const std::vector<int>& y, const std::vector<Var<S>>& base_ce,
                     const std::map<int, Var<S>>& grads, const std::vector<MemberPair>& pairs,
                     S eps, bool squash_tanh) {
  if (pairs.empty()) throw ValueError("transfer_loss: needs at least one ordered pair");
  Context<S>& ctx = *x.ctx;
  std::map<int, Var<S>> perturbed;
  for (const auto& [i, j] : pairs) {
    if (perturbed.count(j)) continue;
    Var<S> g = grads.at(j);
    Var<S> dir = squash_tanh ? tanh_(g) : g;
    perturbed.emplace(j, add(x, mul_scalar(dir, eps)));
  }
  Var<S> acc = ctx.constant(S(0));
  for (const auto& [i, j] : pairs) {
    Var<S> ce_shifted = cross_entropy(forward(mc, params[i], perturbed.at(j)), y);
    acc = add(acc, max_with(sub(ce_shifted, base_ce[i]), S(0)));
  }
  return mul_scalar(acc, S(1) / static_cast<S>(pairs.size()));
}

}  // namespace detail

template <typename S>
Var<S> transfer_loss_l2(const ModelConfig& mc, const std::vector<std::vector<Var<S>>>& params,
                        Var<S> x, const std::vector<int>& y, const std::vector<Var<S>>& base_ce,
                        const std::map<int, Var<S>>& grads, const std::vector<MemberPair>& pairs,
                        S eps1) {
  return detail::transfer_loss(mc, params, x, y, base_ce, grads, pairs, eps1, false);
}

template <typename S>
Var<S> transfer_loss_linf(const ModelConfig& mc, const std::vector<std::vector<Var<S>>>& params,
                          Var<S> x, const std::vector<int>& y, const std::vector<Var<S>>& base_ce,
                          const std::map<int, Var<S>>& grads, const std::vector<MemberPair>& pairs,
                          S eps2) {
  return detail::transfer_loss(mc, params, x, y, base_ce, grads, pairs, eps2, true);
}

// Builds the full Eq. 5 graph for one mini-batch. Terms with zero weight (or
// switched off) are skipped entirely, so their gradient contribution is
// exactly zero.
template <typename S>
SetLosses<S> build_set_losses(const ModelConfig& mc, const std::vector<std::vector<Var<S>>>& params,
                              Var<S> x, const std::vector<int>& y, const LossSwitches& sw) {
  SetLosses<S> out;
  for (const auto& p : params) out.ce.push_back(cross_entropy(forward(mc, p, x), y));
  out.l_class = classification_loss(out.ce);

  const bool want_angle = sw.angle && sw.w2 > 0 && !sw.angle_pairs.empty();
  const bool want_t1 = sw.transfer1 && sw.w3 > 0 && !sw.transfer_pairs.empty();
  const bool want_t2 = sw.transfer2 && sw.w4 > 0 && !sw.transfer_pairs.empty();
  if (want_angle || want_t1 || want_t2) {
    // adversarial gradients at per-sample scale: each row is the gradient of
    // that sample's own loss, as in the attack definitions
    const S batch = static_cast<S>(x.shape()[0]);
    std::map<int, Var<S>> grads;
    std::vector<Var<S>> grads_dense(params.size(), Var<S>{});
    for (int j : sw.grad_members) {
      Var<S> g = grad(mul_scalar(out.ce[j], batch), {x}, /*differentiable=*/true)[0];
      grads.emplace(j, g);
      grads_dense[j] = g;
    }
    if (want_angle) out.l_angle = angular_deviation_loss(grads_dense, &sw.angle_pairs);
    if (want_t1)
      out.l_transfer1 = transfer_loss_l2(mc, params, x, y, out.ce, grads, sw.transfer_pairs,
                                         static_cast<S>(sw.eps1));
    if (want_t2)
      out.l_transfer2 = transfer_loss_linf(mc, params, x, y, out.ce, grads, sw.transfer_pairs,
                                           static_cast<S>(sw.eps2));
  }

  Var<S> total = mul_scalar(out.l_class, static_cast<S>(sw.w1));
  if (out.l_angle) total = add(total, mul_scalar(*out.l_angle, static_cast<S>(sw.w2)));
  if (out.l_transfer1) total = add(total, mul_scalar(*out.l_transfer1, static_cast<S>(sw.w3)));
  if (out.l_transfer2) total = add(total, mul_scalar(*out.l_transfer2, static_cast<S>(sw.w4)));
  out.total = total;

  out.parts.l_class = static_cast<double>(out.l_class.value().item());
  out.parts.l_angle = out.l_angle ? static_cast<double>(out.l_angle->value().item()) : 0.0;
  out.parts.l_transfer1 =
      out.l_transfer1 ? static_cast<double>(out.l_transfer1->value().item()) : 0.0;
  out.parts.l_transfer2 =
      out.l_transfer2 ? static_cast<double>(out.l_transfer2->value().item()) : 0.0;
  out.parts.l_total = static_cast<double>(out.total.value().item());
  return out;
}

// ---- optimizer --------------------------------------------------------------

template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : mu_(momentum), wd_(weight_decay) {}

  void step(Params<S>& p, const std::vector<Tensor<S>>& grads, double lr) {
    if (velocity_.empty())
      for (const auto& nt : p.tensors) velocity_.push_back(Tensor<S>::zeros(nt.t.shape));
    for (size_t i = 0; i < p.tensors.size(); ++i) {
      FlatArray<S> g = grads[i].v + static_cast<S>(wd_) * p.tensors[i].t.v;
      velocity_[i].v = static_cast<S>(mu_) * velocity_[i].v + g;
      p.tensors[i].t.v -= static_cast<S>(lr) * velocity_[i].v;
    }
  }

 private:
  double mu_, wd_;
  std::vector<Tensor<S>> velocity_;
};

// ---- training loops ---------------------------------------------------------

namespace detail {

inline std::vector<Index> epoch_order(Index n, uint64_t seed, int epoch) {
  std::vector<Index> idx(n);
  for (Index i = 0; i < n; ++i) idx[i] = i;
  RngStream rng(derive_seed(seed, 0xe90c000ull + static_cast<uint64_t>(epoch)));
  rng.shuffle(idx);
  return idx;
}

template <typename S>
Tensor<S> gather_batch(const Dataset& data, const std::vector<Index>& order, Index from,
                       Index count, std::vector<int>& labels_out) {
  const Index row = data.x.cols();
  Shape shape = data.x.shape;
  shape[0] = count;
  Tensor<float> xb = Tensor<float>::zeros(shape);
  labels_out.resize(count);
  for (Index i = 0; i < count; ++i) {
    const Index src = order[from + i];
    xb.v.segment(i * row, row) = data.x.v.segment(src * row, row);
    labels_out[i] = data.labels[src];
  }
  return xb.template cast<S>();
}

}  // namespace detail

// Joint disjoint-set training (Eq. 5). For the add_one variant, `frozen_base`
// supplies the already-trained members whose weights stay fixed while one new
// member is trained against their gradients.
template <typename S>
std::pair<ModelSet<S>, TrainLog> train_disjoint_set(
    const Dataset& data, const ModelConfig& mc, const DisjointTrainConfig& tc,
    const ModelSet<S>* frozen_base = nullptr) {
  tc.validate();
  mc.validate();
  const bool add_one = tc.variant == TrainVariant::kAddOne;
  if (add_one && (frozen_base == nullptr || frozen_base->n() + 1 != tc.n))
    throw ValueError("train: add_one needs a frozen base set of n-1 members");
  const bool needs_pairs = tc.w2 > 0 || tc.w3 > 0 || tc.w4 > 0;
  if (tc.n < 2 && needs_pairs) throw ValueError("train: disjoint variants need n >= 2");

  ModelSet<S> set;
  set.config = mc;
  set.provenance = Provenance::kDisjoint;
  const int first_trainable = add_one ? tc.n - 1 : 0;
  for (int m = 0; m < tc.n; ++m) {
    if (add_one && m < first_trainable)
      set.members.push_back(frozen_base->members[m]);
    else
      set.members.push_back(init_model<S>(mc, derive_seed(tc.seed, 0x5eedull + m)));
  }

  std::vector<SgdMomentum<S>> opt(tc.n, SgdMomentum<S>(tc.momentum, tc.weight_decay));
  RngStream sampler(derive_seed(tc.seed, 0x5a3b1eull));
  const Index iters_per_epoch = data.size() / tc.batch_size;
  const Index total_iters = iters_per_epoch * tc.epochs;
  TrainLog log;
  log.reserve(total_iters);

  Index t = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const std::vector<Index> order = detail::epoch_order(data.size(), tc.seed, epoch);
    for (Index it = 0; it < iters_per_epoch; ++it, ++t) {
      const double lr = cyclic_lr(t, total_iters, tc.peak_lr);
      std::vector<int> y;
      Tensor<S> xb = detail::gather_batch<S>(data, order, it * tc.batch_size, tc.batch_size, y);

      LossSwitches sw;
      sw.w1 = tc.w1;
      sw.w2 = tc.w2;
      sw.w3 = tc.w3;
      sw.w4 = tc.w4;
      sw.eps1 = tc.eps1;
      sw.eps2 = tc.eps2;
      switch (tc.variant) {
        case TrainVariant::kAngleOnly:
          sw.transfer1 = sw.transfer2 = false;
          break;
        case TrainVariant::kTransferOnly:
          sw.angle = false;
          break;
        default:
          sw.angle = epoch < tc.angle_warmup_epochs;
          break;
      }
      if (needs_pairs) {
        if (add_one) {
          // only pairs involving the new member; frozen gradients still feed them
          const int fresh = tc.n - 1;
          std::vector<int> all(tc.n);
          for (int m = 0; m < tc.n; ++m) all[m] = m;
          sw.grad_members = all;
          for (int m = 0; m < fresh; ++m) {
            sw.angle_pairs.emplace_back(m, fresh);
            sw.transfer_pairs.emplace_back(m, fresh);
            sw.transfer_pairs.emplace_back(fresh, m);
          }
        } else if (tc.sample_size > 0 && tc.sample_size < tc.n) {
          sw.all_pairs(sampler.sample_without_replacement(tc.n, tc.sample_size));
        } else {
          std::vector<int> all(tc.n);
          for (int m = 0; m < tc.n; ++m) all[m] = m;
          sw.all_pairs(all);
        }
      }

      Context<S> ctx;
      Var<S> xv = ctx.leaf(xb);
      std::vector<std::vector<Var<S>>> pvars;
      for (int m = 0; m < tc.n; ++m)
        pvars.push_back(register_params(ctx, set.members[m], m >= first_trainable));

      SetLosses<S> losses = build_set_losses(mc, pvars, xv, y, sw);
      if (!std::isfinite(losses.parts.l_total))
        throw TrainingDiverged("training diverged at iteration " + std::to_string(t) + " (epoch " +
                               std::to_string(epoch) +
                               "): total loss = " + std::to_string(losses.parts.l_total));

      std::vector<Var<S>> wrt;
      for (int m = first_trainable; m < tc.n; ++m)
        for (Var<S> v : pvars[m]) wrt.push_back(v);
      std::vector<Var<S>> gs = grad(losses.total, wrt);

      size_t gi = 0;
      for (int m = first_trainable; m < tc.n; ++m) {
        std::vector<Tensor<S>> mg;
        for (size_t k = 0; k < set.members[m].tensors.size(); ++k) mg.push_back(gs[gi++].value());
        opt[m].step(set.members[m], mg, lr);
      }

      losses.parts.epoch = epoch;
      losses.parts.iteration = static_cast<int>(t);
      losses.parts.lr = lr;
      log.push_back(losses.parts);
    }
  }
  return {std::move(set), std::move(log)};
}

// n members trained independently for classification only (shared batch
// stream, per-member seeds).
template <typename S>
std::pair<ModelSet<S>, TrainLog> train_independent(const Dataset& data, const ModelConfig& mc,
                                                   DisjointTrainConfig tc) {
  tc.w2 = tc.w3 = tc.w4 = 0;
  tc.variant = TrainVariant::kJoint;
  auto [set, log] = train_disjoint_set<S>(data, mc, tc);
  set.provenance = Provenance::kIndependent;
  return {std::move(set), std::move(log)};
}

// Fast adversarial training baseline: each member trains on R+FGSM examples
// of itself, cyclic learning rate, no cross-member terms.
template <typename S>
std::pair<ModelSet<S>, TrainLog> train_adversarial_baseline(const Dataset& data,
                                                            const ModelConfig& mc,
                                                            const DisjointTrainConfig& tc,
                                                            AttackSpec at_spec) {
  tc.validate();
  mc.validate();
  at_spec.kind = AttackKind::kRfgsm;
  ModelSet<S> set;
  set.config = mc;
  set.provenance = Provenance::kAdversariallyTrained;
  TrainLog log;
  const Index iters_per_epoch = data.size() / tc.batch_size;
  const Index total_iters = iters_per_epoch * tc.epochs;

  for (int m = 0; m < tc.n; ++m) {
    set.members.push_back(init_model<S>(mc, derive_seed(tc.seed, 0x5eedull + m)));
    Params<S>& params = set.members.back();
    SgdMomentum<S> opt(tc.momentum, tc.weight_decay);
    Index t = 0;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
      const std::vector<Index> order =
          detail::epoch_order(data.size(), derive_seed(tc.seed, 0xad0000ull + m), epoch);
      for (Index it = 0; it < iters_per_epoch; ++it, ++t) {
        const double lr = cyclic_lr(t, total_iters, tc.peak_lr);
        std::vector<int> y;
        Tensor<S> xb = detail::gather_batch<S>(data, order, it * tc.batch_size, tc.batch_size, y);

        ModelView<S> self{&mc, {&params}};
        AttackSpec step_spec = at_spec;
        step_spec.rng_seed =
            derive_seed(tc.seed, 0xa77ac4ull + static_cast<uint64_t>(t) * tc.n + m);
        Tensor<S> x_adv = rfgsm(self, xb, y, step_spec);

        Context<S> ctx;
        std::vector<Var<S>> pv = register_params(ctx, params, true);
        Var<S> ce = cross_entropy(forward(mc, pv, ctx.constant(std::move(x_adv))), y);
        const double ce_val = static_cast<double>(ce.value().item());
        if (!std::isfinite(ce_val))
          throw TrainingDiverged("adversarial training diverged at iteration " + std::to_string(t));
        std::vector<Var<S>> gs = grad(ce, pv);
        std::vector<Tensor<S>> mg;
        for (auto& g : gs) mg.push_back(g.value());
        opt.step(params, mg, lr);

        if (m == 0) {
          LossReport r;
          r.epoch = epoch;
          r.iteration = static_cast<int>(t);
          r.lr = lr;
          r.l_class = ce_val;
          r.l_total = ce_val;
          log.push_back(r);
        }
      }
    }
  }
  return {std::move(set), std::move(log)};
}

}  // namespace disjoint
