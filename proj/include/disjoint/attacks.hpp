// The attack suite: FGSM, FGM, R+FGSM, PGD, MI-FGSM, CW, EAD.
//
// Every attack clamps iterates to [0,1] and stays inside its declared norm
// ball. Per-sample randomness is derived from (seed, sample index), so
// results are independent of internal batch chunking. Iterative attacks
// recompute the input gradient each step on a fresh tape.
#pragma once

#include "disjoint/nn.hpp"

#include <functional>
#include <optional>

namespace disjoint {

enum class AttackKind { kFgsm, kFgm, kRfgsm, kPgd, kMifgsm, kCw, kEad };
enum class DecisionRule { kEn, kL1 };
enum class AttackOptim { kAdam, kSgd };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kFgm: return "fgm";
    case AttackKind::kRfgsm: return "rfgsm";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kMifgsm: return "mifgsm";
    case AttackKind::kCw: return "cw";
    case AttackKind::kEad: return "ead";
  }
  return "?";
}

struct AttackSpec {
  AttackKind kind = AttackKind::kFgsm;
  double epsilon = 0.031;
  double alpha = 0.0078;
  int steps = 1;
  double mu = 1.0;
  double c = 1.0;
  double kappa = 0.0;
  double beta = 0.01;
  DecisionRule decision_rule = DecisionRule::kEn;
  int max_iterations = 1000;
  double learning_rate = 0.01;
  AttackOptim optimizer = AttackOptim::kAdam;
  int target = -1;  // -1 = untargeted, otherwise the target class
  uint64_t rng_seed = 0;
  bool random_start = true;  // pgd only

  void validate() const {
    if (epsilon < 0) throw ValueError("attack spec: epsilon must be >= 0");
    if (kappa < 0) throw ValueError("attack spec: kappa must be >= 0");
    const bool iterative = kind == AttackKind::kPgd || kind == AttackKind::kMifgsm;
    if (iterative && steps < 1) throw ValueError("attack spec: steps must be >= 1");
    if (kind == AttackKind::kRfgsm && alpha > epsilon)
      throw ValueError("attack spec: rfgsm random step alpha must not exceed epsilon");
    if ((kind == AttackKind::kCw || kind == AttackKind::kEad) && max_iterations < 1)
      throw ValueError("attack spec: max_iterations must be >= 1");
  }
};

// Table 1 parameter presets.
inline AttackSpec attack_preset(const std::string& name) {
  AttackSpec s;
  if (name == "fgsm") {
    s.kind = AttackKind::kFgsm;
    s.epsilon = 0.031;
  } else if (name == "fgm") {
    s.kind = AttackKind::kFgm;
    s.epsilon = 1.0;
  } else if (name == "rfgsm") {
    s.kind = AttackKind::kRfgsm;
    s.epsilon = 0.031;
    s.alpha = 0.031 / 2;
  } else if (name == "pgd1" || name == "pgd2") {
    s.kind = AttackKind::kPgd;
    s.epsilon = 0.031;
    s.alpha = 0.0078;
    s.steps = name == "pgd1" ? 7 : 20;
  } else if (name == "mifgsm1" || name == "mifgsm2") {
    s.kind = AttackKind::kMifgsm;
    s.epsilon = 0.031;
    s.alpha = 0.0031;
    s.mu = 1.0;
    s.steps = name == "mifgsm1" ? 10 : 20;
  } else if (name == "cw1" || name == "cw2") {
    s.kind = AttackKind::kCw;
    s.c = 1.0;
    s.kappa = name == "cw1" ? 0.0 : 40.0;
    s.max_iterations = 1000;
    s.learning_rate = 0.01;
    s.optimizer = AttackOptim::kAdam;
  } else if (name == "ead1" || name == "ead2") {
    s.kind = AttackKind::kEad;
    s.c = name == "ead1" ? 20.0 : 10.0;
    s.kappa = name == "ead1" ? 0.0 : 55.0;
    s.beta = 0.01;
    s.decision_rule = DecisionRule::kEn;
    s.max_iterations = 1000;
    s.learning_rate = 0.01;
    s.optimizer = AttackOptim::kSgd;
  } else {
    throw ValueError("unknown attack preset: " + name);
  }
  return s;
}

template <typename S>
struct AttackResult {
  Tensor<S> x_adv;
  std::vector<uint8_t> success;
};

// Gradient of the (summed) cross-entropy at x, so per-sample rows are the
// gradients of the per-sample losses.
template <typename S>
using GradFn = std::function<Tensor<S>(const Tensor<S>&)>;

template <typename S>
GradFn<S> ce_grad_fn(const ModelView<S>& view, const std::vector<int>& labels) {
  return [&view, labels](const Tensor<S>& x) {
    Context<S> ctx;
    Var<S> xv = ctx.leaf(x);
    Var<S> loss = cross_entropy(view_forward(ctx, view, xv), labels, Reduce::kSum);
    return grad(loss, {xv})[0].value();
  };
}

namespace detail {

template <typename S>
void clamp01(Tensor<S>& x) {
  x.v = x.v.max(S(0)).min(S(1));
}

// Project into the epsilon-infinity ball around ref, intersected with [0,1].
template <typename S>
void project_linf(Tensor<S>& x, const Tensor<S>& ref, S eps) {
  x.v = x.v.max(ref.v - eps).min(ref.v + eps).max(S(0)).min(S(1));
}

template <typename S>
Tensor<S> per_sample_noise(const Shape& shape, uint64_t seed, bool gaussian) {
  Tensor<S> t = Tensor<S>::zeros(shape);
  const Index b = t.rows();
  const Index d = t.cols();
  for (Index i = 0; i < b; ++i) {
    RngStream rng(derive_seed(seed, static_cast<uint64_t>(i)));
    for (Index j = 0; j < d; ++j)
      t.v[i * d + j] = static_cast<S>(gaussian ? rng.normal() : rng.uniform(-1.0, 1.0));
  }
  return t;
}

}  // namespace detail

template <typename S>
Tensor<S> fgsm_with(const GradFn<S>& grad_fn, const Tensor<S>& x, const AttackSpec& spec) {
  Tensor<S> g = grad_fn(x);
  Tensor<S> out(x.shape, x.v + static_cast<S>(spec.epsilon) * g.v.sign());
  detail::clamp01(out);
  return out;
}

template <typename S>
Tensor<S> fgm_with(const GradFn<S>& grad_fn, const Tensor<S>& x, const AttackSpec& spec) {
  Tensor<S> g = grad_fn(x);
  Tensor<S> out = x;
  const Index b = x.rows(), d = x.cols();
  for (Index i = 0; i < b; ++i) {
    auto gi = g.v.segment(i * d, d);
    const S norm = std::sqrt(gi.square().sum());
    if (norm < S(1e-12)) continue;  // degenerate gradient: leave the sample unchanged
    out.v.segment(i * d, d) += static_cast<S>(spec.epsilon) / norm * gi;
  }
  detail::clamp01(out);
  return out;
}

template <typename S>
Tensor<S> rfgsm_with(const GradFn<S>& grad_fn, const Tensor<S>& x, const AttackSpec& spec) {
  spec.validate();
  Tensor<S> noise = detail::per_sample_noise<S>(x.shape, derive_seed(spec.rng_seed, 0x7266u), true);
  Tensor<S> xr(x.shape, x.v + static_cast<S>(spec.alpha) * noise.v.sign());
  detail::clamp01(xr);
  Tensor<S> g = grad_fn(xr);
  Tensor<S> out(x.shape, xr.v + static_cast<S>(spec.epsilon - spec.alpha) * g.v.sign());
  detail::clamp01(out);
  return out;
}

template <typename S>
Tensor<S> pgd_with(const GradFn<S>& grad_fn, const Tensor<S>& x, const AttackSpec& spec) {
  const S eps = static_cast<S>(spec.epsilon);
  Tensor<S> xt = x;
  if (spec.random_start) {
    Tensor<S> u = detail::per_sample_noise<S>(x.shape, derive_seed(spec.rng_seed, 0x706764u), false);
    xt.v += eps * u.v;
    detail::project_linf(xt, x, eps);
  }
  for (int t = 0; t < spec.steps; ++t) {
    Tensor<S> g = grad_fn(xt);
    xt.v += static_cast<S>(spec.alpha) * g.v.sign();
    detail::project_linf(xt, x, eps);
  }
  return xt;
}

template <typename S>
Tensor<S> mifgsm_with(const GradFn<S>& grad_fn, const Tensor<S>& x, const AttackSpec& spec) {
  const S eps = static_cast<S>(spec.epsilon);
  const Index b = x.rows(), d = x.cols();
  Tensor<S> xt = x;
  Tensor<S> velocity = Tensor<S>::zeros(x.shape);
  for (int t = 0; t < spec.steps; ++t) {
    Tensor<S> g = grad_fn(xt);
    velocity.v *= static_cast<S>(spec.mu);
    for (Index i = 0; i < b; ++i) {
      auto gi = g.v.segment(i * d, d);
      const S l1 = gi.abs().sum();
      if (l1 >= S(1e-12)) velocity.v.segment(i * d, d) += gi / l1;
    }
    xt.v += static_cast<S>(spec.alpha) * velocity.v.sign();
    detail::project_linf(xt, x, eps);
  }
  return xt;
}

namespace detail {

// Raw logit margin: true class minus best other (untargeted), or best
// non-target minus target (targeted). Success means margin <= -kappa.
template <typename S>
std::vector<S> margins(const Tensor<S>& logits, const std::vector<int>& labels, int target) {
  const Index b = logits.rows(), n = logits.cols();
  std::vector<S> m(b);
  for (Index i = 0; i < b; ++i) {
    const int anchor = target < 0 ? labels[i] : target;
    S best_other = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < n; ++j)
      if (j != anchor) best_other = std::max(best_other, logits.v[i * n + j]);
    m[i] = target < 0 ? logits.v[i * n + anchor] - best_other
                      : best_other - logits.v[i * n + target];
  }
  return m;
}

// Objective margin hinge max(margin, -kappa) as a tape expression. The
// "other" argmax indices are recomputed per call from current logit values.
template <typename S>
Var<S> margin_hinge(Var<S> logits, const std::vector<int>& labels, int target, S kappa) {
  const Index b = logits.shape()[0];
  const Index n = logits.shape()[1];
  const Tensor<S>& lv = logits.value();
  std::vector<int> anchor(b), other(b);
  for (Index i = 0; i < b; ++i) {
    anchor[i] = target < 0 ? labels[i] : target;
    int best = anchor[i] == 0 ? 1 : 0;
    for (Index j = 0; j < n; ++j)
      if (j != anchor[i] && lv.v[i * n + j] > lv.v[i * n + best]) best = static_cast<int>(j);
    other[i] = best;
  }
  Var<S> za = gather_cols(logits, anchor);
  Var<S> zo = gather_cols(logits, other);
  Var<S> raw = target < 0 ? sub(za, zo) : sub(zo, za);
  return max_with(raw, -kappa);
}

template <typename S>
struct BestTracker {
  std::vector<uint8_t> success;
  std::vector<S> best_cost;
  Tensor<S> best_x;

  BestTracker(const Tensor<S>& x)
      : success(x.rows(), 0),
        best_cost(x.rows(), std::numeric_limits<S>::infinity()),
        best_x(x) {}

  // cost: the distance objective the decision rule minimizes over successes.
  void offer(const Tensor<S>& x_adv, const std::vector<S>& margin, S kappa,
             const std::vector<S>& cost) {
    const Index b = x_adv.rows(), d = x_adv.cols();
    for (Index i = 0; i < b; ++i) {
      if (margin[i] <= -kappa && cost[i] < best_cost[i]) {
        success[i] = 1;
        best_cost[i] = cost[i];
        best_x.v.segment(i * d, d) = x_adv.v.segment(i * d, d);
      }
    }
  }

  // failed samples fall back to the final iterate
  void finalize(const Tensor<S>& last) {
    const Index d = last.cols();
    for (Index i = 0; i < last.rows(); ++i)
      if (!success[i]) best_x.v.segment(i * d, d) = last.v.segment(i * d, d);
  }
};

template <typename S>
std::vector<S> row_sq_dist(const Tensor<S>& a, const Tensor<S>& b) {
  const Index n = a.rows(), d = a.cols();
  std::vector<S> out(n);
  for (Index i = 0; i < n; ++i)
    out[i] = (a.v.segment(i * d, d) - b.v.segment(i * d, d)).square().sum();
  return out;
}

}  // namespace detail

// Carlini-Wagner L2: tanh change of variables keeps iterates in [0,1]; the
// reported iterate is the lowest-distance success seen, else the final one.
template <typename S>
AttackResult<S> cw(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& labels,
                   const AttackSpec& spec) {
  spec.validate();
  const Index b = x.rows(), d = x.cols();
  const S kappa = static_cast<S>(spec.kappa);
  const S lr = static_cast<S>(spec.learning_rate);

  FlatArray<S> w(b * d);
  for (Index i = 0; i < b * d; ++i) {
    const S z = std::clamp(x.v[i], S(1e-6), S(1) - S(1e-6)) * 2 - 1;
    w[i] = S(0.5) * std::log((1 + z) / (1 - z));
  }
  FlatArray<S> m1 = FlatArray<S>::Zero(b * d), m2 = FlatArray<S>::Zero(b * d);
  detail::BestTracker<S> track(x);
  Tensor<S> x_last = x;

  for (int it = 1; it <= spec.max_iterations; ++it) {
    Context<S> ctx;
    Var<S> wv = ctx.leaf(Tensor<S>(x.shape, w));
    Var<S> x_adv = mul_scalar(add_scalar(tanh_(wv), S(1)), S(0.5));
    Var<S> logits = view_forward(ctx, view, x_adv);
    Var<S> flat_adv = reshape(x_adv, {b, d});
    Var<S> dist = row_sum(square(sub(flat_adv, ctx.constant(Tensor<S>(Shape{b, d}, x.v)))));
    Var<S> hinge = detail::margin_hinge(logits, labels, spec.target, kappa);
    Var<S> obj = sum_all(add(dist, mul_scalar(hinge, static_cast<S>(spec.c))));
    Tensor<S> g = grad(obj, {wv})[0].value();

    x_last = x_adv.value();
    track.offer(x_last, detail::margins(logits.value(), labels, spec.target), kappa,
                detail::row_sq_dist(x_last, x));

    if (spec.optimizer == AttackOptim::kAdam) {
      const S b1 = S(0.9), b2 = S(0.999);
      m1 = b1 * m1 + (1 - b1) * g.v;
      m2 = b2 * m2 + (1 - b2) * g.v.square();
      const S c1 = 1 - std::pow(b1, S(it));
      const S c2 = 1 - std::pow(b2, S(it));
      w -= lr * (m1 / c1) / ((m2 / c2).sqrt() + S(1e-8));
    } else {
      w -= lr * g.v;
    }
  }
  {
    Tensor<S> xw(x.shape, ((FlatArray<S>)w.tanh() + 1) * S(0.5));
    Tensor<S> logits = view_logits(view, xw);
    track.offer(xw, detail::margins(logits, labels, spec.target), kappa, detail::row_sq_dist(xw, x));
    track.finalize(xw);
  }
  return {std::move(track.best_x), std::move(track.success)};
}

// Soft threshold around zero, the shrinkage step of ISTA.
template <typename S>
S soft_threshold(S delta, S beta) {
  if (delta > beta) return delta - beta;
  if (delta < -beta) return delta + beta;
  return S(0);
}

// Elastic-net attack via iterative shrinkage-thresholding; the EN decision
// rule picks the successful iterate with minimal beta*L1 + L2^2.
template <typename S>
AttackResult<S> ead(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& labels,
                    const AttackSpec& spec) {
  spec.validate();
  const Index b = x.rows(), d = x.cols();
  const S kappa = static_cast<S>(spec.kappa);
  const S beta = static_cast<S>(spec.beta);
  const S lr = static_cast<S>(spec.learning_rate);

  auto cost_of = [&](const Tensor<S>& z) {
    std::vector<S> cost(b);
    for (Index i = 0; i < b; ++i) {
      auto delta = z.v.segment(i * d, d) - x.v.segment(i * d, d);
      const S l1 = delta.abs().sum();
      const S sq = delta.square().sum();
      cost[i] = spec.decision_rule == DecisionRule::kEn ? beta * l1 + sq : l1;
    }
    return cost;
  };

  Tensor<S> z = x;
  detail::BestTracker<S> track(x);
  for (int it = 0; it < spec.max_iterations; ++it) {
    Context<S> ctx;
    Var<S> zv = ctx.leaf(z);
    Var<S> logits = view_forward(ctx, view, zv);
    Var<S> flat = reshape(zv, {b, d});
    Var<S> dist = row_sum(square(sub(flat, ctx.constant(Tensor<S>(Shape{b, d}, x.v)))));
    Var<S> hinge = detail::margin_hinge(logits, labels, spec.target, kappa);
    Var<S> obj = sum_all(add(dist, mul_scalar(hinge, static_cast<S>(spec.c))));
    Tensor<S> g = grad(obj, {zv})[0].value();

    track.offer(z, detail::margins(logits.value(), labels, spec.target), kappa, cost_of(z));

    z.v -= lr * g.v;
    for (Index i = 0; i < b * d; ++i) z.v[i] = x.v[i] + soft_threshold(z.v[i] - x.v[i], beta);
    detail::clamp01(z);
  }
  {
    Tensor<S> logits = view_logits(view, z);
    track.offer(z, detail::margins(logits, labels, spec.target), kappa, cost_of(z));
    track.finalize(z);
  }
  return {std::move(track.best_x), std::move(track.success)};
}

template <typename S>
Tensor<S> fgsm(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
               const AttackSpec& spec) {
  return fgsm_with(ce_grad_fn(view, y), x, spec);
}
template <typename S>
Tensor<S> fgm(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
              const AttackSpec& spec) {
  return fgm_with(ce_grad_fn(view, y), x, spec);
}
template <typename S>
Tensor<S> rfgsm(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
                const AttackSpec& spec) {
  return rfgsm_with(ce_grad_fn(view, y), x, spec);
}
template <typename S>
Tensor<S> pgd(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
              const AttackSpec& spec) {
  return pgd_with(ce_grad_fn(view, y), x, spec);
}
template <typename S>
Tensor<S> mifgsm(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
                 const AttackSpec& spec) {
  return mifgsm_with(ce_grad_fn(view, y), x, spec);
}

// Dispatch wrapper: crafts the batch in fixed-size chunks and reports the
// per-sample success mask (prediction flipped, or kappa-margin for cw/ead).
template <typename S>
AttackResult<S> run_attack(const ModelView<S>& view, const Tensor<S>& x, const std::vector<int>& y,
                           const AttackSpec& spec, Index chunk = 64) {
  spec.validate();
  const Index b = x.rows();
  if (static_cast<Index>(y.size()) != b)
    throw ShapeError("run_attack: " + std::to_string(y.size()) + " labels for batch of " +
                     std::to_string(b));
  AttackResult<S> out{Tensor<S>::zeros(x.shape), std::vector<uint8_t>(b, 0)};
  if (b == 0) return out;
  const Index d = x.cols();

  for (Index at = 0; at < b; at += chunk) {
    const Index m = std::min(chunk, b - at);
    Shape cs = x.shape;
    cs[0] = m;
    Tensor<S> cx(cs, x.v.segment(at * d, m * d));
    std::vector<int> cy(y.begin() + at, y.begin() + at + m);
    AttackSpec cspec = spec;
    // per-chunk derived seed keyed by absolute sample offset
    cspec.rng_seed = derive_seed(spec.rng_seed, static_cast<uint64_t>(at));

    Tensor<S> xa;
    std::vector<uint8_t> succ;
    switch (spec.kind) {
      case AttackKind::kFgsm: xa = fgsm(view, cx, cy, cspec); break;
      case AttackKind::kFgm: xa = fgm(view, cx, cy, cspec); break;
      case AttackKind::kRfgsm: xa = rfgsm(view, cx, cy, cspec); break;
      case AttackKind::kPgd: xa = pgd(view, cx, cy, cspec); break;
      case AttackKind::kMifgsm: xa = mifgsm(view, cx, cy, cspec); break;
      case AttackKind::kCw: {
        auto r = cw(view, cx, cy, cspec);
        xa = std::move(r.x_adv);
        succ = std::move(r.success);
        break;
      }
      case AttackKind::kEad: {
        auto r = ead(view, cx, cy, cspec);
        xa = std::move(r.x_adv);
        succ = std::move(r.success);
        break;
      }
    }
    if (succ.empty()) {
      const std::vector<int> pred = argmax_rows(view_logits(view, xa));
      succ.resize(m);
      for (Index i = 0; i < m; ++i)
        succ[i] = spec.target < 0 ? pred[i] != cy[i] : pred[i] == spec.target;
    }
    out.x_adv.v.segment(at * d, m * d) = xa.v;
    std::copy(succ.begin(), succ.end(), out.success.begin() + at);
  }
  return out;
}

// ---- norm audits (used by tests and the eval harness) ----------------------

template <typename S>
double linf_dist(const Tensor<S>& a, const Tensor<S>& b) {
  return static_cast<double>((a.v - b.v).abs().maxCoeff());
}

template <typename S>
double max_row_l2_dist(const Tensor<S>& a, const Tensor<S>& b) {
  const Index n = a.rows(), d = a.cols();
  double worst = 0;
  for (Index i = 0; i < n; ++i)
    worst = std::max(worst, std::sqrt(static_cast<double>(
                                (a.v.segment(i * d, d) - b.v.segment(i * d, d)).square().sum())));
  return worst;
}

}  // namespace disjoint
