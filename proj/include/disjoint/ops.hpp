// Primitive builders, composite layers, and the reverse pass.
#pragma once

#include "disjoint/tape.hpp"

#include <array>
#include <functional>
#include <map>
#include <mutex>

namespace disjoint {

namespace detail {

template <typename S>
void check_binary(const char* op, Var<S> a, Var<S> b) {
  if (a.ctx != b.ctx) throw ValueError(std::string(op) + ": operands from different contexts");
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename S>
void check_2d(const char* op, Var<S> a) {
  if (a.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(a.shape()));
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::check_binary("add", a, b);
  return a.ctx->push(Op::kAdd, a.id, b.id);
}
template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::check_binary("sub", a, b);
  return a.ctx->push(Op::kSub, a.id, b.id);
}
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::check_binary("mul", a, b);
  return a.ctx->push(Op::kMul, a.id, b.id);
}
template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  detail::check_binary("div", a, b);
  return a.ctx->push(Op::kDiv, a.id, b.id);
}
template <typename S>
Var<S> neg(Var<S> a) {
  return a.ctx->push(Op::kNeg, a.id, -1);
}
template <typename S>
Var<S> relu(Var<S> a) {
  return a.ctx->push(Op::kRelu, a.id, -1);
}
template <typename S>
Var<S> tanh_(Var<S> a) {
  return a.ctx->push(Op::kTanh, a.id, -1);
}
template <typename S>
Var<S> exp_(Var<S> a) {
  return a.ctx->push(Op::kExp, a.id, -1);
}
template <typename S>
Var<S> log_(Var<S> a) {
  return a.ctx->push(Op::kLog, a.id, -1);
}
template <typename S>
Var<S> sqrt_(Var<S> a) {
  return a.ctx->push(Op::kSqrt, a.id, -1);
}
template <typename S>
Var<S> square(Var<S> a) {
  return a.ctx->push(Op::kSquare, a.id, -1);
}
template <typename S>
Var<S> abs_(Var<S> a) {
  return a.ctx->push(Op::kAbs, a.id, -1);
}
template <typename S>
Var<S> sign_(Var<S> a) {
  return a.ctx->push(Op::kSign, a.id, -1);
}
template <typename S>
Var<S> gt_zero_mask(Var<S> a) {
  return a.ctx->push(Op::kGtZeroMask, a.id, -1);
}
template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  NodeAttr<S> at;
  at.a = c;
  return a.ctx->push(Op::kAddScalar, a.id, -1, std::move(at));
}
template <typename S>
Var<S> mul_scalar(Var<S> a, S c) {
  NodeAttr<S> at;
  at.a = c;
  return a.ctx->push(Op::kMulScalar, a.id, -1, std::move(at));
}
// max(x, c): subgradient 0 at x == c.
template <typename S>
Var<S> max_with(Var<S> a, S c) {
  NodeAttr<S> at;
  at.a = c;
  return a.ctx->push(Op::kMaxWith, a.id, -1, std::move(at));
}
template <typename S>
Var<S> clamp_(Var<S> a, S lo, S hi) {
  NodeAttr<S> at;
  at.a = lo;
  at.b = hi;
  return a.ctx->push(Op::kClamp, a.id, -1, std::move(at));
}
template <typename S>
Var<S> in_range_mask(Var<S> a, S lo, S hi) {
  NodeAttr<S> at;
  at.a = lo;
  at.b = hi;
  return a.ctx->push(Op::kInRangeMask, a.id, -1, std::move(at));
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::check_2d("matmul", a);
  detail::check_2d("matmul", b);
  if (a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return a.ctx->push(Op::kMatMul, a.id, b.id);
}
// A^T * B without materializing the transpose.
template <typename S>
Var<S> matmul_tn(Var<S> a, Var<S> b) {
  detail::check_2d("matmul_tn", a);
  detail::check_2d("matmul_tn", b);
  if (a.shape()[0] != b.shape()[0])
    throw ShapeError("matmul_tn: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return a.ctx->push(Op::kMatMulTN, a.id, b.id);
}
// A * B^T without materializing the transpose.
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  detail::check_2d("matmul_nt", a);
  detail::check_2d("matmul_nt", b);
  if (a.shape()[1] != b.shape()[1])
    throw ShapeError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  return a.ctx->push(Op::kMatMulNT, a.id, b.id);
}
template <typename S>
Var<S> transpose2(Var<S> a) {
  detail::check_2d("transpose2", a);
  return a.ctx->push(Op::kTranspose2, a.id, -1);
}
template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  NodeAttr<S> at;
  at.shape = std::move(shape);
  return a.ctx->push(Op::kReshape, a.id, -1, std::move(at));
}
template <typename S>
Var<S> row_sum(Var<S> a) {
  return a.ctx->push(Op::kRowSum, a.id, -1);
}
template <typename S>
Var<S> row_max(Var<S> a) {
  return a.ctx->push(Op::kRowMax, a.id, -1);
}
template <typename S>
Var<S> row_bcast(Var<S> v, Index cols) {
  if (v.shape().size() != 1) throw ShapeError("row_bcast: expected 1-D, got " + shape_str(v.shape()));
  NodeAttr<S> at;
  at.n = cols;
  return v.ctx->push(Op::kRowBcast, v.id, -1, std::move(at));
}
template <typename S>
Var<S> col_sum(Var<S> a) {
  detail::check_2d("col_sum", a);
  return a.ctx->push(Op::kColSum, a.id, -1);
}
template <typename S>
Var<S> col_bcast(Var<S> v, Index rows) {
  if (v.shape().size() != 1) throw ShapeError("col_bcast: expected 1-D, got " + shape_str(v.shape()));
  NodeAttr<S> at;
  at.n = rows;
  return v.ctx->push(Op::kColBcast, v.id, -1, std::move(at));
}
template <typename S>
Var<S> sum_all(Var<S> a) {
  return a.ctx->push(Op::kSumAll, a.id, -1);
}
template <typename S>
Var<S> bcast_to(Var<S> s, Shape shape) {
  if (s.size() != 1) throw ShapeError("bcast_to: expected scalar, got " + shape_str(s.shape()));
  NodeAttr<S> at;
  at.shape = std::move(shape);
  return s.ctx->push(Op::kBcastTo, s.id, -1, std::move(at));
}
template <typename S>
Var<S> gather_idx(Var<S> a, IdxMap idx, Shape out_shape) {
  if (static_cast<Index>(idx->size()) != numel(out_shape))
    throw ShapeError("gather_idx: index map size does not match output " + shape_str(out_shape));
  const void* key = idx.get();
  const int32_t hit = a.ctx->find_gather(a.id, key);
  if (hit >= 0) return {a.ctx, hit};
  NodeAttr<S> at;
  at.shape = std::move(out_shape);
  at.idx = std::move(idx);
  Var<S> out = a.ctx->push(Op::kGatherIdx, a.id, -1, std::move(at));
  a.ctx->remember_gather(a.id, key, out.id);
  return out;
}
template <typename S>
Var<S> scatter_idx(Var<S> a, IdxMap idx, Shape out_shape) {
  if (static_cast<Index>(idx->size()) != a.size())
    throw ShapeError("scatter_idx: index map size does not match input " + shape_str(a.shape()));
  NodeAttr<S> at;
  at.shape = std::move(out_shape);
  at.idx = std::move(idx);
  return a.ctx->push(Op::kScatterIdx, a.id, -1, std::move(at));
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return mul(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a) {
  return neg(a);
}

// ---- composites ----------------------------------------------------------

template <typename S>
Var<S> mean_all(Var<S> a) {
  return mul_scalar(sum_all(a), S(1) / static_cast<S>(a.size()));
}

template <typename S>
Var<S> dot(Var<S> a, Var<S> b) {
  detail::check_binary("dot", a, b);
  return sum_all(mul(a, b));
}

template <typename S>
Var<S> l1_norm(Var<S> a) {
  return sum_all(abs_(a));
}

// Guarded: gradient is exactly zero once the norm drops below 1e-12.
template <typename S>
Var<S> l2_norm(Var<S> a) {
  return sqrt_(max_with(sum_all(square(a)), S(1e-24)));
}

template <typename S>
Var<S> row_l2_norms(Var<S> a) {
  return sqrt_(max_with(row_sum(square(a)), S(1e-24)));
}

template <typename S>
Var<S> softmax_rows(Var<S> z) {
  detail::check_2d("softmax", z);
  const Index n = z.shape()[1];
  Var<S> shifted = sub(z, row_bcast(row_max(z), n));
  Var<S> e = exp_(shifted);
  return div(e, row_bcast(row_sum(e), n));
}

// Per-row gather: out[i] = x[i, cols[i]].
template <typename S>
Var<S> gather_cols(Var<S> x, const std::vector<int>& cols) {
  detail::check_2d("gather_cols", x);
  const Index b = x.shape()[0];
  const Index n = x.shape()[1];
  if (static_cast<Index>(cols.size()) != b)
    throw ShapeError("gather_cols: " + std::to_string(cols.size()) + " indices for " +
                     std::to_string(b) + " rows");
  auto idx = std::make_shared<std::vector<int32_t>>(b);
  for (Index i = 0; i < b; ++i) {
    if (cols[i] < 0 || cols[i] >= n)
      throw ValueError("gather_cols: index " + std::to_string(cols[i]) + " out of range [0," +
                       std::to_string(n) + ") at row " + std::to_string(i));
    (*idx)[i] = static_cast<int32_t>(i * n + cols[i]);
  }
  return gather_idx(x, std::move(idx), Shape{b});
}

enum class Reduce { kMean, kSum };

// Mean (or sum) over the batch of -log softmax(logits)[label].
template <typename S>
Var<S> cross_entropy(Var<S> logits, const std::vector<int>& labels, Reduce reduce = Reduce::kMean) {
  detail::check_2d("cross_entropy", logits);
  const Index n = logits.shape()[1];
  Var<S> m = row_max(logits);
  Var<S> lse = add(m, log_(row_sum(exp_(sub(logits, row_bcast(m, n))))));
  Var<S> picked = gather_cols(logits, labels);
  Var<S> per_sample = sub(lse, picked);
  return reduce == Reduce::kMean ? mean_all(per_sample) : sum_all(per_sample);
}

namespace detail {

using MapKey = std::array<Index, 8>;

inline IdxMap cached_map(const MapKey& key, const std::function<std::vector<int32_t>()>& build) {
  static std::map<MapKey, IdxMap> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto idx = std::make_shared<std::vector<int32_t>>(build());
  cache.emplace(key, idx);
  return idx;
}

inline IdxMap im2col_map(Index n, Index c, Index h, Index w, Index k, Index stride, Index pad,
                         Index oh, Index ow) {
  return cached_map({0, n, c, h, w, k, stride, pad}, [=] {
    std::vector<int32_t> idx(n * oh * ow * c * k * k);
    size_t p = 0;
    for (Index in = 0; in < n; ++in)
      for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x)
          for (Index ic = 0; ic < c; ++ic)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index iy = y * stride + ky - pad;
                const Index ix = x * stride + kx - pad;
                idx[p++] = (iy < 0 || iy >= h || ix < 0 || ix >= w)
                               ? -1
                               : static_cast<int32_t>(((in * c + ic) * h + iy) * w + ix);
              }
    return idx;
  });
}

// [N*OH*OW, F] row-major -> [N, F, OH, OW]
inline IdxMap nhwf_to_nfhw_map(Index n, Index oh, Index ow, Index f) {
  return cached_map({1, n, oh, ow, f, 0, 0, 0}, [=] {
    std::vector<int32_t> idx(n * f * oh * ow);
    size_t p = 0;
    for (Index in = 0; in < n; ++in)
      for (Index jf = 0; jf < f; ++jf)
        for (Index y = 0; y < oh; ++y)
          for (Index x = 0; x < ow; ++x)
            idx[p++] = static_cast<int32_t>(((in * oh + y) * ow + x) * f + jf);
    return idx;
  });
}

inline IdxMap pool2_map(Index n, Index c, Index h, Index w) {
  return cached_map({2, n, c, h, w, 0, 0, 0}, [=] {
    const Index oh = h / 2, ow = w / 2;
    std::vector<int32_t> idx(n * c * oh * ow * 4);
    size_t p = 0;
    for (Index in = 0; in < n; ++in)
      for (Index ic = 0; ic < c; ++ic)
        for (Index y = 0; y < oh; ++y)
          for (Index x = 0; x < ow; ++x)
            for (Index dy = 0; dy < 2; ++dy)
              for (Index dx = 0; dx < 2; ++dx)
                idx[p++] =
                    static_cast<int32_t>(((in * c + ic) * h + 2 * y + dy) * w + 2 * x + dx);
    return idx;
  });
}

}  // namespace detail

// 3x3-style convolution via patch gather + one GEMM. Weights are stored flat
// as [filters, in_channels*k*k].
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> bias, Index k, Index stride, Index pad) {
  const Shape& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("conv2d: expected NCHW input, got " + shape_str(xs));
  detail::check_2d("conv2d", w);
  const Index n = xs[0], c = xs[1], h = xs[2], ww = xs[3];
  const Index f = w.shape()[0];
  if (w.shape()[1] != c * k * k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match " +
                     std::to_string(c) + " input channels with k=" + std::to_string(k));
  const Index oh = (h + 2 * pad - k) / stride + 1;
  const Index ow = (ww + 2 * pad - k) / stride + 1;
  Var<S> patches =
      gather_idx(x, detail::im2col_map(n, c, h, ww, k, stride, pad, oh, ow), {n * oh * ow, c * k * k});
  Var<S> out2 = add(matmul_nt(patches, w), col_bcast(bias, n * oh * ow));
  return gather_idx(out2, detail::nhwf_to_nfhw_map(n, oh, ow, f), {n, f, oh, ow});
}

// 2x2 average pooling, stride 2.
template <typename S>
Var<S> avgpool2(Var<S> x) {
  const Shape& xs = x.shape();
  if (xs.size() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0)
    throw ShapeError("avgpool2: expected NCHW with even spatial dims, got " + shape_str(xs));
  const Index n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  Var<S> patches = gather_idx(x, detail::pool2_map(n, c, h, w), {n * c * (h / 2) * (w / 2), 4});
  return reshape(mul_scalar(row_sum(patches), S(0.25)), {n, c, h / 2, w / 2});
}

// x[b,in] * w[in,out] + bias[out]
template <typename S>
Var<S> dense(Var<S> x, Var<S> w, Var<S> bias) {
  return add(matmul(x, w), col_bcast(bias, x.shape()[0]));
}

// ---- reverse pass ---------------------------------------------------------

namespace detail {

template <typename S, typename Acc>
void emit_vjp(Context<S>& ctx, int32_t id, Var<S> g, Acc&& acc) {
  // copies, not references: emitting ops below reallocates the node store
  struct {
    Op op;
    int32_t p0, p1;
    NodeAttr<S> attr;
  } n;
  {
    const Node<S>& ref = ctx.node(id);
    n.op = ref.op;
    n.p0 = ref.p0;
    n.p1 = ref.p1;
    n.attr = ref.attr;
  }
  Var<S> self{&ctx, id};
  Var<S> p0{&ctx, n.p0};
  Var<S> p1{&ctx, n.p1};
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return;
    case Op::kAdd:
      acc(n.p0, g);
      acc(n.p1, g);
      return;
    case Op::kSub:
      acc(n.p0, g);
      acc(n.p1, neg(g));
      return;
    case Op::kMul:
      acc(n.p0, mul(g, p1));
      acc(n.p1, mul(g, p0));
      return;
    case Op::kDiv:
      acc(n.p0, div(g, p1));
      acc(n.p1, neg(div(mul(g, self), p1)));
      return;
    case Op::kNeg:
      acc(n.p0, neg(g));
      return;
    case Op::kRelu:
      acc(n.p0, mul(g, gt_zero_mask(p0)));
      return;
    case Op::kTanh:
      acc(n.p0, mul(g, add_scalar(neg(square(self)), S(1))));
      return;
    case Op::kExp:
      acc(n.p0, mul(g, self));
      return;
    case Op::kLog:
      acc(n.p0, div(g, p0));
      return;
    case Op::kSqrt:
      acc(n.p0, div(mul_scalar(g, S(0.5)), self));
      return;
    case Op::kSquare:
      acc(n.p0, mul(g, mul_scalar(p0, S(2))));
      return;
    case Op::kAbs:
      acc(n.p0, mul(g, sign_(p0)));
      return;
    case Op::kAddScalar:
      acc(n.p0, g);
      return;
    case Op::kMulScalar:
      acc(n.p0, mul_scalar(g, n.attr.a));
      return;
    case Op::kMaxWith:
      acc(n.p0, mul(g, gt_zero_mask(add_scalar(p0, -n.attr.a))));
      return;
    case Op::kClamp:
      acc(n.p0, mul(g, in_range_mask(p0, n.attr.a, n.attr.b)));
      return;
    case Op::kSign:
    case Op::kGtZeroMask:
    case Op::kInRangeMask:
    case Op::kRowMax:
      return;
    case Op::kMatMul:
      acc(n.p0, matmul_nt(g, p1));
      acc(n.p1, matmul_tn(p0, g));
      return;
    case Op::kMatMulTN:  // C = A^T B
      acc(n.p0, matmul_nt(p1, g));
      acc(n.p1, matmul(p0, g));
      return;
    case Op::kMatMulNT:  // C = A B^T
      acc(n.p0, matmul(g, p1));
      acc(n.p1, matmul_tn(g, p0));
      return;
    case Op::kTranspose2:
      acc(n.p0, transpose2(g));
      return;
    case Op::kReshape:
      acc(n.p0, reshape(g, p0.shape()));
      return;
    case Op::kRowSum:
      acc(n.p0, reshape(row_bcast(g, p0.value().cols()), p0.shape()));
      return;
    case Op::kRowBcast:
      acc(n.p0, row_sum(g));
      return;
    case Op::kColSum:
      acc(n.p0, col_bcast(g, p0.shape()[0]));
      return;
    case Op::kColBcast:
      acc(n.p0, col_sum(g));
      return;
    case Op::kSumAll:
      acc(n.p0, bcast_to(g, p0.shape()));
      return;
    case Op::kBcastTo:
      acc(n.p0, sum_all(g));
      return;
    case Op::kGatherIdx:
      acc(n.p0, scatter_idx(g, n.attr.idx, p0.shape()));
      return;
    case Op::kScatterIdx:
      acc(n.p0, gather_idx(g, n.attr.idx, p0.shape()));
      return;
  }
}

}  // namespace detail

// Gradient of a scalar loss with respect to each tensor in `wrt`.
//
// With differentiable=true the returned tensors stay tape-registered, so a
// later grad() through them reaches whatever the inner gradients depend on.
// A wrt tensor the loss does not reach yields a zero tensor of its shape.
template <typename S>
std::vector<Var<S>> grad(Var<S> loss, const std::vector<Var<S>>& wrt, bool differentiable = false) {
  Context<S>& ctx = *loss.ctx;
  if (loss.size() != 1)
    throw ValueError("grad: loss must be scalar, got shape " + shape_str(loss.shape()));
  const int32_t last = loss.id;
  std::vector<int32_t> adj(static_cast<size_t>(last) + 1, -1);
  adj[last] = ctx.constant(S(1)).id;
  auto acc = [&](int32_t parent, Var<S> contrib) {
    if (!ctx.node(parent).requires_grad) return;
    adj[parent] = adj[parent] < 0 ? contrib.id : add(Var<S>{&ctx, adj[parent]}, contrib).id;
  };
  for (int32_t i = last; i >= 0; --i) {
    if (adj[i] < 0 || !ctx.node(i).requires_grad) continue;
    detail::emit_vjp(ctx, i, Var<S>{&ctx, adj[i]}, acc);
  }
  std::vector<Var<S>> out;
  out.reserve(wrt.size());
  for (Var<S> w : wrt) {
    if (w.id <= last && adj[w.id] >= 0) {
      Var<S> g{&ctx, adj[w.id]};
      out.push_back(differentiable ? g : ctx.constant(g.value()));
    } else {
      out.push_back(ctx.constant(Tensor<S>::zeros(w.shape())));
    }
  }
  return out;
}

// ---- value-level helpers --------------------------------------------------

// Argmax per row; ties resolved toward the lower class index.
template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& t) {
  const Index b = t.rows(), n = t.cols();
  std::vector<int> out(b);
  auto m = t.mat();
  for (Index i = 0; i < b; ++i) {
    int best = 0;
    for (Index j = 1; j < n; ++j)
      if (m(i, j) > m(i, best)) best = static_cast<int>(j);
    out[i] = best;
  }
  return out;
}

template <typename S>
double accuracy(const Tensor<S>& logits, const std::vector<int>& labels) {
  const std::vector<int> pred = argmax_rows(logits);
  Index hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace disjoint
