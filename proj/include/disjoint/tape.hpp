// Reverse-mode autodiff tape over dense tensors.
//
// A Context records primitive ops as an append-only node sequence; values are
// computed eagerly. Backward passes emit their adjoint arithmetic as ordinary
// tape primitives, so gradients are themselves differentiable (the
// second-order path the transfer penalties need). Forward-only ops (sign,
// comparison masks, detached row-max) stop gradient flow by construction.
#pragma once

#include "disjoint/tensor.hpp"

#include <map>
#include <memory>
#include <utility>
#include <vector>

namespace disjoint {

enum class Op : uint8_t {
  kLeaf,
  kConstant,
  // elementwise, shape-preserving
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kRelu,
  kTanh,
  kExp,
  kLog,
  kSqrt,
  kSquare,
  kAbs,
  kAddScalar,   // attr.a
  kMulScalar,   // attr.a
  kMaxWith,     // attr.a: max(x, a)
  kClamp,       // attr.a (lo), attr.b (hi)
  // forward-only: zero gradient contribution
  kSign,
  kGtZeroMask,   // 1 where x > 0, else 0
  kInRangeMask,  // 1 where attr.a < x < attr.b, else 0
  kRowMax,       // per-row max, detached (shift-invariance trick)
  // structure
  kMatMul,      // [m,k] x [k,n]
  kMatMulTN,    // A^T B: [k,m] x [k,n] -> [m,n]
  kMatMulNT,    // A B^T: [m,k] x [n,k] -> [m,n]
  kTranspose2,  // 2-D
  kReshape,     // attr.shape
  kRowSum,      // [b, rest...] -> [b]
  kRowBcast,    // [b] -> [b, attr.n]
  kColSum,      // [r, n] -> [n]
  kColBcast,    // [n] -> [attr.n, n]
  kSumAll,      // -> [1]
  kBcastTo,     // [1] -> attr.shape
  kGatherIdx,   // out[i] = idx[i] < 0 ? 0 : x[idx[i]]; attr.idx, attr.shape
  kScatterIdx,  // transpose of kGatherIdx; attr.idx, attr.shape
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kNeg: return "neg";
    case Op::kRelu: return "relu";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSquare: return "square";
    case Op::kAbs: return "abs";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kMaxWith: return "max_with";
    case Op::kClamp: return "clamp";
    case Op::kSign: return "sign";
    case Op::kGtZeroMask: return "gt_zero_mask";
    case Op::kInRangeMask: return "in_range_mask";
    case Op::kRowMax: return "row_max";
    case Op::kMatMul: return "matmul";
    case Op::kMatMulTN: return "matmul_tn";
    case Op::kMatMulNT: return "matmul_nt";
    case Op::kTranspose2: return "transpose2";
    case Op::kReshape: return "reshape";
    case Op::kRowSum: return "row_sum";
    case Op::kRowBcast: return "row_bcast";
    case Op::kColSum: return "col_sum";
    case Op::kColBcast: return "col_bcast";
    case Op::kSumAll: return "sum_all";
    case Op::kBcastTo: return "bcast_to";
    case Op::kGatherIdx: return "gather_idx";
    case Op::kScatterIdx: return "scatter_idx";
  }
  return "?";
}

inline bool op_forward_only(Op op) {
  return op == Op::kSign || op == Op::kGtZeroMask || op == Op::kInRangeMask || op == Op::kRowMax;
}

using IdxMap = std::shared_ptr<const std::vector<int32_t>>;

template <typename Scalar>
struct NodeAttr {
  Scalar a = 0;
  Scalar b = 0;
  Index n = 0;
  Shape shape;
  IdxMap idx;
};

template <typename Scalar>
struct Node {
  Op op;
  int32_t p0 = -1;
  int32_t p1 = -1;
  bool requires_grad = false;
  NodeAttr<Scalar> attr;
  Tensor<Scalar> val;
};

template <typename Scalar>
class Context;

// Lightweight handle to a tape node.
template <typename Scalar>
struct Var {
  Context<Scalar>* ctx = nullptr;
  int32_t id = -1;

  bool valid() const { return ctx != nullptr && id >= 0; }
  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape; }
  Index size() const { return value().size(); }
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> eval_node(const Node<Scalar>& n, const Tensor<Scalar>& x0, const Tensor<Scalar>* x1) {
  using T = Tensor<Scalar>;
  switch (n.op) {
    case Op::kLeaf:
    case Op::kConstant:
      return n.val;  // replay only; values are stored at registration
    case Op::kAdd: return T(x0.shape, x0.v + x1->v);
    case Op::kSub: return T(x0.shape, x0.v - x1->v);
    case Op::kMul: return T(x0.shape, x0.v * x1->v);
    case Op::kDiv: return T(x0.shape, x0.v / x1->v);
    case Op::kNeg: return T(x0.shape, -x0.v);
    case Op::kRelu: return T(x0.shape, x0.v.max(Scalar(0)));
    case Op::kTanh: return T(x0.shape, x0.v.tanh());
    case Op::kExp: return T(x0.shape, x0.v.exp());
    case Op::kLog: return T(x0.shape, x0.v.log());
    case Op::kSqrt: return T(x0.shape, x0.v.sqrt());
    case Op::kSquare: return T(x0.shape, x0.v.square());
    case Op::kAbs: return T(x0.shape, x0.v.abs());
    case Op::kAddScalar: return T(x0.shape, x0.v + n.attr.a);
    case Op::kMulScalar: return T(x0.shape, x0.v * n.attr.a);
    case Op::kMaxWith: return T(x0.shape, x0.v.max(n.attr.a));
    case Op::kClamp: return T(x0.shape, x0.v.max(n.attr.a).min(n.attr.b));
    case Op::kSign:
      return T(x0.shape, x0.v.sign());
    case Op::kGtZeroMask:
      return T(x0.shape, (x0.v > Scalar(0)).template cast<Scalar>());
    case Op::kInRangeMask:
      return T(x0.shape, ((x0.v > n.attr.a) && (x0.v < n.attr.b)).template cast<Scalar>());
    case Op::kRowMax: {
      T out = T::zeros({x0.rows()});
      out.v = x0.mat().rowwise().maxCoeff().array();
      return out;
    }
    case Op::kMatMul: {
      T out = T::zeros({x0.shape[0], x1->shape[1]});
      out.mat().noalias() = x0.mat() * x1->mat();
      return out;
    }
    case Op::kMatMulTN: {
      T out = T::zeros({x0.shape[1], x1->shape[1]});
      out.mat().noalias() = x0.mat().transpose() * x1->mat();
      return out;
    }
    case Op::kMatMulNT: {
      T out = T::zeros({x0.shape[0], x1->shape[0]});
      out.mat().noalias() = x0.mat() * x1->mat().transpose();
      return out;
    }
    case Op::kTranspose2: {
      T out = T::zeros({x0.shape[1], x0.shape[0]});
      out.mat().noalias() = x0.mat().transpose();
      return out;
    }
    case Op::kReshape: return T(n.attr.shape, x0.v);
    case Op::kRowSum: {
      T out = T::zeros({x0.rows()});
      out.v = x0.mat().rowwise().sum().array();
      return out;
    }
    case Op::kRowBcast: {
      T out = T::zeros({x0.size(), n.attr.n});
      out.mat().colwise() = x0.v.matrix();
      return out;
    }
    case Op::kColSum: {
      T out = T::zeros({x0.shape[1]});
      out.v = x0.mat().colwise().sum().array().transpose();
      return out;
    }
    case Op::kColBcast: {
      T out = T::zeros({n.attr.n, x0.size()});
      out.mat().rowwise() = x0.v.matrix().transpose();
      return out;
    }
    case Op::kSumAll: return T::scalar(x0.v.sum());
    case Op::kBcastTo: return T::full(n.attr.shape, x0.v[0]);
    case Op::kGatherIdx: {
      const int32_t* __restrict idx = n.attr.idx->data();
      const size_t count = n.attr.idx->size();
      T out = T::zeros(n.attr.shape);
      const Scalar* __restrict src = x0.v.data();
      Scalar* __restrict dst = out.v.data();
      for (size_t i = 0; i < count; ++i) dst[i] = idx[i] < 0 ? Scalar(0) : src[idx[i]];
      return out;
    }
    case Op::kScatterIdx: {
      const int32_t* __restrict idx = n.attr.idx->data();
      const size_t count = n.attr.idx->size();
      T out = T::zeros(n.attr.shape);
      const Scalar* __restrict src = x0.v.data();
      Scalar* __restrict dst = out.v.data();
      for (size_t i = 0; i < count; ++i)
        if (idx[i] >= 0) dst[idx[i]] += src[i];
      return out;
    }
  }
  throw ValueError("eval_node: unknown op");
}

}  // namespace detail

// Owns one tape. Construction is single-threaded; independent contexts may
// run in parallel.
template <typename Scalar>
class Context {
 public:
  Var<Scalar> leaf(Tensor<Scalar> t) { return push_value(Op::kLeaf, std::move(t), true); }
  Var<Scalar> constant(Tensor<Scalar> t) { return push_value(Op::kConstant, std::move(t), false); }
  Var<Scalar> constant(Scalar x) { return constant(Tensor<Scalar>::scalar(x)); }

  const Node<Scalar>& node(int32_t id) const { return nodes_[id]; }
  size_t size() const { return nodes_.size(); }

  // memoization of pure gathers: the same patch matrix is shared when one
  // input feeds several members
  int32_t find_gather(int32_t parent, const void* idx) const {
    auto it = gather_cache_.find({parent, idx});
    return it == gather_cache_.end() ? -1 : it->second;
  }
  void remember_gather(int32_t parent, const void* idx, int32_t node) {
    gather_cache_.emplace(std::pair<int32_t, const void*>{parent, idx}, node);
  }

  Var<Scalar> push(Op op, int32_t p0, int32_t p1, NodeAttr<Scalar> attr = {}) {
    Node<Scalar> n;
    n.op = op;
    n.p0 = p0;
    n.p1 = p1;
    n.attr = std::move(attr);
    const bool parent_req =
        (p0 >= 0 && nodes_[p0].requires_grad) || (p1 >= 0 && nodes_[p1].requires_grad);
    n.requires_grad = parent_req && !op_forward_only(op);
    n.val = detail::eval_node<Scalar>(n, nodes_[p0].val, p1 >= 0 ? &nodes_[p1].val : nullptr);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  // Recomputes every non-leaf value from the stored leaves and compares
  // bit-for-bit against the recorded forward pass.
  bool replay_matches() const {
    for (const auto& n : nodes_) {
      if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
      Tensor<Scalar> redo =
          detail::eval_node<Scalar>(n, nodes_[n.p0].val, n.p1 >= 0 ? &nodes_[n.p1].val : nullptr);
      if (redo.shape != n.val.shape || (redo.v != n.val.v).any()) return false;
    }
    return true;
  }

 private:
  Var<Scalar> push_value(Op op, Tensor<Scalar> t, bool differentiable) {
    Node<Scalar> n;
    n.op = op;
    n.requires_grad = differentiable;
    n.val = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node<Scalar>> nodes_;
  std::map<std::pair<int32_t, const void*>, int32_t> gather_cache_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return ctx->node(id).val;
}

}  // namespace disjoint
