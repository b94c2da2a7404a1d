// Classifier architectures and model-set management.
//
// Two desk-scale architectures: an MLP for low-dimensional synthetic data and
// a small convnet (2x[conv3x3 -> relu -> 2x2 avg pool] -> dense -> relu ->
// dense) for image data. No batch normalization: batch statistics interact
// badly with the double-backward path and with determinism.
#pragma once

#include "disjoint/ops.hpp"
#include "disjoint/rng.hpp"

#include <string>

namespace disjoint {

enum class Arch { kMlp, kSmallConv };

struct ModelConfig {
  Arch arch = Arch::kMlp;
  Shape input_shape;           // {d} for mlp, {c, h, w} for small_conv
  int classes = 2;
  std::vector<Index> hidden;   // mlp hidden layer widths
  Index conv1_channels = 8;    // small_conv channel plan
  Index conv2_channels = 16;
  Index dense_width = 64;

  Index input_size() const { return numel(input_shape); }

  void validate() const {
    if (classes < 2) throw ValueError("model config: class count must be >= 2");
    if (arch == Arch::kMlp) {
      if (input_shape.size() != 1 || input_shape[0] <= 0)
        throw ValueError("model config: mlp needs a 1-D input shape");
      for (Index w : hidden)
        if (w <= 0) throw ValueError("model config: hidden widths must be positive");
    } else {
      if (input_shape.size() != 3)
        throw ValueError("model config: small_conv needs a CxHxW input shape");
      if (input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0)
        throw ValueError("model config: small_conv needs spatial dims divisible by 4");
      if (conv1_channels <= 0 || conv2_channels <= 0 || dense_width <= 0)
        throw ValueError("model config: channel plan must be positive");
    }
  }
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> t;
};

template <typename Scalar>
struct Params {
  std::vector<NamedTensor<Scalar>> tensors;

  Index count() const {
    Index n = 0;
    for (const auto& nt : tensors) n += nt.t.size();
    return n;
  }

  template <typename T>
  Params<T> cast() const {
    Params<T> out;
    out.tensors.reserve(tensors.size());
    for (const auto& nt : tensors) out.tensors.push_back({nt.name, nt.t.template cast<T>()});
    return out;
  }
};

enum class Provenance { kDisjoint, kIndependent, kAdversariallyTrained };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kDisjoint: return "disjoint";
    case Provenance::kIndependent: return "independent";
    case Provenance::kAdversariallyTrained: return "adversarially_trained";
  }
  return "?";
}

template <typename Scalar>
struct ModelSet {
  ModelConfig config;
  std::vector<Params<Scalar>> members;
  Provenance provenance = Provenance::kIndependent;

  int n() const { return static_cast<int>(members.size()); }
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> kaiming(Shape shape, Index fan_in, RngStream& rng) {
  Tensor<Scalar> t = Tensor<Scalar>::zeros(std::move(shape));
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < t.size(); ++i) t.v[i] = static_cast<Scalar>(scale * rng.normal());
  return t;
}

}  // namespace detail

// Kaiming fan-in normal weights, zero biases; deterministic in the seed.
template <typename Scalar>
Params<Scalar> init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  RngStream rng(mix64(seed));
  Params<Scalar> p;
  if (config.arch == Arch::kMlp) {
    std::vector<Index> dims;
    dims.push_back(config.input_shape[0]);
    dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
    dims.push_back(config.classes);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::string id = std::to_string(l);
      p.tensors.push_back({"fc" + id + "_w", detail::kaiming<Scalar>({dims[l], dims[l + 1]}, dims[l], rng)});
      p.tensors.push_back({"fc" + id + "_b", Tensor<Scalar>::zeros({dims[l + 1]})});
    }
  } else {
    const Index c = config.input_shape[0], h = config.input_shape[1], w = config.input_shape[2];
    const Index c1 = config.conv1_channels, c2 = config.conv2_channels;
    const Index flat = c2 * (h / 4) * (w / 4);
    p.tensors.push_back({"conv1_w", detail::kaiming<Scalar>({c1, c * 9}, c * 9, rng)});
    p.tensors.push_back({"conv1_b", Tensor<Scalar>::zeros({c1})});
    p.tensors.push_back({"conv2_w", detail::kaiming<Scalar>({c2, c1 * 9}, c1 * 9, rng)});
    p.tensors.push_back({"conv2_b", Tensor<Scalar>::zeros({c2})});
    p.tensors.push_back({"fc1_w", detail::kaiming<Scalar>({flat, config.dense_width}, flat, rng)});
    p.tensors.push_back({"fc1_b", Tensor<Scalar>::zeros({config.dense_width})});
    p.tensors.push_back({"fc2_w", detail::kaiming<Scalar>({config.dense_width, static_cast<Index>(config.classes)},
                                                          config.dense_width, rng)});
    p.tensors.push_back({"fc2_b", Tensor<Scalar>::zeros({static_cast<Index>(config.classes)})});
  }
  return p;
}

template <typename Scalar>
std::vector<Var<Scalar>> register_params(Context<Scalar>& ctx, const Params<Scalar>& p, bool trainable) {
  std::vector<Var<Scalar>> vars;
  vars.reserve(p.tensors.size());
  for (const auto& nt : p.tensors)
    vars.push_back(trainable ? ctx.leaf(nt.t) : ctx.constant(nt.t));
  return vars;
}

// Logits of one member given its registered parameter vars.
template <typename Scalar>
Var<Scalar> forward(const ModelConfig& config, const std::vector<Var<Scalar>>& w, Var<Scalar> x) {
  if (config.arch == Arch::kMlp) {
    if (x.shape().size() != 2 || x.shape()[1] != config.input_shape[0])
      throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match mlp width " +
                       std::to_string(config.input_shape[0]));
    Var<Scalar> h = x;
    for (size_t l = 0; l + 2 < w.size(); l += 2) h = relu(dense(h, w[l], w[l + 1]));
    return dense(h, w[w.size() - 2], w[w.size() - 1]);
  }
  const Shape& xs = x.shape();
  if (xs.size() != 4 || Shape(xs.begin() + 1, xs.end()) != config.input_shape)
    throw ShapeError("forward: input " + shape_str(xs) + " does not match config input " +
                     shape_str(config.input_shape));
  const Index b = xs[0];
  Var<Scalar> h = avgpool2(relu(conv2d(x, w[0], w[1], 3, 1, 1)));
  h = avgpool2(relu(conv2d(h, w[2], w[3], 3, 1, 1)));
  h = reshape(h, {b, h.size() / b});
  h = relu(dense(h, w[4], w[5]));
  return dense(h, w[6], w[7]);
}

// Arithmetic mean of member logits (m=1 reduces to plain forward).
template <typename Scalar>
Var<Scalar> ensemble_forward(const ModelConfig& config,
                             const std::vector<std::vector<Var<Scalar>>>& members, Var<Scalar> x) {
  if (members.empty()) throw ValueError("ensemble_forward: empty member subset");
  Var<Scalar> acc = forward(config, members[0], x);
  for (size_t i = 1; i < members.size(); ++i) acc = add(acc, forward(config, members[i], x));
  return members.size() == 1 ? acc : mul_scalar(acc, Scalar(1) / static_cast<Scalar>(members.size()));
}

// A read-only handle on one member or an ensemble of members of a set.
template <typename Scalar>
struct ModelView {
  const ModelConfig* config = nullptr;
  std::vector<const Params<Scalar>*> members;

  static ModelView single(const ModelSet<Scalar>& set, int i) {
    return {&set.config, {&set.members.at(i)}};
  }
  // member order is canonicalized so the fused logits are exactly
  // permutation-invariant
  static ModelView ensemble(const ModelSet<Scalar>& set, std::vector<int> idx) {
    std::sort(idx.begin(), idx.end());
    ModelView v{&set.config, {}};
    for (int i : idx) v.members.push_back(&set.members.at(i));
    return v;
  }
};

template <typename Scalar>
Var<Scalar> view_forward(Context<Scalar>& ctx, const ModelView<Scalar>& view, Var<Scalar> x) {
  std::vector<std::vector<Var<Scalar>>> regs;
  regs.reserve(view.members.size());
  for (const Params<Scalar>* p : view.members) regs.push_back(register_params(ctx, *p, false));
  return ensemble_forward(*view.config, regs, x);
}

// Plain forward evaluation, chunked to bound tape memory.
template <typename Scalar>
Tensor<Scalar> view_logits(const ModelView<Scalar>& view, const Tensor<Scalar>& x, Index chunk = 256) {
  const Index b = x.rows();
  const Index row = x.size() / std::max<Index>(b, 1);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({b, static_cast<Index>(view.config->classes)});
  for (Index at = 0; at < b; at += chunk) {
    const Index m = std::min(chunk, b - at);
    Shape cs = x.shape;
    cs[0] = m;
    Tensor<Scalar> cx(std::move(cs), x.v.segment(at * row, m * row));
    Context<Scalar> ctx;
    Var<Scalar> logits = view_forward(ctx, view, ctx.constant(std::move(cx)));
    out.v.segment(at * view.config->classes, m * view.config->classes) = logits.value().v;
  }
  return out;
}

}  // namespace disjoint
