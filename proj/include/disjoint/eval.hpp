// Evaluation harness: transferability matrices, set-level metrics,
// ensemble-attack campaigns, epsilon sweeps, and gradient-sign exports.
#pragma once

#include "disjoint/attacks.hpp"
#include "disjoint/hash.hpp"
#include "disjoint/train.hpp"

#include <filesystem>
#include <fstream>

namespace disjoint {

// Rows are source (attacked) models, columns are targets; the diagonal is the
// white-box accuracy.
struct TransferMatrix {
  int n = 0;
  std::vector<double> accuracy;  // row-major n*n
  Index samples = 0;
  std::string attack_name;

  double& at(int i, int j) { return accuracy[static_cast<size_t>(i) * n + j]; }
  double at(int i, int j) const { return accuracy[static_cast<size_t>(i) * n + j]; }
};

struct SetMetrics {
  double blackbox_mean = 0;
  double blackbox_std = 0;
  double wholeset_mean = 0;
  std::vector<double> clean_accuracy;
};

template <typename S>
uint64_t params_hash(const ModelSet<S>& set) {
  Fnv1a h;
  h.pod(set.config.arch).pod(set.config.classes);
  for (const auto& m : set.members)
    for (const auto& nt : m.tensors)
      h.str(nt.name).bytes(nt.t.v.data(), sizeof(S) * nt.t.v.size());
  return h.value();
}

inline uint64_t spec_hash(const AttackSpec& s) {
  Fnv1a h;
  h.pod(s.kind).pod(s.epsilon).pod(s.alpha).pod(s.steps).pod(s.mu).pod(s.c).pod(s.kappa);
  h.pod(s.beta).pod(s.decision_rule).pod(s.max_iterations).pod(s.learning_rate).pod(s.optimizer);
  h.pod(s.target).pod(s.rng_seed).pod(s.random_start);
  return h.value();
}

inline uint64_t dataset_hash(const Dataset& d) {
  Fnv1a h;
  h.pod(d.classes).pod(d.size());
  h.bytes(d.x.v.data(), sizeof(float) * std::min<Index>(d.x.v.size(), 1 << 20));
  h.bytes(d.labels.data(), sizeof(int) * d.labels.size());
  return h.value();
}

namespace detail {

// Disk cache of crafted examples keyed by (set, spec, dataset).
template <typename S>
bool cache_load(const std::string& path, Index count, Index dim, AttackResult<S>& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  uint64_t n = 0, d = 0, width = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  in.read(reinterpret_cast<char*>(&d), 8);
  in.read(reinterpret_cast<char*>(&width), 8);
  if (!in || n != static_cast<uint64_t>(count) || d != static_cast<uint64_t>(dim) ||
      width != sizeof(S))
    return false;
  in.read(reinterpret_cast<char*>(out.x_adv.v.data()), sizeof(S) * count * dim);
  out.success.resize(count);
  in.read(reinterpret_cast<char*>(out.success.data()), count);
  return bool(in);
}

template <typename S>
void cache_store(const std::string& path, const AttackResult<S>& r, Index count, Index dim) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return;
  const uint64_t n = count, d = dim, width = sizeof(S);
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&d), 8);
  out.write(reinterpret_cast<const char*>(&width), 8);
  out.write(reinterpret_cast<const char*>(r.x_adv.v.data()), sizeof(S) * count * dim);
  out.write(reinterpret_cast<const char*>(r.success.data()), count);
}

}  // namespace detail

// Crafts adversarial examples for `view` over the dataset, consulting the
// on-disk cache when a directory is given.
template <typename S>
AttackResult<S> craft_examples(const ModelSet<S>& set, const std::vector<int>& sources,
                               const AttackSpec& spec, const Dataset& data,
                               const std::string& cache_dir = "") {
  const Tensor<S> x = data.batch<S>(0, data.size());
  std::string path;
  if (!cache_dir.empty()) {
    Fnv1a key;
    key.pod(params_hash(set)).pod(spec_hash(spec)).pod(dataset_hash(data)).pod(sizeof(S));
    for (int s : sources) key.pod(s);
    std::filesystem::create_directories(cache_dir);
    path = cache_dir + "/adv_" + hex64(key.value()) + ".bin";
    AttackResult<S> cached{Tensor<S>::zeros(x.shape), {}};
    if (detail::cache_load<S>(path, data.size(), x.cols(), cached)) return cached;
  }
  ModelView<S> view = ModelView<S>::ensemble(set, sources);
  AttackResult<S> r = run_attack(view, x, data.labels, spec);
  if (!path.empty()) detail::cache_store<S>(path, r, data.size(), x.cols());
  return r;
}

// Accuracy of one member on a crafted batch.
template <typename S>
double member_accuracy(const ModelSet<S>& set, int member, const Tensor<S>& x,
                       const std::vector<int>& labels) {
  return accuracy(view_logits(ModelView<S>::single(set, member), x), labels);
}

// Row i: examples crafted on member i, evaluated on every member.
template <typename S>
TransferMatrix transfer_matrix(const ModelSet<S>& set, const AttackSpec& spec, const Dataset& data,
                               const std::string& cache_dir = "") {
  TransferMatrix m;
  m.n = set.n();
  m.samples = data.size();
  m.attack_name = attack_kind_name(spec.kind);
  m.accuracy.assign(static_cast<size_t>(m.n) * m.n, 0.0);
  for (int i = 0; i < m.n; ++i) {
    AttackResult<S> r = craft_examples(set, {i}, spec, data, cache_dir);
    for (int j = 0; j < m.n; ++j) m.at(i, j) = member_accuracy(set, j, r.x_adv, data.labels);
  }
  return m;
}

// Means/stds over the stored matrix; clean accuracy from a separate
// no-attack pass.
template <typename S>
SetMetrics set_metrics(const TransferMatrix& m, const ModelSet<S>& set, const Dataset& data) {
  SetMetrics out;
  double off_sum = 0, off_sq = 0, all_sum = 0;
  int off_count = 0;
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) {
      all_sum += m.at(i, j);
      if (i != j) {
        off_sum += m.at(i, j);
        off_sq += m.at(i, j) * m.at(i, j);
        ++off_count;
      }
    }
  out.wholeset_mean = all_sum / (static_cast<double>(m.n) * m.n);
  if (off_count > 0) {
    out.blackbox_mean = off_sum / off_count;
    out.blackbox_std = std::sqrt(std::max(0.0, off_sq / off_count - out.blackbox_mean * out.blackbox_mean));
  }
  const Tensor<S> x = data.batch<S>(0, data.size());
  for (int j = 0; j < set.n(); ++j)
    out.clean_accuracy.push_back(member_accuracy(set, j, x, data.labels));
  return out;
}

inline SetMetrics metrics_from_matrix(const TransferMatrix& m) {
  SetMetrics out;
  double off_sum = 0, off_sq = 0, all_sum = 0;
  int off_count = 0;
  for (int i = 0; i < m.n; ++i)
    for (int j = 0; j < m.n; ++j) {
      all_sum += m.at(i, j);
      if (i != j) {
        off_sum += m.at(i, j);
        off_sq += m.at(i, j) * m.at(i, j);
        ++off_count;
      }
    }
  out.wholeset_mean = all_sum / (static_cast<double>(m.n) * m.n);
  if (off_count > 0) {
    out.blackbox_mean = off_sum / off_count;
    out.blackbox_std =
        std::sqrt(std::max(0.0, off_sq / off_count - out.blackbox_mean * out.blackbox_mean));
  }
  return out;
}

// Attack crafted on the fused-logit ensemble of `subset`, evaluated on each
// member individually.
template <typename S>
std::vector<double> ensemble_attack_eval(const ModelSet<S>& set, const std::vector<int>& subset,
                                         const AttackSpec& spec, const Dataset& data,
                                         const std::string& cache_dir = "") {
  if (subset.empty()) throw ValueError("ensemble_attack_eval: empty member subset");
  AttackResult<S> r = craft_examples(set, subset, spec, data, cache_dir);
  std::vector<double> acc;
  for (int j = 0; j < set.n(); ++j)
    acc.push_back(member_accuracy(set, j, r.x_adv, data.labels));
  return acc;
}

struct SweepPoint {
  double epsilon = 0;
  TransferMatrix matrix;
  SetMetrics metrics;
};

// One PGD campaign per epsilon with steps=100 and alpha=2.5*eps/100. A zero
// epsilon is the clean-accuracy sentinel.
template <typename S>
std::vector<SweepPoint> epsilon_sweep(const ModelSet<S>& set, const std::vector<double>& eps_list,
                                      const Dataset& data, uint64_t seed,
                                      const std::string& cache_dir = "") {
  std::vector<SweepPoint> out;
  for (double eps : eps_list) {
    SweepPoint pt;
    pt.epsilon = eps;
    if (eps == 0.0) {
      pt.matrix.n = set.n();
      pt.matrix.samples = data.size();
      pt.matrix.attack_name = "clean";
      pt.matrix.accuracy.assign(static_cast<size_t>(set.n()) * set.n(), 0.0);
      const Tensor<S> x = data.batch<S>(0, data.size());
      for (int j = 0; j < set.n(); ++j) {
        const double a = member_accuracy(set, j, x, data.labels);
        for (int i = 0; i < set.n(); ++i) pt.matrix.at(i, j) = a;
      }
    } else {
      AttackSpec spec;
      spec.kind = AttackKind::kPgd;
      spec.epsilon = eps;
      spec.steps = 100;
      spec.alpha = 2.5 * eps / 100.0;
      spec.rng_seed = derive_seed(seed, static_cast<uint64_t>(eps * 1e6));
      pt.matrix = transfer_matrix(set, spec, data, cache_dir);
    }
    pt.metrics = set_metrics(pt.matrix, set, data);
    out.push_back(std::move(pt));
  }
  return out;
}

// Flattened sign(grad_x L_i) rows for the first `count` images and every
// member, plus a separation score: leave-one-image-out 1-NN member
// identification under Hamming distance (ties contribute fractionally).
struct GradientSignExport {
  Index count = 0;
  int members = 0;
  Index dim = 0;
  std::vector<int8_t> signs;  // (count*members) x dim, image-major
  double separation_score = 0;
};

template <typename S>
GradientSignExport export_gradient_signs(const ModelSet<S>& set, const Dataset& data, Index count) {
  if (count > data.size())
    throw ValueError("export_gradient_signs: count exceeds dataset size");
  GradientSignExport out;
  out.count = count;
  out.members = set.n();
  const Dataset sub = data.head(count);
  const Tensor<S> x = sub.batch<S>(0, count);
  out.dim = x.cols();
  out.signs.assign(static_cast<size_t>(count) * out.members * out.dim, 0);

  constexpr Index kChunk = 64;
  for (int m = 0; m < set.n(); ++m) {
    ModelView<S> view = ModelView<S>::single(set, m);
    for (Index at = 0; at < count; at += kChunk) {
      const Index take = std::min(kChunk, count - at);
      Shape cs = x.shape;
      cs[0] = take;
      Tensor<S> cx(cs, x.v.segment(at * out.dim, take * out.dim));
      std::vector<int> cy(sub.labels.begin() + at, sub.labels.begin() + at + take);
      Tensor<S> g = ce_grad_fn(view, cy)(cx);
      for (Index i = 0; i < take; ++i)
        for (Index p = 0; p < out.dim; ++p) {
          const S v = g.v[i * out.dim + p];
          out.signs[((at + i) * out.members + m) * out.dim + p] = v > 0 ? 1 : (v < 0 ? -1 : 0);
        }
    }
  }

  // bit-pack rows (sign > 0) for fast Hamming distance
  const Index words = (out.dim + 63) / 64;
  const Index rows = count * out.members;
  std::vector<uint64_t> packed(rows * words, 0);
  for (Index r = 0; r < rows; ++r)
    for (Index p = 0; p < out.dim; ++p)
      if (out.signs[r * out.dim + p] > 0) packed[r * words + p / 64] |= 1ull << (p % 64);

  double score = 0;
  for (Index r = 0; r < rows; ++r) {
    const Index img = r / out.members;
    const int member = static_cast<int>(r % out.members);
    Index best = out.dim + 1;
    int same = 0, tied = 0;
    for (Index q = 0; q < rows; ++q) {
      if (q / out.members == img) continue;  // rows of the same image identify trivially
      Index d = 0;
      for (Index w = 0; w < words; ++w)
        d += static_cast<Index>(__builtin_popcountll(packed[r * words + w] ^ packed[q * words + w]));
      if (d < best) {
        best = d;
        same = (q % out.members) == static_cast<Index>(member);
        tied = 1;
      } else if (d == best) {
        same += (q % out.members) == static_cast<Index>(member);
        ++tied;
      }
    }
    score += tied > 0 ? static_cast<double>(same) / tied : 0.0;
  }
  out.separation_score = rows > 0 ? score / rows : 0.0;
  return out;
}

}  // namespace disjoint
