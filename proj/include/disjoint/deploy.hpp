// Monte-Carlo simulation of randomized and staged deployment against static,
// skilled, and oracle adversaries.
//
// Fast mode draws per-trial outcomes from a transferability matrix row;
// exact mode crafts examples from the adversary's members once and evaluates
// live models. Per-trial randomness is derived from (seed, trial), so
// reports are independent of any work partitioning.
#pragma once

#include "disjoint/eval.hpp"

#include <deque>

namespace disjoint {

enum class PolicyKind { kUniformRandom, kStagedRelease };

struct DeploymentPolicy {
  PolicyKind kind = PolicyKind::kUniformRandom;
  int live = 1;                    // uniform: number of live members; staged: initial cohort size
  std::vector<int> release_order;  // staged only
  double threshold = 0.5;          // staged: windowed attack rate triggering a release
  Index window = 1000;             // staged: sliding observation window

  void validate(int n) const {
    if (kind == PolicyKind::kUniformRandom) {
      if (live < 1 || live > n) throw ValueError("policy: live member count out of range");
    } else {
      if (threshold <= 0 || threshold > 1) throw ValueError("policy: threshold must be in (0,1]");
      if (release_order.empty()) throw ValueError("policy: staged release needs an order");
      for (int m : release_order)
        if (m < 0 || m >= n) throw ValueError("policy: release order references unknown member");
      if (live < 1 || live > static_cast<int>(release_order.size()))
        throw ValueError("policy: initial cohort size out of range");
    }
  }
};

enum class AdversaryKind { kStatic, kSkilled, kOracle };

inline const char* adversary_kind_name(AdversaryKind k) {
  switch (k) {
    case AdversaryKind::kStatic: return "static";
    case AdversaryKind::kSkilled: return "skilled";
    case AdversaryKind::kOracle: return "oracle";
  }
  return "?";
}

// Static/skilled adversaries hold one member; oracle holds m >= 1 and attacks
// through the fused ensemble. Skilled adversaries default to the highly
// transferable attack settings (MI-FGSM with 20 steps, CW kappa=40).
struct AdversaryModel {
  AdversaryKind kind = AdversaryKind::kStatic;
  std::vector<int> accessible = {0};
  AttackSpec spec = attack_preset("pgd2");

  static AdversaryModel skilled(int member) {
    AdversaryModel a;
    a.kind = AdversaryKind::kSkilled;
    a.accessible = {member};
    a.spec = attack_preset("mifgsm2");
    return a;
  }

  void validate(int n) const {
    if (accessible.empty()) throw ValueError("adversary: needs at least one accessible member");
    if (kind != AdversaryKind::kOracle && accessible.size() != 1)
      throw ValueError("adversary: static/skilled hold exactly one member");
    std::vector<bool> seen(n, false);
    for (int m : accessible) {
      if (m < 0 || m >= n) throw ValueError("adversary: accessible member out of range");
      if (seen[m]) throw ValueError("adversary: duplicate accessible member");
      seen[m] = true;
    }
  }
};

struct SimReport {
  Index trials = 0;
  Index successes = 0;
  double success_rate = 0;
  double ci_low = 0, ci_high = 0;  // normal-approximation 95% interval
  std::string policy;
  std::string adversary;

  void finish() {
    success_rate = trials ? static_cast<double>(successes) / trials : 0.0;
    const double sigma =
        trials ? std::sqrt(std::max(0.0, success_rate * (1 - success_rate) / trials)) : 0.0;
    ci_low = success_rate - 1.96 * sigma;
    ci_high = success_rate + 1.96 * sigma;
  }
};

// Expected success under a uniform policy: total expectation over the
// per-victim accuracy row of the adversary's crafted examples.
inline double closed_form_success(const std::vector<double>& victim_accuracy,
                                  const std::vector<int>& live) {
  double s = 0;
  for (int j : live) s += 1.0 - victim_accuracy[j];
  return s / static_cast<double>(live.size());
}

// ---- staged release ---------------------------------------------------------

struct StagedState {
  std::vector<int> live;
  std::deque<int> pending;
  std::vector<Index> hits;  // per-member successful attacks while live
  std::deque<uint8_t> window;
  Index window_cap = 1000;
  bool terminal = false;
  int releases = 0;

  static StagedState start(const DeploymentPolicy& p) {
    StagedState s;
    s.window_cap = p.window;
    for (size_t i = 0; i < p.release_order.size(); ++i) {
      if (static_cast<int>(i) < p.live)
        s.live.push_back(p.release_order[i]);
      else
        s.pending.push_back(p.release_order[i]);
    }
    int max_id = 0;
    for (int m : p.release_order) max_id = std::max(max_id, m);
    s.hits.assign(max_id + 1, 0);
    return s;
  }

  void observe(int victim, bool success) {
    window.push_back(success ? 1 : 0);
    if (static_cast<Index>(window.size()) > window_cap) window.pop_front();
    if (success) ++hits[victim];
  }

  double observed_rate() const {
    if (window.empty()) return 0;
    Index s = 0;
    for (uint8_t v : window) s += v;
    return static_cast<double>(s) / static_cast<double>(window.size());
  }
};

// When the observed rate exceeds the threshold, the next member in release
// order goes live and the most-attacked live member is retired; the
// observation window restarts for the new cohort.
inline StagedState staged_release_step(StagedState state, const DeploymentPolicy& policy,
                                       double observed_rate) {
  if (observed_rate <= policy.threshold) return state;
  if (state.pending.empty()) {
    state.terminal = true;
    return state;
  }
  size_t worst = 0;
  for (size_t i = 1; i < state.live.size(); ++i)
    if (state.hits[state.live[i]] > state.hits[state.live[worst]]) worst = i;
  state.live[worst] = state.pending.front();
  state.pending.pop_front();
  state.window.clear();
  ++state.releases;
  return state;
}

// ---- simulation -------------------------------------------------------------

namespace detail {

inline int draw_victim(const std::vector<int>& live, uint64_t seed, Index trial) {
  RngStream rng(derive_seed(seed, 0x71c7u + static_cast<uint64_t>(trial)));
  return live[rng.uniform_int(live.size())];
}

inline bool draw_success(double p, uint64_t seed, Index trial) {
  RngStream rng(derive_seed(seed, 0x5acce55ull + static_cast<uint64_t>(trial)));
  return rng.uniform() < p;
}

}  // namespace detail

// Fast mode: per-victim accuracy of the adversary's crafted examples is given
// (a transfer-matrix row for single-member adversaries, an
// ensemble_attack_eval vector for oracle adversaries).
inline SimReport simulate_fast(const DeploymentPolicy& policy,
                               const std::vector<double>& victim_accuracy, Index trials,
                               uint64_t seed) {
  const int n = static_cast<int>(victim_accuracy.size());
  policy.validate(n);
  SimReport rep;
  rep.trials = trials;
  rep.policy = policy.kind == PolicyKind::kUniformRandom ? "uniform_random" : "staged_release";

  if (policy.kind == PolicyKind::kUniformRandom) {
    std::vector<int> live(policy.live);
    for (int i = 0; i < policy.live; ++i) live[i] = i;
    for (Index t = 0; t < trials; ++t) {
      const int victim = detail::draw_victim(live, seed, t);
      rep.successes += detail::draw_success(1.0 - victim_accuracy[victim], seed, t);
    }
  } else {
    StagedState st = StagedState::start(policy);
    for (Index t = 0; t < trials; ++t) {
      const int victim = detail::draw_victim(st.live, seed, t);
      const bool hit = detail::draw_success(1.0 - victim_accuracy[victim], seed, t);
      rep.successes += hit;
      st.observe(victim, hit);
      if (static_cast<Index>(st.window.size()) >= st.window_cap && !st.terminal)
        st = staged_release_step(std::move(st), policy, st.observed_rate());
    }
  }
  rep.finish();
  return rep;
}

// simulate(): fast mode when a TransferMatrix is given, exact mode when live
// models are given. The adversary crafts (or looks up) examples from its
// accessible members; a victim is drawn per trial under the policy.
template <typename S>
SimReport simulate(const ModelSet<S>* models, const Dataset* data, const TransferMatrix* matrix,
                   const DeploymentPolicy& policy, const AdversaryModel& adversary, Index trials,
                   uint64_t seed, const std::string& cache_dir = "") {
  const int n = matrix ? matrix->n : (models ? models->n() : 0);
  if (n == 0) throw ValueError("simulate: needs a transfer matrix or live models");
  policy.validate(n);
  adversary.validate(n);

  // released members under the policy at start; staged releases only ever add
  // members that come later in the order
  std::vector<int> initially_live;
  if (policy.kind == PolicyKind::kUniformRandom)
    for (int i = 0; i < policy.live; ++i) initially_live.push_back(i);
  else
    initially_live.assign(policy.release_order.begin(), policy.release_order.begin() + policy.live);
  for (int m : adversary.accessible)
    if (std::find(initially_live.begin(), initially_live.end(), m) == initially_live.end())
      throw ValueError("simulate: adversary references unreleased member " + std::to_string(m));

  std::vector<double> victim_accuracy;
  if (matrix) {
    if (adversary.accessible.size() != 1)
      throw ValueError(
          "simulate: fast mode covers single-member adversaries; pass live models or a "
          "precomputed ensemble row for oracle ensembles");
    const int src = adversary.accessible[0];
    for (int j = 0; j < n; ++j) victim_accuracy.push_back(matrix->at(src, j));
  } else {
    if (!data) throw ValueError("simulate: exact mode needs an evaluation dataset");
    victim_accuracy = ensemble_attack_eval(*models, adversary.accessible, adversary.spec, *data,
                                           cache_dir);
  }

  SimReport rep = simulate_fast(policy, victim_accuracy, trials, seed);
  rep.adversary = adversary_kind_name(adversary.kind);
  return rep;
}

}  // namespace disjoint
