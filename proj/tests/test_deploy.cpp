#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "disjoint/deploy.hpp"
#include "oracles.hpp"

using namespace disjoint;
using D = double;

namespace {

TransferMatrix demo_matrix() {
  // diag low (white-box broken), off-diag high (poor transfer)
  TransferMatrix m;
  m.n = 3;
  m.accuracy = {0.02, 0.90, 0.85,  //
                0.88, 0.05, 0.92,  //
                0.91, 0.87, 0.01};
  m.samples = 1000;
  m.attack_name = "pgd1";
  return m;
}

}  // namespace

TEST_CASE("fast mode matches the closed-form expectation within 3 sigma") {
  TransferMatrix m = demo_matrix();
  DeploymentPolicy policy;
  policy.live = 3;
  AdversaryModel adv;
  adv.accessible = {0};
  const Index trials = 10000;
  SimReport rep = simulate<float>(nullptr, nullptr, &m, policy, adv, trials, 99);

  std::vector<double> row{m.at(0, 0), m.at(0, 1), m.at(0, 2)};
  const double expect = closed_form_success(row, {0, 1, 2});
  const double sigma = std::sqrt(expect * (1 - expect) / trials);
  CHECK(std::abs(rep.success_rate - expect) < 3 * sigma);
}

TEST_CASE("n=1 deployment degenerates to white-box success") {
  TransferMatrix m = demo_matrix();
  std::vector<double> row{m.at(0, 0)};
  CHECK(closed_form_success(row, {0}) == 1.0 - m.at(0, 0));

  DeploymentPolicy policy;
  policy.live = 1;
  AdversaryModel adv;
  adv.accessible = {0};
  SimReport rep = simulate<float>(nullptr, nullptr, &m, policy, adv, 10000, 3);
  const double expect = 1.0 - m.at(0, 0);
  const double sigma = std::sqrt(expect * (1 - expect) / 10000.0);
  CHECK(std::abs(rep.success_rate - expect) < 3 * sigma);
}

TEST_CASE("uniform policy assigns victims fairly") {
  const std::vector<int> live{0, 1, 2, 3};
  const Index trials = 20000;
  std::vector<Index> counts(4, 0);
  for (Index t = 0; t < trials; ++t) ++counts[detail::draw_victim(live, 123, t)];
  const double p = 0.25;
  const double sigma = std::sqrt(p * (1 - p) * trials);
  for (int j = 0; j < 4; ++j)
    CHECK(std::abs(static_cast<double>(counts[j]) - p * trials) < 3 * sigma);
}

TEST_CASE("simulation reports are deterministic in the seed") {
  TransferMatrix m = demo_matrix();
  DeploymentPolicy policy;
  policy.live = 3;
  AdversaryModel adv;
  adv.accessible = {1};
  SimReport a = simulate<float>(nullptr, nullptr, &m, policy, adv, 5000, 42);
  SimReport b = simulate<float>(nullptr, nullptr, &m, policy, adv, 5000, 42);
  CHECK(a.successes == b.successes);
  CHECK(a.success_rate == b.success_rate);
}

TEST_CASE("adversary referencing an unreleased member is rejected") {
  TransferMatrix m = demo_matrix();
  DeploymentPolicy policy;
  policy.live = 2;  // members 0 and 1 released
  AdversaryModel adv;
  adv.accessible = {2};
  CHECK_THROWS_AS(simulate<float>(nullptr, nullptr, &m, policy, adv, 100, 1), ValueError);
}

TEST_CASE("fast mode rejects multi-member oracle adversaries") {
  TransferMatrix m = demo_matrix();
  DeploymentPolicy policy;
  policy.live = 3;
  AdversaryModel adv;
  adv.kind = AdversaryKind::kOracle;
  adv.accessible = {0, 1};
  CHECK_THROWS_AS(simulate<float>(nullptr, nullptr, &m, policy, adv, 100, 1), ValueError);
}

TEST_CASE("staged release stepping") {
  DeploymentPolicy policy;
  policy.kind = PolicyKind::kStagedRelease;
  policy.live = 1;
  policy.release_order = {0, 1, 2};
  policy.threshold = 0.5;
  policy.window = 10;

  StagedState st = StagedState::start(policy);
  REQUIRE(st.live == std::vector<int>{0});
  REQUIRE(st.pending.size() == 2);

  SUBCASE("rate below the threshold leaves the state unchanged") {
    StagedState next = staged_release_step(st, policy, 0.3);
    CHECK(next.live == st.live);
    CHECK(next.pending.size() == 2);
    CHECK(next.releases == 0);
  }
  SUBCASE("rate 1.0 with threshold 0.5 releases one member and retires the most-attacked") {
    st.hits[0] = 5;
    StagedState next = staged_release_step(st, policy, 1.0);
    CHECK(next.live == std::vector<int>{1});
    CHECK(next.pending.size() == 1);
    CHECK(next.releases == 1);
    CHECK(!next.terminal);
  }
  SUBCASE("no members remaining flags the terminal state") {
    st.pending.clear();
    StagedState next = staged_release_step(st, policy, 1.0);
    CHECK(next.terminal);
  }
}

TEST_CASE("staged policy beats static deployment against a skilled adversary") {
  // adversary holds member 0: white-box on it, poor transfer elsewhere
  TransferMatrix m = demo_matrix();
  AdversaryModel adv = AdversaryModel::skilled(0);

  DeploymentPolicy fixed;
  fixed.live = 1;  // static single-model deployment of member 0
  SimReport stat = simulate<float>(nullptr, nullptr, &m, fixed, adv, 20000, 7);

  DeploymentPolicy staged;
  staged.kind = PolicyKind::kStagedRelease;
  staged.live = 1;
  staged.release_order = {0, 1, 2};
  staged.threshold = 0.5;
  staged.window = 200;
  SimReport rot = simulate<float>(nullptr, nullptr, &m, staged, adv, 20000, 7);

  CHECK(rot.success_rate < stat.success_rate);
}

TEST_CASE("policy validation") {
  DeploymentPolicy p;
  p.live = 0;
  CHECK_THROWS_AS(p.validate(3), ValueError);
  DeploymentPolicy s;
  s.kind = PolicyKind::kStagedRelease;
  s.release_order = {0, 1};
  s.threshold = 1.5;
  CHECK_THROWS_AS(s.validate(3), ValueError);
  AdversaryModel a;
  a.accessible = {0, 0};
  a.kind = AdversaryKind::kOracle;
  CHECK_THROWS_AS(a.validate(3), ValueError);
}

TEST_CASE("exact mode crafts from the adversary's members and evaluates live models") {
  SynthImageSpec ds;
  ds.count = 90;
  ds.channels = 1;
  ds.height = 8;
  ds.width = 8;
  ds.classes = 3;
  ds.seed = 61;
  Dataset data = make_synth_images(ds);
  data.x = Tensor<float>(Shape{data.size(), data.x.cols()}, data.x.v);

  ModelConfig mc;
  mc.arch = Arch::kMlp;
  mc.input_shape = {data.x.cols()};
  mc.classes = 3;
  mc.hidden = {8};
  DisjointTrainConfig tc;
  tc.n = 2;
  tc.w2 = tc.w3 = tc.w4 = 0;
  tc.epochs = 3;
  tc.batch_size = 30;
  tc.seed = 8;
  auto [set, log] = train_independent<float>(data, mc, tc);

  DeploymentPolicy policy;
  policy.live = 2;
  AdversaryModel adv;
  adv.kind = AdversaryKind::kOracle;
  adv.accessible = {0, 1};
  adv.spec = attack_preset("pgd1");
  adv.spec.rng_seed = 6;
  SimReport rep = simulate<float>(&set, &data, nullptr, policy, adv, 2000, 11);
  CHECK(rep.trials == 2000);
  CHECK(rep.success_rate >= 0.0);
  CHECK(rep.success_rate <= 1.0);
  SimReport rep2 = simulate<float>(&set, &data, nullptr, policy, adv, 2000, 11);
  CHECK(rep.successes == rep2.successes);
}
