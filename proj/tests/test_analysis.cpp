#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "helpers.hpp"
#include "prefbench/analysis.hpp"

using namespace prefbench;
using Catch::Approx;

namespace {

const LinearReward kGT = LinearReward::ground_truth();

const GridMap& delivery() {
  static const GridMap map = testing::load_map("delivery");
  return map;
}

const ValueTable& truth() {
  static const ValueTable vt = value_iteration(delivery(), kGT);
  return vt;
}

const SuccessorFeatureSet& candidates() {
  static const SuccessorFeatureSet set = generate_candidate_sf_set(delivery(), 50, 0);
  return set;
}

PreferenceDataset flip_labels(const PreferenceDataset& d) {
  PreferenceDataset out = d;
  for (auto& s : out.samples) s.choice = flipped(s.choice);
  return out;
}

}  // namespace

TEST_CASE("scaling grid values") {
  const ScalingGrid g = scaling_grid();
  CHECK(g.params[0] == 0.01);
  CHECK(g.params[1] == Approx(0.01236).epsilon(1e-12));
  CHECK(g.params[24] == 0.0);
  double p = 0.01;
  for (int n = 0; n < 12; ++n) {
    INFO("n = " << n);
    CHECK(g.params[n] == Approx(p).epsilon(1e-12));
    CHECK(g.params[n + 12] == -g.params[n]);
    p *= 1.236;
  }
}

TEST_CASE("scale zero gives ln 2 and the grid is sign symmetric") {
  const PreferenceDataset d = synth_dataset(
      delivery(), kGT, {ModelKind::kPartialReturn, Noise::kBoltzmann, 0.05}, 200, 30, 1);
  for (ModelKind model : {ModelKind::kPartialReturn, ModelKind::kRegret}) {
    const ScaledLikelihood a = best_scaled_likelihood(d, model, kGT, truth());
    const ScaledLikelihood b = best_scaled_likelihood(flip_labels(d), model, kGT, truth());
    CHECK(a.per_scale_ce[24] == Approx(std::log(2.0)).epsilon(1e-15));
    for (int n = 0; n < 12; ++n) {
      CHECK(a.per_scale_ce[n] == Approx(b.per_scale_ce[n + 12]).epsilon(1e-12));
      CHECK(a.per_scale_ce[n + 12] == Approx(b.per_scale_ce[n]).epsilon(1e-12));
    }
    CHECK(a.per_sample_ce.size() == d.size());
  }
}

TEST_CASE("anti-correlated labels select a non-positive scale") {
  const PreferenceDataset d = strict_only(synth_dataset(
      delivery(), kGT, {ModelKind::kPartialReturn, Noise::kNoiseless, 1.0}, 200, 30, 2));
  CHECK(best_scaled_likelihood(d, ModelKind::kPartialReturn, kGT, truth()).best_scale > 0);
  CHECK(best_scaled_likelihood(flip_labels(d), ModelKind::kPartialReturn, kGT, truth())
            .best_scale <= 0);
}

TEST_CASE("best scale ignores sample order and flip doubling") {
  const PreferenceDataset d = synth_dataset(
      delivery(), kGT, {ModelKind::kRegret, Noise::kBoltzmann, 0.03}, 150, 20, 3);
  PreferenceDataset shuffled = d;
  Rng rng(4);
  shuffle(shuffled.samples, rng);
  for (ModelKind model : {ModelKind::kPartialReturn, ModelKind::kRegret}) {
    const ScaledLikelihood a = best_scaled_likelihood(d, model, kGT, truth());
    const ScaledLikelihood b = best_scaled_likelihood(shuffled, model, kGT, truth());
    const ScaledLikelihood c = best_scaled_likelihood(double_with_flips(d), model, kGT, truth());
    CHECK(a.best_scale == b.best_scale);
    CHECK(a.best_scale == c.best_scale);
    CHECK(a.mean_ce == Approx(b.mean_ce).epsilon(1e-12));
    CHECK(a.mean_ce == Approx(c.mean_ce).epsilon(1e-12));
  }
}

TEST_CASE("best scale is consistent as the dataset grows") {
  const double s = scaling_grid().params[8];
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PreferenceDataset d = synth_dataset(
        delivery(), kGT, {ModelKind::kPartialReturn, Noise::kBoltzmann, s}, 2000, 4000, 50 + seed);
    hits += best_scaled_likelihood(d, ModelKind::kPartialReturn, kGT, truth()).best_scale == s;
  }
  CHECK(hits >= 9);
}

TEST_CASE("scaled likelihood errors") {
  CHECK_THROWS_AS(best_scaled_likelihood(PreferenceDataset{}, ModelKind::kRegret, kGT, truth()),
                  Error);
  PreferenceDataset d = synth_dataset(
      delivery(), kGT, {ModelKind::kPartialReturn, Noise::kBoltzmann, 0.05}, 5, 0, 5);
  d.samples[2].choice = Choice::kSame;
  CHECK_THROWS_AS(best_scaled_likelihood(d, ModelKind::kRegret, kGT, truth()), Error);
  CHECK_THROWS_AS(noiseless_accuracy(d, ModelKind::kRegret, kGT, truth()), Error);
}

TEST_CASE("noiseless accuracy") {
  for (ModelKind model : {ModelKind::kPartialReturn, ModelKind::kRegret}) {
    const PreferenceDataset d = strict_only(
        synth_dataset(delivery(), kGT, {model, Noise::kNoiseless, 1.0}, 300, 40, 6));
    CHECK(noiseless_accuracy(d, model, kGT, truth()) == 1.0);
    CHECK(noiseless_accuracy(flip_labels(d), model, kGT, truth()) == 0.0);
  }

  // Coin-flip labels: mean 0.5, binomial standard error about 0.016.
  PreferenceDataset random = synth_dataset(
      delivery(), kGT, {ModelKind::kPartialReturn, Noise::kBoltzmann, 0.05}, 1000, 0, 7);
  Rng rng(8);
  for (auto& s : random.samples) s.choice = uniform01(rng) < 0.5 ? Choice::kFirst : Choice::kSecond;
  const double acc = noiseless_accuracy(random, ModelKind::kPartialReturn, kGT, truth());
  CHECK(std::abs(acc - 0.5) < 4 * std::sqrt(0.25 / 1000));
  CHECK(noiseless_accuracy(flip_labels(random), ModelKind::kPartialReturn, kGT, truth()) ==
        Approx(1.0 - acc).epsilon(1e-12));
}

TEST_CASE("exact statistic ties count one half") {
  const GridMap& map = delivery();
  PreferenceDataset d;
  PreferenceSample s;
  s.sigma1 = make_segment(map, map.state_at(0, 0), {Action::kRight, Action::kLeft, Action::kRight});
  s.sigma2 = s.sigma1;
  s.choice = Choice::kFirst;
  s.pair_id = "tie";
  d.samples.push_back(s);
  CHECK(noiseless_accuracy(d, ModelKind::kPartialReturn, kGT, truth()) == 0.5);
  const auto t = accuracy_table(d, d, ModelKind::kPartialReturn, kGT, truth());
  CHECK(t[0][0] + t[0][1] + t[1][0] + t[1][1] == 0);
}

TEST_CASE("condition analysis report") {
  const PreferenceModelSpec good{ModelKind::kRegret, Noise::kBoltzmann, 0.5};
  const PreferenceModelSpec poor{ModelKind::kRegret, Noise::kBoltzmann, 0.02};
  const PreferenceDataset a = synth_dataset(delivery(), kGT, good, 150, 20, 9);
  const PreferenceDataset b = synth_dataset(delivery(), kGT, poor, 150, 20, 9);
  const ExperimentReport r =
      analyze_conditions({{"sharp", a}, {"noisy", b}}, ModelKind::kRegret, delivery(), kGT);
  REQUIRE(r.conditions.size() == 2);
  CHECK(r.conditions[0].noiseless_accuracy > r.conditions[1].noiseless_accuracy);
  CHECK(r.conditions[0].mean_ce < r.conditions[1].mean_ce);
  REQUIRE(r.tests.size() == 3);
  CHECK(r.tests[0].name == "mann_whitney sharp vs noisy");
  CHECK(r.tests[1].name == "wilcoxon sharp vs noisy");
  CHECK(r.tests[2].name == "fisher sharp vs noisy");
  for (const auto& t : r.tests) {
    CHECK(t.p_value >= 0.0);
    CHECK(t.p_value <= 1.0);
  }
  CHECK(r.tests[2].p_value < 0.05);

  const auto table = accuracy_table(strict_only(a), strict_only(b), ModelKind::kRegret, kGT,
                                    truth());
  CHECK(r.tests[2].p_value == fisher_exact(table[0][0], table[0][1], table[1][0], table[1][1]));
}

TEST_CASE("subsampling to a common size") {
  const PreferenceDataset big = synth_dataset(
      delivery(), kGT, {ModelKind::kRegret, Noise::kNoiseless, 1.0}, 40, 0, 10);
  const PreferenceDataset small = subsample(big, 15, 11);
  const auto eq = equalize_sizes({big, small}, 12);
  CHECK(eq[0].size() == 15);
  CHECK(eq[1].size() == 15);
  CHECK_THROWS_AS(subsample(small, 16, 1), Error);
}

TEST_CASE("partitioned experiment bookkeeping") {
  const PreferenceDataset d = synth_dataset(
      delivery(), kGT, {ModelKind::kRegret, Noise::kNoiseless, 1.0}, 50, 11, 13);
  TrainConfig cfg = TrainConfig::defaults(ModelKind::kRegret);
  cfg.epochs = 150;
  PartitionPlan plan;
  plan.partition_counts = {1, 2, 4};
  plan.seeds = {1, 2};
  plan.label = "regret";
  const auto a = partitioned_learning_experiment(d, plan, cfg, delivery(), kGT, &candidates());
  const auto b = partitioned_learning_experiment(d, plan, cfg, delivery(), kGT, &candidates());
  plan.workers = 3;
  const auto c = partitioned_learning_experiment(d, plan, cfg, delivery(), kGT, &candidates());
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].partition_size == 61 / static_cast<std::size_t>(a[i].partition_count));
    CHECK(a[i].runs == 2 * static_cast<std::size_t>(a[i].partition_count));
    CHECK(a[i].fraction_near_optimal <= a[i].fraction_better_than_random);
    CHECK(a[i].fraction_near_optimal >= 0.0);
    CHECK(a[i].fraction_better_than_random <= 1.0);
    CHECK(a[i].normalized_returns == b[i].normalized_returns);
    CHECK(a[i].normalized_returns == c[i].normalized_returns);
  }

  plan.partition_counts = {62};
  CHECK_THROWS_AS(partitioned_learning_experiment(d, plan, cfg, delivery(), kGT, &candidates()),
                  Error);
}

TEST_CASE("single partition of clean regret data is near optimal") {
  const PreferenceDataset d = synth_dataset(
      delivery(), kGT, {ModelKind::kRegret, Noise::kNoiseless, 1.0}, 428, 72, 14);
  PartitionPlan plan;
  plan.partition_counts = {1};
  plan.seeds = {1, 2, 3};
  const auto r = partitioned_learning_experiment(d, plan, TrainConfig::defaults(ModelKind::kRegret),
                                                 delivery(), kGT, &candidates());
  CHECK(r.at(0).fraction_near_optimal >= 0.9);
}

TEST_CASE("reports round-trip through JSON and CSV") {
  ExperimentReport r;
  r.conditions.push_back({"control", ModelKind::kRegret, 321, 0.0288464, 0.6512345678901234, 0.5});
  r.conditions.push_back({"trained", ModelKind::kPartialReturn, 320, -0.01, 0.7, 0.61});
  r.tests.push_back({"mann_whitney control vs trained", 1234.5, 0.0123});
  r.tests.push_back({"fisher control vs trained", std::nan(""), 1.0 / 3.0});
  r.partitions.push_back({"regret", 4, 125, 40, 0.925, 1.0, {}});
  r.partitions.push_back({"regret", 16, 31, 160, 0.1 + 0.2, 0.9, {}});

  const ExperimentReport j = nlohmann::json::parse(nlohmann::json(r).dump()).get<ExperimentReport>();
  const ExperimentReport c = report_from_csv(report_to_csv(r));
  for (const ExperimentReport* back : {&j, &c}) {
    REQUIRE(back->conditions.size() == 2);
    REQUIRE(back->tests.size() == 2);
    REQUIRE(back->partitions.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(back->conditions[i].name == r.conditions[i].name);
      CHECK(back->conditions[i].model == r.conditions[i].model);
      CHECK(back->conditions[i].samples == r.conditions[i].samples);
      CHECK(back->conditions[i].best_scale == r.conditions[i].best_scale);
      CHECK(back->conditions[i].mean_ce == r.conditions[i].mean_ce);
      CHECK(back->conditions[i].noiseless_accuracy == r.conditions[i].noiseless_accuracy);
      CHECK(back->tests[i].name == r.tests[i].name);
      CHECK(back->tests[i].p_value == r.tests[i].p_value);
      CHECK(back->partitions[i].label == r.partitions[i].label);
      CHECK(back->partitions[i].partition_count == r.partitions[i].partition_count);
      CHECK(back->partitions[i].partition_size == r.partitions[i].partition_size);
      CHECK(back->partitions[i].runs == r.partitions[i].runs);
      CHECK(back->partitions[i].fraction_near_optimal == r.partitions[i].fraction_near_optimal);
      CHECK(back->partitions[i].fraction_better_than_random ==
            r.partitions[i].fraction_better_than_random);
    }
    CHECK(back->tests[0].statistic == 1234.5);
    CHECK(std::isnan(back->tests[1].statistic));
  }
  CHECK(report_to_csv(ExperimentReport{}) == std::string(kReportCsvHeader) + "\n");
  CHECK(report_from_csv(report_to_csv(ExperimentReport{})).partitions.empty());
  CHECK_THROWS_AS(report_from_csv("bogus\n"), ParseError);
  CHECK_THROWS_AS(report_from_csv(std::string(kReportCsvHeader) + "\nx,y,z,1\n"), ParseError);
  ExperimentReport bad;
  bad.tests.push_back({"a,b", 0, 0});
  CHECK_THROWS_AS(report_to_csv(bad), Error);
}
