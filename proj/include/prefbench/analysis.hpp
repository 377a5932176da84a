#pragma once

// Evaluation battery: scaled-likelihood comparison, noiseless accuracy,
// condition comparisons and partitioned reward-learning experiments.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "prefbench/dataset.hpp"
#include "prefbench/error.hpp"
#include "prefbench/learning.hpp"
#include "prefbench/planner.hpp"
#include "prefbench/preference.hpp"
#include "prefbench/random.hpp"
#include "prefbench/stats.hpp"

namespace prefbench {

inline constexpr std::size_t kScalingGridSize = 25;
inline constexpr double kScalingBase = 0.01;
inline constexpr double kScalingRatio = 1.236;

struct ScalingGrid {
  std::array<double, kScalingGridSize> params{};
};

// 12 positive values, their negatives, then zero.
inline ScalingGrid scaling_grid() {
  ScalingGrid g;
  for (int n = 1; n <= 12; ++n) {
    const double p = kScalingBase * std::pow(kScalingRatio, n - 1);
    g.params[n - 1] = p;
    g.params[n + 11] = -p;
  }
  g.params[24] = 0.0;
  return g;
}

struct ScaledLikelihood {
  double best_scale = 0.0;
  double mean_ce = 0.0;
  std::vector<double> per_scale_ce;
  std::vector<double> per_sample_ce;
};

namespace detail {

inline void require_strict(const PreferenceDataset& d, std::string_view what) {
  if (d.empty()) throw Error(std::string(what) + ": empty dataset");
  for (const auto& s : d.samples) {
    if (!s.strict()) {
      throw Error(std::string(what) + ": sample '" + s.pair_id + "' is not a strict preference");
    }
  }
}

}  // namespace detail

// Earliest grid entry wins on equal loss.
inline ScaledLikelihood best_scaled_likelihood(const PreferenceDataset& d, ModelKind model,
                                               const LinearReward& w_gt, const ValueTable& vt) {
  detail::require_strict(d, "best_scaled_likelihood");
  const std::vector<double> diffs = statistic_differences(d, model, w_gt, ExactValues{vt});
  const std::vector<double> mu1 = first_label_weights(d);
  const ScalingGrid grid = scaling_grid();
  ScaledLikelihood out;
  std::size_t best = 0;
  for (std::size_t k = 0; k < grid.params.size(); ++k) {
    out.per_scale_ce.push_back(cross_entropy_from_differences(diffs, mu1, grid.params[k]));
    if (out.per_scale_ce[k] < out.per_scale_ce[best]) best = k;
  }
  out.best_scale = grid.params[best];
  out.mean_ce = out.per_scale_ce[best];
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    out.per_sample_ce.push_back(pair_cross_entropy(out.best_scale * diffs[i], mu1[i]));
  }
  return out;
}

// Per-sample agreement with the noiseless model: 1, 0, or 0.5 when the
// statistics tie exactly.
inline std::vector<double> noiseless_agreement(const PreferenceDataset& d, ModelKind model,
                                               const LinearReward& w_gt, const ValueTable& vt) {
  detail::require_strict(d, "noiseless_accuracy");
  const PreferenceModelSpec spec{model, Noise::kNoiseless, 1.0};
  std::vector<double> out;
  for (const auto& s : d.samples) {
    const PreferenceLabel want = noiseless_label(spec, s.sigma1, s.sigma2, w_gt, ExactValues{vt});
    if (want.mu1 == 0.5) {
      out.push_back(0.5);
    } else {
      out.push_back(want.mu1 == s.label().mu1 ? 1.0 : 0.0);
    }
  }
  return out;
}

inline double noiseless_accuracy(const PreferenceDataset& d, ModelKind model,
                                 const LinearReward& w_gt, const ValueTable& vt) {
  const std::vector<double> a = noiseless_agreement(d, model, w_gt, vt);
  double total = 0.0;
  for (double x : a) total += x;
  return total / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Report

struct ConditionSummary {
  std::string name;
  ModelKind model = ModelKind::kPartialReturn;
  std::size_t samples = 0;
  double best_scale = 0.0;
  double mean_ce = 0.0;
  double noiseless_accuracy = 0.0;
};

struct TestRecord {
  std::string name;
  double statistic = 0.0;
  double p_value = 1.0;
};

struct PartitionResult {
  std::string label;
  int partition_count = 1;
  std::size_t partition_size = 0;
  std::size_t runs = 0;
  double fraction_near_optimal = 0.0;
  double fraction_better_than_random = 0.0;
  std::vector<double> normalized_returns;
};

struct ExperimentReport {
  std::vector<ConditionSummary> conditions;
  std::vector<TestRecord> tests;
  std::vector<PartitionResult> partitions;
};

inline constexpr double kNearOptimal = 0.9;

// Contingency table for Fisher's test. Rows: agrees / disagrees with the
// noiseless model; columns: first dataset, second dataset. Exact statistic
// ties fall in neither row.
inline std::array<std::array<std::int64_t, 2>, 2> accuracy_table(
    const PreferenceDataset& first, const PreferenceDataset& second, ModelKind model,
    const LinearReward& w_gt, const ValueTable& vt) {
  std::array<std::array<std::int64_t, 2>, 2> t{};
  const PreferenceDataset* ds[2] = {&first, &second};
  for (int col = 0; col < 2; ++col) {
    for (double a : noiseless_agreement(*ds[col], model, w_gt, vt)) {
      if (a == 1.0) ++t[0][col];
      if (a == 0.0) ++t[1][col];
    }
  }
  return t;
}

struct NamedDataset {
  std::string name;
  PreferenceDataset data;
};

// Summaries for every condition, then for every pair of conditions a
// Mann-Whitney test on per-sample cross-entropy, a Wilcoxon test when the
// pair ids align, and Fisher's test on noiseless agreement.
inline ExperimentReport analyze_conditions(const std::vector<NamedDataset>& conditions,
                                           ModelKind model, const GridMap& map,
                                           const LinearReward& w_gt) {
  if (conditions.empty()) throw Error("analyze_conditions: no datasets");
  const ValueTable vt = value_iteration(map, w_gt);
  ExperimentReport report;
  std::vector<ScaledLikelihood> fits;
  std::vector<PreferenceDataset> strict;
  for (const auto& c : conditions) {
    strict.push_back(strict_only(c.data));
    fits.push_back(best_scaled_likelihood(strict.back(), model, w_gt, vt));
    report.conditions.push_back({c.name, model, strict.back().size(), fits.back().best_scale,
                                 fits.back().mean_ce,
                                 noiseless_accuracy(strict.back(), model, w_gt, vt)});
  }
  for (std::size_t i = 0; i < conditions.size(); ++i) {
    for (std::size_t j = i + 1; j < conditions.size(); ++j) {
      const std::string tag = conditions[i].name + " vs " + conditions[j].name;
      const TestResult mw = mann_whitney_u(fits[i].per_sample_ce, fits[j].per_sample_ce);
      report.tests.push_back({"mann_whitney " + tag, mw.statistic, mw.p_value});

      std::map<std::string, double> by_id;
      for (std::size_t k = 0; k < strict[j].size(); ++k) {
        by_id[strict[j].samples[k].pair_id] = fits[j].per_sample_ce[k];
      }
      std::vector<std::pair<double, double>> paired;
      for (std::size_t k = 0; k < strict[i].size(); ++k) {
        auto it = by_id.find(strict[i].samples[k].pair_id);
        if (it != by_id.end()) paired.push_back({fits[i].per_sample_ce[k], it->second});
      }
      if (!paired.empty() && std::any_of(paired.begin(), paired.end(), [](const auto& p) {
            return p.first != p.second;
          })) {
        const TestResult w = wilcoxon_signed_rank(paired);
        report.tests.push_back({"wilcoxon " + tag, w.statistic, w.p_value});
      }

      const auto t = accuracy_table(strict[i], strict[j], model, w_gt, vt);
      if (t[0][0] + t[0][1] + t[1][0] + t[1][1] > 0) {
        const double p = fisher_exact(t[0][0], t[0][1], t[1][0], t[1][1]);
        report.tests.push_back({"fisher " + tag, std::nan(""), p});
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Partitioned learning

inline PreferenceDataset subsample(const PreferenceDataset& d, std::size_t n, std::uint64_t seed) {
  if (n > d.size()) throw Error("cannot subsample beyond the dataset size");
  PreferenceDataset out = d;
  Rng rng(seed);
  shuffle(out.samples, rng);
  out.samples.resize(n);
  return out;
}

// Trims every dataset to the size of the smallest.
inline std::vector<PreferenceDataset> equalize_sizes(const std::vector<PreferenceDataset>& ds,
                                                     std::uint64_t seed) {
  if (ds.empty()) return {};
  std::size_t n = ds.front().size();
  for (const auto& d : ds) n = std::min(n, d.size());
  std::vector<PreferenceDataset> out;
  for (const auto& d : ds) out.push_back(subsample(d, n, seed));
  return out;
}

struct PartitionPlan {
  std::vector<int> partition_counts{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::string label = "partitioned";
  unsigned workers = 1;
};

// Each (count, seed) shuffles the dataset with that seed, cuts it into
// equal partitions (remainder dropped) and trains one reward per partition.
inline std::vector<PartitionResult> partitioned_learning_experiment(
    const PreferenceDataset& d, const PartitionPlan& plan, const TrainConfig& cfg,
    const GridMap& map, const LinearReward& w_gt, const SuccessorFeatureSet* sfs = nullptr) {
  struct Job {
    std::size_t result;
    PreferenceDataset data;
    std::uint64_t seed;
  };
  std::vector<PartitionResult> results;
  std::vector<Job> jobs;
  for (int count : plan.partition_counts) {
    if (count < 1) throw Error("partition count must be positive");
    const std::size_t size = d.size() / static_cast<std::size_t>(count);
    if (size < 1) {
      throw Error("partition count " + std::to_string(count) + " leaves empty partitions");
    }
    PartitionResult r;
    r.label = plan.label;
    r.partition_count = count;
    r.partition_size = size;
    results.push_back(r);
    for (std::uint64_t seed : plan.seeds) {
      PreferenceDataset shuffled = d;
      Rng rng(seed);
      shuffle(shuffled.samples, rng);
      for (int p = 0; p < count; ++p) {
        Job job{results.size() - 1, {}, seed};
        job.data.map_fingerprint = d.map_fingerprint;
        job.data.provenance = d.provenance;
        job.data.samples.assign(shuffled.samples.begin() + static_cast<std::ptrdiff_t>(p * size),
                                shuffled.samples.begin() + static_cast<std::ptrdiff_t>((p + 1) * size));
        jobs.push_back(std::move(job));
      }
    }
  }

  const ValueTable truth = value_iteration(map, w_gt);
  std::vector<double> scores(jobs.size());
  const auto run = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < jobs.size(); i += stride) {
      TrainConfig c = cfg;
      c.seed = jobs[i].seed;
      const TrainResult r = train(jobs[i].data, c, map, sfs);
      scores[i] = score_learned_reward(map, r.weights, w_gt, &truth).normalized_return;
    }
  };
  const unsigned workers = std::max(1u, plan.workers);
  if (workers == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < workers; ++t) pool.emplace_back(run, t, workers);
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    results[jobs[i].result].normalized_returns.push_back(scores[i]);
  }
  for (auto& r : results) {
    r.runs = r.normalized_returns.size();
    std::size_t near = 0, better = 0;
    for (double nr : r.normalized_returns) {
      near += nr > kNearOptimal;
      better += nr > 0.0;
    }
    r.fraction_near_optimal = static_cast<double>(near) / static_cast<double>(r.runs);
    r.fraction_better_than_random = static_cast<double>(better) / static_cast<double>(r.runs);
  }
  return results;
}

// ---------------------------------------------------------------------------
// Serialization

inline void to_json(nlohmann::json& j, const ConditionSummary& c) {
  j = {{"name", c.name},
       {"model", std::string(to_string(c.model))},
       {"samples", c.samples},
       {"best_scale", c.best_scale},
       {"mean_ce", c.mean_ce},
       {"noiseless_accuracy", c.noiseless_accuracy}};
}

inline void from_json(const nlohmann::json& j, ConditionSummary& c) {
  c.name = j.at("name");
  const auto model = parse_model(j.at("model").get<std::string>());
  if (!model) throw Error("unknown model in report");
  c.model = *model;
  c.samples = j.at("samples");
  c.best_scale = j.at("best_scale");
  c.mean_ce = j.at("mean_ce");
  c.noiseless_accuracy = j.at("noiseless_accuracy");
}

// NaN statistics (Fisher) are written as null.
inline void to_json(nlohmann::json& j, const TestRecord& t) {
  j = {{"name", t.name}, {"p_value", t.p_value}};
  j["statistic"] = std::isnan(t.statistic) ? nlohmann::json(nullptr) : nlohmann::json(t.statistic);
}

inline void from_json(const nlohmann::json& j, TestRecord& t) {
  t.name = j.at("name");
  t.statistic = j.at("statistic").is_null() ? std::nan("") : j.at("statistic").get<double>();
  t.p_value = j.at("p_value");
}

inline void to_json(nlohmann::json& j, const PartitionResult& r) {
  j = {{"label", r.label},
       {"partition_count", r.partition_count},
       {"partition_size", r.partition_size},
       {"runs", r.runs},
       {"fraction_near_optimal", r.fraction_near_optimal},
       {"fraction_better_than_random", r.fraction_better_than_random},
       {"normalized_returns", r.normalized_returns}};
}

inline void from_json(const nlohmann::json& j, PartitionResult& r) {
  r.label = j.at("label");
  r.partition_count = j.at("partition_count");
  r.partition_size = j.at("partition_size");
  r.runs = j.at("runs");
  r.fraction_near_optimal = j.at("fraction_near_optimal");
  r.fraction_better_than_random = j.at("fraction_better_than_random");
  r.normalized_returns = j.value("normalized_returns", std::vector<double>{});
}

inline void to_json(nlohmann::json& j, const ExperimentReport& r) {
  j = {{"conditions", r.conditions}, {"tests", r.tests}, {"partitions", r.partitions}};
}

inline void from_json(const nlohmann::json& j, ExperimentReport& r) {
  r.conditions = j.value("conditions", std::vector<ConditionSummary>{});
  r.tests = j.value("tests", std::vector<TestRecord>{});
  r.partitions = j.value("partitions", std::vector<PartitionResult>{});
}

// CSV with columns section,name,metric,value. Partition rows are named
// "<label>/<partition_count>"; per-run normalized returns are JSON-only.
inline constexpr std::string_view kReportCsvHeader = "section,name,metric,value";

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const std::string& csv_name(const std::string& name) {
  if (name.find_first_of(",\n\r\"") != std::string::npos) {
    throw Error("report name '" + name + "' cannot be written as CSV");
  }
  return name;
}

}  // namespace detail

inline std::string report_to_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << kReportCsvHeader << '\n';
  const auto row = [&](std::string_view section, const std::string& name, std::string_view metric,
                       double value) {
    os << section << ',' << detail::csv_name(name) << ',' << metric << ','
       << detail::csv_number(value) << '\n';
  };
  for (const auto& c : r.conditions) {
    row("condition", c.name, "model", c.model == ModelKind::kRegret ? 1.0 : 0.0);
    row("condition", c.name, "samples", static_cast<double>(c.samples));
    row("condition", c.name, "best_scale", c.best_scale);
    row("condition", c.name, "mean_ce", c.mean_ce);
    row("condition", c.name, "noiseless_accuracy", c.noiseless_accuracy);
  }
  for (const auto& t : r.tests) {
    row("test", t.name, "statistic", t.statistic);
    row("test", t.name, "p_value", t.p_value);
  }
  for (const auto& p : r.partitions) {
    const std::string name = p.label + "/" + std::to_string(p.partition_count);
    row("partition", name, "partition_size", static_cast<double>(p.partition_size));
    row("partition", name, "runs", static_cast<double>(p.runs));
    row("partition", name, "fraction_near_optimal", p.fraction_near_optimal);
    row("partition", name, "fraction_better_than_random", p.fraction_better_than_random);
  }
  return os.str();
}

inline ExperimentReport report_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  if (!std::getline(is, line) || line != kReportCsvHeader) {
    throw ParseError("missing report CSV header", 1, 1);
  }
  ++line_no;
  ExperimentReport r;
  std::map<std::string, std::size_t> cond_at, test_at, part_at;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (std::size_t comma; (comma = line.find(',', pos)) != std::string::npos; pos = comma + 1) {
      f.push_back(line.substr(pos, comma - pos));
    }
    f.push_back(line.substr(pos));
    if (f.size() != 4) throw ParseError("expected 4 CSV fields", line_no, 1);
    const double v = f[3] == "nan" ? std::nan("") : std::strtod(f[3].c_str(), nullptr);
    const auto& [section, name, metric, _] = std::tie(f[0], f[1], f[2], f[3]);
    if (section == "condition") {
      auto [it, fresh] = cond_at.emplace(name, r.conditions.size());
      if (fresh) r.conditions.push_back({name});
      ConditionSummary& c = r.conditions[it->second];
      if (metric == "model") c.model = v == 1.0 ? ModelKind::kRegret : ModelKind::kPartialReturn;
      else if (metric == "samples") c.samples = static_cast<std::size_t>(v);
      else if (metric == "best_scale") c.best_scale = v;
      else if (metric == "mean_ce") c.mean_ce = v;
      else if (metric == "noiseless_accuracy") c.noiseless_accuracy = v;
      else throw ParseError("unknown condition metric '" + metric + "'", line_no, 1);
    } else if (section == "test") {
      auto [it, fresh] = test_at.emplace(name, r.tests.size());
      if (fresh) r.tests.push_back({name});
      TestRecord& t = r.tests[it->second];
      if (metric == "statistic") t.statistic = v;
      else if (metric == "p_value") t.p_value = v;
      else throw ParseError("unknown test metric '" + metric + "'", line_no, 1);
    } else if (section == "partition") {
      auto [it, fresh] = part_at.emplace(name, r.partitions.size());
      if (fresh) {
        const std::size_t slash = name.rfind('/');
        if (slash == std::string::npos) throw ParseError("partition name lacks a count", line_no, 1);
        PartitionResult p;
        p.label = name.substr(0, slash);
        p.partition_count = std::stoi(name.substr(slash + 1));
        r.partitions.push_back(p);
      }
      PartitionResult& p = r.partitions[it->second];
      if (metric == "partition_size") p.partition_size = static_cast<std::size_t>(v);
      else if (metric == "runs") p.runs = static_cast<std::size_t>(v);
      else if (metric == "fraction_near_optimal") p.fraction_near_optimal = v;
      else if (metric == "fraction_better_than_random") p.fraction_better_than_random = v;
      else throw ParseError("unknown partition metric '" + metric + "'", line_no, 1);
    } else {
      throw ParseError("unknown section '" + section + "'", line_no, 1);
    }
  }
  return r;
}

}  // namespace prefbench
