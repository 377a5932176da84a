#pragma once

// Linear reward learning from preferences: cross-entropy loss under either
// preference model, its analytic gradient, and full-batch Adam training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <vector>

#include "json.hpp"
#include "prefbench/dataset.hpp"
#include "prefbench/error.hpp"
#include "prefbench/mdp.hpp"
#include "prefbench/planner.hpp"
#include "prefbench/preference.hpp"

namespace prefbench {

struct TrainConfig {
  ModelKind model = ModelKind::kPartialReturn;
  double learning_rate = 2.0;
  int epochs = 30'000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double softmax_temperature = 0.001;
  std::uint64_t seed = 0;
  bool early_stop_best_loss = false;

  static TrainConfig defaults(ModelKind kind) {
    TrainConfig c;
    c.model = kind;
    if (kind == ModelKind::kRegret) {
      c.learning_rate = 0.5;
      c.epochs = 5'000;
      c.early_stop_best_loss = true;
    }
    return c;
  }
};

struct TrainResult {
  LinearReward weights;
  std::vector<double> loss_curve;  // loss_curve[e] is the loss before update e
  int best_epoch = 0;
  TrainConfig config;
};

// Per-sample loss -[mu1 log P(1 > 2) + mu2 log P(2 > 1)] with P = logistic(x),
// written with softplus so that confident mistakes keep a finite gradient.
inline double pair_cross_entropy(double x, double mu1) {
  return mu1 * softplus(-x) + (1.0 - mu1) * softplus(x);
}

// Mean cross-entropy over per-sample statistic differences d1 - d2.
inline double cross_entropy_from_differences(const std::vector<double>& diffs,
                                             const std::vector<double>& mu1,
                                             double scale) {
  if (diffs.empty()) throw Error("cross-entropy of an empty dataset");
  // Compensated summation.
  double total = 0.0, carry = 0.0;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    const double x = pair_cross_entropy(scale * diffs[i], mu1[i]);
    const double t = total + x;
    carry += std::abs(total) >= std::abs(x) ? (total - t) + x : (x - t) + total;
    total = t;
  }
  return (total + carry) / static_cast<double>(diffs.size());
}

inline std::vector<double> first_label_weights(const PreferenceDataset& d) {
  std::vector<double> mu1;
  mu1.reserve(d.size());
  for (const auto& s : d.samples) {
    if (s.choice == Choice::kCantTell) {
      throw Error("\"can't tell\" samples must be filtered before scoring");
    }
    mu1.push_back(s.label().mu1);
  }
  return mu1;
}

template <class Values>
std::vector<double> statistic_differences(const PreferenceDataset& d, ModelKind model,
                                          const LinearReward& w, const Values& values) {
  std::vector<double> diffs;
  diffs.reserve(d.size());
  for (const auto& s : d.samples) {
    diffs.push_back(desirability(model, s.sigma1, w, values) -
                    desirability(model, s.sigma2, w, values));
  }
  return diffs;
}

// Reference evaluation straight from the segment statistics. Values is
// ExactValues (analysis) or SoftValues (training objective).
template <class Values>
double cross_entropy_loss(const LinearReward& w, const PreferenceDataset& d,
                          ModelKind model, double scale, const Values& values) {
  return cross_entropy_from_differences(statistic_differences(d, model, w, values),
                                        first_label_weights(d), scale);
}

inline double cross_entropy_loss(const LinearReward& w, const PreferenceDataset& d,
                                 double scale = 1.0) {
  if (d.empty()) throw Error("cross-entropy of an empty dataset");
  std::vector<double> diffs;
  for (const auto& s : d.samples) {
    diffs.push_back(partial_return(s.sigma1, w) - partial_return(s.sigma2, w));
  }
  return cross_entropy_from_differences(diffs, first_label_weights(d), scale);
}

// Loss and gradient in w for one dataset, with everything that does not
// depend on w precomputed. For the regret model the soft values of every
// segment endpoint are computed once per evaluation and shared by samples.
class PreferenceObjective {
 public:
  PreferenceObjective(const PreferenceDataset& d, ModelKind model,
                      const SuccessorFeatureSet* sfs = nullptr, double tau = 0.001,
                      double scale = 1.0)
      : model_(model), sfs_(sfs), tau_(tau), scale_(scale) {
    if (d.empty()) throw Error("cannot build an objective from an empty dataset");
    if (model == ModelKind::kRegret && (sfs == nullptr || sfs->entries.empty())) {
      throw Error("the regret model needs a successor-feature set");
    }
    const auto mu1 = first_label_weights(d);
    std::map<int, int> slot_of;
    auto slot = [&](const State& s) {
      if (s.terminal) return -1;
      const int cell = s.y * sfs_->width + s.x;
      auto [it, inserted] = slot_of.emplace(cell, static_cast<int>(cells_.size()));
      if (inserted) cells_.push_back(cell);
      return it->second;
    };
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto& s = d.samples[i];
      Sample p;
      p.mu1 = mu1[i];
      const FeatureVector f1 = s.sigma1.features(), f2 = s.sigma2.features();
      for (int k = 0; k < kNumFeatures; ++k) p.dphi[k] = f1[k] - f2[k];
      if (model == ModelKind::kRegret) {
        p.start1 = slot(s.sigma1.start());
        p.end1 = slot(s.sigma1.end());
        p.start2 = slot(s.sigma2.start());
        p.end2 = slot(s.sigma2.end());
      }
      samples_.push_back(p);
    }
  }

  std::size_t size() const { return samples_.size(); }

  // Mean loss; writes the gradient when grad is non-null.
  double operator()(const LinearReward& w, Vec6* grad = nullptr) const {
    if (model_ == ModelKind::kRegret) {
      values_.resize(cells_.size());
      for (std::size_t c = 0; c < cells_.size(); ++c) {
        values_[c] = soft_value(*sfs_, cells_[c], w, tau_);
      }
    }
    double total = 0.0;
    Vec6 g{};
    for (const Sample& s : samples_) {
      // Desirability difference and its gradient: partial return, plus for
      // regret V(end) - V(start) of each segment.
      Vec6 dx = s.dphi;
      double diff = dot(w.weights, s.dphi);
      if (model_ == ModelKind::kRegret) {
        diff += value(s.end1) - value(s.start1) - value(s.end2) + value(s.start2);
        if (grad) {
          add_grad(dx, s.end1, 1.0);
          add_grad(dx, s.start1, -1.0);
          add_grad(dx, s.end2, -1.0);
          add_grad(dx, s.start2, 1.0);
        }
      }
      const double x = scale_ * diff;
      total += pair_cross_entropy(x, s.mu1);
      if (grad) {
        const double coef = scale_ * (logistic(x) - s.mu1);
        for (int k = 0; k < kNumFeatures; ++k) g[k] += coef * dx[k];
      }
    }
    const double n = static_cast<double>(samples_.size());
    if (grad) {
      for (int k = 0; k < kNumFeatures; ++k) (*grad)[k] = g[k] / n;
    }
    return total / n;
  }

 private:
  struct Sample {
    Vec6 dphi{};
    double mu1 = 0.5;
    int start1 = -1, end1 = -1, start2 = -1, end2 = -1;  // value slots, -1 terminal
  };

  double value(int slot) const { return slot < 0 ? 0.0 : values_[slot].value; }
  void add_grad(Vec6& dx, int slot, double sign) const {
    if (slot < 0) return;
    for (int k = 0; k < kNumFeatures; ++k) dx[k] += sign * values_[slot].grad[k];
  }

  ModelKind model_;
  const SuccessorFeatureSet* sfs_;
  double tau_;
  double scale_;
  std::vector<Sample> samples_;
  std::vector<int> cells_;
  mutable std::vector<SoftValue> values_;
};

// Full-batch Adam from zero weights on the flip-doubled dataset.
inline TrainResult train(const PreferenceDataset& d, const TrainConfig& cfg,
                         const GridMap& map, const SuccessorFeatureSet* sfs = nullptr) {
  if (d.empty()) throw Error("cannot train on an empty dataset");
  if (cfg.epochs < 1) throw Error("training needs at least one epoch");
  const std::string fingerprint = map_fingerprint(map);
  if (!d.map_fingerprint.empty() && d.map_fingerprint != fingerprint) {
    throw Error("dataset was built on a different map");
  }
  if (cfg.model == ModelKind::kRegret && sfs && sfs->map_fingerprint != fingerprint) {
    throw Error("successor features were computed on a different map");
  }
  const PreferenceObjective objective(double_with_flips(d), cfg.model, sfs,
                                      cfg.softmax_temperature);
  TrainResult result;
  result.config = cfg;
  result.loss_curve.reserve(cfg.epochs);
  LinearReward w{}, best_w{};
  double best_loss = std::numeric_limits<double>::infinity();
  Vec6 m{}, v{};
  double b1t = 1.0, b2t = 1.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Vec6 g{};
    const double loss = objective(w, &g);
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss", epoch);
    result.loss_curve.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best_w = w;
      result.best_epoch = epoch;
    }
    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    for (int k = 0; k < kNumFeatures; ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / (1.0 - b1t);
      const double vhat = v[k] / (1.0 - b2t);
      w.weights[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
  result.weights = cfg.early_stop_best_loss ? best_w : w;
  return result;
}

// Normalized return of the max-entropy optimal policy for learned weights,
// scored under the true reward. The learned weights are rescaled to unit
// norm before planning; the optimal policy does not depend on scale.
struct PolicyScore {
  double normalized_return = 0.0;
  double v_pi = 0.0;
  double v_star = 0.0;
  double v_uniform = 0.0;
};

inline PolicyScore score_learned_reward(const GridMap& map, const LinearReward& learned,
                                        const LinearReward& truth,
                                        const ValueTable* truth_table = nullptr) {
  double norm = 0.0;
  for (double x : learned.weights) norm += x * x;
  norm = std::sqrt(norm);
  const LinearReward unit = norm > 0.0 ? learned.scaled(1.0 / norm) : learned;
  const Policy pi = maxent_optimal_policy(value_iteration(map, unit));
  std::optional<ValueTable> own;
  if (!truth_table) own = value_iteration(map, truth);
  const ValueTable& vt = truth_table ? *truth_table : *own;
  PolicyScore s;
  s.v_pi = mean_over_starts(map, policy_evaluation(map, pi, truth));
  s.v_star = mean_over_starts(map, vt.V);
  s.v_uniform = mean_over_starts(map, policy_evaluation(map, Policy::uniform(map), truth));
  s.normalized_return = normalized_return(s.v_pi, s.v_star, s.v_uniform);
  return s;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", std::string(to_string(c.model))},
       {"learning_rate", c.learning_rate},
       {"epochs", c.epochs},
       {"adam_betas", {c.beta1, c.beta2}},
       {"adam_eps", c.adam_eps},
       {"softmax_temperature", c.softmax_temperature},
       {"seed", c.seed},
       {"early_stop_best_loss", c.early_stop_best_loss}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto model = parse_model(j.at("model").get<std::string>());
  if (!model) throw Error("unknown model " + j.at("model").dump());
  c = TrainConfig::defaults(*model);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("adam_betas")) {
    c.beta1 = j.at("adam_betas").at(0);
    c.beta2 = j.at("adam_betas").at(1);
  }
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.softmax_temperature = j.value("softmax_temperature", c.softmax_temperature);
  c.seed = j.value("seed", c.seed);
  c.early_stop_best_loss = j.value("early_stop_best_loss", c.early_stop_best_loss);
}

inline void to_json(nlohmann::json& j, const TrainResult& r) {
  j = {{"weights", r.weights.weights},
       {"loss_curve", r.loss_curve},
       {"best_epoch", r.best_epoch},
       {"config", r.config}};
}

inline void from_json(const nlohmann::json& j, TrainResult& r) {
  r.weights.weights = j.at("weights").get<Vec6>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.best_epoch = j.at("best_epoch");
  r.config = j.at("config").get<TrainConfig>();
}

}  // namespace prefbench
