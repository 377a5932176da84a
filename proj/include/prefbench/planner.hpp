#pragma once

// Tabular planning on a GridMap: value iteration, max-entropy optimal
// policies, policy evaluation and successor features.
//
// All tables are indexed by cell index (y * width + x). House cells are not
// states and keep zero entries; terminal cells are absorbing with value 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "prefbench/error.hpp"
#include "prefbench/mdp.hpp"

namespace prefbench {

inline constexpr double kDefaultGamma = 0.999;
inline constexpr double kDefaultTol = 1e-8;
inline constexpr long kDefaultIterationCap = 1'000'000;

// Precomputed step() results for every (cell, action) of a map.
class Dynamics {
 public:
  explicit Dynamics(const GridMap& map) : map_(&map), table_(map.num_cells()) {
    for (int i = 0; i < map.num_cells(); ++i) {
      if (!map.is_state(i) || map.at(i).terminal()) continue;
      for (int a = 0; a < 4; ++a) {
        Transition t = step(map, map.state_at(i), kActions[a]);
        table_[i][a] = {map.index(t.next), t.phi, t.phi.as_vec()};
      }
    }
  }

  struct Entry {
    int next = 0;
    FeatureVector phi;
    Vec6 phi_vec{};
  };

  const GridMap& map() const { return *map_; }
  const Entry& at(int cell, int action) const { return table_[cell][action]; }
  bool active(int cell) const {
    return map_->is_state(cell) && !map_->at(cell).terminal();
  }

 private:
  const GridMap* map_;
  std::vector<std::array<Entry, 4>> table_;
};

struct ValueTable {
  int width = 0;
  int height = 0;
  std::vector<double> V;
  std::vector<std::array<double, 4>> Q;
  std::vector<std::uint8_t> live;  // non-terminal, non-house cells
  double gamma = kDefaultGamma;
  double converged_delta = 0.0;
  long iterations = 0;
  // Identifies the reward and map the table was planned for.
  LinearReward weights;
  std::string map_fingerprint;

  double value(const State& s) const {
    return s.terminal ? 0.0 : V[s.y * width + s.x];
  }
};

struct Policy {
  int width = 0;
  // probs[cell][action]; rows of terminal and house cells are all zero.
  std::vector<std::array<double, 4>> probs;

  static Policy uniform(const GridMap& map) {
    Policy p{map.width(), std::vector<std::array<double, 4>>(map.num_cells())};
    for (int i = 0; i < map.num_cells(); ++i) {
      if (map.is_state(i) && !map.at(i).terminal()) {
        p.probs[i] = {0.25, 0.25, 0.25, 0.25};
      }
    }
    return p;
  }
};

namespace detail {

inline void check_planning_args(double gamma, double tol) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw Error("gamma must lie in (0, 1)");
  if (!(tol > 0.0)) throw Error("tolerance must be positive");
}

}  // namespace detail

inline ValueTable value_iteration(const GridMap& map, const LinearReward& w,
                                  double gamma = kDefaultGamma,
                                  double tol = kDefaultTol,
                                  long max_iterations = kDefaultIterationCap) {
  detail::check_planning_args(gamma, tol);
  const Dynamics dyn(map);
  const int n = map.num_cells();
  std::vector<std::array<double, 4>> r(n);
  for (int i = 0; i < n; ++i) {
    if (!dyn.active(i)) continue;
    for (int a = 0; a < 4; ++a) r[i][a] = dot(w.weights, dyn.at(i, a).phi_vec);
  }

  ValueTable vt;
  vt.width = map.width();
  vt.height = map.height();
  vt.gamma = gamma;
  vt.weights = w;
  vt.map_fingerprint = map_fingerprint(map);
  vt.V.assign(n, 0.0);
  vt.Q.assign(n, {0, 0, 0, 0});
  vt.live.assign(n, 0);
  for (int i = 0; i < n; ++i) vt.live[i] = dyn.active(i);

  std::vector<double> next(n, 0.0);
  double residual = std::numeric_limits<double>::infinity();
  long it = 0;
  while (it < max_iterations) {
    ++it;
    residual = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!dyn.active(i)) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < 4; ++a) {
        best = std::max(best, r[i][a] + gamma * vt.V[dyn.at(i, a).next]);
      }
      next[i] = best;
      residual = std::max(residual, std::abs(best - vt.V[i]));
    }
    vt.V.swap(next);
    if (residual <= tol) break;
  }
  if (residual > tol) {
    throw ConvergenceError("value iteration did not converge", residual);
  }
  for (int i = 0; i < n; ++i) {
    if (!dyn.active(i)) continue;
    for (int a = 0; a < 4; ++a) {
      vt.Q[i][a] = r[i][a] + gamma * vt.V[dyn.at(i, a).next];
    }
  }
  vt.converged_delta = residual;
  vt.iterations = it;
  return vt;
}

// Uniform over actions within tie_tol of the best Q. A negative tie_tol
// selects the default 1e-6 * max|Q|.
inline Policy maxent_optimal_policy(const ValueTable& vt, double tie_tol = -1.0) {
  const int n = static_cast<int>(vt.Q.size());
  if (tie_tol < 0.0) {
    double scale = 0.0;
    for (const auto& q : vt.Q) {
      for (double v : q) scale = std::max(scale, std::abs(v));
    }
    tie_tol = 1e-6 * scale;
  }
  Policy p{vt.width, std::vector<std::array<double, 4>>(n)};
  for (int i = 0; i < n; ++i) {
    const auto& q = vt.Q[i];
    if (!vt.live[i]) continue;
    const double best = *std::max_element(q.begin(), q.end());
    int count = 0;
    for (double v : q) count += v >= best - tie_tol;
    for (int a = 0; a < 4; ++a) {
      p.probs[i][a] = q[a] >= best - tie_tol ? 1.0 / count : 0.0;
    }
  }
  return p;
}

inline std::vector<double> policy_evaluation(
    const GridMap& map, const Policy& pi, const LinearReward& w,
    double gamma = kDefaultGamma, double tol = kDefaultTol,
    long max_iterations = kDefaultIterationCap) {
  detail::check_planning_args(gamma, tol);
  const Dynamics dyn(map);
  const int n = map.num_cells();
  if (static_cast<int>(pi.probs.size()) != n) throw Error("policy/map size mismatch");
  std::vector<double> expected_r(n, 0.0);
  for (int i = 0; i < n; ++i) {
    if (!dyn.active(i)) continue;
    for (int a = 0; a < 4; ++a) {
      expected_r[i] += pi.probs[i][a] * dot(w.weights, dyn.at(i, a).phi_vec);
    }
  }
  std::vector<double> V(n, 0.0), next(n, 0.0);
  double residual = std::numeric_limits<double>::infinity();
  for (long it = 0; it < max_iterations; ++it) {
    residual = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!dyn.active(i)) continue;
      double v = expected_r[i];
      for (int a = 0; a < 4; ++a) {
        if (pi.probs[i][a] != 0.0) v += pi.probs[i][a] * gamma * V[dyn.at(i, a).next];
      }
      next[i] = v;
      residual = std::max(residual, std::abs(v - V[i]));
    }
    V.swap(next);
    if (residual <= tol) return V;
  }
  throw ConvergenceError("policy evaluation did not converge", residual);
}

// Mean of a per-cell table over the start distribution.
inline double mean_over_starts(const GridMap& map, const std::vector<double>& V) {
  double s = 0.0;
  for (const auto& ws : start_distribution(map)) s += ws.weight * V[map.index(ws.state)];
  return s;
}

// Rescales so that the uniform-random policy scores 0 and an optimal one 1.
inline double normalized_return(double v_pi, double v_star, double v_uniform) {
  const double denom = v_star - v_uniform;
  if (!(denom > 0.0)) {
    throw Error("normalized return undefined: optimal value does not exceed uniform");
  }
  return (v_pi - v_uniform) / denom;
}

inline std::vector<Vec6> successor_features(
    const GridMap& map, const Policy& pi, double gamma = kDefaultGamma,
    double tol = kDefaultTol, long max_iterations = kDefaultIterationCap) {
  detail::check_planning_args(gamma, tol);
  const Dynamics dyn(map);
  const int n = map.num_cells();
  if (static_cast<int>(pi.probs.size()) != n) throw Error("policy/map size mismatch");
  std::vector<Vec6> expected_phi(n, Vec6{});
  for (int i = 0; i < n; ++i) {
    if (!dyn.active(i)) continue;
    for (int a = 0; a < 4; ++a) {
      for (int k = 0; k < kNumFeatures; ++k) {
        expected_phi[i][k] += pi.probs[i][a] * dyn.at(i, a).phi_vec[k];
      }
    }
  }
  std::vector<Vec6> psi(n, Vec6{}), next(n, Vec6{});
  double residual = std::numeric_limits<double>::infinity();
  for (long it = 0; it < max_iterations; ++it) {
    residual = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!dyn.active(i)) continue;
      Vec6 v = expected_phi[i];
      for (int a = 0; a < 4; ++a) {
        const double p = pi.probs[i][a];
        if (p == 0.0) continue;
        const Vec6& succ = psi[dyn.at(i, a).next];
        for (int k = 0; k < kNumFeatures; ++k) v[k] += p * gamma * succ[k];
      }
      for (int k = 0; k < kNumFeatures; ++k) {
        residual = std::max(residual, std::abs(v[k] - psi[i][k]));
      }
      next[i] = v;
    }
    psi.swap(next);
    if (residual <= tol) return psi;
  }
  throw ConvergenceError("successor features did not converge", residual);
}

struct SuccessorFeatureSet {
  struct Entry {
    std::string policy_id;
    std::vector<Vec6> psi;  // per cell
  };

  double gamma = kDefaultGamma;
  int width = 0;
  int height = 0;
  std::string map_fingerprint;
  std::vector<Entry> entries;
};

// True when, from every live state, the policy's support reaches a terminal.
inline bool is_proper(const GridMap& map, const Policy& pi) {
  const Dynamics dyn(map);
  const int n = map.num_cells();
  std::vector<std::uint8_t> reaches(n, 0);
  for (int i = 0; i < n; ++i) reaches[i] = map.is_state(i) && map.at(i).terminal();
  for (bool changed = true; changed;) {
    changed = false;
    for (int i = 0; i < n; ++i) {
      if (reaches[i] || !dyn.active(i)) continue;
      for (int a = 0; a < 4; ++a) {
        if (pi.probs[i][a] > 0.0 && reaches[dyn.at(i, a).next]) {
          reaches[i] = 1;
          changed = true;
          break;
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (dyn.active(i) && !reaches[i]) return false;
  }
  return true;
}

// Entry 0 is the uniform-random policy; the rest are distinct proper
// max-entropy optimal policies for weight vectors drawn uniformly from the
// unit 6-sphere. Draws whose policy loops forever or repeats an earlier
// policy are discarded.
inline SuccessorFeatureSet generate_candidate_sf_set(const GridMap& map, int count,
                                                     std::uint64_t seed,
                                                     double gamma = kDefaultGamma) {
  if (count < 2) throw Error("candidate set needs at least two policies");
  SuccessorFeatureSet set;
  set.gamma = gamma;
  set.width = map.width();
  set.height = map.height();
  set.map_fingerprint = map_fingerprint(map);
  set.entries.push_back({"uniform", successor_features(map, Policy::uniform(map), gamma)});

  std::mt19937_64 rng(seed);
  auto unit = [&rng] {
    return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  };
  std::vector<std::vector<std::array<double, 4>>> seen;
  const long max_draws = 1000L * count;
  for (long draw = 0; static_cast<int>(set.entries.size()) < count; ++draw) {
    if (draw == max_draws) {
      throw Error("could not find " + std::to_string(count) +
                  " distinct proper candidate policies");
    }
    Vec6 w{};
    double norm2 = 0.0;
    for (int k = 0; k < kNumFeatures; k += 2) {
      // Box-Muller, two normals per draw.
      const double r = std::sqrt(-2.0 * std::log(unit()));
      const double theta = 2.0 * 3.14159265358979323846 * unit();
      w[k] = r * std::cos(theta);
      w[k + 1] = r * std::sin(theta);
    }
    for (double v : w) norm2 += v * v;
    if (norm2 < 1e-12) continue;
    for (double& v : w) v /= std::sqrt(norm2);
    Policy pi = maxent_optimal_policy(value_iteration(map, LinearReward{w}, gamma));
    if (!is_proper(map, pi)) continue;
    if (std::find(seen.begin(), seen.end(), pi.probs) != seen.end()) continue;
    seen.push_back(pi.probs);
    set.entries.push_back({"sphere-" + std::to_string(draw),
                           successor_features(map, pi, gamma)});
  }
  return set;
}

inline void to_json(nlohmann::json& j, const SuccessorFeatureSet& s) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : s.entries) {
    entries.push_back({{"policy_id", e.policy_id}, {"psi", e.psi}});
  }
  j = {{"schema", "prefbench.successor_features"},
       {"version", 1},
       {"gamma", s.gamma},
       {"width", s.width},
       {"height", s.height},
       {"map_fingerprint", s.map_fingerprint},
       {"entries", std::move(entries)}};
}

inline void from_json(const nlohmann::json& j, SuccessorFeatureSet& s) {
  if (j.at("schema") != "prefbench.successor_features" || j.at("version") != 1) {
    throw Error("unsupported successor-feature document");
  }
  s.gamma = j.at("gamma");
  s.width = j.at("width");
  s.height = j.at("height");
  s.map_fingerprint = j.at("map_fingerprint");
  s.entries.clear();
  for (const auto& e : j.at("entries")) {
    SuccessorFeatureSet::Entry entry;
    entry.policy_id = e.at("policy_id");
    entry.psi = e.at("psi").get<std::vector<Vec6>>();
    if (static_cast<int>(entry.psi.size()) != s.width * s.height) {
      throw Error("successor-feature entry has wrong number of cells");
    }
    s.entries.push_back(std::move(entry));
  }
}

}  // namespace prefbench
