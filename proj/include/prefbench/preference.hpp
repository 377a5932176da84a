#pragma once

// Segments, segment statistics and the two logistic preference models.
//
// A segment's "desirability" is its partial return under the partial-return
// model and its negated regret under the regret model; both models prefer
// the segment with the larger desirability.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include "prefbench/error.hpp"
#include "prefbench/mdp.hpp"
#include "prefbench/planner.hpp"
#include "prefbench/random.hpp"

namespace prefbench {

struct Segment {
  std::vector<State> states;  // size() == actions.size() + 1
  std::vector<Action> actions;
  std::vector<FeatureVector> phis;

  int length() const { return static_cast<int>(actions.size()); }
  const State& start() const { return states.front(); }
  const State& end() const { return states.back(); }
  bool terminates() const { return states.back().terminal; }

  FeatureVector features() const {
    FeatureVector f;
    for (const auto& p : phis) f += p;
    return f;
  }
  friend bool operator==(const Segment& a, const Segment& b) {
    return a.states == b.states && a.actions == b.actions;
  }
};

// Rolls the actions out from start; only the final state may be terminal.
inline Segment make_segment(const GridMap& map, State start,
                            const std::vector<Action>& actions) {
  if (!map.in_bounds(start.x, start.y) || map.at(start.x, start.y).blocked()) {
    throw Error("segment start is not a state of the map");
  }
  start.terminal = map.at(start.x, start.y).terminal();
  Segment seg;
  seg.states.push_back(start);
  for (Action a : actions) {
    if (seg.states.back().terminal) {
      throw Error("segment continues past a terminal state");
    }
    Transition t = step(map, seg.states.back(), a);
    seg.actions.push_back(a);
    seg.phis.push_back(t.phi);
    seg.states.push_back(t.next);
  }
  return seg;
}

enum class Choice : std::uint8_t { kFirst, kSecond, kSame, kCantTell };

inline std::string_view to_string(Choice c) {
  switch (c) {
    case Choice::kFirst: return "first";
    case Choice::kSecond: return "second";
    case Choice::kSame: return "same";
    case Choice::kCantTell: return "cant_tell";
  }
  return "?";
}

inline std::optional<Choice> parse_choice(std::string_view s) {
  for (Choice c : {Choice::kFirst, Choice::kSecond, Choice::kSame, Choice::kCantTell}) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

// mu = (1,0) first preferred, (0,1) second preferred, (0.5,0.5) no preference.
struct PreferenceLabel {
  double mu1 = 0.5;
  double mu2 = 0.5;

  static PreferenceLabel first() { return {1.0, 0.0}; }
  static PreferenceLabel second() { return {0.0, 1.0}; }
  static PreferenceLabel same() { return {0.5, 0.5}; }

  static PreferenceLabel from_choice(Choice c) {
    switch (c) {
      case Choice::kFirst: return first();
      case Choice::kSecond: return second();
      case Choice::kSame: return same();
      case Choice::kCantTell: break;
    }
    throw Error("\"can't tell\" has no preference label");
  }

  Choice choice() const {
    return mu1 > mu2 ? Choice::kFirst : mu1 < mu2 ? Choice::kSecond : Choice::kSame;
  }
  PreferenceLabel flipped() const { return {mu2, mu1}; }
  friend bool operator==(const PreferenceLabel&, const PreferenceLabel&) = default;
};

enum class ModelKind : std::uint8_t { kPartialReturn, kRegret };
enum class Noise : std::uint8_t { kBoltzmann, kNoiseless };

inline std::string_view to_string(ModelKind k) {
  return k == ModelKind::kRegret ? "regret" : "partial_return";
}
inline std::optional<ModelKind> parse_model(std::string_view s) {
  if (s == "regret") return ModelKind::kRegret;
  if (s == "partial_return") return ModelKind::kPartialReturn;
  return std::nullopt;
}

struct PreferenceModelSpec {
  ModelKind kind = ModelKind::kPartialReturn;
  Noise noise = Noise::kBoltzmann;
  double scale = 1.0;  // multiplies the statistic difference; boltzmann only
};

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Undiscounted sum of rewards over the segment.
inline double partial_return(const Segment& sigma, const LinearReward& w) {
  double s = 0.0;
  for (const auto& phi : sigma.phis) s += reward(w, phi);
  return s;
}

// V*(s_0) - (partial return + V*(s_end)) using an exact value table.
inline double regret_d(const Segment& sigma, const LinearReward& w,
                       const ValueTable& vt) {
  if (!(vt.weights == w)) {
    throw Error("value table was planned for different reward weights");
  }
  for (const State& s : {sigma.start(), sigma.end()}) {
    if (s.x < 0 || s.y < 0 || s.x >= vt.width || s.y >= vt.height) {
      throw Error("segment does not fit the value table's map");
    }
  }
  return vt.value(sigma.start()) - (partial_return(sigma, w) + vt.value(sigma.end()));
}

struct SoftValue {
  double value = 0.0;
  Vec6 grad{};  // d value / d w
};

// Softmax-weighted average of the candidate policies' values at one cell.
inline SoftValue soft_value(const SuccessorFeatureSet& sfs, int cell,
                            const LinearReward& w, double tau) {
  if (sfs.entries.empty()) throw Error("empty successor-feature set");
  if (!(tau > 0.0)) throw Error("softmax temperature must be positive");
  const std::size_t k = sfs.entries.size();
  thread_local std::vector<double> values, probs;
  values.resize(k);
  probs.resize(k);
  double vmax = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i) {
    values[i] = dot(sfs.entries[i].psi[cell], w.weights);
    vmax = std::max(vmax, values[i]);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    probs[i] = std::exp((values[i] - vmax) / tau);
    z += probs[i];
  }
  SoftValue out;
  for (std::size_t i = 0; i < k; ++i) {
    probs[i] /= z;
    out.value += probs[i] * values[i];
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (probs[i] == 0.0) continue;
    const double coef = probs[i] * (1.0 + (values[i] - out.value) / tau);
    const Vec6& psi = sfs.entries[i].psi[cell];
    for (int f = 0; f < kNumFeatures; ++f) out.grad[f] += coef * psi[f];
  }
  return out;
}

inline SoftValue soft_value(const SuccessorFeatureSet& sfs, const State& s,
                            const LinearReward& w, double tau) {
  if (s.terminal) return {};
  return soft_value(sfs, s.y * sfs.width + s.x, w, tau);
}

// Regret with V* replaced by the candidate-set soft maximum.
inline double soft_regret(const Segment& sigma, const LinearReward& w,
                          const SuccessorFeatureSet& sfs, double tau) {
  return soft_value(sfs, sigma.start(), w, tau).value -
         (partial_return(sigma, w) + soft_value(sfs, sigma.end(), w, tau).value);
}

// Where V* comes from for the regret model: an exact value table, or the
// differentiable candidate-set estimate.
struct ExactValues {
  const ValueTable& table;
};
struct SoftValues {
  const SuccessorFeatureSet& set;
  double tau = 0.001;
};

inline double desirability(ModelKind kind, const Segment& sigma,
                           const LinearReward& w, const ExactValues& v) {
  return kind == ModelKind::kPartialReturn ? partial_return(sigma, w)
                                           : -regret_d(sigma, w, v.table);
}
inline double desirability(ModelKind kind, const Segment& sigma,
                           const LinearReward& w, const SoftValues& v) {
  return kind == ModelKind::kPartialReturn ? partial_return(sigma, w)
                                           : -soft_regret(sigma, w, v.set, v.tau);
}

// P(sigma1 preferred over sigma2).
template <class Values>
double pref_prob(const PreferenceModelSpec& spec, const Segment& s1,
                 const Segment& s2, const LinearReward& w, const Values& values) {
  const double diff =
      desirability(spec.kind, s1, w, values) - desirability(spec.kind, s2, w, values);
  return logistic(spec.scale * diff);
}

inline constexpr double kTieTolerance = 1e-9;

template <class Values>
PreferenceLabel noiseless_label(const PreferenceModelSpec& spec, const Segment& s1,
                                const Segment& s2, const LinearReward& w,
                                const Values& values) {
  const double d1 = desirability(spec.kind, s1, w, values);
  const double d2 = desirability(spec.kind, s2, w, values);
  // Statistics equal up to rounding count as a tie.
  const double tie = kTieTolerance * std::max({1.0, std::abs(d1), std::abs(d2)});
  if (d1 - d2 > tie) return PreferenceLabel::first();
  if (d2 - d1 > tie) return PreferenceLabel::second();
  return PreferenceLabel::same();
}

template <class Values>
PreferenceLabel boltzmann_label(const PreferenceModelSpec& spec, const Segment& s1,
                                const Segment& s2, const LinearReward& w,
                                const Values& values, Rng& rng) {
  const double p = pref_prob(spec, s1, s2, w, values);
  return uniform01(rng) < p ? PreferenceLabel::first() : PreferenceLabel::second();
}

template <class Values>
PreferenceLabel boltzmann_label(const PreferenceModelSpec& spec, const Segment& s1,
                                const Segment& s2, const LinearReward& w,
                                const Values& values, std::uint64_t seed) {
  Rng rng(seed);
  return boltzmann_label(spec, s1, s2, w, values, rng);
}

// Dispatches on spec.noise.
template <class Values>
PreferenceLabel label_pair(const PreferenceModelSpec& spec, const Segment& s1,
                           const Segment& s2, const LinearReward& w,
                           const Values& values, Rng& rng) {
  return spec.noise == Noise::kNoiseless ? noiseless_label(spec, s1, s2, w, values)
                                         : boltzmann_label(spec, s1, s2, w, values, rng);
}

}  // namespace prefbench
