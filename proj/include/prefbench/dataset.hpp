#pragma once

// Segment-pair sampling, preference datasets and their JSONL form.

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "prefbench/error.hpp"
#include "prefbench/mdp.hpp"
#include "prefbench/planner.hpp"
#include "prefbench/preference.hpp"
#include "prefbench/random.hpp"

namespace prefbench {

enum class Source : std::uint8_t { kHuman, kSynthetic };

inline std::string_view to_string(Source s) {
  return s == Source::kHuman ? "human" : "synthetic";
}

struct PreferenceSample {
  Segment sigma1;
  Segment sigma2;
  Choice choice = Choice::kSame;
  std::string pair_id;
  Source source = Source::kSynthetic;
  std::optional<std::string> annotator_id;
  std::optional<std::string> condition;

  bool strict() const { return choice == Choice::kFirst || choice == Choice::kSecond; }
  PreferenceLabel label() const { return PreferenceLabel::from_choice(choice); }
};

struct PreferenceDataset {
  std::vector<PreferenceSample> samples;
  std::string map_fingerprint;
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

enum class Polarity : std::uint8_t { kPositive, kNegative };

// ---------------------------------------------------------------------------
// Sampling

inline constexpr int kSegmentActions = 3;
inline constexpr int kResampleCap = 10'000;

// Uniform random actions from start, stopping early at a terminal.
inline Segment sample_segment(const GridMap& map, const State& start,
                              int num_actions, Rng& rng) {
  if (start.terminal || map.at(start.x, start.y).terminal()) {
    throw Error("segment start must be non-terminal");
  }
  std::vector<Action> actions;
  State s = map.state_at(start.x, start.y);
  for (int i = 0; i < num_actions && !s.terminal; ++i) {
    const Action a = kActions[uniform_index(rng, 4)];
    actions.push_back(a);
    s = step(map, s, a).next;
  }
  return make_segment(map, start, actions);
}

inline Segment sample_segment(const GridMap& map, const State& start,
                              int num_actions, std::uint64_t seed) {
  Rng rng(seed);
  return sample_segment(map, start, num_actions, rng);
}

namespace detail {

inline Segment sample_full_length(const GridMap& map, const State& start,
                                  int num_actions, Rng& rng) {
  for (int attempt = 0; attempt < kResampleCap; ++attempt) {
    Segment seg = sample_segment(map, start, num_actions, rng);
    if (!seg.terminates()) return seg;
  }
  throw Error("resample cap exceeded looking for a non-terminating segment");
}

inline State sample_start(const GridMap& map, Rng& rng) {
  const auto starts = start_distribution(map);
  return starts[uniform_index(rng, starts.size())].state;
}

inline bool matches(Polarity p, const Cell& c) {
  return c.surface == (p == Polarity::kPositive ? Surface::kGoal : Surface::kSheep);
}

// Action sequences of length 1 or 2 from start that end on a terminal of the
// requested polarity.
inline std::vector<std::vector<Action>> short_terminal_routes(const GridMap& map,
                                                              const State& start,
                                                              Polarity polarity) {
  std::vector<std::vector<Action>> routes;
  for (Action a : kActions) {
    const Transition t = step(map, start, a);
    if (t.terminal) {
      if (matches(polarity, map.at(t.next.x, t.next.y))) routes.push_back({a});
      continue;
    }
    for (Action b : kActions) {
      const Transition u = step(map, t.next, b);
      if (u.terminal && matches(polarity, map.at(u.next.x, u.next.y))) {
        routes.push_back({a, b});
      }
    }
  }
  return routes;
}

// Some three-action sequence from start avoids every terminal.
inline bool has_full_length_route(const GridMap& map, const State& s, int depth) {
  if (s.terminal) return false;
  if (depth == 0) return true;
  for (Action a : kActions) {
    if (has_full_length_route(map, step(map, s, a).next, depth - 1)) return true;
  }
  return false;
}

}  // namespace detail

// Shared start drawn uniformly; both segments take exactly num_actions
// without terminating. With distinct_starts each segment gets its own start.
inline std::pair<Segment, Segment> sample_pair_random(const GridMap& map, Rng& rng,
                                                      int num_actions = kSegmentActions,
                                                      bool distinct_starts = false) {
  const State start = detail::sample_start(map, rng);
  Segment a = detail::sample_full_length(map, start, num_actions, rng);
  const State start2 = distinct_starts ? detail::sample_start(map, rng) : start;
  Segment b = detail::sample_full_length(map, start2, num_actions, rng);
  return {std::move(a), std::move(b)};
}

inline std::pair<Segment, Segment> sample_pair_random(const GridMap& map,
                                                      std::uint64_t seed,
                                                      int num_actions = kSegmentActions) {
  Rng rng(seed);
  return sample_pair_random(map, rng, num_actions);
}

// One segment reaches a terminal of the given polarity in fewer than three
// actions; the other takes three actions without terminating. The order of
// the two is random.
inline std::pair<Segment, Segment> sample_pair_terminal(const GridMap& map,
                                                        Polarity polarity, Rng& rng) {
  std::vector<State> starts;
  for (const auto& ws : start_distribution(map)) {
    if (!detail::short_terminal_routes(map, ws.state, polarity).empty() &&
        detail::has_full_length_route(map, ws.state, kSegmentActions)) {
      starts.push_back(ws.state);
    }
  }
  if (starts.empty()) {
    throw Error(std::string("no start reaches a ") +
                (polarity == Polarity::kPositive ? "goal" : "sheep") +
                " within two actions");
  }
  const State start = starts[uniform_index(rng, starts.size())];
  const auto routes = detail::short_terminal_routes(map, start, polarity);
  Segment ends = make_segment(map, start, routes[uniform_index(rng, routes.size())]);
  Segment full = detail::sample_full_length(map, start, kSegmentActions, rng);
  if (uniform_index(rng, 2) == 0) return {std::move(ends), std::move(full)};
  return {std::move(full), std::move(ends)};
}

inline std::pair<Segment, Segment> sample_pair_terminal(const GridMap& map,
                                                        Polarity polarity,
                                                        std::uint64_t seed) {
  Rng rng(seed);
  return sample_pair_terminal(map, polarity, rng);
}

inline std::string numbered_id(std::string_view prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return std::string(prefix) + buf;
}

// Unlabeled pairs: n_random random pairs followed by n_terminal terminal
// pairs alternating positive and negative polarity.
struct PairSpec {
  std::string pair_id;
  Segment sigma1;
  Segment sigma2;
};

inline std::vector<PairSpec> sample_pair_pool(const GridMap& map, int n_random,
                                              int n_terminal, Rng& rng,
                                              std::string_view prefix = "pair-") {
  if (n_random < 0 || n_terminal < 0) throw Error("pair counts must be non-negative");
  std::vector<PairSpec> pool;
  pool.reserve(n_random + n_terminal);
  for (int i = 0; i < n_random + n_terminal; ++i) {
    auto [a, b] = i < n_random
                      ? sample_pair_random(map, rng)
                      : sample_pair_terminal(map,
                                             (i - n_random) % 2 == 0 ? Polarity::kPositive
                                                                     : Polarity::kNegative,
                                             rng);
    pool.push_back({numbered_id(prefix, i), std::move(a), std::move(b)});
  }
  return pool;
}

// Synthetic dataset labeled by the annotator spec under reward w. Regret
// labels use exact optimal values for w.
inline PreferenceDataset synth_dataset(const GridMap& map, const LinearReward& w,
                                       const PreferenceModelSpec& spec, int n_random,
                                       int n_terminal, std::uint64_t seed) {
  Rng rng(seed);
  const ValueTable vt = value_iteration(map, w);
  PreferenceDataset d;
  d.map_fingerprint = map_fingerprint(map);
  d.provenance = {{"protocol", "synthetic"},
                  {"seed", seed},
                  {"n_random", n_random},
                  {"n_terminal", n_terminal},
                  {"model", std::string(to_string(spec.kind))},
                  {"noise", spec.noise == Noise::kNoiseless ? "noiseless" : "boltzmann"},
                  {"scale", spec.scale}};
  for (auto& pair : sample_pair_pool(map, n_random, n_terminal, rng)) {
    PreferenceSample s;
    s.choice = label_pair(spec, pair.sigma1, pair.sigma2, w, ExactValues{vt}, rng).choice();
    s.sigma1 = std::move(pair.sigma1);
    s.sigma2 = std::move(pair.sigma2);
    s.pair_id = std::move(pair.pair_id);
    s.source = Source::kSynthetic;
    d.samples.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Transformations

inline Choice flipped(Choice c) {
  switch (c) {
    case Choice::kFirst: return Choice::kSecond;
    case Choice::kSecond: return Choice::kFirst;
    default: return c;
  }
}

inline PreferenceSample flipped(const PreferenceSample& s) {
  PreferenceSample f = s;
  std::swap(f.sigma1, f.sigma2);
  f.choice = flipped(s.choice);
  f.pair_id += "~flip";
  return f;
}

// Each sample once as-is and once with segments swapped and label reversed.
inline PreferenceDataset double_with_flips(const PreferenceDataset& d) {
  PreferenceDataset out;
  out.map_fingerprint = d.map_fingerprint;
  out.provenance = d.provenance;
  out.samples.reserve(2 * d.size());
  for (const auto& s : d.samples) {
    out.samples.push_back(s);
    out.samples.push_back(flipped(s));
  }
  return out;
}

// Appends goal-terminal pairs labeled by the noiseless partial-return model
// under the ground-truth reward.
inline PreferenceDataset augment_identifiability(const PreferenceDataset& d,
                                                 const GridMap& map,
                                                 const LinearReward& w_gt, int count,
                                                 std::uint64_t seed) {
  if (!d.map_fingerprint.empty() && d.map_fingerprint != map_fingerprint(map)) {
    throw Error("dataset was built on a different map");
  }
  Rng rng(seed);
  PreferenceDataset out = d;
  out.map_fingerprint = map_fingerprint(map);
  const ValueTable vt = value_iteration(map, w_gt);
  const PreferenceModelSpec spec{ModelKind::kPartialReturn, Noise::kNoiseless, 1.0};
  for (int i = 0; i < count; ++i) {
    auto [a, b] = sample_pair_terminal(map, Polarity::kPositive, rng);
    PreferenceSample s;
    s.choice = noiseless_label(spec, a, b, w_gt, ExactValues{vt}).choice();
    s.sigma1 = std::move(a);
    s.sigma2 = std::move(b);
    s.pair_id = numbered_id("aug-", i);
    s.source = Source::kSynthetic;
    out.samples.push_back(std::move(s));
  }
  out.provenance["augmented"] = count;
  return out;
}

// Keeps the pair_ids that carry a strict preference in every dataset, in the
// order of the first dataset.
inline std::vector<PreferenceDataset> align_paired(
    const std::vector<PreferenceDataset>& datasets) {
  if (datasets.empty()) throw Error("no datasets to align");
  std::vector<std::map<std::string, const PreferenceSample*>> index(datasets.size());
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    for (const auto& s : datasets[k].samples) {
      if (!index[k].emplace(s.pair_id, &s).second) {
        throw Error("duplicate pair_id '" + s.pair_id + "' within one dataset");
      }
    }
  }
  std::vector<std::string> keep;
  for (const auto& s : datasets.front().samples) {
    bool all = true;
    for (const auto& idx : index) {
      auto it = idx.find(s.pair_id);
      all = all && it != idx.end() && it->second->strict();
    }
    if (all) keep.push_back(s.pair_id);
  }
  if (keep.empty()) throw Error("datasets share no strictly-labeled pair");
  std::vector<PreferenceDataset> out(datasets.size());
  for (std::size_t k = 0; k < datasets.size(); ++k) {
    out[k].map_fingerprint = datasets[k].map_fingerprint;
    out[k].provenance = datasets[k].provenance;
    for (const auto& id : keep) out[k].samples.push_back(*index[k].at(id));
  }
  return out;
}

inline PreferenceDataset strict_only(const PreferenceDataset& d) {
  PreferenceDataset out;
  out.map_fingerprint = d.map_fingerprint;
  out.provenance = d.provenance;
  for (const auto& s : d.samples) {
    if (s.strict()) out.samples.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL
//
// Line 1 is a header {"schema","version","map_fingerprint","provenance"};
// every further line is one sample. Segments are stored as a start cell and
// an action list and are re-rolled against the map when read.

inline constexpr std::string_view kDatasetSchema = "prefbench.dataset";
inline constexpr int kDatasetVersion = 1;

namespace detail {

inline nlohmann::ordered_json segment_json(const Segment& s, bool with_start) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (with_start) j["start"] = {s.start().x, s.start().y};
  auto& actions = j["actions"] = nlohmann::ordered_json::array();
  for (Action a : s.actions) actions.push_back(std::string(to_string(a)));
  return j;
}

inline void require_keys(const nlohmann::ordered_json& j, std::initializer_list<std::string_view> allowed,
                         int line) {
  if (!j.is_object()) throw ParseError("expected a JSON object", line, 1);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok |= key == a;
    if (!ok) throw ParseError("unknown field '" + key + "'", line, 1);
  }
}

inline State read_cell(const nlohmann::ordered_json& j, const GridMap& map, int line) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() ||
      !j[1].is_number_integer()) {
    throw ParseError("cell must be [x, y]", line, 1);
  }
  const int x = j[0], y = j[1];
  if (!map.in_bounds(x, y)) throw ParseError("cell outside the map", line, 1);
  return map.state_at(x, y);
}

inline Segment read_segment(const nlohmann::ordered_json& j, const State& default_start,
                            const GridMap& map, int line) {
  require_keys(j, {"start", "actions"}, line);
  const State start = j.contains("start") ? read_cell(j["start"], map, line) : default_start;
  std::vector<Action> actions;
  for (const auto& a : j.at("actions")) {
    auto parsed = a.is_string() ? parse_action(a.get<std::string>()) : std::nullopt;
    if (!parsed) throw ParseError("unknown action " + a.dump(), line, 1);
    actions.push_back(*parsed);
  }
  try {
    return make_segment(map, start, actions);
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(e.what(), line, 1);
  }
}

inline std::optional<std::string> optional_string(const nlohmann::ordered_json& j,
                                                  const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<std::string>();
}

}  // namespace detail

inline std::string sample_to_json_line(const PreferenceSample& s) {
  nlohmann::ordered_json j;
  j["pair_id"] = s.pair_id;
  j["condition"] = s.condition ? nlohmann::ordered_json(*s.condition) : nullptr;
  j["annotator_id"] = s.annotator_id ? nlohmann::ordered_json(*s.annotator_id) : nullptr;
  j["source"] = std::string(to_string(s.source));
  j["start"] = {s.sigma1.start().x, s.sigma1.start().y};
  j["segment1"] = detail::segment_json(s.sigma1, false);
  j["segment2"] = detail::segment_json(s.sigma2, !(s.sigma2.start() == s.sigma1.start()));
  j["label"] = std::string(to_string(s.choice));
  return j.dump();
}

inline void write_dataset(std::ostream& os, const PreferenceDataset& d) {
  nlohmann::ordered_json header;
  header["schema"] = kDatasetSchema;
  header["version"] = kDatasetVersion;
  header["map_fingerprint"] = d.map_fingerprint;
  header["provenance"] = d.provenance;
  os << header.dump() << '\n';
  for (const auto& s : d.samples) os << sample_to_json_line(s) << '\n';
}

inline std::string write_dataset(const PreferenceDataset& d) {
  std::ostringstream os;
  write_dataset(os, d);
  return os.str();
}

inline PreferenceSample sample_from_json(const nlohmann::ordered_json& j, const GridMap& map,
                                         int line) {
  detail::require_keys(j, {"pair_id", "condition", "annotator_id", "source", "start",
                           "segment1", "segment2", "label"},
                       line);
  PreferenceSample s;
  try {
    s.pair_id = j.at("pair_id").get<std::string>();
    s.condition = detail::optional_string(j, "condition");
    s.annotator_id = detail::optional_string(j, "annotator_id");
    const std::string source = j.at("source");
    if (source != "human" && source != "synthetic") {
      throw ParseError("unknown source '" + source + "'", line, 1);
    }
    s.source = source == "human" ? Source::kHuman : Source::kSynthetic;
    const State start = detail::read_cell(j.at("start"), map, line);
    s.sigma1 = detail::read_segment(j.at("segment1"), start, map, line);
    s.sigma2 = detail::read_segment(j.at("segment2"), start, map, line);
    auto choice = parse_choice(j.at("label").get<std::string>());
    if (!choice) throw ParseError("unknown label " + j.at("label").dump(), line, 1);
    s.choice = *choice;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed sample: ") + e.what(), line, 1);
  }
  return s;
}

inline PreferenceDataset read_dataset(std::istream& is, const GridMap& map) {
  PreferenceDataset d;
  std::string text;
  int line_no = 0;
  bool header = false;
  const std::string fingerprint = map_fingerprint(map);
  while (std::getline(is, text)) {
    ++line_no;
    if (text.empty() || text == "\r") continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::ordered_json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no,
                       static_cast<int>(e.byte));
    }
    if (!header) {
      detail::require_keys(j, {"schema", "version", "map_fingerprint", "provenance"},
                           line_no);
      if (j.value("schema", "") != kDatasetSchema || j.value("version", 0) != kDatasetVersion) {
        throw ParseError("not a prefbench dataset (schema/version)", line_no, 1);
      }
      d.map_fingerprint = j.at("map_fingerprint").get<std::string>();
      if (d.map_fingerprint != fingerprint) {
        throw ParseError("dataset fingerprint " + d.map_fingerprint +
                             " does not match map " + fingerprint,
                         line_no, 1);
      }
      d.provenance = j.value("provenance", nlohmann::ordered_json::object());
      header = true;
      continue;
    }
    d.samples.push_back(sample_from_json(j, map, line_no));
  }
  return d;
}

inline PreferenceDataset read_dataset(const std::string& text, const GridMap& map) {
  std::istringstream is(text);
  return read_dataset(is, map);
}

}  // namespace prefbench
