#pragma once

// Scripted annotator used by the service tests and the acceptance run.

#include <map>
#include <string>
#include <vector>

#include "prefbench/elicitation.hpp"

namespace testing {

// Rebuilds both segments of a pair payload on the given map.
inline std::pair<prefbench::Segment, prefbench::Segment> payload_segments(
    const prefbench::Json& payload, const prefbench::GridMap& map) {
  using namespace prefbench;
  const State start{payload.at("start").at(0).get<int>(), payload.at("start").at(1).get<int>()};
  std::vector<Segment> segs;
  for (const auto& s : payload.at("segments")) {
    std::vector<Action> actions;
    for (const auto& a : s.at("actions")) actions.push_back(*parse_action(a.get<std::string>()));
    segs.push_back(make_segment(map, start, actions));
  }
  return {segs.at(0), segs.at(1)};
}

// Noiseless choice of the given model under the ground-truth reward.
inline prefbench::Choice model_choice(const prefbench::Json& payload, const prefbench::GridMap& map,
                                      const prefbench::ValueTable& vt, prefbench::ModelKind model) {
  using namespace prefbench;
  const auto [a, b] = payload_segments(payload, map);
  return noiseless_label(PreferenceModelSpec{model, Noise::kNoiseless, 1.0}, a, b,
                         LinearReward::ground_truth(), ExactValues{vt})
      .choice();
}

inline std::map<std::string, std::vector<std::string>> full_credit_answers(
    prefbench::Experiment e) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& q : prefbench::survey_questions(e)) {
    out[q.id] = std::vector<std::string>(q.full.begin(), q.full.end());
  }
  return out;
}

inline prefbench::Json survey_body(prefbench::Experiment e, std::optional<int> likert = 6) {
  prefbench::Json answers = prefbench::Json::object();
  for (const auto& [q, picked] : full_credit_answers(e)) answers[q] = picked;
  prefbench::Json body{{"answers", answers}};
  if (likert) body["likert"] = *likert;
  return body;
}

}  // namespace testing
