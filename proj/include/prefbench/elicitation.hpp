#pragma once

// Preference elicitation sessions: condition-specific stage flows, segment
// pair assignment with replacement, survey scoring, attention filtering and
// dataset export. Sessions are persisted as an append-only JSONL event log
// and rebuilt by replaying it.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "prefbench/dataset.hpp"
#include "prefbench/error.hpp"
#include "prefbench/mdp.hpp"
#include "prefbench/planner.hpp"
#include "prefbench/preference.hpp"
#include "prefbench/random.hpp"

namespace prefbench {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Conditions and stages

enum class Experiment : std::uint8_t { kPrivileged, kTrained, kQuestion };
enum class Arm : std::uint8_t { kControl, kPartialReturn, kRegret };

inline constexpr std::array<Experiment, 3> kExperiments = {
    Experiment::kPrivileged, Experiment::kTrained, Experiment::kQuestion};
inline constexpr std::array<Arm, 3> kArms = {Arm::kControl, Arm::kPartialReturn, Arm::kRegret};

inline std::string_view to_string(Experiment e) {
  switch (e) {
    case Experiment::kPrivileged: return "privileged";
    case Experiment::kTrained: return "trained";
    case Experiment::kQuestion: return "question";
  }
  return "?";
}

inline std::string_view to_string(Arm a) {
  switch (a) {
    case Arm::kControl: return "control";
    case Arm::kPartialReturn: return "partial_return";
    case Arm::kRegret: return "regret";
  }
  return "?";
}

struct Condition {
  Experiment experiment = Experiment::kTrained;
  Arm arm = Arm::kControl;

  std::string name() const {
    return std::string(to_string(experiment)) + "-" + std::string(to_string(arm));
  }
  friend bool operator==(const Condition&, const Condition&) = default;
  friend auto operator<=>(const Condition&, const Condition&) = default;
};

// "<experiment>-<arm>", e.g. "trained-regret".
inline std::optional<Condition> parse_condition(std::string_view s) {
  for (Experiment e : kExperiments) {
    for (Arm a : kArms) {
      if (Condition{e, a}.name() == s) return Condition{e, a};
    }
  }
  return std::nullopt;
}

inline std::vector<Condition> all_conditions() {
  std::vector<Condition> out;
  for (Experiment e : kExperiments) {
    for (Arm a : kArms) out.push_back({e, a});
  }
  return out;
}

enum class Stage : std::uint8_t {
  kDomainTeaching,
  kStatisticTeaching,
  kPractice1,
  kInstructedExample,
  kPractice2,
  kAntiGuidance,
  kPractice3,
  kElicitation,
  kSurvey,
  kDone,
};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kDomainTeaching: return "domain_teaching";
    case Stage::kStatisticTeaching: return "statistic_teaching";
    case Stage::kPractice1: return "practice_1";
    case Stage::kInstructedExample: return "instructed_example";
    case Stage::kPractice2: return "practice_2";
    case Stage::kAntiGuidance: return "anti_guidance";
    case Stage::kPractice3: return "practice_3";
    case Stage::kElicitation: return "elicitation";
    case Stage::kSurvey: return "survey";
    case Stage::kDone: return "done";
  }
  return "?";
}

inline bool is_practice(Stage s) {
  return s == Stage::kPractice1 || s == Stage::kPractice2 || s == Stage::kPractice3;
}

inline bool is_teaching(Stage s) {
  return s == Stage::kDomainTeaching || s == Stage::kStatisticTeaching ||
         s == Stage::kInstructedExample || s == Stage::kAntiGuidance;
}

inline bool is_trained_arm(const Condition& c) {
  return c.experiment == Experiment::kTrained && c.arm != Arm::kControl;
}

// Trained intervention arms walk every stage; all other conditions go from
// domain teaching straight to elicitation.
inline std::vector<Stage> stage_path(const Condition& c) {
  if (is_trained_arm(c)) {
    return {Stage::kDomainTeaching, Stage::kStatisticTeaching, Stage::kPractice1,
            Stage::kInstructedExample, Stage::kPractice2, Stage::kAntiGuidance,
            Stage::kPractice3, Stage::kElicitation, Stage::kSurvey, Stage::kDone};
  }
  return {Stage::kDomainTeaching, Stage::kElicitation, Stage::kSurvey, Stage::kDone};
}

inline constexpr std::string_view kQuestionPrivileged = "Which shows better behavior?";
inline constexpr std::string_view kQuestionControl = "Which path do you prefer?";
inline constexpr std::string_view kQuestionPartialReturn =
    "Which path has better immediate outcomes?";
inline constexpr std::string_view kQuestionRegret = "Which path reflects better decision-making?";
inline constexpr std::string_view kQuestionTrainedPartialReturn =
    "which path has the highest score so far?";
inline constexpr std::string_view kQuestionTrainedRegret =
    "which path has the highest biggest possible final score";

inline std::string_view elicitation_question(const Condition& c) {
  switch (c.experiment) {
    case Experiment::kPrivileged: return kQuestionPrivileged;
    case Experiment::kQuestion:
      return c.arm == Arm::kPartialReturn ? kQuestionPartialReturn
             : c.arm == Arm::kRegret      ? kQuestionRegret
                                          : kQuestionControl;
    case Experiment::kTrained:
      return c.arm == Arm::kPartialReturn ? kQuestionTrainedPartialReturn
             : c.arm == Arm::kRegret      ? kQuestionTrainedRegret
                                          : kQuestionControl;
  }
  return kQuestionControl;
}

// The first practice round comes before any instruction on how to choose.
inline std::string_view practice_question(const Condition& c, Stage s) {
  return s == Stage::kPractice1 ? kQuestionControl : elicitation_question(c);
}

inline ModelKind target_model(Arm a) {
  return a == Arm::kRegret ? ModelKind::kRegret : ModelKind::kPartialReturn;
}

// ---------------------------------------------------------------------------
// Survey

struct SurveyOption {
  std::string id;
  std::string text;
};

struct SurveyQuestion {
  std::string id;
  std::string text;
  std::vector<SurveyOption> options;
  std::set<std::string> full;
  std::vector<std::set<std::string>> partial;
};

inline std::vector<SurveyQuestion> survey_questions(Experiment e) {
  const SurveyQuestion goal{
      "goal",
      "What is the goal of this world? (Check all that apply.)",
      {{"maximize_profit", "To maximize profit"},
       {"specific_location", "To get to a specific location."},
       {"explore", "To drive as far as possible to explore the world."},
       {"collect_coins", "To collect as many coins as possible."},
       {"collect_sheep", "To collect as many sheep as possible."},
       {"drive_sheep", "To drive sheep to a specific location."}},
      {"maximize_profit"},
      {{"maximize_profit", "specific_location"}}};
  const SurveyQuestion house{
      "house",
      "What happens when you run into a house?",
      {{"gas_no_move", "You incur a gas cost and don't go anywhere."},
       {"gas_house_no_move",
        "You incur a gas cost and a cost for hitting the house, and you don't go anywhere."},
       {"gas_house_drive_over",
        "You incur a gas cost and a cost for hitting the house, and you drive over the house."},
       {"nothing", "Nothing happens."},
       {"episode_ends", "The episode ends."},
       {"stuck", "You get stuck."},
       {"collect_sheep", "To collect as many sheep as possible."}},
      {"gas_no_move"},
      {{"gas_house_no_move"}, {"gas_house_drive_over"}, {"nothing"}}};
  const SurveyQuestion house_multi{
      "house",
      "What happens when you run into a house? (Check all that apply.)",
      {{"gas_penalty", "You pay a gas penalty."},
       {"cannot_enter", "You can't run into a house; the world doesn't let you move into it."},
       {"episode_ends", "The episode ends."},
       {"stuck", "You get stuck."},
       {"collect_sheep", "To collect as many sheep as possible."}},
      {"gas_penalty", "cannot_enter"},
      {{"gas_penalty"}, {"cannot_enter"}}};
  const SurveyQuestion sheep{
      "sheep",
      "What happens when you run into a sheep? (Check all that apply.)",
      {{"episode_ends", "The episode ends."},
       {"penalized", "You are penalized for running into a sheep."},
       {"rewarded", "You are rewarded for collecting a sheep."}},
      {"episode_ends", "penalized"},
      {{"episode_ends"}, {"penalized"}}};
  const SurveyQuestion roadblock{
      "roadblock",
      "What happens when you run into a roadblock? (Check all that apply.)",
      {{"penalty", "You pay a penalty."},
       {"episode_ends", "The episode ends."},
       {"stuck", "You get stuck."},
       {"cannot_enter", "You can't run into a roadblock; the world doesn't let you move into it."}},
      {"penalty"},
      {}};
  const SurveyQuestion roadblock_good{
      "roadblock_good_choice",
      "Is running into a roadblock ever a good choice in any town?",
      {{"yes", "Yes, in certain circumstances."}, {"no", "No."}},
      {"yes"},
      {}};
  const SurveyQuestion brick{
      "brick",
      "What happens when you go into the brick area? (Check all that apply.)",
      {{"extra_gas", "You pay extra for gas."},
       {"episode_ends", "The episode ends."},
       {"stuck", "You get stuck in the brick area."},
       {"cannot_enter", "You can't go into the brick area; the world doesn't let you move into it."}},
      {"extra_gas"},
      {}};
  const SurveyQuestion brick_good{
      "brick_good_choice",
      "Is entering the brick area ever a good choice?",
      {{"yes", "Yes, in certain circumstances"}, {"no", "No"}},
      {"yes"},
      {}};
  if (e == Experiment::kPrivileged) {
    return {goal, house_multi, sheep, roadblock, roadblock_good, brick, brick_good};
  }
  return {goal, house, sheep, roadblock, roadblock_good, brick_good};
}

inline std::optional<std::string> likert_question(const Condition& c) {
  if (!is_trained_arm(c)) return std::nullopt;
  return c.arm == Arm::kPartialReturn
             ? "We told you that the better path is always the one with the higher SCORE SO FAR. "
               "How often did you agree with this?"
             : "We told you that the better path is always the one with the higher BIGGEST "
               "POSSIBLE FINAL SCORE. How often did you agree with this?";
}

struct SurveyScore {
  double score = 0.0;
  double max_score = 0.0;
  std::map<std::string, double> per_question;
};

// 1 for the full-credit selection, 0.5 for a partial-credit selection, 0
// otherwise. Unanswered questions score 0.
inline SurveyScore score_survey(Experiment e,
                                const std::map<std::string, std::vector<std::string>>& answers) {
  const auto questions = survey_questions(e);
  SurveyScore out;
  out.max_score = static_cast<double>(questions.size());
  for (const auto& [qid, picked] : answers) {
    const auto q = std::find_if(questions.begin(), questions.end(),
                                [&](const SurveyQuestion& x) { return x.id == qid; });
    if (q == questions.end()) throw Error("unknown survey question '" + qid + "'");
    std::set<std::string> chosen;
    for (const auto& o : picked) {
      if (std::none_of(q->options.begin(), q->options.end(),
                       [&](const SurveyOption& x) { return x.id == o; })) {
        throw Error("unknown option '" + o + "' for question '" + qid + "'");
      }
      chosen.insert(o);
    }
    double credit = 0.0;
    if (chosen == q->full) {
      credit = 1.0;
    } else if (std::find(q->partial.begin(), q->partial.end(), chosen) != q->partial.end()) {
      credit = 0.5;
    }
    out.per_question[qid] = credit;
    out.score += credit;
  }
  for (const auto& q : questions) out.per_question.emplace(q.id, 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct ServiceConfig {
  std::string map_path = "maps/delivery.txt";
  std::string practice_map_path = "maps/practice.txt";
  std::string content_path = "content/teaching.json";
  std::vector<Condition> conditions = all_conditions();
  std::map<Experiment, int> pairs_per_session = {
      {Experiment::kPrivileged, 50}, {Experiment::kTrained, 50}, {Experiment::kQuestion, 50}};
  int terminal_pairs_per_session = 7;
  int practice_pairs_per_stage = 6;
  std::map<Experiment, double> survey_threshold = {
      {Experiment::kPrivileged, 4.5}, {Experiment::kTrained, 3.5}, {Experiment::kQuestion, 3.5}};
  std::uint64_t seed = 0;
  std::string store_path;  // empty: no persistence
};

namespace detail {

inline std::optional<Experiment> parse_experiment(std::string_view s) {
  for (Experiment e : kExperiments) {
    if (to_string(e) == s) return e;
  }
  return std::nullopt;
}

template <class V>
void read_per_experiment(const Json& j, std::map<Experiment, V>& out) {
  for (const auto& [k, v] : j.items()) {
    const auto e = parse_experiment(k);
    if (!e) throw Error("unknown experiment '" + k + "' in config");
    out[*e] = v.template get<V>();
  }
}

}  // namespace detail

// Relative paths in the file resolve against base_dir.
inline ServiceConfig config_from_json(const Json& j, const std::string& base_dir = "") {
  static const std::set<std::string> allowed = {
      "map", "practice_map", "content", "conditions", "pairs_per_session",
      "terminal_pairs_per_session", "practice_pairs_per_stage", "survey_threshold", "seed",
      "store"};
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw Error("unknown config key '" + k + "'");
  }
  const auto resolve = [&](const std::string& p) {
    if (p.empty() || p.front() == '/' || base_dir.empty()) return p;
    return base_dir + "/" + p;
  };
  ServiceConfig c;
  c.map_path = resolve(j.value("map", c.map_path));
  c.practice_map_path = resolve(j.value("practice_map", c.practice_map_path));
  c.content_path = resolve(j.value("content", c.content_path));
  if (j.contains("conditions")) {
    c.conditions.clear();
    for (const auto& name : j.at("conditions")) {
      const auto cond = parse_condition(name.get<std::string>());
      if (!cond) throw Error("unknown condition " + name.dump());
      c.conditions.push_back(*cond);
    }
  }
  if (j.contains("pairs_per_session")) {
    detail::read_per_experiment(j.at("pairs_per_session"), c.pairs_per_session);
  }
  c.terminal_pairs_per_session = j.value("terminal_pairs_per_session", c.terminal_pairs_per_session);
  c.practice_pairs_per_stage = j.value("practice_pairs_per_stage", c.practice_pairs_per_stage);
  if (j.contains("survey_threshold")) {
    detail::read_per_experiment(j.at("survey_threshold"), c.survey_threshold);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("store") && !j.at("store").is_null()) c.store_path = resolve(j.at("store"));
  for (const auto& [e, n] : c.pairs_per_session) {
    if (n < 2) throw Error("pairs_per_session must be at least 2");
    if (c.terminal_pairs_per_session < 0 || c.terminal_pairs_per_session > n - 1) {
      throw Error("terminal_pairs_per_session must fit in every session");
    }
  }
  if (c.practice_pairs_per_stage < 1) throw Error("practice_pairs_per_stage must be positive");
  return c;
}

// ---------------------------------------------------------------------------
// Sessions

class ServiceError : public Error {
 public:
  enum class Kind { kBadRequest, kUnauthorized, kNotFound, kConflict };
  ServiceError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct PairItem {
  std::string pair_id;
  Segment sigma1;
  Segment sigma2;
};

struct Response {
  std::string item_id;
  Stage stage = Stage::kDomainTeaching;
  std::optional<Choice> choice;  // empty for teaching acknowledgements
  std::int64_t timestamp_ms = 0;
};

struct SurveyRecord {
  std::map<std::string, std::vector<std::string>> answers;
  std::optional<int> likert;
  SurveyScore score;
  bool passed = false;
};

struct Session {
  std::string id;
  std::string token;
  Condition condition;
  int slot = 0;
  std::optional<std::string> replacement_of;
  std::optional<std::string> replaced_by;
  std::vector<Stage> path;
  std::size_t stage_index = 0;
  std::size_t cursor = 0;  // item within the current stage
  std::vector<PairItem> elicitation;
  std::vector<Response> responses;
  std::set<std::string> answered;
  std::optional<SurveyRecord> survey;
  std::optional<bool> kept;
  std::vector<std::string> filter_reasons;
  mutable std::mutex mutex;

  Stage stage() const { return path[stage_index]; }
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : tag) h = (h ^ ch) * 1099511628211ULL;
  return splitmix(splitmix(seed ^ h) + index);
}

inline Json segment_payload(const Segment& s) {
  Json j;
  j["actions"] = Json::array();
  for (Action a : s.actions) j["actions"].push_back(std::string(to_string(a)));
  j["states"] = Json::array();
  for (const State& st : s.states) j["states"].push_back({st.x, st.y});
  j["terminal"] = s.terminates();
  return j;
}

inline std::string fill_template(std::string text, const std::map<std::string, double>& slots) {
  for (const auto& [key, value] : slots) {
    const std::string token = "{" + key + "}";
    std::ostringstream os;
    os << value;
    for (std::size_t p; (p = text.find(token)) != std::string::npos;) {
      text.replace(p, token.size(), os.str());
    }
  }
  return text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace detail

inline bool ends_at_sheep(const GridMap& map, const Segment& s) {
  return s.terminates() && map.at(s.end().x, s.end().y).surface == Surface::kSheep;
}

class ElicitationService {
 public:
  using Clock = std::function<std::int64_t()>;
  using TokenSource = std::function<std::string()>;

  ElicitationService(ServiceConfig cfg, GridMap map, GridMap practice_map, Json content,
                     Clock clock = system_clock_ms, TokenSource tokens = random_token)
      : cfg_(std::move(cfg)),
        map_(std::move(map)),
        practice_map_(std::move(practice_map)),
        content_(std::move(content)),
        clock_(std::move(clock)),
        tokens_(std::move(tokens)),
        gt_(LinearReward::ground_truth()),
        values_(value_iteration(map_, gt_)),
        practice_values_(value_iteration(practice_map_, gt_)) {
    build_practice_pairs();
    if (!cfg_.store_path.empty()) {
      std::ifstream existing(cfg_.store_path);
      if (existing) replay(existing);
      log_.open(cfg_.store_path, std::ios::app);
      if (!log_) throw Error("cannot open event store " + cfg_.store_path);
    }
  }

  static ElicitationService from_config(const ServiceConfig& cfg) {
    return ElicitationService(cfg, parse_map(detail::read_text(cfg.map_path)),
                              parse_map(detail::read_text(cfg.practice_map_path)),
                              Json::parse(detail::read_text(cfg.content_path)));
  }

  static std::int64_t system_clock_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }

  static std::string random_token() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(m);
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                  static_cast<unsigned long long>(rng()));
    return buf;
  }

  const ServiceConfig& config() const { return cfg_; }
  const GridMap& map() const { return map_; }
  const ValueTable& values() const { return values_; }

  // Returns {session_id, token, condition, stage}.
  Json create_session(const std::string& condition_name,
                      const std::optional<std::string>& replacement_of = std::nullopt) {
    std::unique_lock lock(sessions_mutex_);
    const std::int64_t ts = clock_();
    const std::string token = tokens_();
    Session& s = create_locked(condition_name, replacement_of, token);
    append_event({{"event", "create"},
                  {"session", s.id},
                  {"condition", condition_name},
                  {"replacement_of", replacement_of ? Json(*replacement_of) : Json(nullptr)},
                  {"token", token},
                  {"ts", ts}});
    return {{"session_id", s.id},
            {"token", s.token},
            {"condition", s.condition.name()},
            {"stage", std::string(to_string(s.stage()))}};
  }

  void authorize(const std::string& id, const std::string& token) const {
    const Session& s = find(id);
    if (token.empty() || token != s.token) {
      throw ServiceError(ServiceError::Kind::kUnauthorized, "invalid session token");
    }
  }

  Json next_item(const std::string& id) const {
    const Session& s = find(id);
    std::lock_guard lock(s.mutex);
    return payload_locked(s);
  }

  // Body: {"item_id" | "pair_id", "choice"} for pairs, {"item_id"} for
  // teaching pages.
  Json submit_response(const std::string& id, const Json& body) {
    Session& s = find(id);
    std::lock_guard lock(s.mutex);
    const std::int64_t ts = clock_();
    Json ack = respond_locked(s, body, ts);
    append_event({{"event", "response"}, {"session", id}, {"body", body}, {"ts", ts}});
    return ack;
  }

  // Body: {"answers": {question: [option, ...]}, "likert": 1..7}.
  Json submit_survey(const std::string& id, const Json& body) {
    Session& s = find(id);
    std::lock_guard lock(s.mutex);
    const std::int64_t ts = clock_();
    Json out = survey_locked(s, body);
    append_event({{"event", "survey"}, {"session", id}, {"body", body}, {"ts", ts}});
    return out;
  }

  Json session_state(const std::string& id) const {
    const Session& s = find(id);
    std::lock_guard lock(s.mutex);
    Json j{{"session_id", s.id},
           {"condition", s.condition.name()},
           {"slot", s.slot},
           {"stage", std::string(to_string(s.stage()))},
           {"responses", s.responses.size()},
           {"replacement_of", s.replacement_of ? Json(*s.replacement_of) : Json(nullptr)},
           {"replaced_by", s.replaced_by ? Json(*s.replaced_by) : Json(nullptr)},
           {"kept", s.kept ? Json(*s.kept) : Json(nullptr)},
           {"filter_reasons", s.filter_reasons}};
    j["pair_ids"] = Json::array();
    for (const auto& p : s.elicitation) j["pair_ids"].push_back(p.pair_id);
    if (s.survey) j["survey_score"] = s.survey->score.score;
    return j;
  }

  // Strict preferences (plus "same" when include_same) from kept sessions.
  PreferenceDataset export_condition(const std::string& condition_name,
                                     bool include_same = false) const {
    const Condition c = parse_enabled(condition_name);
    PreferenceDataset d;
    d.map_fingerprint = map_fingerprint(map_);
    d.provenance["protocol"] = "elicitation";
    d.provenance["condition"] = c.name();
    d.provenance["sessions"] = Json::array();
    std::shared_lock lock(sessions_mutex_);
    for (const Session* s : kept_sessions_locked(c)) {
      std::lock_guard slock(s->mutex);
      d.provenance["sessions"].push_back(s->id);
      for (const auto& r : s->responses) {
        if (r.stage != Stage::kElicitation || !r.choice) continue;
        if (*r.choice == Choice::kCantTell) continue;
        if (*r.choice == Choice::kSame && !include_same) continue;
        const PairItem& p = item_for(*s, r.item_id);
        PreferenceSample sample;
        sample.sigma1 = p.sigma1;
        sample.sigma2 = p.sigma2;
        sample.choice = *r.choice;
        sample.pair_id = p.pair_id;
        sample.source = Source::kHuman;
        sample.annotator_id = s->id;
        sample.condition = c.name();
        d.samples.push_back(std::move(sample));
      }
    }
    if (d.provenance["sessions"].empty()) {
      throw ServiceError(ServiceError::Kind::kNotFound,
                         "condition " + c.name() + " has no kept sessions");
    }
    d.provenance["include_same"] = include_same;
    return d;
  }

  // Non-strict elicitation responses of kept sessions.
  Json export_sidecar(const std::string& condition_name) const {
    const Condition c = parse_enabled(condition_name);
    Json entries = Json::array();
    std::shared_lock lock(sessions_mutex_);
    const auto kept = kept_sessions_locked(c);
    if (kept.empty()) {
      throw ServiceError(ServiceError::Kind::kNotFound,
                         "condition " + c.name() + " has no kept sessions");
    }
    for (const Session* s : kept) {
      std::lock_guard slock(s->mutex);
      for (const auto& r : s->responses) {
        if (r.stage != Stage::kElicitation || !r.choice) continue;
        if (*r.choice != Choice::kSame && *r.choice != Choice::kCantTell) continue;
        entries.push_back({{"pair_id", r.item_id},
                           {"annotator_id", s->id},
                           {"label", std::string(to_string(*r.choice))}});
      }
    }
    return {{"condition", c.name()}, {"entries", entries}};
  }

  std::vector<std::string> session_ids() const {
    std::shared_lock lock(sessions_mutex_);
    return order_;
  }

  const std::vector<PairItem>& practice_pairs() const { return practice_; }

  // Pair set of one slot of an experiment, before per-session shuffling;
  // the attention pair comes last.
  std::vector<PairItem> slot_pairs(Experiment e, int slot) const {
    const int n = cfg_.pairs_per_session.at(e);
    const int n_terminal = cfg_.terminal_pairs_per_session;
    Rng rng(detail::derive_seed(cfg_.seed, std::string(to_string(e)) + "/slot", slot));
    char prefix[64];
    std::snprintf(prefix, sizeof prefix, "%s-s%03d-", std::string(to_string(e)).c_str(), slot);
    std::vector<PairItem> out;
    for (auto& p : sample_pair_pool(map_, n - 1 - n_terminal, n_terminal, rng, prefix)) {
      out.push_back({std::move(p.pair_id), std::move(p.sigma1), std::move(p.sigma2)});
    }
    out.push_back(attention_pair(e));
    return out;
  }

  PairItem attention_pair(Experiment e) const {
    Rng rng(detail::derive_seed(cfg_.seed, std::string(to_string(e)) + "/attention", 0));
    auto [a, b] = sample_pair_terminal(map_, Polarity::kNegative, rng);
    return {std::string(to_string(e)) + "-attention", std::move(a), std::move(b)};
  }

  // Rebuilds state from an event log. Events are applied without logging.
  void replay(std::istream& in) {
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      Json e;
      try {
        e = Json::parse(line);
      } catch (const Json::parse_error& err) {
        throw ParseError(std::string("invalid event: ") + err.what(), line_no, 1);
      }
      const std::string kind = e.at("event");
      const std::string id = e.at("session");
      const auto ts = e.at("ts").get<std::int64_t>();
      if (kind == "create") {
        std::unique_lock lock(sessions_mutex_);
        const auto& rep = e.at("replacement_of");
        Session& s = create_locked(e.at("condition").get<std::string>(),
                                   rep.is_null() ? std::nullopt
                                                 : std::optional<std::string>(rep.get<std::string>()),
                                   e.at("token").get<std::string>());
        if (s.id != id) throw ParseError("event log session ids out of sequence", line_no, 1);
      } else if (kind == "response") {
        Session& s = find(id);
        std::lock_guard lock(s.mutex);
        respond_locked(s, e.at("body"), ts);
      } else if (kind == "survey") {
        Session& s = find(id);
        std::lock_guard lock(s.mutex);
        survey_locked(s, e.at("body"));
      } else {
        throw ParseError("unknown event '" + kind + "'", line_no, 1);
      }
    }
  }

 private:
  Session& find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) {
      throw ServiceError(ServiceError::Kind::kNotFound, "unknown session '" + id + "'");
    }
    return *it->second;
  }

  Condition parse_enabled(const std::string& name) const {
    const auto c = parse_condition(name);
    if (!c || std::find(cfg_.conditions.begin(), cfg_.conditions.end(), *c) == cfg_.conditions.end()) {
      throw ServiceError(ServiceError::Kind::kNotFound, "unknown or disabled condition '" + name + "'");
    }
    return *c;
  }

  void build_practice_pairs() {
    Rng rng(detail::derive_seed(cfg_.seed, "practice", 0));
    const int n = 3 * cfg_.practice_pairs_per_stage;
    for (auto& p : sample_pair_pool(practice_map_, n, 0, rng, "practice-")) {
      practice_.push_back({std::move(p.pair_id), std::move(p.sigma1), std::move(p.sigma2)});
    }
  }

  Session& create_locked(const std::string& condition_name,
                         const std::optional<std::string>& replacement_of,
                         const std::string& token) {
    Condition c = parse_enabled(condition_name);
    auto s = std::make_unique<Session>();
    const std::size_t seq = order_.size();
    char id[32];
    std::snprintf(id, sizeof id, "s%06zu", seq + 1);
    s->id = id;
    s->token = token;
    s->condition = c;
    s->path = stage_path(c);

    Session* target = nullptr;
    if (replacement_of) {
      auto it = sessions_.find(*replacement_of);
      if (it == sessions_.end()) {
        throw ServiceError(ServiceError::Kind::kNotFound,
                           "unknown session '" + *replacement_of + "' to replace");
      }
      target = it->second.get();
      std::lock_guard tlock(target->mutex);
      if (target->condition != c) {
        throw ServiceError(ServiceError::Kind::kConflict,
                           "a replacement must join the condition of the session it replaces");
      }
      if (!target->kept || *target->kept) {
        throw ServiceError(ServiceError::Kind::kConflict,
                           "session '" + *replacement_of + "' was not filtered out");
      }
      if (target->replaced_by) {
        throw ServiceError(ServiceError::Kind::kConflict,
                           "session '" + *replacement_of + "' was already replaced");
      }
      s->slot = target->slot;
      s->replacement_of = replacement_of;
    } else {
      s->slot = next_slot_[c]++;
    }

    // Random segment order within each pair and random pair order; the
    // attention pair stays last.
    Rng rng(detail::derive_seed(cfg_.seed, "session", seq));
    std::vector<PairItem> pairs = slot_pairs(c.experiment, s->slot);
    PairItem attention = std::move(pairs.back());
    pairs.pop_back();
    shuffle(pairs, rng);
    pairs.push_back(std::move(attention));
    for (auto& p : pairs) {
      if (uniform_index(rng, 2) == 1) std::swap(p.sigma1, p.sigma2);
    }
    s->elicitation = std::move(pairs);

    if (target) {
      std::lock_guard tlock(target->mutex);
      target->replaced_by = s->id;
    }
    Session& ref = *s;
    order_.push_back(s->id);
    sessions_.emplace(s->id, std::move(s));
    return ref;
  }

  std::size_t stage_items(const Session& s) const {
    const Stage st = s.stage();
    if (is_teaching(st)) return 1;
    if (is_practice(st)) return static_cast<std::size_t>(cfg_.practice_pairs_per_stage);
    if (st == Stage::kElicitation) return s.elicitation.size();
    return 0;
  }

  const PairItem& current_pair(const Session& s) const {
    const Stage st = s.stage();
    if (st == Stage::kElicitation) return s.elicitation.at(s.cursor);
    const int round = st == Stage::kPractice1 ? 0 : st == Stage::kPractice2 ? 1 : 2;
    return practice_.at(static_cast<std::size_t>(round * cfg_.practice_pairs_per_stage) + s.cursor);
  }

  std::string current_item_id(const Session& s) const {
    const Stage st = s.stage();
    if (is_teaching(st)) return "teaching-" + std::string(to_string(st));
    return current_pair(s).pair_id;
  }

  const PairItem& item_for(const Session& s, const std::string& pair_id) const {
    for (const auto& p : s.elicitation) {
      if (p.pair_id == pair_id) return p;
    }
    throw Error("pair '" + pair_id + "' is not assigned to session " + s.id);
  }

  Json teaching_content(const Session& s) const {
    const std::string stage(to_string(s.stage()));
    const Json& by_stage = content_.at("stages").at(stage);
    const std::string arm(to_string(s.condition.arm));
    if (by_stage.contains(arm)) return by_stage.at(arm);
    if (by_stage.contains("common")) return by_stage.at("common");
    return Json::object();
  }

  Json segment_statistics(Arm arm, const Segment& seg) const {
    Json j;
    if (arm == Arm::kPartialReturn) {
      j["score"] = partial_return(seg, gt_);
      j["rewards"] = Json::array();
      j["features"] = Json::array();
      for (const auto& phi : seg.phis) {
        j["rewards"].push_back(reward(gt_, phi));
        j["features"].push_back(phi.as_vec());
      }
    } else {
      const double start = values_.value(seg.start());
      const double given = partial_return(seg, gt_) + values_.value(seg.end());
      j["best_possible_score_from_start"] = start;
      j["best_possible_score_given_your_moves"] = given;
      j["opportunity_cost"] = regret_d(seg, gt_, values_);
    }
    return j;
  }

  Json payload_locked(const Session& s) const {
    const Stage st = s.stage();
    Json j;
    j["session_id"] = s.id;
    j["condition"] = s.condition.name();
    j["stage"] = std::string(to_string(st));
    if (st == Stage::kDone) {
      throw ServiceError(ServiceError::Kind::kConflict, "session " + s.id + " is done");
    }
    if (is_teaching(st)) {
      j["kind"] = "teaching";
      j["item_id"] = current_item_id(s);
      j["content"] = teaching_content(s);
      return j;
    }
    if (st == Stage::kSurvey) {
      j["kind"] = "survey";
      j["questions"] = Json::array();
      for (const auto& q : survey_questions(s.condition.experiment)) {
        Json options = Json::array();
        for (const auto& o : q.options) options.push_back({{"id", o.id}, {"text", o.text}});
        j["questions"].push_back({{"id", q.id}, {"text", q.text}, {"options", options}});
      }
      const auto likert = likert_question(s.condition);
      j["likert"] = likert ? Json{{"text", *likert}, {"min", 1}, {"max", 7}} : Json(nullptr);
      return j;
    }
    const PairItem& p = current_pair(s);
    j["kind"] = "pair";
    j["item_id"] = p.pair_id;
    j["pair_id"] = p.pair_id;
    j["index"] = s.cursor;
    j["total"] = stage_items(s);
    j["map"] = is_practice(st) ? "practice" : "delivery";
    j["question"] = std::string(is_practice(st) ? practice_question(s.condition, st)
                                                : elicitation_question(s.condition));
    j["choices"] = {"first", "second", "same", "cant_tell"};
    j["start"] = {p.sigma1.start().x, p.sigma1.start().y};
    Json segs = Json::array();
    for (const Segment* seg : {&p.sigma1, &p.sigma2}) {
      Json sj = detail::segment_payload(*seg);
      if (st == Stage::kElicitation && s.condition.experiment == Experiment::kPrivileged &&
          s.condition.arm != Arm::kControl) {
        sj["statistics"] = segment_statistics(s.condition.arm, *seg);
      }
      segs.push_back(std::move(sj));
    }
    j["segments"] = std::move(segs);
    return j;
  }

  Json practice_feedback(const Session& s, const PairItem& p, Choice choice) const {
    const ModelKind model = target_model(s.condition.arm);
    const PreferenceModelSpec spec{model, Noise::kNoiseless, 1.0};
    const PreferenceLabel want =
        noiseless_label(spec, p.sigma1, p.sigma2, gt_, ExactValues{practice_values_});
    const bool correct = choice != Choice::kCantTell && PreferenceLabel::from_choice(choice) == want;
    std::map<std::string, double> slots;
    Json stats = Json::array();
    for (const auto& [name, seg] : {std::pair{"first", &p.sigma1}, std::pair{"second", &p.sigma2}}) {
      const double so_far = partial_return(*seg, gt_);
      Json sj{{"score_so_far", so_far}};
      slots[std::string(name) + "_score_so_far"] = so_far;
      if (model == ModelKind::kRegret) {
        const double increase = practice_values_.value(seg->end());
        sj["biggest_possible_score_increase"] = increase;
        sj["biggest_possible_final_score"] = so_far + increase;
        slots[std::string(name) + "_biggest_possible_score_increase"] = increase;
        slots[std::string(name) + "_biggest_possible_final_score"] = so_far + increase;
      }
      stats.push_back(std::move(sj));
    }
    const Json& fb = content_.at("feedback");
    const std::string model_key(to_string(model));
    return {{"correct", correct},
            {"expected", std::string(to_string(want.choice()))},
            {"message", fb.at(correct ? "correct" : "incorrect")},
            {"explanation",
             detail::fill_template(fb.at("explanation").at(model_key).get<std::string>(), slots)},
            {"statistics", stats}};
  }

  void advance(Session& s) {
    ++s.cursor;
    while (s.stage() != Stage::kDone && s.stage() != Stage::kSurvey &&
           s.cursor >= stage_items(s)) {
      ++s.stage_index;
      s.cursor = 0;
    }
  }

  Json respond_locked(Session& s, const Json& body, std::int64_t ts) {
    using K = ServiceError::Kind;
    const Stage st = s.stage();
    if (st == Stage::kDone) throw ServiceError(K::kConflict, "session " + s.id + " is done");
    if (st == Stage::kSurvey) {
      throw ServiceError(K::kConflict, "session " + s.id + " expects the survey");
    }
    if (!body.is_object()) throw ServiceError(K::kBadRequest, "response body must be an object");
    std::string item;
    if (body.contains("item_id")) item = body.at("item_id").get<std::string>();
    else if (body.contains("pair_id")) item = body.at("pair_id").get<std::string>();
    else throw ServiceError(K::kBadRequest, "response needs item_id or pair_id");

    const std::string expected = current_item_id(s);
    if (item != expected) {
      if (s.answered.count(item)) {
        throw ServiceError(K::kConflict, "duplicate submission for '" + item + "'");
      }
      throw ServiceError(K::kConflict, "out-of-order submission: expected '" + expected +
                                           "', got '" + item + "'");
    }
    Response r{item, st, std::nullopt, ts};
    Json ack{{"accepted", true}, {"item_id", item}};
    if (!is_teaching(st)) {
      if (!body.contains("choice") || !body.at("choice").is_string()) {
        throw ServiceError(K::kBadRequest, "pair responses need a choice");
      }
      const auto choice = parse_choice(body.at("choice").get<std::string>());
      if (!choice) throw ServiceError(K::kBadRequest, "unknown choice " + body.at("choice").dump());
      r.choice = choice;
      if ((st == Stage::kPractice2 || st == Stage::kPractice3)) {
        ack["feedback"] = practice_feedback(s, current_pair(s), *choice);
      }
    }
    s.responses.push_back(r);
    s.answered.insert(item);
    advance(s);
    ack["stage"] = std::string(to_string(s.stage()));
    return ack;
  }

  Json survey_locked(Session& s, const Json& body) {
    using K = ServiceError::Kind;
    if (s.stage() != Stage::kSurvey) {
      throw ServiceError(K::kConflict, "session " + s.id + " is not at the survey");
    }
    if (!body.is_object() || !body.contains("answers") || !body.at("answers").is_object()) {
      throw ServiceError(K::kBadRequest, "survey needs an answers object");
    }
    SurveyRecord rec;
    try {
      for (const auto& [qid, v] : body.at("answers").items()) {
        rec.answers[qid] = v.is_array() ? v.get<std::vector<std::string>>()
                                        : std::vector<std::string>{v.get<std::string>()};
      }
      rec.score = score_survey(s.condition.experiment, rec.answers);
    } catch (const Json::exception& e) {
      throw ServiceError(K::kBadRequest, std::string("malformed survey answers: ") + e.what());
    } catch (const ServiceError&) {
      throw;
    } catch (const Error& e) {
      throw ServiceError(K::kBadRequest, e.what());
    }
    if (body.contains("likert") && !body.at("likert").is_null()) {
      if (!likert_question(s.condition)) {
        throw ServiceError(K::kBadRequest, "this condition has no agreement question");
      }
      const int v = body.at("likert").get<int>();
      if (v < 1 || v > 7) throw ServiceError(K::kBadRequest, "likert answer must be 1..7");
      rec.likert = v;
    }
    rec.passed = rec.score.score >= cfg_.survey_threshold.at(s.condition.experiment);
    s.survey = rec;

    s.filter_reasons.clear();
    if (!rec.passed) s.filter_reasons.push_back("survey");
    if (prefers_sheep(s)) s.filter_reasons.push_back("attention");
    s.kept = s.filter_reasons.empty();
    ++s.stage_index;
    s.cursor = 0;
    return {{"score", rec.score.score},
            {"max_score", rec.score.max_score},
            {"per_question", rec.score.per_question},
            {"passed", rec.passed},
            {"kept", *s.kept},
            {"filter_reasons", s.filter_reasons},
            {"stage", std::string(to_string(s.stage()))}};
  }

  // A strict preference for a sheep-terminated segment over one that is not.
  bool prefers_sheep(const Session& s) const {
    for (const auto& r : s.responses) {
      if (r.stage != Stage::kElicitation || !r.choice) continue;
      if (*r.choice != Choice::kFirst && *r.choice != Choice::kSecond) continue;
      const PairItem& p = item_for(s, r.item_id);
      const bool first_sheep = ends_at_sheep(map_, p.sigma1);
      const bool second_sheep = ends_at_sheep(map_, p.sigma2);
      if (*r.choice == Choice::kFirst && first_sheep && !second_sheep) return true;
      if (*r.choice == Choice::kSecond && second_sheep && !first_sheep) return true;
    }
    return false;
  }

  std::vector<const Session*> kept_sessions_locked(const Condition& c) const {
    std::vector<const Session*> out;
    for (const auto& id : order_) {
      const Session& s = *sessions_.at(id);
      std::lock_guard lock(s.mutex);
      if (s.condition == c && s.kept && *s.kept) out.push_back(&s);
    }
    return out;
  }

  void append_event(const Json& e) {
    if (!log_.is_open()) return;
    std::lock_guard lock(log_mutex_);
    log_ << e.dump() << '\n';
    log_.flush();
  }

  ServiceConfig cfg_;
  GridMap map_;
  GridMap practice_map_;
  Json content_;
  Clock clock_;
  TokenSource tokens_;
  LinearReward gt_;
  ValueTable values_;
  ValueTable practice_values_;
  std::vector<PairItem> practice_;

  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
  std::vector<std::string> order_;
  std::map<Condition, int> next_slot_;
  std::mutex log_mutex_;
  std::ofstream log_;
};

}  // namespace prefbench
