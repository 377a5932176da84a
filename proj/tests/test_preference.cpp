#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "prefbench/dataset.hpp"
#include "prefbench/preference.hpp"

using namespace prefbench;
using Catch::Approx;

namespace {

const LinearReward kGT = LinearReward::ground_truth();

// Optimal value by exhaustive finite-horizon recursion, memoized on
// (cell, steps left).
double oracle_value(const GridMap& map, State s, int horizon = 200) {
  std::map<std::pair<int, int>, double> memo;
  auto rec = [&](auto& self, State cur, int left) -> double {
    if (cur.terminal || left == 0) return 0.0;
    const auto key = std::make_pair(map.index(cur), left);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    double best = -1e300;
    for (Action a : kActions) {
      const Transition t = step(map, cur, a);
      best = std::max(best, reward(kGT, t.phi) + kDefaultGamma * self(self, t.next, left - 1));
    }
    return memo[key] = best;
  };
  return rec(rec, s, horizon);
}

std::vector<std::vector<Action>> all_sequences(int length) {
  std::vector<std::vector<Action>> out{{}};
  for (int i = 0; i < length; ++i) {
    std::vector<std::vector<Action>> next;
    for (const auto& seq : out) {
      for (Action a : kActions) {
        auto s = seq;
        s.push_back(a);
        next.push_back(std::move(s));
      }
    }
    out = std::move(next);
  }
  return out;
}

}  // namespace

TEST_CASE("segment construction and invariants") {
  const GridMap map = parse_map(".c.\n..G\n");
  const Segment s = make_segment(map, map.state_at(0, 0),
                                 {Action::kRight, Action::kDown, Action::kRight});
  CHECK(s.states.size() == s.actions.size() + 1);
  CHECK(s.phis.size() == s.actions.size());
  CHECK(s.terminates());
  CHECK(s.end() == State{2, 1, true});
  CHECK_THROWS_AS(make_segment(map, map.state_at(1, 1), {Action::kRight, Action::kLeft}),
                  Error);
}

TEST_CASE("partial return examples") {
  const GridMap map = parse_map(".c..\n...G\n");
  const Segment three = make_segment(map, map.state_at(0, 0),
                                     {Action::kRight, Action::kRight, Action::kRight});
  CHECK(partial_return(three, kGT) == -2.0);

  const GridMap corridor = parse_map("..G");
  const Segment to_goal =
      make_segment(corridor, corridor.state_at(0, 0), {Action::kRight, Action::kRight});
  CHECK(partial_return(to_goal, kGT) == 49.0);

  CHECK(partial_return(make_segment(map, map.state_at(0, 0), {}), kGT) == 0.0);
}

TEST_CASE("regret of optimal segments is near zero") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  const Policy pi = maxent_optimal_policy(vt);
  const auto starts = start_distribution(map);
  int checked = 0;
  for (const auto& ws : starts) {
    State s = ws.state;
    std::vector<Action> actions;
    for (int k = 0; k < 3 && !s.terminal; ++k) {
      const auto& p = pi.probs[map.index(s)];
      int a = 0;
      while (p[a] == 0.0) ++a;
      actions.push_back(kActions[a]);
      s = step(map, s, kActions[a]).next;
    }
    const Segment seg = make_segment(map, ws.state, actions);
    CHECK(std::abs(regret_d(seg, kGT, vt)) <= 0.5);
    ++checked;
  }
  CHECK(checked == static_cast<int>(starts.size()));
}

TEST_CASE("a back-and-forth detour costs two") {
  const GridMap map = testing::load_map("corridor");
  const ValueTable vt = value_iteration(map, kGT);
  const Segment detour =
      make_segment(map, map.state_at(2, 0), {Action::kLeft, Action::kRight, Action::kRight});
  const double oracle = oracle_value(map, map.state_at(2, 0)) -
                        (partial_return(detour, kGT) + oracle_value(map, map.state_at(3, 0)));
  CHECK(regret_d(detour, kGT, vt) == Approx(oracle).margin(1e-9));
  CHECK(regret_d(detour, kGT, vt) == Approx(2.0).margin(0.5));
}

TEST_CASE("zero weights give zero regret") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, LinearReward{});
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    auto [a, b] = sample_pair_random(map, rng);
    CHECK(regret_d(a, LinearReward{}, vt) == 0.0);
  }
}

TEST_CASE("regret_d rejects a table planned for other weights") {
  const GridMap map = testing::load_map("corridor");
  const ValueTable vt = value_iteration(map, kGT);
  const Segment seg = make_segment(map, map.state_at(0, 0), {Action::kRight});
  CHECK_THROWS_AS(regret_d(seg, kGT.scaled(2), vt), Error);
}

TEST_CASE("soft regret approaches the hard maximum as tau shrinks") {
  const GridMap map = testing::load_map("delivery");
  const auto set = generate_candidate_sf_set(map, 8, 5);
  Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    auto [seg, other] = sample_pair_random(map, rng);
    auto hard = [&](const State& s) {
      if (s.terminal) return 0.0;
      double best = -1e300;
      for (const auto& e : set.entries) {
        best = std::max(best, dot(kGT.weights, e.psi[map.index(s)]));
      }
      return best;
    };
    const double expected = hard(seg.start()) - (partial_return(seg, kGT) + hard(seg.end()));
    CHECK(soft_regret(seg, kGT, set, 1e-6) == Approx(expected).margin(1e-6));
  }
}

TEST_CASE("single-entry candidate set reduces to that policy's values") {
  const GridMap map = testing::load_map("delivery");
  SuccessorFeatureSet set = generate_candidate_sf_set(map, 2, 1);
  set.entries.resize(1);
  const auto v = policy_evaluation(map, Policy::uniform(map), kGT);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    auto [seg, other] = sample_pair_random(map, rng);
    const double expected = v[map.index(seg.start())] -
                            (partial_return(seg, kGT) + v[map.index(seg.end())]);
    CHECK(soft_regret(seg, kGT, set, 0.001) == Approx(expected).margin(1e-4));
  }
  CHECK_THROWS_AS(soft_regret(make_segment(map, map.state_at(0, 0), {}), kGT,
                              SuccessorFeatureSet{}, 0.001),
                  Error);
}

TEST_CASE("soft regret tracks exact regret with fifty candidates") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  int within = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto set = generate_candidate_sf_set(map, 50, seed);
    Rng rng(99);
    int here = 0;
    for (int i = 0; i < 100; ++i) {
      auto [seg, other] = sample_pair_random(map, rng);
      const double exact = regret_d(seg, kGT, vt);
      const double soft = soft_regret(seg, kGT, set, 0.001);
      here += std::abs(soft - exact) <= 0.1 * std::abs(exact) + 1.0;
    }
    UNSCOPED_INFO("candidate seed " << seed << ": " << here << " of 100 within tolerance");
    within += here;
  }
  CHECK(within >= 900);
}

TEST_CASE("pref_prob basics") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  const Segment s = make_segment(map, map.state_at(0, 0), {Action::kRight});
  for (ModelKind k : {ModelKind::kPartialReturn, ModelKind::kRegret}) {
    const PreferenceModelSpec spec{k, Noise::kBoltzmann, 1.0};
    CHECK(pref_prob(spec, s, s, kGT, ExactValues{vt}) == 0.5);
  }
  const Segment better = make_segment(map, map.state_at(0, 1), {Action::kDown});
  const Segment worse = make_segment(map, map.state_at(0, 1), {Action::kRight});
  // Brick costs more than white road.
  REQUIRE(partial_return(better, kGT) > partial_return(worse, kGT));
  const PreferenceModelSpec huge{ModelKind::kPartialReturn, Noise::kBoltzmann, 1e6};
  CHECK(pref_prob(huge, better, worse, kGT, ExactValues{vt}) == 1.0);
  CHECK(pref_prob(huge, worse, better, kGT, ExactValues{vt}) == 0.0);
}

TEST_CASE("the two models disagree on a pair from the delivery map") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  const auto seqs = all_sequences(3);
  const PreferenceModelSpec pr{ModelKind::kPartialReturn, Noise::kBoltzmann, 1.0};
  const PreferenceModelSpec rg{ModelKind::kRegret, Noise::kBoltzmann, 1.0};
  int found = 0;
  for (const auto& ws : start_distribution(map)) {
    std::vector<Segment> segs;
    for (const auto& seq : seqs) {
      Segment s = make_segment(map, ws.state, {});
      try {
        s = make_segment(map, ws.state, seq);
      } catch (const Error&) {
        continue;
      }
      if (!s.terminates()) segs.push_back(std::move(s));
    }
    for (const auto& a : segs) {
      for (const auto& b : segs) {
        if (partial_return(a, kGT) > partial_return(b, kGT) &&
            regret_d(a, kGT, vt) > regret_d(b, kGT, vt) + 1.0) {
          CHECK(pref_prob(pr, a, b, kGT, ExactValues{vt}) > 0.5);
          CHECK(pref_prob(rg, a, b, kGT, ExactValues{vt}) < 0.5);
          ++found;
        }
      }
    }
  }
  CHECK(found > 0);
}

TEST_CASE("noiseless labels") {
  const GridMap map = parse_map("c...\n.G..\n");
  const ValueTable vt = value_iteration(map, kGT);
  const PreferenceModelSpec pr{ModelKind::kPartialReturn, Noise::kNoiseless, 1.0};
  const PreferenceModelSpec rg{ModelKind::kRegret, Noise::kNoiseless, 1.0};
  const Segment a = make_segment(map, map.state_at(2, 0), {Action::kLeft, Action::kDown});
  const Segment b = make_segment(map, map.state_at(2, 0), {Action::kRight, Action::kRight});
  REQUIRE(partial_return(a, kGT) > partial_return(b, kGT));
  CHECK(noiseless_label(pr, a, b, kGT, ExactValues{vt}) == PreferenceLabel::first());
  CHECK(noiseless_label(pr, b, a, kGT, ExactValues{vt}) == PreferenceLabel::second());
  CHECK(noiseless_label(pr, a, a, kGT, ExactValues{vt}) == PreferenceLabel::same());
  CHECK(noiseless_label(rg, b, b, kGT, ExactValues{vt}) == PreferenceLabel::same());

  const GridMap corridor = testing::load_map("corridor");
  const ValueTable cvt = value_iteration(corridor, kGT);
  const Segment optimal = make_segment(corridor, corridor.state_at(2, 0),
                                       {Action::kRight, Action::kRight, Action::kRight});
  const Segment detour = make_segment(corridor, corridor.state_at(2, 0),
                                      {Action::kLeft, Action::kRight, Action::kRight});
  CHECK(noiseless_label(rg, optimal, detour, kGT, ExactValues{cvt}) ==
        PreferenceLabel::first());
}

TEST_CASE("boltzmann labels") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  const Segment better = make_segment(map, map.state_at(0, 1), {Action::kDown});
  const Segment worse = make_segment(map, map.state_at(0, 1), {Action::kRight});
  const PreferenceModelSpec forced{ModelKind::kPartialReturn, Noise::kBoltzmann, 1e6};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    CHECK(boltzmann_label(forced, better, worse, kGT, ExactValues{vt}, seed) ==
          PreferenceLabel::first());
  }
  const PreferenceModelSpec even{ModelKind::kPartialReturn, Noise::kBoltzmann, 1.0};
  int firsts = 0;
  for (std::uint64_t seed = 0; seed < 10'000; ++seed) {
    firsts += boltzmann_label(even, better, better, kGT, ExactValues{vt}, seed) ==
              PreferenceLabel::first();
  }
  CHECK(firsts >= 4800);
  CHECK(firsts <= 5200);
  const PreferenceModelSpec mild{ModelKind::kRegret, Noise::kBoltzmann, 0.3};
  CHECK(boltzmann_label(mild, better, worse, kGT, ExactValues{vt}, 42) ==
        boltzmann_label(mild, better, worse, kGT, ExactValues{vt}, 42));
}

TEST_CASE("labels and choices") {
  for (Choice c : {Choice::kFirst, Choice::kSecond, Choice::kSame}) {
    CHECK(PreferenceLabel::from_choice(c).choice() == c);
    CHECK(parse_choice(to_string(c)) == c);
  }
  CHECK(parse_choice("cant_tell") == Choice::kCantTell);
  CHECK_THROWS_AS(PreferenceLabel::from_choice(Choice::kCantTell), Error);
  CHECK(PreferenceLabel::first().flipped() == PreferenceLabel::second());
  CHECK(PreferenceLabel::same().flipped() == PreferenceLabel::same());
}

TEST_CASE("terminal pairs: regret and partial return agree") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  const auto seqs = all_sequences(2);
  int pairs = 0;
  for (const auto& ws : start_distribution(map)) {
    std::vector<Segment> ending;
    for (const auto& seq : seqs) {
      for (std::size_t len = 1; len <= seq.size(); ++len) {
        std::vector<Action> prefix(seq.begin(), seq.begin() + len);
        try {
          Segment s = make_segment(map, ws.state, prefix);
          if (s.terminates()) ending.push_back(std::move(s));
        } catch (const Error&) {
        }
      }
    }
    for (const auto& a : ending) {
      for (const auto& b : ending) {
        for (double scale : {0.05, 1.0, 3.0}) {
          const PreferenceModelSpec pr{ModelKind::kPartialReturn, Noise::kBoltzmann, scale};
          const PreferenceModelSpec rg{ModelKind::kRegret, Noise::kBoltzmann, scale};
          CHECK(std::abs(pref_prob(pr, a, b, kGT, ExactValues{vt}) -
                         pref_prob(rg, a, b, kGT, ExactValues{vt})) <= 1e-12);
        }
        ++pairs;
      }
    }
  }
  CHECK(pairs > 0);
}

TEST_CASE("start-state value cancels in same-start comparisons") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  Rng rng(21);
  const PreferenceModelSpec rg{ModelKind::kRegret, Noise::kBoltzmann, 0.5};
  for (int i = 0; i < 100; ++i) {
    auto [a, b] = sample_pair_random(map, rng);
    // A segment that returns to its start would see the shift at both ends.
    if (a.end() == a.start() || b.end() == b.start()) continue;
    ValueTable shifted = vt;
    shifted.V[map.index(a.start())] += 17.25;
    CHECK(pref_prob(rg, a, b, kGT, ExactValues{shifted}) ==
          Approx(pref_prob(rg, a, b, kGT, ExactValues{vt})).margin(1e-12));
  }
}

TEST_CASE("pref_prob is antisymmetric and scale equivariant") {
  const GridMap map = testing::load_map("delivery");
  const ValueTable vt = value_iteration(map, kGT);
  Rng rng(31);
  for (double c : {0.2, 2.5}) {
    const LinearReward cw = kGT.scaled(c);
    const ValueTable cvt = value_iteration(map, cw, kDefaultGamma, 1e-10);
    for (int i = 0; i < 40; ++i) {
      auto [a, b] = sample_pair_random(map, rng);
      for (ModelKind k : {ModelKind::kPartialReturn, ModelKind::kRegret}) {
        const PreferenceModelSpec spec{k, Noise::kBoltzmann, 0.7};
        const double p = pref_prob(spec, a, b, kGT, ExactValues{vt});
        CHECK(p + pref_prob(spec, b, a, kGT, ExactValues{vt}) == Approx(1.0).margin(1e-15));
        const PreferenceModelSpec scaled{k, Noise::kBoltzmann, 0.7 * c};
        CHECK(pref_prob(spec, a, b, cw, ExactValues{cvt}) ==
              Approx(pref_prob(scaled, a, b, kGT, ExactValues{vt})).margin(1e-9));
      }
    }
  }
}
