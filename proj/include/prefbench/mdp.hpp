#pragma once

// Delivery gridworld: map representation, deterministic dynamics and the
// six-component linear reward.
//
// Coordinates are (x, y) with x the column and y the row counted from the top
// of the map text. Every non-house cell is a state; goal and sheep cells are
// absorbing terminals.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefbench/error.hpp"

namespace prefbench {

enum class Surface : std::uint8_t { kWhite, kBrick, kHouse, kGoal, kSheep };
enum class Object : std::uint8_t { kNone, kCoin, kRoadblock };

struct Cell {
  Surface surface = Surface::kWhite;
  Object object = Object::kNone;

  bool blocked() const { return surface == Surface::kHouse; }
  bool terminal() const {
    return surface == Surface::kGoal || surface == Surface::kSheep;
  }
  friend bool operator==(const Cell&, const Cell&) = default;
};

enum class Action : std::uint8_t { kUp, kDown, kLeft, kRight };
inline constexpr std::array<Action, 4> kActions = {Action::kUp, Action::kDown,
                                                   Action::kLeft, Action::kRight};

inline std::string_view to_string(Action a) {
  switch (a) {
    case Action::kUp: return "up";
    case Action::kDown: return "down";
    case Action::kLeft: return "left";
    case Action::kRight: return "right";
  }
  return "?";
}

inline std::optional<Action> parse_action(std::string_view s) {
  for (Action a : kActions) {
    if (to_string(a) == s) return a;
  }
  return std::nullopt;
}

// Reward components, in weight-vector order.
enum Feature : int {
  kWhiteMove = 0,
  kBrickMove = 1,
  kCoin = 2,
  kRoadblock = 3,
  kGoal = 4,
  kSheep = 5,
};
inline constexpr int kNumFeatures = 6;
inline constexpr std::array<std::string_view, kNumFeatures> kFeatureNames = {
    "white", "brick", "coin", "roadblock", "goal", "sheep"};

using Vec6 = std::array<double, kNumFeatures>;

// Per-transition (or per-segment, when summed) counts of reward components.
struct FeatureVector {
  std::array<int, kNumFeatures> counts{};

  int& operator[](int i) { return counts[i]; }
  int operator[](int i) const { return counts[i]; }

  FeatureVector& operator+=(const FeatureVector& o) {
    for (int i = 0; i < kNumFeatures; ++i) counts[i] += o.counts[i];
    return *this;
  }
  friend FeatureVector operator+(FeatureVector a, const FeatureVector& b) {
    return a += b;
  }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;

  Vec6 as_vec() const {
    Vec6 v{};
    for (int i = 0; i < kNumFeatures; ++i) v[i] = counts[i];
    return v;
  }
};

inline double dot(const Vec6& a, const Vec6& b) {
  double s = 0.0;
  for (int i = 0; i < kNumFeatures; ++i) s += a[i] * b[i];
  return s;
}

struct LinearReward {
  Vec6 weights{};

  static LinearReward ground_truth() { return {{-1, -2, +1, -1, +50, -50}}; }

  LinearReward scaled(double c) const {
    LinearReward r = *this;
    for (double& w : r.weights) w *= c;
    return r;
  }
  friend bool operator==(const LinearReward&, const LinearReward&) = default;
};

inline double reward(const LinearReward& w, const FeatureVector& phi) {
  double s = 0.0;
  for (int i = 0; i < kNumFeatures; ++i) s += w.weights[i] * phi.counts[i];
  return s;
}

struct State {
  int x = 0;
  int y = 0;
  bool terminal = false;
  friend bool operator==(const State&, const State&) = default;
};

struct Transition {
  State next;
  FeatureVector phi;
  bool terminal = false;
};

class GridMap {
 public:
  GridMap(int width, int height, std::vector<Cell> cells, std::string name = {})
      : width_(width), height_(height), cells_(std::move(cells)),
        name_(std::move(name)) {
    validate();
  }

  int width() const { return width_; }
  int height() const { return height_; }
  const std::string& name() const { return name_; }
  int num_cells() const { return width_ * height_; }
  std::span<const Cell> cells() const { return cells_; }

  bool in_bounds(int x, int y) const {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }
  int index(int x, int y) const { return y * width_ + x; }
  const Cell& at(int x, int y) const { return cells_[index(x, y)]; }
  const Cell& at(int idx) const { return cells_[idx]; }

  State state_at(int idx) const {
    return {idx % width_, idx / width_, cells_[idx].terminal()};
  }
  State state_at(int x, int y) const { return state_at(index(x, y)); }
  int index(const State& s) const { return index(s.x, s.y); }

  bool is_state(int idx) const { return !cells_[idx].blocked(); }

 private:
  void validate() const {
    if (width_ <= 0 || height_ <= 0 ||
        static_cast<int>(cells_.size()) != width_ * height_) {
      throw Error("map dimensions do not match cell count");
    }
    bool goal = false, non_terminal = false;
    for (const Cell& c : cells_) {
      goal |= c.surface == Surface::kGoal;
      non_terminal |= !c.terminal() && !c.blocked();
      if ((c.terminal() || c.blocked()) && c.object != Object::kNone) {
        throw Error("objects may only occupy road cells");
      }
    }
    if (!goal) throw Error("map has no goal cell");
    if (!non_terminal) throw Error("map has no non-terminal road cell");
  }

  int width_;
  int height_;
  std::vector<Cell> cells_;
  std::string name_;
};

// Deterministic transition. Bumping into a house or the boundary leaves the
// agent in place and costs only the current surface; entering a terminal
// yields the terminal component alone.
inline Transition step(const GridMap& map, const State& s, Action a) {
  if (s.terminal || map.at(s.x, s.y).terminal()) {
    throw Error("step called from a terminal state");
  }
  if (!map.in_bounds(s.x, s.y) || map.at(s.x, s.y).blocked()) {
    throw Error("step called from a cell that is not a state");
  }
  int nx = s.x, ny = s.y;
  switch (a) {
    case Action::kUp: --ny; break;
    case Action::kDown: ++ny; break;
    case Action::kLeft: --nx; break;
    case Action::kRight: ++nx; break;
  }
  Transition t;
  if (!map.in_bounds(nx, ny) || map.at(nx, ny).blocked()) {
    t.next = s;
    t.phi[map.at(s.x, s.y).surface == Surface::kBrick ? kBrickMove
                                                      : kWhiteMove] = 1;
    return t;
  }
  const Cell& dest = map.at(nx, ny);
  t.next = {nx, ny, dest.terminal()};
  t.terminal = dest.terminal();
  switch (dest.surface) {
    case Surface::kGoal: t.phi[kGoal] = 1; return t;
    case Surface::kSheep: t.phi[kSheep] = 1; return t;
    case Surface::kBrick: t.phi[kBrickMove] = 1; break;
    default: t.phi[kWhiteMove] = 1; break;
  }
  if (dest.object == Object::kCoin) t.phi[kCoin] = 1;
  if (dest.object == Object::kRoadblock) t.phi[kRoadblock] = 1;
  return t;
}

// Glyph table for the map text format.
inline std::optional<Cell> cell_from_glyph(char g) {
  switch (g) {
    case '.': return Cell{Surface::kWhite, Object::kNone};
    case 'S': return Cell{Surface::kWhite, Object::kNone};  // start marker
    case '#': return Cell{Surface::kBrick, Object::kNone};
    case 'H': return Cell{Surface::kHouse, Object::kNone};
    case 'G': return Cell{Surface::kGoal, Object::kNone};
    case 'X': return Cell{Surface::kSheep, Object::kNone};
    case 'c': return Cell{Surface::kWhite, Object::kCoin};
    case 'b': return Cell{Surface::kBrick, Object::kCoin};
    case 'r': return Cell{Surface::kWhite, Object::kRoadblock};
    case 'q': return Cell{Surface::kBrick, Object::kRoadblock};
    default: return std::nullopt;
  }
}

inline char glyph_for(const Cell& c) {
  switch (c.surface) {
    case Surface::kHouse: return 'H';
    case Surface::kGoal: return 'G';
    case Surface::kSheep: return 'X';
    case Surface::kBrick:
      return c.object == Object::kCoin        ? 'b'
             : c.object == Object::kRoadblock ? 'q'
                                              : '#';
    case Surface::kWhite:
      return c.object == Object::kCoin        ? 'c'
             : c.object == Object::kRoadblock ? 'r'
                                              : '.';
  }
  return '?';
}

// Rows and columns in error messages are 1-based.
inline GridMap parse_map(std::string_view text, std::string name = {}) {
  std::vector<std::string_view> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view row = text.substr(pos, nl - pos);
    if (!row.empty() && row.back() == '\r') row.remove_suffix(1);
    rows.push_back(row);
    pos = nl + 1;
  }
  if (rows.empty() || rows.front().empty()) throw ParseError("empty map", 1, 1);
  const int width = static_cast<int>(rows.front().size());
  std::vector<Cell> cells;
  cells.reserve(rows.size() * width);
  bool goal = false;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int>(rows[r].size()) != width) {
      throw ParseError("ragged row (expected " + std::to_string(width) +
                           " cells, found " + std::to_string(rows[r].size()) +
                           ")",
                       static_cast<int>(r) + 1,
                       std::min<int>(width, rows[r].size()) + 1);
    }
    for (int c = 0; c < width; ++c) {
      auto cell = cell_from_glyph(rows[r][c]);
      if (!cell) {
        throw ParseError(std::string("unknown glyph '") + rows[r][c] + "'",
                         static_cast<int>(r) + 1, c + 1);
      }
      goal |= cell->surface == Surface::kGoal;
      cells.push_back(*cell);
    }
  }
  if (!goal) {
    throw ParseError("map has no goal cell", static_cast<int>(rows.size()), 1);
  }
  return GridMap(width, static_cast<int>(rows.size()), std::move(cells),
                 std::move(name));
}

inline std::string serialize_map(const GridMap& map) {
  std::string out;
  out.reserve((map.width() + 1) * map.height());
  for (int y = 0; y < map.height(); ++y) {
    for (int x = 0; x < map.width(); ++x) out.push_back(glyph_for(map.at(x, y)));
    out.push_back('\n');
  }
  return out;
}

// FNV-1a over the canonical text; guards datasets against map mismatches.
inline std::string map_fingerprint(const GridMap& map) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : serialize_map(map)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct WeightedState {
  State state;
  double weight = 0.0;
};

// Uniform over every non-terminal road cell.
inline std::vector<WeightedState> start_distribution(const GridMap& map) {
  std::vector<WeightedState> out;
  for (int i = 0; i < map.num_cells(); ++i) {
    const Cell& c = map.at(i);
    if (!c.blocked() && !c.terminal()) out.push_back({map.state_at(i), 0.0});
  }
  for (auto& ws : out) ws.weight = 1.0 / static_cast<double>(out.size());
  return out;
}

}  // namespace prefbench
