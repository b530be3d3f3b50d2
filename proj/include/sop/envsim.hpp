#pragma once

#include <algorithm>
#include <deque>
#include <limits>
#include <optional>
#include <queue>

#include "sop/common.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// Actions

enum class Action : uint8_t { Up = 0, Down = 1, Left = 2, Right = 3, Stay = 4 };

inline constexpr int kNumActions = 5;

// Fixed scan order for expert tie-breaking: Up < Down < Left < Right.
inline constexpr std::array<Action, 4> kMoves = {Action::Up, Action::Down,
                                                 Action::Left, Action::Right};

inline int action_dx(Action a) {
  switch (a) {
    case Action::Left: return -1;
    case Action::Right: return 1;
    default: return 0;
  }
}

inline int action_dy(Action a) {
  switch (a) {
    case Action::Up: return -1;
    case Action::Down: return 1;
    default: return 0;
  }
}

inline const char* action_name(Action a) {
  switch (a) {
    case Action::Up: return "Up";
    case Action::Down: return "Down";
    case Action::Left: return "Left";
    case Action::Right: return "Right";
    default: return "Stay";
  }
}

// ---------------------------------------------------------------------------
// World configuration: task-family level knobs shared by all modules.

struct WorldConfig {
  int num_tasks = 3;
  int grid_width = 9;
  int grid_height = 9;
  int horizon = 80;
  // Episodes start at least this far (BFS) from the goal, when feasible.
  int min_start_distance = 6;
  // Per-domain draw ranges for station-specific idiosyncrasies.
  double slip_lo = 0.0;
  double slip_hi = 0.10;
  double noise_lo = 0.10;
  double noise_hi = 0.20;

  int feature_dim() const { return 13 + num_tasks; }
};

// ---------------------------------------------------------------------------
// Domain and state types

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct DomainParam {
  int task_id = 0;
  int grid_width = 9;
  int grid_height = 9;
  Cell goal_cell;
  uint64_t obstacle_seed = 0;
  double slip_prob = 0.0;
  double obs_noise_std = 0.0;
  std::vector<uint8_t> obstacles;  // row-major, 1 = blocked

  bool in_bounds(int x, int y) const {
    return x >= 0 && x < grid_width && y >= 0 && y < grid_height;
  }

  /// Out-of-bounds counts as blocked.
  bool blocked(int x, int y) const {
    if (!in_bounds(x, y)) return true;
    return obstacles[static_cast<size_t>(y) * grid_width + x] != 0;
  }

  bool free_cell(Cell c) const { return !blocked(c.x, c.y); }

  friend bool operator==(const DomainParam&, const DomainParam&) = default;
};

struct EnvState {
  Cell agent_cell;
  Cell goal_cell;
  int step_count = 0;
  int horizon = 80;
};

struct Observation {
  std::vector<double> features;
};

enum class EpisodeStatus : uint8_t { Running = 0, Success = 1, Failure = 2, Timeout = 3 };

struct StepResult {
  Observation next_observation;
  double reward = 0.0;
  EpisodeStatus status = EpisodeStatus::Running;
};

// ---------------------------------------------------------------------------
// BFS distance field from the goal over free cells.

inline constexpr int kUnreachable = std::numeric_limits<int>::max();

class DistanceField {
 public:
  DistanceField() = default;

  explicit DistanceField(const DomainParam& d)
      : width_(d.grid_width), height_(d.grid_height) {
    dist_.assign(static_cast<size_t>(width_) * height_, kUnreachable);
    std::queue<Cell> q;
    if (d.free_cell(d.goal_cell)) {
      at(d.goal_cell) = 0;
      q.push(d.goal_cell);
    }
    while (!q.empty()) {
      Cell c = q.front();
      q.pop();
      int base = at(c);
      for (Action m : kMoves) {
        Cell n{c.x + action_dx(m), c.y + action_dy(m)};
        if (d.blocked(n.x, n.y)) continue;
        if (at(n) != kUnreachable) continue;
        at(n) = base + 1;
        q.push(n);
      }
    }
  }

  int distance(Cell c) const {
    return dist_[static_cast<size_t>(c.y) * width_ + c.x];
  }

  bool all_free_reachable(const DomainParam& d) const {
    for (int y = 0; y < d.grid_height; ++y)
      for (int x = 0; x < d.grid_width; ++x)
        if (!d.blocked(x, y) && distance({x, y}) == kUnreachable) return false;
    return true;
  }

 private:
  int& at(Cell c) { return dist_[static_cast<size_t>(c.y) * width_ + c.x]; }

  int width_ = 0;
  int height_ = 0;
  std::vector<int> dist_;
};

// ---------------------------------------------------------------------------
// Domain sampling: deterministic obstacle layout per (task_id, seed), with
// reject-and-resample until every free cell reaches the goal.

namespace detail {

inline void scatter_obstacles(std::vector<uint8_t>& grid, int w, int h, int count,
                              Cell goal, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dx(0, w - 1), dy(0, h - 1);
  int placed = 0;
  int attempts = 0;
  while (placed < count && attempts < 10000) {
    ++attempts;
    int x = dx(rng), y = dy(rng);
    if ((x == goal.x && y == goal.y)) continue;
    auto& cell = grid[static_cast<size_t>(y) * w + x];
    if (cell) continue;
    cell = 1;
    ++placed;
  }
}

inline Cell draw_goal(int task_id, int w, int h, std::mt19937_64& rng) {
  // Per-task goal distributions: anywhere / right half / bottom half.
  std::uniform_int_distribution<int> full_x(0, w - 1), full_y(0, h - 1);
  switch (task_id % 3) {
    case 0:
      return {full_x(rng), full_y(rng)};
    case 1: {
      std::uniform_int_distribution<int> gx(w / 2, w - 1);
      return {gx(rng), full_y(rng)};
    }
    default: {
      std::uniform_int_distribution<int> gy(h / 2, h - 1);
      return {full_x(rng), gy(rng)};
    }
  }
}

inline std::vector<uint8_t> draw_layout(int task_id, int w, int h, Cell goal,
                                        std::mt19937_64& rng) {
  std::vector<uint8_t> grid(static_cast<size_t>(w) * h, 0);
  auto draw_count = [&](int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
  };
  switch (task_id % 3) {
    case 0:
      scatter_obstacles(grid, w, h, draw_count((w * h) / 12, (w * h) / 7), goal, rng);
      break;
    case 1: {
      // Vertical wall with one or two gaps, plus scatter.
      int wall_x = w / 2;
      for (int y = 0; y < h; ++y)
        if (!(wall_x == goal.x && y == goal.y))
          grid[static_cast<size_t>(y) * w + wall_x] = 1;
      std::uniform_int_distribution<int> gap(0, h - 1);
      int gaps = 1 + static_cast<int>(rng() % 2);
      for (int i = 0; i < gaps; ++i)
        grid[static_cast<size_t>(gap(rng)) * w + wall_x] = 0;
      scatter_obstacles(grid, w, h, draw_count((w * h) / 20, (w * h) / 10), goal, rng);
      break;
    }
    default:
      scatter_obstacles(grid, w, h, draw_count((w * h) / 7, (w * h) / 4), goal, rng);
      break;
  }
  grid[static_cast<size_t>(goal.y) * w + goal.x] = 0;
  return grid;
}

}  // namespace detail

inline DomainParam sample_domain(int task_id, uint64_t seed,
                                 const WorldConfig& world = WorldConfig{}) {
  if (task_id < 0 || task_id >= world.num_tasks)
    throw std::domain_error("task_id out of range");

  const int w = world.grid_width, h = world.grid_height;
  for (uint64_t attempt = 0; attempt < 1000; ++attempt) {
    auto rng = make_rng({0x5d0b11a1ULL, static_cast<uint64_t>(task_id), seed, attempt});
    DomainParam d;
    d.task_id = task_id;
    d.grid_width = w;
    d.grid_height = h;
    d.obstacle_seed = seed;
    d.goal_cell = detail::draw_goal(task_id, w, h, rng);
    d.obstacles = detail::draw_layout(task_id, w, h, d.goal_cell, rng);
    d.slip_prob = std::min(0.2, world.slip_lo + (world.slip_hi - world.slip_lo) *
                                     std::generate_canonical<double, 53>(rng));
    d.obs_noise_std = world.noise_lo + (world.noise_hi - world.noise_lo) *
                          std::generate_canonical<double, 53>(rng);
    DistanceField field(d);
    if (d.free_cell(d.goal_cell) && field.all_free_reachable(d)) return d;
  }
  throw std::runtime_error("sample_domain: no connected layout found");
}

// ---------------------------------------------------------------------------
// Observation: [agent xy, goal xy (normalized, noisy), 3x3 occupancy, task one-hot]

inline Observation make_observation(const EnvState& s, const DomainParam& d,
                                    const WorldConfig& world, std::mt19937_64& rng) {
  Observation obs;
  obs.features.reserve(static_cast<size_t>(world.feature_dim()));
  const double wn = std::max(1, d.grid_width - 1);
  const double hn = std::max(1, d.grid_height - 1);
  std::normal_distribution<double> noise(0.0, d.obs_noise_std);
  auto noisy = [&](double v) { return d.obs_noise_std > 0 ? v + noise(rng) : v; };

  obs.features.push_back(noisy(s.agent_cell.x / wn));
  obs.features.push_back(noisy(s.agent_cell.y / hn));
  obs.features.push_back(noisy(s.goal_cell.x / wn));
  obs.features.push_back(noisy(s.goal_cell.y / hn));
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      obs.features.push_back(d.blocked(s.agent_cell.x + dx, s.agent_cell.y + dy) ? 1.0 : 0.0);
  for (int m = 0; m < world.num_tasks; ++m)
    obs.features.push_back(m == d.task_id ? 1.0 : 0.0);
  return obs;
}

// ---------------------------------------------------------------------------
// Environment stepping

inline EnvState reset_env(const DomainParam& d, const WorldConfig& world,
                          std::mt19937_64& rng) {
  DistanceField field(d);
  int max_distance = 0;
  for (int y = 0; y < d.grid_height; ++y)
    for (int x = 0; x < d.grid_width; ++x)
      if (!d.blocked(x, y) && field.distance({x, y}) != kUnreachable)
        max_distance = std::max(max_distance, field.distance({x, y}));
  int needed = std::min(world.min_start_distance, max_distance);

  std::vector<Cell> free_cells;
  for (int y = 0; y < d.grid_height; ++y)
    for (int x = 0; x < d.grid_width; ++x) {
      Cell c{x, y};
      if (d.blocked(x, y) || c == d.goal_cell) continue;
      if (field.distance(c) >= needed) free_cells.push_back(c);
    }
  if (free_cells.empty()) throw std::runtime_error("reset_env: no free start cell");
  std::uniform_int_distribution<size_t> pick(0, free_cells.size() - 1);
  EnvState s;
  s.agent_cell = free_cells[pick(rng)];
  s.goal_cell = d.goal_cell;
  s.step_count = 0;
  s.horizon = world.horizon;
  return s;
}

/// One transition. With probability slip_prob the chosen action is replaced
/// by a uniformly random move; moves into obstacles or walls are no-ops.
inline StepResult step(EnvState& s, Action action, const DomainParam& d,
                       const WorldConfig& world, std::mt19937_64& rng) {
  Action executed = action;
  if (d.slip_prob > 0 &&
      std::generate_canonical<double, 53>(rng) < d.slip_prob) {
    executed = kMoves[rng() % 4];
  }
  Cell target{s.agent_cell.x + action_dx(executed), s.agent_cell.y + action_dy(executed)};
  if (!d.blocked(target.x, target.y)) s.agent_cell = target;
  s.step_count += 1;

  StepResult r;
  if (s.agent_cell == s.goal_cell) {
    r.status = EpisodeStatus::Success;
    r.reward = 1.0;
  } else if (s.step_count >= s.horizon) {
    r.status = EpisodeStatus::Timeout;
  } else {
    r.status = EpisodeStatus::Running;
  }
  r.next_observation = make_observation(s, d, world, rng);
  return r;
}

// ---------------------------------------------------------------------------
// Scripted expert: first move of a BFS shortest path, ties Up<Down<Left<Right.

inline Action expert_action(const EnvState& s, const DomainParam& d,
                            const DistanceField& field) {
  if (s.agent_cell == s.goal_cell) return Action::Stay;
  int here = field.distance(s.agent_cell);
  for (Action m : kMoves) {
    Cell n{s.agent_cell.x + action_dx(m), s.agent_cell.y + action_dy(m)};
    if (d.blocked(n.x, n.y)) continue;
    if (field.distance(n) == here - 1) return m;
  }
  // Unreachable by construction: sample_domain guarantees connectivity.
  return Action::Stay;
}

inline Action expert_action(const EnvState& s, const DomainParam& d) {
  return expert_action(s, d, DistanceField(d));
}

// ---------------------------------------------------------------------------
// Intervention gate: the expert takes over when the oracle distance to goal
// has failed to decrease over the last k steps, and keeps control until the
// distance has dropped by 2 relative to the engagement point (hysteresis).

inline bool intervention_gate(const std::vector<int>& recent_distances, int k) {
  if (k < 2) throw std::invalid_argument("gate window k must be >= 2");
  if (static_cast<int>(recent_distances.size()) < k) return false;
  const size_t n = recent_distances.size();
  int newest = recent_distances[n - 1];
  int window_min = kUnreachable;
  for (size_t i = n - static_cast<size_t>(k); i + 1 < n; ++i)
    window_min = std::min(window_min, recent_distances[i]);
  return newest >= window_min;
}

class GateState {
 public:
  explicit GateState(int k) : k_(k) {
    if (k < 2) throw std::invalid_argument("gate window k must be >= 2");
  }

  /// Feed the current oracle distance; returns whether the expert holds
  /// control for the upcoming action.
  bool update(int distance) {
    window_.push_back(distance);
    if (static_cast<int>(window_.size()) > k_) window_.pop_front();
    if (engaged_) {
      if (engage_distance_ - distance >= 2) engaged_ = false;
    }
    if (!engaged_) {
      std::vector<int> recent(window_.begin(), window_.end());
      if (intervention_gate(recent, k_)) {
        engaged_ = true;
        engage_distance_ = distance;
      }
    }
    return engaged_;
  }

  bool engaged() const { return engaged_; }

 private:
  int k_;
  bool engaged_ = false;
  int engage_distance_ = 0;
  std::deque<int> window_;
};

// ---------------------------------------------------------------------------
// Text dump of a domain layout (golden-file format):
// '#' obstacle, '.' free, 'G' goal, 'A' agent.

inline std::string format_domain(const DomainParam& d,
                                 std::optional<Cell> agent = std::nullopt) {
  std::string out;
  out.reserve(static_cast<size_t>((d.grid_width + 1) * d.grid_height));
  for (int y = 0; y < d.grid_height; ++y) {
    for (int x = 0; x < d.grid_width; ++x) {
      Cell c{x, y};
      if (agent && *agent == c)
        out += 'A';
      else if (c == d.goal_cell)
        out += 'G';
      else
        out += d.blocked(x, y) ? '#' : '.';
    }
    out += '\n';
  }
  return out;
}

}  // namespace sop
