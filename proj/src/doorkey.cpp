#include "trajmask/doorkey.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace trajmask {

namespace {

constexpr int kDx[kGridActions] = {0, 1, 0, -1};
constexpr int kDy[kGridActions] = {-1, 0, 1, 0};

int sign(long long v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); }

}  // namespace

DoorKey::DoorKey(GridLayout layout) : layout_(std::move(layout)) {
  auto in_range = [](int c) { return c >= 0 && c < 16; };
  require(in_range(layout_.door) && in_range(layout_.goal), "config-error",
          "door/goal cell outside the 4x4 grid");
  for (int w : layout_.walls) {
    require(in_range(w), "config-error", "wall cell outside the 4x4 grid");
    require(w != layout_.door && w != layout_.goal, "config-error",
            "wall coincides with door or goal");
  }
  require(layout_.door != layout_.goal, "config-error", "door coincides with goal");

  // Reverse BFS from every target cell, with and without the door passable.
  // The locked door blocks entry but not exit, so the move graph is
  // asymmetric: a cell c can be expanded toward its predecessors only if c
  // itself is enterable.
  for (int open = 0; open < 2; ++open) {
    for (int target = 0; target < 16; ++target) {
      auto& d = dist_[open][target];
      d.fill(kUnreachable);
      if (is_wall(target)) continue;
      d[target] = 0;
      std::deque<int> q = {target};
      while (!q.empty()) {
        const int c = q.front();
        q.pop_front();
        if (!open && c == layout_.door) continue;  // nothing can step into a shut door
        for (int a = 0; a < kGridActions; ++a) {
          const int nx = cell_x(c) + kDx[a], ny = cell_y(c) + kDy[a];
          if (nx < 0 || nx >= 4 || ny < 0 || ny >= 4) continue;
          const int p = cell_index(nx, ny);
          if (is_wall(p)) continue;  // the agent is never on a wall
          if (d[p] == kUnreachable) {
            d[p] = d[c] + 1;
            q.push_back(p);
          }
        }
      }
    }
  }

  // Spawn region: open cells that cannot reach the goal while the door is
  // shut (the "before the door" side).
  for (int c = 0; c < 16; ++c) {
    if (is_wall(c) || c == layout_.door || c == layout_.goal) continue;
    if (dist_[0][layout_.goal][c] == kUnreachable) spawn_.push_back(c);
  }
  require(spawn_.size() >= 2, "config-error",
          "spawn region needs at least two cells for distinct agent and key");

  // Locked door must matter, and opening it must connect everything.
  for (int c : spawn_) {
    require(dist_[1][layout_.goal][c] != kUnreachable, "config-error",
            "goal unreachable from spawn cell even with the door open");
    require(dist_[0][spawn_.front()][c] != kUnreachable, "config-error",
            "spawn region is not connected with the door shut");
  }
  for (int c = 0; c < 16; ++c) {
    if (is_wall(c)) continue;
    require(dist_[1][layout_.goal][c] != kUnreachable, "config-error",
            "goal unreachable from an open cell with the door open");
  }
}

bool DoorKey::is_wall(int cell) const {
  return std::find(layout_.walls.begin(), layout_.walls.end(), cell) != layout_.walls.end();
}

GridState DoorKey::step(const GridState& s, int action) const {
  require(action >= 0 && action < kGridActions, "invalid-action",
          "grid action must be in 0..3, got " + std::to_string(action));
  const int nx = cell_x(s.agent) + kDx[action];
  const int ny = cell_y(s.agent) + kDy[action];
  if (nx < 0 || nx >= 4 || ny < 0 || ny >= 4) return s;
  const int target = cell_index(nx, ny);
  if (is_wall(target)) return s;
  if (target == layout_.door && !s.has_key()) return s;
  GridState next;
  next.agent = target;
  // Key follows the agent once held; stepping onto it picks it up.
  next.key = (s.has_key() || target == s.key) ? target : s.key;
  return next;
}

int DoorKey::cell_distance(int from, int to, bool door_open) const {
  return dist_[door_open ? 1 : 0][to][from];
}

int DoorKey::goal_distance(const GridState& s) const {
  if (s.has_key()) return dist_[1][layout_.goal][s.agent];
  // Without the key the agent moves in the shut-door world. Two options:
  // straight to the goal if its side allows it, or to the key first and then
  // through the opened door. Equals joint-state BFS distance (oracle-tested).
  const int direct = dist_[0][layout_.goal][s.agent];
  const int to_key = dist_[0][s.key][s.agent];
  const int key_to_goal = dist_[1][layout_.goal][s.key];
  const int via_key = (to_key == kUnreachable || key_to_goal == kUnreachable)
                          ? kUnreachable
                          : to_key + key_to_goal;
  return std::min(direct, via_key);
}

int DoorKey::reward(const GridState& prev, const GridState& next) const {
  return sign(static_cast<long long>(goal_distance(prev)) - goal_distance(next));
}

std::array<double, kGridActions> DoorKey::expert_probs(const GridState& s) const {
  const bool open = s.has_key();
  const int goal_cell = open ? layout_.goal : s.key;
  const int d0 = dist_[open][goal_cell][s.agent];
  std::array<double, kGridActions> w{};
  double total = 0.0;
  for (int a = 0; a < kGridActions; ++a) {
    const GridState n = step(s, a);
    const int da = dist_[open][goal_cell][n.agent];
    w[a] = std::exp(sign(static_cast<long long>(d0) - da));
    total += w[a];
  }
  for (double& v : w) v /= total;
  return w;
}

int DoorKey::expert_action(const GridState& s, Rng& rng) const {
  const auto p = expert_probs(s);
  return rng.categorical(std::span<const double>(p.data(), p.size()));
}

EnvSpec DoorKey::env_spec(int horizon) const {
  EnvSpec e;
  e.env_id = "doorkey";
  e.state_kind = Modality::discrete;
  e.state_width = 2;
  e.state_cards = {16, 16};
  e.action_kind = Modality::discrete;
  e.action_width = 1;
  e.action_cards = {kGridActions};
  e.horizon = horizon;
  return e;
}

Dataset generate_grid_dataset(const DoorKey& env, int n_train, int n_val, int T, uint64_t seed) {
  require(n_train >= 1 && n_val >= 0, "config-error", "need at least one training trajectory");
  require(T >= 1, "config-error", "episode length must be >= 1");
  Dataset d;
  d.env = env.env_spec(T);
  d.seed = seed;

  const auto& spawn = env.spawn_cells();
  auto roll = [&](uint64_t stream) {
    Rng rng(derive_seed(seed, stream));
    GridState s;
    s.agent = spawn[rng.uniform_int(static_cast<int>(spawn.size()))];
    do {
      s.key = spawn[rng.uniform_int(static_cast<int>(spawn.size()))];
    } while (s.key == s.agent);
    Trajectory tr;
    for (int t = 0; t < T; ++t) {
      const int a = env.expert_action(s, rng);
      const GridState next = env.step(s, a);
      tr.states.push_back({float(s.agent), float(s.key)});
      tr.actions.push_back({float(a)});
      tr.rewards.push_back(float(env.reward(s, next)));
      s = next;
    }
    return tr;
  };

  for (int i = 0; i < n_train; ++i) {
    d.trajectories.push_back(roll(static_cast<uint64_t>(i)));
    d.split.push_back(Split::train);
  }
  // Validation streams live in a disjoint id range.
  for (int j = 0; j < n_val; ++j) {
    d.trajectories.push_back(roll((1ULL << 32) + static_cast<uint64_t>(j)));
    d.split.push_back(Split::validation);
  }
  for (const auto& tr : d.trajectories) validate_trajectory(d.env, tr);
  compute_normalization(d);
  return d;
}

}  // namespace trajmask
