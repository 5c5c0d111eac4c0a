#include "trajmask/maze.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace trajmask {

namespace {

constexpr double kWallMargin = 1e-6;  // keeps clamped positions strictly inside free cells

double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

double dist2d(const double a[2], const double b[2]) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

}  // namespace

MazeGrid MazeGrid::from_rows(const std::vector<std::string>& rows) {
  MazeGrid g;
  require(!rows.empty(), "config-error", "maze grid has no rows");
  g.height = static_cast<int>(rows.size());
  g.width = static_cast<int>(rows.front().size());
  require(g.width >= 3 && g.height >= 3, "config-error", "maze grid must be at least 3x3");
  for (const auto& row : rows) {
    require(static_cast<int>(row.size()) == g.width, "config-error", "maze rows have unequal widths");
    for (char c : row) {
      require(c == '#' || c == '.', "config-error",
              std::string("maze rows may contain only '#' and '.', got '") + c + "'");
      g.blocked.push_back(c == '#' ? 1 : 0);
    }
  }
  // Outer boundary must be walls so the point mass can never leave the grid.
  for (int x = 0; x < g.width; ++x)
    require(g.is_blocked(x, 0) && g.is_blocked(x, g.height - 1), "config-error",
            "maze boundary rows must be walls");
  for (int y = 0; y < g.height; ++y)
    require(g.is_blocked(0, y) && g.is_blocked(g.width - 1, y), "config-error",
            "maze boundary columns must be walls");

  auto free = g.free_cells();
  require(free.size() >= 2, "config-error", "maze needs at least two free cells");

  // All free cells must be mutually reachable so any goal is valid.
  std::vector<int> seen(g.width * g.height, 0);
  std::deque<int> q = {free.front()};
  seen[free.front()] = 1;
  int reached = 0;
  while (!q.empty()) {
    const int c = q.front();
    q.pop_front();
    ++reached;
    const int cx = c % g.width, cy = c / g.width;
    const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
    for (int a = 0; a < 4; ++a) {
      const int nx = cx + dx[a], ny = cy + dy[a];
      if (g.is_blocked(nx, ny)) continue;
      const int n = ny * g.width + nx;
      if (!seen[n]) {
        seen[n] = 1;
        q.push_back(n);
      }
    }
  }
  require(reached == static_cast<int>(free.size()), "config-error",
          "maze free space is disconnected");
  return g;
}

MazeGrid MazeGrid::canonical() {
  return from_rows({
      "#######",
      "#..#..#",
      "#..#..#",
      "#.....#",
      "#######",
  });
}

std::vector<int> MazeGrid::free_cells() const {
  std::vector<int> out;
  for (int c = 0; c < width * height; ++c)
    if (!blocked[c]) out.push_back(c);
  return out;
}

Maze::Maze(MazeGrid grid, MazeParams params) : grid_(std::move(grid)), p_(params) {
  require(p_.dt > 0 && p_.damping > 0 && p_.damping < 1 && p_.v_max > 0, "config-error",
          "maze physics parameters out of range");
  // Plan cache: BFS distance field from every free cell.
  const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
  for (int goal : grid_.free_cells()) {
    std::vector<int> d(grid_.width * grid_.height, kUnreachable);
    d[goal] = 0;
    std::deque<int> q = {goal};
    while (!q.empty()) {
      const int c = q.front();
      q.pop_front();
      const int cx = c % grid_.width, cy = c / grid_.width;
      for (int a = 0; a < 4; ++a) {
        const int nx = cx + dx[a], ny = cy + dy[a];
        if (grid_.is_blocked(nx, ny)) continue;
        const int n = ny * grid_.width + nx;
        if (d[n] == kUnreachable) {
          d[n] = d[c] + 1;
          q.push_back(n);
        }
      }
    }
    fields_[goal] = std::move(d);
  }
}

const std::vector<int>& Maze::distance_field(int goal_cell) const {
  auto it = fields_.find(goal_cell);
  require(it != fields_.end(), "config-error",
          "no distance field for cell " + std::to_string(goal_cell) + " (blocked or out of range)");
  return it->second;
}

MazeState Maze::step(const MazeState& s, double ax, double ay) const {
  require(std::isfinite(ax) && std::isfinite(ay), "invalid-action",
          "maze action must be finite");
  ax = clip(ax, -1.0, 1.0);
  ay = clip(ay, -1.0, 1.0);

  MazeState n = s;
  n.vel[0] = p_.damping * s.vel[0] + p_.dt * ax;
  n.vel[1] = p_.damping * s.vel[1] + p_.dt * ay;
  const double speed = std::hypot(n.vel[0], n.vel[1]);
  if (speed > p_.v_max) {
    n.vel[0] *= p_.v_max / speed;
    n.vel[1] *= p_.v_max / speed;
  }

  // Per-axis move with wall clamping; x first, then y from the updated x.
  const double tx = n.pos[0] + p_.dt * n.vel[0];
  if (grid_.is_blocked_at(tx, n.pos[1])) {
    const double edge = n.vel[0] > 0 ? std::floor(tx) : std::floor(tx) + 1.0;
    n.pos[0] = n.vel[0] > 0 ? edge - kWallMargin : edge + kWallMargin;
    n.vel[0] = 0.0;
  } else {
    n.pos[0] = tx;
  }
  const double ty = n.pos[1] + p_.dt * n.vel[1];
  if (grid_.is_blocked_at(n.pos[0], ty)) {
    const double edge = n.vel[1] > 0 ? std::floor(ty) : std::floor(ty) + 1.0;
    n.pos[1] = n.vel[1] > 0 ? edge - kWallMargin : edge + kWallMargin;
    n.vel[1] = 0.0;
  } else {
    n.pos[1] = ty;
  }
  return n;
}

double Maze::reward(const MazeState& prev, const MazeState& next) const {
  return dist2d(prev.pos, prev.goal) - dist2d(next.pos, next.goal);
}

void Maze::waypoint(const MazeState& s, double& wx, double& wy) const {
  const int cur = grid_.cell_of(s.pos[0], s.pos[1]);
  const int goal_cell = grid_.cell_of(s.goal[0], s.goal[1]);
  if (cur == goal_cell) {
    wx = s.goal[0];
    wy = s.goal[1];
    return;
  }
  const auto& field = distance_field(goal_cell);
  const int cx = cur % grid_.width, cy = cur / grid_.width;
  const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
  int best = cur;
  for (int a = 0; a < 4; ++a) {
    const int nx = cx + dx[a], ny = cy + dy[a];
    if (grid_.is_blocked(nx, ny)) continue;
    const int n = ny * grid_.width + nx;
    if (field[n] < field[best]) best = n;  // fixed action order breaks ties
  }
  wx = best % grid_.width + 0.5;
  wy = best / grid_.width + 0.5;
}

void Maze::pd_action(const MazeState& s, Rng* rng, double& ax, double& ay) const {
  double wx, wy;
  waypoint(s, wx, wy);
  ax = p_.kp * (wx - s.pos[0]) - p_.kd * s.vel[0];
  ay = p_.kp * (wy - s.pos[1]) - p_.kd * s.vel[1];
  if (rng) {
    const double sd = std::sqrt(p_.noise_var);
    ax += rng->normal(0.0, sd);
    ay += rng->normal(0.0, sd);
  }
  ax = clip(ax, -1.0, 1.0);
  ay = clip(ay, -1.0, 1.0);
}

EnvSpec Maze::env_spec(int horizon) const {
  EnvSpec e;
  e.env_id = "maze";
  e.state_kind = Modality::continuous;
  e.state_width = 4;
  e.action_kind = Modality::continuous;
  e.action_width = 2;
  e.horizon = horizon;
  return e;
}

Trajectory maze_rollout(const Maze& env, int start_cell, int goal_cell, int T, Rng& rng) {
  const auto& g = env.grid();
  require(!g.blocked[start_cell] && !g.blocked[goal_cell], "config-error",
          "rollout start/goal must be free cells");
  const double j = env.params().start_jitter;
  MazeState s;
  s.pos[0] = start_cell % g.width + 0.5 + rng.uniform(-j, j);
  s.pos[1] = start_cell / g.width + 0.5 + rng.uniform(-j, j);
  s.goal[0] = goal_cell % g.width + 0.5 + rng.uniform(-j, j);
  s.goal[1] = goal_cell / g.width + 0.5 + rng.uniform(-j, j);

  Trajectory tr;
  for (int t = 0; t < T; ++t) {
    double ax, ay;
    env.pd_action(s, &rng, ax, ay);
    const MazeState next = env.step(s, ax, ay);
    tr.states.push_back({float(s.pos[0]), float(s.pos[1]), float(s.goal[0]), float(s.goal[1])});
    tr.actions.push_back({float(ax), float(ay)});
    tr.rewards.push_back(float(env.reward(s, next)));
    s = next;
  }
  return tr;
}

Dataset generate_maze_dataset(const Maze& env, int n_train, int n_val, int T, uint64_t seed) {
  require(n_train >= 1 && n_val >= 0, "config-error", "need at least one training trajectory");
  require(T >= 1, "config-error", "episode length must be >= 1");
  Dataset d;
  d.env = env.env_spec(T);
  d.seed = seed;

  const auto free = env.grid().free_cells();
  auto roll = [&](uint64_t stream) {
    Rng rng(derive_seed(seed, stream));
    const int start = free[rng.uniform_int(static_cast<int>(free.size()))];
    int goal = start;
    do {
      goal = free[rng.uniform_int(static_cast<int>(free.size()))];
    } while (goal == start);
    return maze_rollout(env, start, goal, T, rng);
  };

  for (int i = 0; i < n_train; ++i) {
    d.trajectories.push_back(roll(static_cast<uint64_t>(i)));
    d.split.push_back(Split::train);
  }
  for (int v = 0; v < n_val; ++v) {
    d.trajectories.push_back(roll((1ULL << 32) + static_cast<uint64_t>(v)));
    d.split.push_back(Split::validation);
  }
  for (const auto& tr : d.trajectories) validate_trajectory(d.env, tr);
  compute_normalization(d);
  return d;
}

RtgToken select_eval_rtg(const std::vector<float>& initial_obs, const Dataset& dataset) {
  require(initial_obs.size() == static_cast<size_t>(dataset.env.state_width), "config-error",
          "initial observation width mismatch");
  const auto train = dataset.indices_of(Split::train);
  require(!train.empty(), "config-error", "dataset has no training trajectories");

  int best = -1;
  double best_d2 = 0.0;
  for (int i : train) {
    const auto& first = dataset.trajectories[i].states.front();
    double d2 = 0.0;
    for (size_t k = 0; k < initial_obs.size(); ++k) {
      const double diff = double(first[k]) - double(initial_obs[k]);
      d2 += diff * diff;
    }
    if (best < 0 || d2 < best_d2) {  // strict '<' keeps the lowest index on ties
      best = i;
      best_d2 = d2;
    }
  }
  double ret = 0.0;
  for (float r : dataset.trajectories[best].rewards) ret += r;
  return RtgToken{1.1 * ret, dataset.env.horizon};
}

}  // namespace trajmask
