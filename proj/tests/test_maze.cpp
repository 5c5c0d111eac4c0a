#include <cmath>
#include <vector>

#include "doctest.h"
#include "trajmask/maze.hpp"

using namespace trajmask;

namespace {

double dist(const double a[2], const double b[2]) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

MazeState at(double x, double y, double gx, double gy) {
  MazeState s;
  s.pos[0] = x;
  s.pos[1] = y;
  s.goal[0] = gx;
  s.goal[1] = gy;
  return s;
}

}  // namespace

TEST_CASE("grid parsing accepts the canonical maze and rejects bad ones") {
  auto g = MazeGrid::canonical();
  CHECK(g.width == 7);
  CHECK(g.height == 5);
  CHECK(g.free_cells().size() == 13);
  CHECK(g.is_blocked(3, 1));
  CHECK(g.is_blocked(3, 2));
  CHECK_FALSE(g.is_blocked(3, 3));
  CHECK(g.is_blocked(-1, 2));  // outside counts as blocked
  CHECK(g.is_blocked_at(3.5, 1.5));
  CHECK_FALSE(g.is_blocked_at(1.5, 1.5));

  CHECK_THROWS_AS(MazeGrid::from_rows({"###", "#.#"}), Error);          // open bottom
  CHECK_THROWS_AS(MazeGrid::from_rows({"###", "#.#", "##"}), Error);    // ragged
  CHECK_THROWS_AS(MazeGrid::from_rows({"###", "#x#", "###"}), Error);   // bad char
  CHECK_THROWS_AS(MazeGrid::from_rows({"###", "#.#", "###"}), Error);   // single free cell
  // Disconnected free space.
  try {
    MazeGrid::from_rows({"#####", "#.#.#", "#####"});
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "config-error");
  }
}

TEST_CASE("zero action and zero velocity is a fixed point") {
  Maze env;
  auto s = at(1.5, 1.5, 5.5, 1.5);
  auto n = env.step(s, 0.0, 0.0);
  CHECK(n.pos[0] == s.pos[0]);
  CHECK(n.pos[1] == s.pos[1]);
  CHECK(n.vel[0] == 0.0);
  CHECK(n.vel[1] == 0.0);

  CHECK_THROWS_AS(env.step(s, std::nan(""), 0.0), Error);
  try {
    env.step(s, 0.0, std::numeric_limits<double>::infinity());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "invalid-action");
  }
}

TEST_CASE("free-space kinematics match the closed form") {
  Maze env;
  const auto& p = env.params();
  const double ax = 0.1, ay = 0.05;
  auto s = at(1.5, 2.5, 5.5, 1.5);
  double vx = 0, vy = 0, px = s.pos[0], py = s.pos[1];
  for (int n = 1; n <= 5; ++n) {
    s = env.step(s, ax, ay);
    // Hand-integrated recurrence, no walls and no speed clamp at play here.
    vx = p.damping * vx + p.dt * ax;
    vy = p.damping * vy + p.dt * ay;
    px += p.dt * vx;
    py += p.dt * vy;
    CHECK(s.vel[0] == doctest::Approx(vx).epsilon(1e-14));
    CHECK(s.vel[1] == doctest::Approx(vy).epsilon(1e-14));
    CHECK(s.pos[0] == doctest::Approx(px).epsilon(1e-14));
    CHECK(s.pos[1] == doctest::Approx(py).epsilon(1e-14));
  }
  // Geometric-series closed form for the velocity after n steps.
  const double d5 = std::pow(p.damping, 5);
  CHECK(s.vel[0] == doctest::Approx(p.dt * ax * (1 - d5) / (1 - p.damping)).epsilon(1e-12));

  // Speed clamp engages under sustained max thrust.
  auto fast = at(3.5, 3.5, 5.5, 3.5);
  for (int i = 0; i < 400; ++i) fast = env.step(fast, 1.0, 0.0);
  CHECK(std::hypot(fast.vel[0], fast.vel[1]) <= p.v_max + 1e-12);
}

TEST_CASE("head-on wall approach clamps position and zeroes normal velocity") {
  Maze env;
  auto s = at(1.9, 1.5, 5.5, 1.5);
  s.vel[0] = 1.5;  // moving right toward the wall column at x=3
  for (int i = 0; i < 30; ++i) s = env.step(s, 1.0, 0.0);
  CHECK(s.pos[0] < 3.0);
  CHECK(s.pos[0] == doctest::Approx(3.0).epsilon(1e-5));
  CHECK(s.vel[0] == 0.0);
  CHECK(s.pos[1] == 1.5);  // tangential axis untouched
}

TEST_CASE("reward is euclidean progress and telescopes") {
  Maze env;
  auto s = at(1.5, 3.5, 5.5, 3.5);
  CHECK(env.reward(s, s) == 0.0);

  auto n = s;
  n.pos[0] = 1.7;  // straight toward the goal
  CHECK(env.reward(s, n) == doctest::Approx(0.2).epsilon(1e-12));

  // Telescoping over a random rollout.
  Rng rng(3);
  auto cur = at(1.5, 1.5, 5.5, 1.5);
  double total = 0.0;
  auto start = cur;
  for (int t = 0; t < 60; ++t) {
    auto next = env.step(cur, rng.uniform(-1, 1), rng.uniform(-1, 1));
    total += env.reward(cur, next);
    cur = next;
  }
  CHECK(total ==
        doctest::Approx(dist(start.pos, start.goal) - dist(cur.pos, cur.goal)).epsilon(1e-9));
}

TEST_CASE("pd controller equilibrium and clipping") {
  Maze env;
  auto s = at(5.5, 1.5, 5.5, 1.5);  // exactly on the goal, at rest
  double ax, ay;
  env.pd_action(s, nullptr, ax, ay);
  CHECK(std::abs(ax) < 1e-12);
  CHECK(std::abs(ay) < 1e-12);

  Rng rng(17);
  for (int i = 0; i < 2000; ++i) {
    auto r = at(1.5 + rng.uniform(0, 0.9), 1.1 + rng.uniform(0, 0.8), 5.5, 3.5);
    r.vel[0] = rng.uniform(-2, 2);
    r.vel[1] = rng.uniform(-2, 2);
    env.pd_action(r, &rng, ax, ay);
    CHECK(ax >= -1.0);
    CHECK(ax <= 1.0);
    CHECK(ay >= -1.0);
    CHECK(ay <= 1.0);
  }
}

TEST_CASE("noise-free controller reaches every goal from every start") {
  Maze env;
  const auto free = env.grid().free_cells();
  const int w = env.grid().width;
  for (int start : free)
    for (int goal : free) {
      if (start == goal) continue;
      auto s = at(start % w + 0.5, start / w + 0.5, goal % w + 0.5, goal / w + 0.5);
      bool reached = false;
      for (int t = 0; t < 200 && !reached; ++t) {
        double ax, ay;
        env.pd_action(s, nullptr, ax, ay);
        s = env.step(s, ax, ay);
        reached = dist(s.pos, s.goal) <= 0.5;
      }
      CHECK(reached);
    }
}

TEST_CASE("positions stay in free space under random thrashing") {
  Maze env;
  Rng rng(2718);
  auto s = at(1.5, 1.5, 5.5, 1.5);
  for (int t = 0; t < 100000; ++t) {
    s = env.step(s, rng.uniform(-1, 1), rng.uniform(-1, 1));
    CHECK_FALSE(env.grid().is_blocked_at(s.pos[0], s.pos[1]));
  }
}

TEST_CASE("dataset generation: determinism, replay, positive return") {
  Maze env;
  Dataset d1 = generate_maze_dataset(env, 18, 4, 60, 11);
  Dataset d2 = generate_maze_dataset(env, 18, 4, 60, 11);
  REQUIRE(d1.trajectories.size() == 22);
  CHECK(d1.env.env_id == "maze");
  CHECK(d1.env.horizon == 60);
  for (size_t i = 0; i < d1.trajectories.size(); ++i) {
    CHECK(d1.trajectories[i].states == d2.trajectories[i].states);
    CHECK(d1.trajectories[i].actions == d2.trajectories[i].actions);
    CHECK(d1.trajectories[i].rewards == d2.trajectories[i].rewards);
  }

  double mean_return = 0.0;
  for (const auto& tr : d1.trajectories) {
    // Rewards replay from consecutive observations (f32 storage tolerance).
    for (int t = 0; t + 1 < tr.length(); ++t) {
      const auto& o0 = tr.states[t];
      const auto& o1 = tr.states[t + 1];
      const double want = std::hypot(o0[0] - o0[2], o0[1] - o0[3]) -
                          std::hypot(o1[0] - o0[2], o1[1] - o0[3]);
      CHECK(double(tr.rewards[t]) == doctest::Approx(want).epsilon(1e-4));
      // Goal is constant within an episode.
      CHECK(o0[2] == o1[2]);
      CHECK(o0[3] == o1[3]);
      // Speed limit bounds per-step movement.
      CHECK(std::hypot(o1[0] - o0[0], o1[1] - o0[1]) <=
            env.params().dt * env.params().v_max + 1e-6);
    }
    for (const auto& row : tr.states)
      CHECK_FALSE(env.grid().is_blocked_at(row[0], row[1]));
    for (const auto& row : tr.actions) {
      CHECK(row[0] >= -1.0f);
      CHECK(row[0] <= 1.0f);
    }
    for (float r : tr.rewards) mean_return += r;
  }
  mean_return /= double(d1.trajectories.size());
  CHECK(mean_return > 0.0);

  // Continuous normalization constants are real.
  CHECK(d1.norm.state_mean.size() == 4);
  CHECK(d1.norm.action_std.size() == 2);
  CHECK(d1.norm.rtg_std > 0.0f);
}

TEST_CASE("select_eval_rtg nearest neighbor with tie-break") {
  Maze env;
  Dataset d = generate_maze_dataset(env, 40, 6, 30, 5);

  // Exact initial observation: picks that trajectory.
  const auto& probe = d.trajectories[7].states.front();
  auto tok = select_eval_rtg(probe, d);
  double ret = 0;
  for (float r : d.trajectories[7].rewards) ret += r;
  CHECK(tok.rtg == doctest::Approx(1.1 * ret).epsilon(1e-9));
  CHECK(tok.remaining == 30);

  // Linear-scan oracle over 25 random probes.
  Rng rng(99);
  for (int q = 0; q < 25; ++q) {
    std::vector<float> obs = {float(rng.uniform(1, 6)), float(rng.uniform(1, 4)),
                              float(rng.uniform(1, 6)), float(rng.uniform(1, 4))};
    int best = -1;
    double best_d = 0;
    for (int i : d.indices_of(Split::train)) {
      const auto& f = d.trajectories[i].states.front();
      double dd = 0;
      for (int k2 = 0; k2 < 4; ++k2) dd += (f[k2] - obs[k2]) * (f[k2] - obs[k2]);
      if (best < 0 || dd < best_d) {
        best = i;
        best_d = dd;
      }
    }
    double bret = 0;
    for (float r : d.trajectories[best].rewards) bret += r;
    CHECK(select_eval_rtg(obs, d).rtg == doctest::Approx(1.1 * bret).epsilon(1e-9));
  }

  // Tie-break: two identical initial observations, different returns.
  Dataset tiny;
  tiny.env = env.env_spec(2);
  for (int i = 0; i < 2; ++i) {
    Trajectory t;
    t.states = {{1.5f, 1.5f, 5.5f, 3.5f}, {1.6f, 1.5f, 5.5f, 3.5f}};
    t.actions = {{0.1f, 0.0f}, {0.1f, 0.0f}};
    t.rewards = {float(i + 1), 0.0f};  // returns 1 and 2
    tiny.trajectories.push_back(t);
    tiny.split.push_back(Split::train);
  }
  auto tie = select_eval_rtg({1.5f, 1.5f, 5.5f, 3.5f}, tiny);
  CHECK(tie.rtg == doctest::Approx(1.1 * 1.0));  // lowest index wins

  // Validation-only dataset is rejected.
  Dataset vonly = tiny;
  vonly.split = {Split::validation, Split::validation};
  CHECK_THROWS_AS(select_eval_rtg({1.5f, 1.5f, 5.5f, 3.5f}, vonly), Error);
}
