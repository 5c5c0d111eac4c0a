#pragma once

#include <map>
#include <string>
#include <vector>

#include "trajmask/common.hpp"
#include "trajmask/traj.hpp"

namespace trajmask {

/// Occupancy grid of unit cells; cell (cx, cy) spans [cx, cx+1) x [cy, cy+1)
/// in continuous coordinates, x right, y down. Everything outside counts as
/// blocked.
struct MazeGrid {
  int width = 0, height = 0;
  std::vector<uint8_t> blocked;  // row-major, cy * width + cx

  /// Parses rows of '#' (wall) / '.' (free). Throws config-error on ragged
  /// rows, unknown characters, open boundary, or disconnected free space.
  static MazeGrid from_rows(const std::vector<std::string>& rows);

  /// 7x5 U-shape: outer walls plus a two-cell interior wall splitting the
  /// upper half into two arms.
  static MazeGrid canonical();

  bool is_blocked(int cx, int cy) const {
    if (cx < 0 || cx >= width || cy < 0 || cy >= height) return true;
    return blocked[cy * width + cx] != 0;
  }
  bool is_blocked_at(double x, double y) const {
    return is_blocked(static_cast<int>(std::floor(x)), static_cast<int>(std::floor(y)));
  }
  std::vector<int> free_cells() const;
  int cell_of(double x, double y) const {
    return static_cast<int>(std::floor(y)) * width + static_cast<int>(std::floor(x));
  }
};

/// Full simulator state. Models only ever see (pos, goal); vel is privileged
/// information for the scripted expert.
struct MazeState {
  double pos[2] = {0, 0};
  double vel[2] = {0, 0};
  double goal[2] = {0, 0};
};

struct MazeParams {
  double dt = 0.1;
  double damping = 0.9;
  double v_max = 2.0;
  double kp = 4.0;
  double kd = 1.0;
  double noise_var = 0.5;      // per-coordinate action noise variance
  double start_jitter = 0.3;   // uniform jitter around spawn cell centers
};

class Maze {
public:
  explicit Maze(MazeGrid grid = MazeGrid::canonical(), MazeParams params = {});

  const MazeGrid& grid() const { return grid_; }
  const MazeParams& params() const { return p_; }

  /// Damped double-integrator step. Action components are clipped to [-1,1];
  /// speed is clamped to v_max; axis-aligned wall collisions clamp the
  /// position at the cell boundary and zero the blocked velocity component.
  /// Throws invalid-action on non-finite action values.
  MazeState step(const MazeState& s, double ax, double ay) const;

  /// Euclidean progress toward the goal: d(prev) - d(next).
  double reward(const MazeState& prev, const MazeState& next) const;

  /// Waypoint-PD controller with privileged velocity. Pass rng = nullptr for
  /// the noise-free controller. Returned action is already clipped.
  void pd_action(const MazeState& s, Rng* rng, double& ax, double& ay) const;

  /// Next position the PD controller steers toward: the goal itself inside
  /// the goal cell, otherwise the center of the next cell on the BFS path.
  void waypoint(const MazeState& s, double& wx, double& wy) const;

  /// BFS steps from each cell to the given free target cell (plan cache).
  const std::vector<int>& distance_field(int goal_cell) const;

  EnvSpec env_spec(int horizon = 200) const;

  static constexpr int kUnreachable = 1 << 20;

private:
  MazeGrid grid_;
  MazeParams p_;
  std::map<int, std::vector<int>> fields_;  // per free goal cell, precomputed
};

/// One noisy expert episode from the given spawn/goal cells (centers plus
/// jitter when rng is provided). Returns the observation trajectory.
Trajectory maze_rollout(const Maze& env, int start_cell, int goal_cell, int T, Rng& rng);

/// n_train + n_val expert episodes of T steps; start and goal cells drawn
/// uniformly over distinct free cells, per-trajectory RNG streams.
Dataset generate_maze_dataset(const Maze& env, int n_train, int n_val, int T, uint64_t seed);

/// Nearest training trajectory by Euclidean distance over the 4-dim initial
/// observation (ties broken toward the lowest index); returns an RTG token
/// of 1.1 x that trajectory's return over the full horizon.
RtgToken select_eval_rtg(const std::vector<float>& initial_obs, const Dataset& dataset);

}  // namespace trajmask
