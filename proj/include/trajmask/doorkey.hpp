#pragma once

#include <array>
#include <vector>

#include "trajmask/common.hpp"
#include "trajmask/traj.hpp"

namespace trajmask {

/// Agent and key cell on the 4x4 grid, indexed x + 4*y with x right, y down.
/// The key token equals the agent cell from the pickup step onward, so
/// key possession is derived rather than stored.
struct GridState {
  int agent = 0;
  int key = 0;

  bool has_key() const { return agent == key; }
  bool operator==(const GridState&) const = default;
};

inline int cell_x(int c) { return c & 3; }
inline int cell_y(int c) { return c >> 2; }
inline int cell_index(int x, int y) { return x + 4 * y; }

/// Wall column with one locked door; the goal sits behind it. Defaults are
/// the canonical layout; alternates can be loaded from config.
struct GridLayout {
  std::vector<int> walls = {cell_index(2, 0), cell_index(2, 2), cell_index(2, 3)};
  int door = cell_index(2, 1);
  int goal = cell_index(3, 1);
};

/// Actions move the agent one cell: 0 = up (y-1), 1 = right, 2 = down, 3 = left.
constexpr int kGridActions = 4;

class DoorKey {
public:
  /// Validates the layout (distinct special cells, goal reachable from every
  /// open cell once the door is passable, spawn region connected and big
  /// enough for two distinct spawns) and precomputes BFS distance tables.
  /// Throws config-error on a bad layout.
  explicit DoorKey(GridLayout layout = {});

  const GridLayout& layout() const { return layout_; }

  /// Cells where agent and key may start: non-wall, non-door, non-goal cells
  /// that cannot reach the goal while the door is shut.
  const std::vector<int>& spawn_cells() const { return spawn_; }

  bool is_wall(int cell) const;

  /// Pure transition; blocked moves (bounds, wall, locked door) are identity.
  /// Total over all agent/key cell combinations. Throws invalid-action.
  GridState step(const GridState& s, int action) const;

  /// BFS steps from the state to the goal, routing through the key first
  /// when it is not yet held. Large sentinel when unreachable.
  int goal_distance(const GridState& s) const;

  /// sign(goal_distance(prev) - goal_distance(next)), in {-1, 0, 1}.
  int reward(const GridState& prev, const GridState& next) const;

  /// Noisy-rational expert: P(a) proportional to exp(C(a)) where C(a) is the
  /// sign of the distance improvement toward the current goal (key cell
  /// until pickup, then the final goal).
  std::array<double, kGridActions> expert_probs(const GridState& s) const;
  int expert_action(const GridState& s, Rng& rng) const;

  /// BFS distance between cells with the door open or shut; sentinel when
  /// unreachable. Exposed for tests and the backwards-inference oracle.
  int cell_distance(int from, int to, bool door_open) const;

  static constexpr int kUnreachable = 1 << 20;

  EnvSpec env_spec(int horizon = 10) const;

private:
  GridLayout layout_;
  std::vector<int> spawn_;
  // dist_[door_open][target][cell]
  std::array<std::array<std::array<int, 16>, 16>, 2> dist_;
};

/// n_train + n_val expert episodes of exactly T steps each; agent and key
/// spawn uniformly over distinct spawn cells. Each trajectory draws from its
/// own derived RNG stream, validation streams disjoint from training ones.
Dataset generate_grid_dataset(const DoorKey& env, int n_train, int n_val, int T, uint64_t seed);

}  // namespace trajmask
