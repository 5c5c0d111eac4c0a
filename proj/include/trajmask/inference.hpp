#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "trajmask/common.hpp"
#include "trajmask/doorkey.hpp"
#include "trajmask/maze.hpp"
#include "trajmask/seqmodel.hpp"

namespace trajmask {

/// Stateful episode interface for closed-loop rollouts. Observations are
/// plain state vectors in the dataset convention of the wrapped environment.
class RolloutEnv {
public:
  virtual ~RolloutEnv() = default;
  virtual const EnvSpec& spec() const = 0;
  /// Starts a fresh episode and returns the initial observation.
  virtual std::vector<float> reset(Rng& rng) = 0;
  /// Applies one action and returns the next observation.
  virtual std::vector<float> step(std::span<const float> action) = 0;
  /// Reward produced by the latest step.
  virtual double last_reward() const = 0;
};

/// DoorKey adapter. Agent and key spawn like the dataset generator (uniform
/// over distinct spawn cells) unless a fixed start is given.
class GridRollout final : public RolloutEnv {
public:
  explicit GridRollout(DoorKey env, int horizon = 10,
                       std::optional<GridState> fixed_start = std::nullopt);

  const EnvSpec& spec() const override { return spec_; }
  std::vector<float> reset(Rng& rng) override;
  std::vector<float> step(std::span<const float> action) override;
  double last_reward() const override { return last_reward_; }

  const DoorKey& env() const { return env_; }
  const GridState& state() const { return state_; }

private:
  DoorKey env_;
  EnvSpec spec_;
  std::optional<GridState> fixed_;
  GridState state_;
  double last_reward_ = 0.0;
};

/// Maze adapter. Start and goal cells are drawn like the dataset generator
/// (uniform over distinct free cells) unless fixed; cell centers get the
/// simulator's start jitter either way.
class MazeRollout final : public RolloutEnv {
public:
  explicit MazeRollout(Maze env, int horizon = 200,
                       std::optional<std::pair<int, int>> fixed_cells = std::nullopt);

  const EnvSpec& spec() const override { return spec_; }
  std::vector<float> reset(Rng& rng) override;
  std::vector<float> step(std::span<const float> action) override;
  double last_reward() const override { return last_reward_; }

  const Maze& env() const { return env_; }
  const MazeState& state() const { return state_; }

private:
  Maze env_;
  EnvSpec spec_;
  std::optional<std::pair<int, int>> fixed_;
  MazeState state_;
  double last_reward_ = 0.0;
};

/// What a rollout conditions on. Only the fields of the chosen scheme are
/// read; supported schemes are BC, GOAL, RC, and WAYPOINT.
struct RolloutSpec {
  SchemeId scheme = SchemeId::BC;
  int horizon = -1;             // episode length; -1 means the env horizon
  bool sample_actions = false;  // sample the action heads instead of argmax
  std::vector<float> goal_state;                 // GOAL: pinned window tail
  double rtg_target = 0.0;                       // RC: episode return target
  std::map<int, std::vector<float>> waypoints;   // WAYPOINT: timestep -> state
  /// RC: when set, overrides rtg_target per episode from the initial
  /// observation (the evaluation-time target-selection hook).
  std::function<double(const std::vector<float>&)> rtg_selector;
};

/// Model inputs for one rollout step: the window starting at w0 with all
/// observed history visible, the query action as the only target, and the
/// scheme's conditioning tokens pinned.
struct RolloutQuery {
  Window window;
  MaskPattern mask;
  int w0 = 0;
};

/// Builds the step-t query from the episode history (t+1 states, t actions
/// and rewards). The window start is clamp(t-k+1, 0, T-k), so early steps
/// sit at the window head and late steps slide with the episode. GOAL pins
/// the goal at the window tail until the tail becomes observed history; RC
/// feeds (target - rewards collected before w0, T - w0); WAYPOINT pins the
/// given states that land strictly between the query and the window tail.
RolloutQuery build_rollout_query(const EnvSpec& env, const RolloutSpec& spec, int k, int T, int t,
                                 std::span<const std::vector<float>> states,
                                 std::span<const std::vector<float>> actions,
                                 std::span<const float> rewards);

/// Reads an action off the head logits at `row`: per-factor argmax (ties to
/// the lowest index) or categorical draw for discrete actions, de-standardized
/// values for continuous ones. Sampling requires an rng.
std::vector<float> decode_action(const EnvSpec& env, const Normalization& norm,
                                 const Mat& action_logits, int row, bool sample, Rng* rng);

struct RolloutResult {
  Trajectory traj;
  double total_reward = 0.0;
  std::vector<int> window_starts;  // w0 used at each step
  std::vector<double> rtg_fed;     // raw RTG input per step; NaN when no RTG token
  std::vector<int> remaining_fed;  // RTG remaining-steps input per step; 0 when none
};

/// Runs one closed-loop episode of `spec.horizon` steps (or the env horizon):
/// each step stacks the query window, runs one forward pass, decodes the
/// action at the query position, and advances the environment. Horizon 0
/// returns an empty result; shorter-than-context horizons are rejected.
RolloutResult conditioned_rollout(const Checkpoint& ckpt, RolloutEnv& env, const RolloutSpec& spec,
                                  Rng& rng);

/// n behavior-cloning episodes with sampled (not argmax) actions, for
/// comparing the model's trajectory distribution against the data.
std::vector<Trajectory> sample_full_trajectories(const Checkpoint& ckpt, RolloutEnv& env, int n,
                                                 Rng& rng);

struct BackwardsResult {
  std::vector<std::vector<float>> states;   // inferred steps, oldest first
  std::vector<std::vector<float>> actions;  // actions[i] is taken at states[i]
};

/// Infers `count` (state, action) steps preceding the observed suffix by
/// repeatedly sampling the state and action heads at the position before the
/// suffix and rejecting samples that do not step to the adjacent known state.
/// Resamples up to max_attempts per step (the forward pass is shared across
/// attempts) and throws rejection-exhausted naming the failing step. The
/// observed suffix itself is taken as-is, never consistency-checked.
/// Grid environments only.
BackwardsResult backwards_infer(const Checkpoint& ckpt, const DoorKey& env,
                                std::span<const std::vector<float>> suffix_states,
                                std::span<const std::vector<float>> suffix_actions, int count,
                                Rng& rng, int max_attempts = 256);

/// Per-factor state distributions at window position query_t from a single
/// forward pass with only the pinned states visible. A pinned query returns
/// its point mass directly. Discrete state spaces only.
std::vector<Vec> future_marginals(const Checkpoint& ckpt,
                                  const std::map<int, std::vector<float>>& pinned, int query_t);

}  // namespace trajmask
