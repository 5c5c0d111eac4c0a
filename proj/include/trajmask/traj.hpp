#pragma once

#include <span>
#include <string>
#include <vector>

#include "trajmask/common.hpp"

namespace trajmask {

enum class Modality { discrete, continuous };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Shape of one environment's tokens. Discrete modalities are factored
/// (e.g. the gridworld state is two 16-way indices); continuous ones are
/// plain real vectors.
struct EnvSpec {
  std::string env_id;
  Modality state_kind = Modality::discrete;
  int state_width = 0;                 // factors (discrete) or vector width (continuous)
  std::vector<int> state_cards;       // per-factor cardinalities; empty for continuous
  Modality action_kind = Modality::discrete;
  int action_width = 0;
  std::vector<int> action_cards;
  int horizon = 0;                     // fixed episode length T

  // Width of the one-hot / real representation fed to models.
  int state_repr_width() const;
  int action_repr_width() const;

  bool operator==(const EnvSpec&) const = default;
};

/// One episode. Values are stored as float32 so that dataset files
/// round-trip bit-exactly; arithmetic everywhere else is double.
struct Trajectory {
  std::vector<std::vector<float>> states;   // T rows of state_width
  std::vector<std::vector<float>> actions;  // T rows of action_width
  std::vector<float> rewards;               // T

  int length() const { return static_cast<int>(rewards.size()); }
};

/// Return-to-go plus the number of timesteps left in the episode horizon,
/// counted from the window start.
struct RtgToken {
  double rtg = 0.0;
  int remaining = 0;
};

/// Suffix sums: out[t] = sum of rewards[t..T-1].
std::vector<double> compute_rtg(std::span<const float> rewards);

struct Window {
  int start = 0;  // absolute timestep of row 0
  std::vector<std::vector<float>> states;
  std::vector<std::vector<float>> actions;
  std::vector<float> rewards;
  RtgToken rtg;
};

/// Timesteps t..t+k-1 of the trajectory plus the first-window RTG tuple.
Window slice_window(const Trajectory& traj, int t, int k);

/// Per-dimension standardization constants, computed from the train split.
/// Identity (mean 0, std 1) for discrete modalities.
struct Normalization {
  std::vector<float> state_mean, state_std;
  std::vector<float> action_mean, action_std;
  float rtg_mean = 0.0f;
  float rtg_std = 1.0f;

  bool operator==(const Normalization&) const = default;
};

enum class Split : uint8_t { train = 0, validation = 1 };

struct Dataset {
  EnvSpec env;
  uint64_t seed = 0;
  std::vector<Trajectory> trajectories;
  std::vector<Split> split;  // parallel to trajectories
  Normalization norm;

  std::vector<int> indices_of(Split s) const;
};

/// Validates per-trajectory invariants (equal lengths, finite values,
/// discrete indices within cardinalities). Throws invalid-trajectory.
void validate_trajectory(const EnvSpec& env, const Trajectory& traj);

/// Fills dataset.norm from the train split. No-op dims get mean 0 / std 1.
void compute_normalization(Dataset& dataset);

void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Throws env-mismatch if the dataset was generated for another environment.
void require_env(const Dataset& dataset, const std::string& env_id);

}  // namespace trajmask
