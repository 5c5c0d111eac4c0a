#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trajmask/common.hpp"

namespace trajmask {

/// Per-timestep visibility and loss-target flags for one trajectory window.
/// `*_in[t]` true means the token is fed to the model; `*_out[t]` true means
/// the model's prediction at t is a loss target. A token is never both.
/// The single first-window RTG token has a visibility flag only; it is never
/// a prediction target.
struct MaskPattern {
  int k = 0;
  std::vector<uint8_t> state_in, action_in;
  std::vector<uint8_t> state_out, action_out;
  bool rtg_in = false;

  int target_count() const;

  /// One 0/1 line per modality, for report debugging:
  ///   "state_in=111 action_in=110 rtg_in=0 state_out=000 action_out=001"
  std::string debug_string() const;

  /// Throws if input and output flags overlap anywhere.
  void validate() const;
};

/// The inference tasks, plus ALL (uniform over the eight concrete schemes)
/// and RND (fully randomized masking).
enum class SchemeId { BC, GOAL, RC, WAYPOINT, FUTURE, PAST, FWD_DYN, INV_DYN, ALL, RND };

constexpr SchemeId kConcreteSchemes[8] = {SchemeId::BC,     SchemeId::GOAL,
                                          SchemeId::RC,     SchemeId::WAYPOINT,
                                          SchemeId::FUTURE, SchemeId::PAST,
                                          SchemeId::FWD_DYN, SchemeId::INV_DYN};

std::string to_string(SchemeId s);
SchemeId scheme_from_string(const std::string& s);

/// Smallest window length the scheme is defined for (2 for schemes that
/// reference a second timestep, 1 otherwise).
int min_window(SchemeId s);

struct WaypointSpec {
  double prob = 0.25;                         // per-state unmasking probability
  std::optional<std::vector<int>> explicit_set;  // inference-time fixed waypoints
};

// Each scheme has a *_mask_at variant taking the split point i explicitly;
// the rng overloads draw i uniformly from the scheme's range.

/// BC / GOAL / RC / WAYPOINT share one shape: states 0..i and actions 0..i-1
/// visible (no actions when i = 0), the single target is the action at i.
/// GOAL additionally reveals the final state, RC the RTG token, WAYPOINT a
/// subset of the states strictly between i and k-1.
MaskPattern bc_family_mask_at(SchemeId scheme, int k, int i, Rng* rng,
                              const WaypointSpec& wp = {});
MaskPattern bc_family_mask(SchemeId scheme, int k, Rng& rng, const WaypointSpec& wp = {});

/// Inputs as BC; targets are every action from i on and every state after i.
MaskPattern future_mask_at(int k, int i);
MaskPattern future_mask(int k, Rng& rng);

/// Inputs are timesteps i..k-1 (states and actions); targets are everything
/// before. i ranges over {1..k-1}.
MaskPattern past_mask_at(int k, int i);
MaskPattern past_mask(int k, Rng& rng);

enum class DynDirection { forward, inverse };

/// forward: (s_i, a_i) -> s_{i+1};  inverse: (s_i, a_{i-1}) -> s_{i-1}.
MaskPattern dynamics_mask_at(DynDirection dir, int k, int i);
MaskPattern dynamics_mask(DynDirection dir, int k, Rng& rng);

/// Uniform choice among the eight concrete schemes, then delegate.
MaskPattern composite_mask(int k, Rng& rng, const WaypointSpec& wp = {});

/// Draw p ~ U[0,1]; hide each of the 2k state/action tokens independently
/// with probability p; every hidden token becomes a target. The RTG token is
/// visible with probability 1/2 and is never a target. The resulting hidden
/// count is uniform on {0..2k}.
MaskPattern random_mask(int k, Rng& rng);
MaskPattern random_mask_with(int k, double p_mask, bool rtg_visible, Rng& rng);

/// Dispatch by scheme for the training regimes.
MaskPattern build_mask(SchemeId scheme, int k, Rng& rng, const WaypointSpec& wp = {});

}  // namespace trajmask
