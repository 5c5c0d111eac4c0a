#pragma once

#include <functional>
#include <string>
#include <vector>

#include "trajmask/seqmodel.hpp"

namespace trajmask {

/// Loss over flagged target tokens only. Discrete factors use cross-entropy
/// (summed per token across factors); continuous targets use squared error
/// averaged over dimensions. total = action_term + ratio * state_term, each
/// term a mean over its own target tokens. The d_* matrices are gradients of
/// `total` with respect to the head outputs, zero on non-target rows.
struct LossResult {
  double total = 0.0;
  double action_term = 0.0;
  double state_term = 0.0;
  int action_targets = 0;
  int state_targets = 0;
  Mat d_state, d_action;
};

/// Throws empty-target when the batch flags no target tokens at all.
/// A batch with only one modality targeted is fine; the other term is zero.
LossResult masked_loss(const ModelConfig& cfg, const Mat& state_logits,
                       const Mat& action_logits, const ModelBatch& batch);

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
struct AdamState {
  ParamStore m, v;
  int64_t t = 0;
};

AdamState make_adam_state(const ParamStore& params);
void adam_step(ParamStore& params, const ParamStore& grads, AdamState& st, double lr);

/// How the per-example mask is drawn during training.
struct RegimeSpec {
  enum class Kind { single_task, multi_task, random_mask };
  Kind kind = Kind::single_task;
  SchemeId scheme = SchemeId::BC;  // single_task only
  WaypointSpec waypoint;

  std::string tag() const;
};

MaskPattern draw_regime_mask(const RegimeSpec& regime, int k, Rng& rng);

struct CurvePoint {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;  // NaN on epochs without an evaluation
  double wall_time = 0.0;   // seconds since training started
};

struct TrainOptions {
  int max_epochs = 6000;
  double lr = 1e-4;
  int batch_size = 250;
  int patience = 50;   // evaluations without improvement before stopping
  int eval_every = 1;  // epochs between validation evaluations
  uint64_t seed = 0;
  std::string curve_path;  // learning-curve CSV, written when non-empty
  /// Validation metric (lower is better). Defaults to masked loss on a
  /// fixed validation batch; reward-based stopping plugs in here.
  std::function<double(const ModelConfig&, const ParamStore&, const Normalization&)>
      eval_metric;
  /// Test hook: replaces the regime's mask draw while consuming the same
  /// rng stream, so regime plumbing can be checked for equivalence.
  std::function<MaskPattern(int, Rng&)> mask_override;
};

struct TrainResult {
  Checkpoint best;  // parameters at the validation-metric optimum
  int best_epoch = -1;
  double best_metric = 0.0;
  int epochs_run = 0;
  std::vector<CurvePoint> curve;
};

/// Trains fresh parameters on the dataset's train split; one window per
/// trajectory per epoch (uniform start when the horizon exceeds the
/// context). Deterministic for a fixed option seed.
TrainResult train(const ModelConfig& cfg, const Dataset& data, const RegimeSpec& regime,
                  const TrainOptions& opt);

/// Same loop, but starts from the checkpoint's parameters with fresh
/// optimizer moments. Zero max_epochs returns the base unchanged.
TrainResult finetune(const Checkpoint& base, const Dataset& data,
                     const RegimeSpec& regime, const TrainOptions& opt);

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path);

}  // namespace trajmask
