#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "trajmask/common.hpp"
#include "trajmask/masking.hpp"
#include "trajmask/traj.hpp"

namespace trajmask {

enum class Arch { bidirectional, causal, feedforward };

std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

/// Architecture and shape description. The env spec carries the modality
/// kinds and widths; heads and the input stacking derive from it.
struct ModelConfig {
  Arch arch = Arch::bidirectional;
  int k = 10;           // context window length
  int embed_dim = 32;
  int num_layers = 2;
  int num_heads = 4;
  int mlp_width = 128;  // transformer block MLP width / feedforward hidden width
  double dropout = 0.1;
  double action_state_loss_ratio = 1.0;  // w in: loss = action_term + w * state_term
  EnvSpec env;

  /// Per-timestep stacked input width:
  /// state repr + flag + action repr + flag + (rtg, remaining) + flag.
  int input_width() const { return env.state_repr_width() + env.action_repr_width() + 5; }
  /// Head widths: concatenated per-factor logits for discrete modalities,
  /// plain vector width for continuous ones.
  int state_head_width() const { return env.state_repr_width(); }
  int action_head_width() const { return env.action_repr_width(); }
  /// Target columns: one class index per factor (discrete) or the raw
  /// vector width (continuous); both equal the modality width.
  int state_target_width() const { return env.state_width; }
  int action_target_width() const { return env.action_width; }

  void validate() const;
  /// Stable text rendering of every semantic field, used for config hashing.
  std::string fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter arrays in a stable creation order (the order init_params
/// built them). Gradient and Adam-moment stores mirror the same names.
struct ParamStore {
  std::vector<std::string> names;
  std::map<std::string, Mat> arrays;

  Mat& add(const std::string& name, int rows, int cols);
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const { return arrays.count(name) != 0; }
  size_t scalar_count() const;
  ParamStore zeros_like() const;
  void check_finite(const std::string& context) const;
};

/// Scaled-uniform fan-in init for weights, zeros for biases, ones for
/// layer-norm gains. Deterministic in the seed.
ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

/// A batch of stacked, masked, normalized windows plus the loss targets.
/// Rows are (sample, timestep) pairs: row = b * k + t.
struct ModelBatch {
  int B = 0, k = 0;
  Mat X;           // (B*k) x input_width masked input features
  Mat state_tgt;   // (B*k) x state_target_width (class indices or normalized values)
  Mat action_tgt;  // (B*k) x action_target_width
  std::vector<uint8_t> state_out, action_out;  // per-row loss-target flags
  bool rtg_in = false;                          // diagnostics only
};

/// Stacks one window under one mask into `batch` at sample slot b.
/// Hidden modalities are zero-filled with their visibility flag at 0; the
/// RTG pair (standardized rtg, remaining/horizon) appears at position 0 only.
void stack_window(const ModelConfig& cfg, const Window& w, const MaskPattern& m,
                  const Normalization& norm, ModelBatch& batch, int b);

ModelBatch make_batch(const ModelConfig& cfg, std::span<const Window> windows,
                      std::span<const MaskPattern> masks, const Normalization& norm);

/// Forward activations kept for the backward pass.
struct Forward {
  int B = 0, k = 0;
  bool train = false;
  Mat X;          // input copy
  Mat embedded;   // after projection + positional encoding (+ input to layer 0)
  struct Layer {  // transformer block cache
    Mat x_in, ln1_hat, ln1_out, q, k_, v, attn_cat, attn_proj, attn_drop_mask;
    Mat res1, ln2_hat, ln2_out, mlp_h, mlp_act, mlp_proj, mlp_drop_mask;
    Vec ln1_istd, ln2_istd;
    std::vector<Mat> probs;  // per sample: (H*k) x k softmax rows
  };
  std::vector<Layer> layers;
  // feedforward-arch cache
  Mat ff_flat;                  // B x (k*embed)
  std::vector<Mat> ff_h, ff_act, ff_drop_mask;  // per hidden layer
  Mat ff_out;                   // B x (k*embed)
  Mat final_in, final_hat, final_out;  // final layer norm (transformers)
  Vec final_istd;
  Mat state_logits;   // (B*k) x state_head_width
  Mat action_logits;  // (B*k) x action_head_width
};

/// Runs the configured architecture. Eval mode (train = false) is
/// deterministic; train mode applies inverted dropout driven by `rng`.
/// Throws numeric-failure naming the first layer with non-finite values.
Forward forward(const ModelConfig& cfg, const ParamStore& params, const Mat& X, int B,
                bool train = false, Rng* rng = nullptr);

/// Backpropagates head gradients through the cached forward pass.
/// Returns parameter gradients shaped like the ParamStore.
ParamStore backward(const ModelConfig& cfg, const ParamStore& params, const Forward& f,
                    const Mat& d_state, const Mat& d_action);

/// Fixed sinusoidal positional encoding row for position t (length d).
void positional_row(int t, int d, double* out);

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  Normalization norm;
  std::string regime;  // training-regime tag, free-form
  uint64_t seed = 0;
};

/// Versioned header (config, normalization, regime, seed, config hash,
/// numeric conventions) plus named little-endian float64 arrays.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace trajmask
