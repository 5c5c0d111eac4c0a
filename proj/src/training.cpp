#include "trajmask/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace trajmask {

namespace {

/// Cross-entropy over one factor block; adds the softmax-minus-onehot
/// gradient (unscaled) into dst. Returns the CE value.
double factor_ce(const Mat& logits, int row, int off, int cards, int target, Mat& dst) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < cards; ++c) mx = std::max(mx, logits(row, off + c));
  double sum = 0.0;
  for (int c = 0; c < cards; ++c) sum += std::exp(logits(row, off + c) - mx);
  for (int c = 0; c < cards; ++c)
    dst(row, off + c) += std::exp(logits(row, off + c) - mx) / sum;
  dst(row, off + target) -= 1.0;
  return std::log(sum) - (logits(row, off + target) - mx);
}

/// Squared error averaged over dimensions; adds 2(p-t)/D into dst.
double row_mse(const Mat& pred, const Mat& tgt, int row, int dims, Mat& dst) {
  double acc = 0.0;
  for (int d = 0; d < dims; ++d) {
    const double diff = pred(row, d) - tgt(row, d);
    acc += diff * diff;
    dst(row, d) += 2.0 * diff / dims;
  }
  return acc / dims;
}

}  // namespace

LossResult masked_loss(const ModelConfig& cfg, const Mat& state_logits,
                       const Mat& action_logits, const ModelBatch& batch) {
  const EnvSpec& env = cfg.env;
  const int n = batch.B * batch.k;
  require(state_logits.rows() == n && action_logits.rows() == n, "index-error",
          "logit row count does not match the batch");
  require(state_logits.cols() == cfg.state_head_width() &&
              action_logits.cols() == cfg.action_head_width(),
          "index-error", "logit width does not match the heads");

  LossResult r;
  r.d_state = Mat::Zero(n, state_logits.cols());
  r.d_action = Mat::Zero(n, action_logits.cols());

  for (int row = 0; row < n; ++row) {
    if (batch.state_out[row]) {
      ++r.state_targets;
      if (env.state_kind == Modality::discrete) {
        int off = 0;
        for (int f = 0; f < env.state_width; ++f) {
          const int tgt = static_cast<int>(batch.state_tgt(row, f));
          r.state_term += factor_ce(state_logits, row, off, env.state_cards[f], tgt,
                                    r.d_state);
          off += env.state_cards[f];
        }
      } else {
        r.state_term += row_mse(state_logits, batch.state_tgt, row, env.state_width,
                                r.d_state);
      }
    }
    if (batch.action_out[row]) {
      ++r.action_targets;
      if (env.action_kind == Modality::discrete) {
        int off = 0;
        for (int f = 0; f < env.action_width; ++f) {
          const int tgt = static_cast<int>(batch.action_tgt(row, f));
          r.action_term += factor_ce(action_logits, row, off, env.action_cards[f], tgt,
                                     r.d_action);
          off += env.action_cards[f];
        }
      } else {
        r.action_term += row_mse(action_logits, batch.action_tgt, row, env.action_width,
                                 r.d_action);
      }
    }
  }
  require(r.state_targets + r.action_targets > 0, "empty-target",
          "batch flags no target tokens");

  const double w = cfg.action_state_loss_ratio;
  if (r.state_targets > 0) {
    r.state_term /= r.state_targets;
    r.d_state *= w / r.state_targets;
  }
  if (r.action_targets > 0) {
    r.action_term /= r.action_targets;
    r.d_action /= r.action_targets;
  }
  r.total = r.action_term + w * r.state_term;
  require(std::isfinite(r.total), "numeric-failure", "non-finite loss");
  return r;
}

AdamState make_adam_state(const ParamStore& params) {
  AdamState st;
  st.m = params.zeros_like();
  st.v = params.zeros_like();
  return st;
}

void adam_step(ParamStore& params, const ParamStore& grads, AdamState& st, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  st.t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (const std::string& name : params.names) {
    Mat& w = params.at(name);
    const Mat& g = grads.at(name);
    Mat& m = st.m.at(name);
    Mat& v = st.v.at(name);
    m = b1 * m + (1.0 - b1) * g;
    v = (b2 * v.array() + (1.0 - b2) * g.array().square()).matrix();
    w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

std::string RegimeSpec::tag() const {
  switch (kind) {
    case Kind::single_task: return "single-task:" + to_string(scheme);
    case Kind::multi_task: return "multi-task";
    case Kind::random_mask: return "random-mask";
  }
  fail("config-error", "unknown regime kind");
}

MaskPattern draw_regime_mask(const RegimeSpec& regime, int k, Rng& rng) {
  switch (regime.kind) {
    case RegimeSpec::Kind::single_task:
      return build_mask(regime.scheme, k, rng, regime.waypoint);
    case RegimeSpec::Kind::multi_task: return composite_mask(k, rng);
    case RegimeSpec::Kind::random_mask: return random_mask(k, rng);
  }
  fail("config-error", "unknown regime kind");
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "missing-file", "cannot open '" + path + "' for writing");
  os << "epoch,train_loss,val_metric,wall_time\n";
  for (const CurvePoint& p : curve) {
    os << p.epoch << ',' << p.train_loss << ',';
    if (std::isfinite(p.val_metric)) os << p.val_metric;
    os << ',' << p.wall_time << "\n";
  }
  require(os.good(), "format-error", "write failure on '" + path + "'");
}

namespace {

// Independent rng streams so that regimes, dropout, shuffling, and
// validation draws never interact.
constexpr uint64_t kInitStream = 0x11, kShuffleStream = 0x22, kMaskStream = 0x33,
                   kDropStream = 0x44, kValStream = 0x55;

/// One window per trajectory; start uniform when the horizon exceeds k.
Window draw_window(const Trajectory& tr, int k, Rng& rng) {
  const int T = tr.length();
  const int start = T == k ? 0 : rng.uniform_int(T - k + 1);
  return slice_window(tr, start, k);
}

/// Fixed validation batch: one window and one regime mask per validation
/// trajectory, drawn once so every evaluation sees identical inputs.
ModelBatch build_val_batch(const ModelConfig& cfg, const Dataset& data,
                           const RegimeSpec& regime, const TrainOptions& opt) {
  Rng rng(derive_seed(opt.seed, kValStream));
  std::vector<Window> windows;
  std::vector<MaskPattern> masks;
  for (int idx : data.indices_of(Split::validation)) {
    const Trajectory& tr = data.trajectories[idx];
    for (int attempt = 0; attempt < 64; ++attempt) {
      Window w = draw_window(tr, cfg.k, rng);
      MaskPattern m = opt.mask_override ? opt.mask_override(cfg.k, rng)
                                        : draw_regime_mask(regime, cfg.k, rng);
      if (m.target_count() == 0) continue;  // possible under random masking
      windows.push_back(std::move(w));
      masks.push_back(std::move(m));
      break;
    }
  }
  require(!windows.empty(), "empty-target", "no usable validation windows");
  return make_batch(cfg, windows, masks, data.norm);
}

TrainResult run_training(const ModelConfig& cfg, ParamStore params, const Dataset& data,
                         const RegimeSpec& regime, const TrainOptions& opt) {
  cfg.validate();
  require(opt.max_epochs >= 0, "config-error", "max_epochs must be >= 0");
  require(opt.batch_size >= 1, "config-error", "batch_size must be >= 1");
  require(opt.patience >= 1, "config-error", "patience must be >= 1");
  require(opt.eval_every >= 1, "config-error", "eval_every must be >= 1");
  require(cfg.k <= cfg.env.horizon, "config-error",
          "context length exceeds the horizon");
  require(cfg.env == data.env, "env-mismatch",
          "model config and dataset describe different environments");

  const std::vector<int> train_idx = data.indices_of(Split::train);
  require(!train_idx.empty(), "empty-target", "dataset has no training trajectories");

  TrainResult res;
  res.best = Checkpoint{cfg, params, data.norm, regime.tag(), opt.seed};
  if (opt.max_epochs == 0) return res;

  const bool needs_val_batch = !opt.eval_metric;
  ModelBatch val_batch;
  if (needs_val_batch) val_batch = build_val_batch(cfg, data, regime, opt);

  Rng shuffle_rng(derive_seed(opt.seed, kShuffleStream));
  Rng mask_rng(derive_seed(opt.seed, kMaskStream));
  Rng drop_rng(derive_seed(opt.seed, kDropStream));
  AdamState adam = make_adam_state(params);

  std::vector<int> order = train_idx;
  double best_metric = std::numeric_limits<double>::infinity();
  int evals_since_best = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t lo = 0; lo < order.size(); lo += opt.batch_size) {
      const size_t hi = std::min(order.size(), lo + opt.batch_size);
      std::vector<Window> windows;
      std::vector<MaskPattern> masks;
      windows.reserve(hi - lo);
      for (size_t i = lo; i < hi; ++i) {
        windows.push_back(draw_window(data.trajectories[order[i]], cfg.k, mask_rng));
        masks.push_back(opt.mask_override ? opt.mask_override(cfg.k, mask_rng)
                                          : draw_regime_mask(regime, cfg.k, mask_rng));
      }
      const ModelBatch batch = make_batch(cfg, windows, masks, data.norm);
      const Forward f =
          forward(cfg, params, batch.X, batch.B, /*train=*/true, &drop_rng);
      LossResult loss;
      try {
        loss = masked_loss(cfg, f.state_logits, f.action_logits, batch);
      } catch (const Error& e) {
        if (e.code() == "empty-target") continue;  // all-visible random draw
        throw;
      }
      const ParamStore grads = backward(cfg, params, f, loss.d_state, loss.d_action);
      adam_step(params, grads, adam, opt.lr);
      loss_sum += loss.total;
      ++batches;
    }
    res.epochs_run = epoch;

    CurvePoint pt;
    pt.epoch = epoch;
    pt.train_loss = batches > 0 ? loss_sum / batches
                                : std::numeric_limits<double>::quiet_NaN();
    pt.val_metric = std::numeric_limits<double>::quiet_NaN();
    pt.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (epoch % opt.eval_every == 0) {
      double metric;
      if (opt.eval_metric) {
        metric = opt.eval_metric(cfg, params, data.norm);
      } else {
        const Forward vf = forward(cfg, params, val_batch.X, val_batch.B);
        metric = masked_loss(cfg, vf.state_logits, vf.action_logits, val_batch).total;
      }
      pt.val_metric = metric;
      if (metric < best_metric) {
        best_metric = metric;
        res.best.params = params;
        res.best_epoch = epoch;
        res.best_metric = metric;
        evals_since_best = 0;
      } else {
        ++evals_since_best;
      }
      res.curve.push_back(pt);
      if (evals_since_best >= opt.patience) break;
      continue;
    }
    res.curve.push_back(pt);
  }

  if (res.best_epoch < 0) {  // never evaluated: keep the final parameters
    res.best.params = params;
    res.best_epoch = res.epochs_run;
    res.best_metric = std::numeric_limits<double>::quiet_NaN();
  }
  if (!opt.curve_path.empty()) write_curve_csv(res.curve, opt.curve_path);
  return res;
}

}  // namespace

TrainResult train(const ModelConfig& cfg, const Dataset& data, const RegimeSpec& regime,
                  const TrainOptions& opt) {
  return run_training(cfg, init_params(cfg, derive_seed(opt.seed, kInitStream)), data,
                      regime, opt);
}

TrainResult finetune(const Checkpoint& base, const Dataset& data,
                     const RegimeSpec& regime, const TrainOptions& opt) {
  base.config.validate();
  require(base.norm == data.norm, "env-mismatch",
          "finetune dataset normalization differs from the base checkpoint");
  TrainResult res = run_training(base.config, base.params, data, regime, opt);
  res.best.regime = "finetune:" + regime.tag() + " (from " + base.regime + ")";
  return res;
}

}  // namespace trajmask
