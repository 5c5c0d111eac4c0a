#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajmask/common.hpp"
#include "trajmask/doorkey.hpp"
#include "trajmask/inference.hpp"
#include "trajmask/masking.hpp"
#include "trajmask/seqmodel.hpp"
#include "trajmask/traj.hpp"

namespace trajmask {

/// One evaluation record. `train_schemes` is the scheme summary derived from
/// the regime tag; `seed` is the evaluated model's training seed.
struct EvalRow {
  std::string model_id;
  std::string regime;
  std::string train_schemes;
  std::string eval_task;
  uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
};

/// Append-only evaluation log. Rows are kept in insertion order; a
/// (model, task, seed, metric) combination may appear only once.
struct EvalReport {
  std::vector<EvalRow> rows;

  /// Throws duplicate-row when the (model_id, eval_task, seed, metric)
  /// combination is already present.
  void add(EvalRow row);
};

void write_report_csv(const EvalReport& report, const std::string& path);

/// Scheme summary of a regime tag: the scheme name for single-task and
/// finetune tags, "ALL" for multi-task, "RND" for random-mask.
std::string schemes_of_regime(const std::string& regime);

/// A checkpoint under a stable row label. Checkpoints trained with different
/// seeds share a model_id and average into one heatmap row.
struct EvalModel {
  std::string model_id;
  Checkpoint ckpt;
};

/// Masked validation loss of every model on every task. Windows and masks
/// are drawn once per task from the evaluation seed (one window per
/// validation trajectory, `draws_per_window` masks over each), so every
/// model sees identical masked inputs and reports are bitwise reproducible.
/// The loss weighs action and state terms equally regardless of the models'
/// training ratios. Tasks that need a longer context than the models'
/// throw scheme-inapplicable.
EvalReport cross_task_eval(std::span<const EvalModel> models, std::span<const SchemeId> tasks,
                           const Dataset& data, uint64_t eval_seed, int draws_per_window = 16);

/// Aggregated (model x task) grid: per-cell mean and sample standard
/// deviation over seeds, plus the column-normalized matrix. Rows and columns
/// follow first appearance in the report. Throws incomplete-grid when any
/// (model, task) cell has no rows.
struct Heatmap {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Mat raw;
  Mat sd;
  Mat normalized;
};

Heatmap assemble_heatmap(const EvalReport& report, const std::string& metric = "val_loss");

/// Divides each column by its own minimum, so every column's smallest cell
/// becomes exactly 1.0. Idempotent; column minima must be positive.
Mat normalize_heatmap(const Mat& raw);

/// Long-format rows (row, column, raw, normalized) for plotting tools.
void write_heatmap_csv(const Heatmap& map, const std::string& path);

struct RewardStats {
  double mean = 0.0;    // mean of the per-seed mean returns
  double stderr_ = 0.0;  // standard error across seed means (0 for one seed)
  std::vector<double> per_seed;
};

/// Mean and standard error of the per-seed mean returns.
RewardStats summarize_seed_means(std::span<const double> seed_means);

/// `n_rollouts` episodes per seed with fresh environment randomization.
/// Mode BC rolls the plain policy; mode RC conditions on a return target
/// chosen per episode by select_eval_rtg over `rtg_source` when given
/// (otherwise the fixed target in `spec`), matching the evaluation protocol.
RewardStats reward_eval(const Checkpoint& ckpt, RolloutEnv& env, SchemeId mode, int n_rollouts,
                        std::span<const uint64_t> seeds, const Dataset* rtg_source = nullptr,
                        double fixed_rtg_target = 0.0);

/// Per-timestep visitation frequencies of a trajectory set over the grid's
/// state factors and actions. Every row sums to 1.
struct VisitationTable {
  int T = 0;
  Mat agent;   // T x 16
  Mat key;     // T x 16
  Mat action;  // T x 4
};

VisitationTable visitation_of(std::span<const Trajectory> trajs, const EnvSpec& env);

/// Mean over timesteps of the total-variation distance, averaged over the
/// agent, key, and action families. In [0, 1].
double tv_between(const VisitationTable& a, const VisitationTable& b);

struct DistributionComparison {
  VisitationTable data;
  VisitationTable model;
  double tv_distance = 0.0;
};

/// Validation-set visitation vs. `n_samples` trajectories sampled from the
/// model (BC-style, sampled actions). A start pin restricts both sides to
/// episodes starting at that state; no matching validation episode is a
/// config-error. Grid environments only.
DistributionComparison distribution_compare(const Checkpoint& ckpt, const DoorKey& env,
                                            const Dataset& data,
                                            std::optional<GridState> start_pin, int n_samples,
                                            uint64_t seed);

void write_distribution_csv(const DistributionComparison& cmp, const std::string& path);

}  // namespace trajmask
