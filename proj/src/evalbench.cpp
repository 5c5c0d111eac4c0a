#include "trajmask/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "trajmask/training.hpp"

namespace trajmask {

namespace {

// Evaluation RNG streams, disjoint from the training streams.
constexpr uint64_t kEvalTaskStream = 0x6600;
constexpr uint64_t kRewardStream = 0x77;
constexpr uint64_t kSampleStream = 0x88;

// Forward-pass chunk: bounds the attention caches kept alive per batch.
constexpr int kEvalChunk = 64;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void EvalReport::add(EvalRow row) {
  for (const EvalRow& r : rows) {
    if (r.model_id == row.model_id && r.eval_task == row.eval_task && r.seed == row.seed &&
        r.metric == row.metric) {
      fail("duplicate-row", "metric " + row.metric + " for model " + row.model_id + ", task " +
                                row.eval_task + ", seed " + std::to_string(row.seed) +
                                " reported twice");
    }
  }
  rows.push_back(std::move(row));
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "io-error", "cannot open " + path + " for writing");
  os << "model_id,regime,train_schemes,eval_task,seed,metric,value\n";
  for (const EvalRow& r : report.rows) {
    os << r.model_id << "," << r.regime << "," << r.train_schemes << "," << r.eval_task << ","
       << r.seed << "," << r.metric << "," << fmt(r.value) << "\n";
  }
  require(os.good(), "io-error", "failed writing " + path);
}

std::string schemes_of_regime(const std::string& regime) {
  const std::string key = "single-task:";
  if (const size_t at = regime.find(key); at != std::string::npos) {
    const size_t start = at + key.size();
    const size_t end = regime.find_first_of(" (", start);
    return regime.substr(start, end == std::string::npos ? std::string::npos : end - start);
  }
  if (regime.find("multi-task") != std::string::npos) return "ALL";
  if (regime.find("random-mask") != std::string::npos) return "RND";
  return regime;
}

EvalReport cross_task_eval(std::span<const EvalModel> models, std::span<const SchemeId> tasks,
                           const Dataset& data, uint64_t eval_seed, int draws_per_window) {
  require(!models.empty(), "config-error", "need at least one model to evaluate");
  require(!tasks.empty(), "config-error", "need at least one evaluation task");
  require(draws_per_window >= 1, "config-error", "need at least one mask draw per window");

  const int k = models[0].ckpt.config.k;
  for (const EvalModel& m : models) {
    require(m.ckpt.config.env == data.env, "env-mismatch",
            "model " + m.model_id + " was trained for a different environment");
    require(m.ckpt.config.k == k, "config-error", "models must share the context length");
  }
  for (SchemeId task : tasks) {
    require(k >= min_window(task), "scheme-inapplicable",
            to_string(task) + " needs a context of at least " + std::to_string(min_window(task)));
  }
  const std::vector<int> val = data.indices_of(Split::validation);
  require(!val.empty(), "config-error", "dataset has no validation split");
  const int T = data.env.horizon;

  EvalReport report;
  for (size_t ti = 0; ti < tasks.size(); ++ti) {
    // One window per validation episode, several masks over each, all drawn
    // from the task's evaluation stream before any model runs: every model
    // sees identical masked inputs and reports reproduce bitwise.
    Rng rng(derive_seed(eval_seed, kEvalTaskStream + ti));
    std::vector<Window> windows;
    std::vector<MaskPattern> masks;
    windows.reserve(val.size() * static_cast<size_t>(draws_per_window));
    for (int vi : val) {
      const Trajectory& tr = data.trajectories[static_cast<size_t>(vi)];
      const int start = (T > k) ? rng.uniform_int(T - k + 1) : 0;
      const Window w = slice_window(tr, start, k);
      for (int d = 0; d < draws_per_window; ++d) {
        windows.push_back(w);
        masks.push_back(build_mask(tasks[ti], k, rng));
      }
    }

    for (const EvalModel& m : models) {
      // Tasks are weighed identically at evaluation time regardless of the
      // model's training-loss ratio.
      ModelConfig eval_cfg = m.ckpt.config;
      eval_cfg.action_state_loss_ratio = 1.0;

      double action_sum = 0.0, state_sum = 0.0;
      long action_n = 0, state_n = 0;
      for (size_t at = 0; at < windows.size(); at += kEvalChunk) {
        const size_t n = std::min<size_t>(kEvalChunk, windows.size() - at);
        const ModelBatch batch =
            make_batch(eval_cfg, std::span<const Window>(windows.data() + at, n),
                       std::span<const MaskPattern>(masks.data() + at, n), m.ckpt.norm);
        const Forward f = forward(eval_cfg, m.ckpt.params, batch.X, batch.B);
        const LossResult loss = masked_loss(eval_cfg, f.state_logits, f.action_logits, batch);
        action_sum += loss.action_term * loss.action_targets;
        state_sum += loss.state_term * loss.state_targets;
        action_n += loss.action_targets;
        state_n += loss.state_targets;
      }
      const double value = (action_n > 0 ? action_sum / static_cast<double>(action_n) : 0.0) +
                           (state_n > 0 ? state_sum / static_cast<double>(state_n) : 0.0);
      report.add({m.model_id, m.ckpt.regime, schemes_of_regime(m.ckpt.regime),
                  to_string(tasks[ti]), m.ckpt.seed, "val_loss", value});
    }
  }
  return report;
}

Heatmap assemble_heatmap(const EvalReport& report, const std::string& metric) {
  Heatmap h;
  auto index_of = [](std::vector<std::string>& labels, const std::string& name) {
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == name) return static_cast<int>(i);
    }
    labels.push_back(name);
    return static_cast<int>(labels.size()) - 1;
  };

  for (const EvalRow& r : report.rows) {
    if (r.metric != metric) continue;
    index_of(h.row_labels, r.model_id);
    index_of(h.col_labels, r.eval_task);
  }
  require(!h.row_labels.empty(), "incomplete-grid", "report has no rows for metric " + metric);

  const int R = static_cast<int>(h.row_labels.size());
  const int C = static_cast<int>(h.col_labels.size());
  std::vector<std::vector<std::vector<double>>> cells(
      static_cast<size_t>(R), std::vector<std::vector<double>>(static_cast<size_t>(C)));
  for (const EvalRow& r : report.rows) {
    if (r.metric != metric) continue;
    const int ri = index_of(h.row_labels, r.model_id);
    const int ci = index_of(h.col_labels, r.eval_task);
    cells[static_cast<size_t>(ri)][static_cast<size_t>(ci)].push_back(r.value);
  }
  h.raw = Mat::Zero(R, C);
  h.sd = Mat::Zero(R, C);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      const auto& vals = cells[static_cast<size_t>(r)][static_cast<size_t>(c)];
      require(!vals.empty(), "incomplete-grid",
              "missing cell " + h.row_labels[static_cast<size_t>(r)] + " x " +
                  h.col_labels[static_cast<size_t>(c)]);
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      h.raw(r, c) = mean;
      if (vals.size() > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        h.sd(r, c) = std::sqrt(ss / static_cast<double>(vals.size() - 1));
      }
    }
  }
  h.normalized = normalize_heatmap(h.raw);
  return h;
}

Mat normalize_heatmap(const Mat& raw) {
  require(raw.rows() >= 1 && raw.cols() >= 1, "incomplete-grid", "empty grid");
  Mat out = raw;
  for (int c = 0; c < raw.cols(); ++c) {
    const double mn = raw.col(c).minCoeff();
    require(std::isfinite(mn) && mn > 0.0, "config-error",
            "column minimum must be positive and finite");
    out.col(c) /= mn;
  }
  return out;
}

void write_heatmap_csv(const Heatmap& map, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "io-error", "cannot open " + path + " for writing");
  os << "row,column,raw,normalized\n";
  for (int r = 0; r < map.raw.rows(); ++r) {
    for (int c = 0; c < map.raw.cols(); ++c) {
      os << map.row_labels[static_cast<size_t>(r)] << "," << map.col_labels[static_cast<size_t>(c)]
         << "," << fmt(map.raw(r, c)) << "," << fmt(map.normalized(r, c)) << "\n";
    }
  }
  require(os.good(), "io-error", "failed writing " + path);
}

RewardStats summarize_seed_means(std::span<const double> seed_means) {
  require(!seed_means.empty(), "config-error", "need at least one seed mean");
  RewardStats st;
  st.per_seed.assign(seed_means.begin(), seed_means.end());
  for (double v : seed_means) st.mean += v;
  st.mean /= static_cast<double>(seed_means.size());
  if (seed_means.size() > 1) {
    double ss = 0.0;
    for (double v : seed_means) ss += (v - st.mean) * (v - st.mean);
    const double sd = std::sqrt(ss / static_cast<double>(seed_means.size() - 1));
    st.stderr_ = sd / std::sqrt(static_cast<double>(seed_means.size()));
  }
  return st;
}

RewardStats reward_eval(const Checkpoint& ckpt, RolloutEnv& env, SchemeId mode, int n_rollouts,
                        std::span<const uint64_t> seeds, const Dataset* rtg_source,
                        double fixed_rtg_target) {
  require(mode == SchemeId::BC || mode == SchemeId::RC, "config-error",
          "reward evaluation supports BC and RC");
  require(n_rollouts >= 1, "config-error", "need at least one rollout per seed");
  require(!seeds.empty(), "config-error", "need at least one evaluation seed");

  RolloutSpec spec;
  spec.scheme = mode;
  if (mode == SchemeId::RC) {
    spec.rtg_target = fixed_rtg_target;
    if (rtg_source != nullptr) {
      require(rtg_source->env == ckpt.config.env, "env-mismatch",
              "RTG source dataset does not match the checkpoint environment");
      spec.rtg_selector = [rtg_source](const std::vector<float>& obs) {
        return select_eval_rtg(obs, *rtg_source).rtg;
      };
    }
  }

  std::vector<double> means;
  means.reserve(seeds.size());
  for (uint64_t seed : seeds) {
    Rng rng(derive_seed(seed, kRewardStream));
    double sum = 0.0;
    for (int i = 0; i < n_rollouts; ++i) {
      sum += conditioned_rollout(ckpt, env, spec, rng).total_reward;
    }
    means.push_back(sum / static_cast<double>(n_rollouts));
  }
  return summarize_seed_means(means);
}

VisitationTable visitation_of(std::span<const Trajectory> trajs, const EnvSpec& env) {
  require(env.state_kind == Modality::discrete && env.action_kind == Modality::discrete,
          "config-error", "visitation tables need a discrete environment");
  require(env.state_cards.size() == 2 && env.action_cards.size() == 1, "config-error",
          "visitation tables expect (agent, key) states and one action factor");
  require(!trajs.empty(), "config-error", "need at least one trajectory");

  const int T = trajs[0].length();
  for (const Trajectory& tr : trajs) {
    require(tr.length() == T, "config-error", "trajectories must share one length");
  }

  VisitationTable v;
  v.T = T;
  v.agent = Mat::Zero(T, env.state_cards[0]);
  v.key = Mat::Zero(T, env.state_cards[1]);
  v.action = Mat::Zero(T, env.action_cards[0]);
  for (const Trajectory& tr : trajs) {
    for (int t = 0; t < T; ++t) {
      v.agent(t, static_cast<int>(tr.states[static_cast<size_t>(t)][0])) += 1.0;
      v.key(t, static_cast<int>(tr.states[static_cast<size_t>(t)][1])) += 1.0;
      v.action(t, static_cast<int>(tr.actions[static_cast<size_t>(t)][0])) += 1.0;
    }
  }
  const double n = static_cast<double>(trajs.size());
  v.agent /= n;
  v.key /= n;
  v.action /= n;
  return v;
}

double tv_between(const VisitationTable& a, const VisitationTable& b) {
  require(a.T == b.T && a.agent.cols() == b.agent.cols() && a.key.cols() == b.key.cols() &&
              a.action.cols() == b.action.cols(),
          "config-error", "visitation tables have different shapes");
  double total = 0.0;
  for (int t = 0; t < a.T; ++t) {
    const double tv_agent = 0.5 * (a.agent.row(t) - b.agent.row(t)).cwiseAbs().sum();
    const double tv_key = 0.5 * (a.key.row(t) - b.key.row(t)).cwiseAbs().sum();
    const double tv_action = 0.5 * (a.action.row(t) - b.action.row(t)).cwiseAbs().sum();
    total += (tv_agent + tv_key + tv_action) / 3.0;
  }
  return total / static_cast<double>(a.T);
}

DistributionComparison distribution_compare(const Checkpoint& ckpt, const DoorKey& env,
                                            const Dataset& data,
                                            std::optional<GridState> start_pin, int n_samples,
                                            uint64_t seed) {
  require(n_samples >= 1, "config-error", "need at least one model sample");
  require(ckpt.config.env == data.env, "env-mismatch",
          "checkpoint environment does not match the dataset");

  std::vector<Trajectory> val;
  for (int vi : data.indices_of(Split::validation)) {
    const Trajectory& tr = data.trajectories[static_cast<size_t>(vi)];
    if (start_pin &&
        (tr.states[0][0] != static_cast<float>(start_pin->agent) ||
         tr.states[0][1] != static_cast<float>(start_pin->key))) {
      continue;
    }
    val.push_back(tr);
  }
  require(!val.empty(), "config-error", "no validation episodes match the start pin");

  GridRollout roll(env, data.env.horizon, start_pin);
  Rng rng(derive_seed(seed, kSampleStream));
  const std::vector<Trajectory> samples = sample_full_trajectories(ckpt, roll, n_samples, rng);

  DistributionComparison cmp;
  cmp.data = visitation_of(val, data.env);
  cmp.model = visitation_of(samples, data.env);
  cmp.tv_distance = tv_between(cmp.data, cmp.model);
  return cmp;
}

void write_distribution_csv(const DistributionComparison& cmp, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), "io-error", "cannot open " + path + " for writing");
  os << "side,timestep,family,index,frequency\n";
  auto dump = [&os](const char* side, const VisitationTable& v) {
    auto family = [&](const char* name, const Mat& m) {
      for (int t = 0; t < m.rows(); ++t) {
        for (int c = 0; c < m.cols(); ++c) {
          os << side << "," << t << "," << name << "," << c << "," << fmt(m(t, c)) << "\n";
        }
      }
    };
    family("agent", v.agent);
    family("key", v.key);
    family("action", v.action);
  };
  dump("data", cmp.data);
  dump("model", cmp.model);
  require(os.good(), "io-error", "failed writing " + path);
}

}  // namespace trajmask
