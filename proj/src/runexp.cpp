#include "trajmask/runexp.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <initializer_list>
#include <iterator>
#include <memory>
#include <sstream>
#include <utility>

#include "trajmask/common.hpp"
#include "trajmask/doorkey.hpp"
#include "trajmask/evalbench.hpp"
#include "trajmask/inference.hpp"
#include "trajmask/maze.hpp"
#include "trajmask/seqmodel.hpp"
#include "trajmask/training.hpp"

namespace trajmask {
namespace {

using nlohmann::json;

constexpr const char* kDatasetFormat = "trajmask-dataset v1";
constexpr const char* kCheckpointFormat = "trajmask-checkpoint v1";

// ---------------------------------------------------------------------------
// Config schema. Every key a config may contain is listed here; anything else
// is rejected as unknown-key so typos (and --set against a misspelled path)
// fail loudly instead of being silently ignored.

enum class FieldType {
  integer,    // JSON integer
  number,     // any JSON number
  text,       // string
  boolean,    // bool
  int_list,   // [int, ...]
  num_list,   // [number, ...]
  str_list,   // [string, ...]
  vec_list,   // [[number, ...], ...]
  vec_map,    // {"<timestep>": [number, ...], ...}
  model_list  // [{"id": str, "path": str}, ...]
};

struct FieldSpec {
  const char* key;
  FieldType type;
};

const std::map<std::string, std::vector<FieldSpec>>& section_schema() {
  using T = FieldType;
  static const std::map<std::string, std::vector<FieldSpec>> schema = {
      {"env",
       {{"kind", T::text},
        {"horizon", T::integer},
        {"walls", T::int_list},
        {"door", T::integer},
        {"goal", T::integer},
        {"rows", T::str_list},
        {"dt", T::number},
        {"damping", T::number},
        {"v_max", T::number},
        {"kp", T::number},
        {"kd", T::number},
        {"noise_var", T::number},
        {"start_jitter", T::number}}},
      {"data", {{"path", T::text}, {"n_train", T::integer}, {"n_val", T::integer}}},
      {"model",
       {{"arch", T::text},
        {"k", T::integer},
        {"embed_dim", T::integer},
        {"num_layers", T::integer},
        {"num_heads", T::integer},
        {"mlp_width", T::integer},
        {"dropout", T::number},
        {"action_state_loss_ratio", T::number}}},
      {"regime", {{"kind", T::text}, {"scheme", T::text}, {"waypoint_prob", T::number}}},
      {"train",
       {{"max_epochs", T::integer},
        {"lr", T::number},
        {"batch_size", T::integer},
        {"patience", T::integer},
        {"eval_every", T::integer},
        {"stop_metric", T::text},
        {"stop_rollouts", T::integer}}},
      {"finetune", {{"base", T::text}}},
      {"eval",
       {{"checkpoint", T::text},
        {"models", T::model_list},
        {"tasks", T::str_list},
        {"draws_per_window", T::integer},
        {"mode", T::text},
        {"n_rollouts", T::integer},
        {"n_seeds", T::integer},
        {"rtg_source", T::text},
        {"rtg_target", T::number}}},
      {"rollout",
       {{"scheme", T::text},
        {"n", T::integer},
        {"horizon", T::integer},
        {"sample_actions", T::boolean},
        {"goal", T::num_list},
        {"rtg_target", T::number},
        {"rtg_source", T::text},
        {"waypoints", T::vec_map},
        {"start", T::int_list}}},
      {"backwards",
       {{"suffix_states", T::vec_list},
        {"suffix_actions", T::vec_list},
        {"count", T::integer},
        {"max_attempts", T::integer}}},
      {"marginals", {{"pinned", T::vec_map}, {"query_t", T::integer}}},
      {"compare", {{"n_samples", T::integer}, {"start", T::int_list}}},
  };
  return schema;
}

void check_num_list(const json& v, const std::string& path, bool integers) {
  require(v.is_array(), "config-error", path + " must be an array");
  for (size_t i = 0; i < v.size(); ++i) {
    const json& x = v[i];
    bool ok = integers ? x.is_number_integer() : x.is_number();
    require(ok, "config-error",
            path + "[" + std::to_string(i) + "] must be " + (integers ? "an integer" : "a number"));
  }
}

void check_value(const json& v, const std::string& path, FieldType type) {
  switch (type) {
    case FieldType::integer:
      require(v.is_number_integer(), "config-error", path + " must be an integer");
      return;
    case FieldType::number:
      require(v.is_number(), "config-error", path + " must be a number");
      return;
    case FieldType::text:
      require(v.is_string(), "config-error", path + " must be a string");
      return;
    case FieldType::boolean:
      require(v.is_boolean(), "config-error", path + " must be true or false");
      return;
    case FieldType::int_list:
      check_num_list(v, path, true);
      return;
    case FieldType::num_list:
      check_num_list(v, path, false);
      return;
    case FieldType::str_list:
      require(v.is_array(), "config-error", path + " must be an array");
      for (size_t i = 0; i < v.size(); ++i)
        require(v[i].is_string(), "config-error", path + "[" + std::to_string(i) + "] must be a string");
      return;
    case FieldType::vec_list:
      require(v.is_array(), "config-error", path + " must be an array of number arrays");
      for (size_t i = 0; i < v.size(); ++i) check_num_list(v[i], path + "[" + std::to_string(i) + "]", false);
      return;
    case FieldType::vec_map: {
      require(v.is_object(), "config-error", path + " must map timesteps to number arrays");
      for (const auto& [key, value] : v.items()) {
        bool digits = !key.empty() && key.size() <= 9 &&
                      std::all_of(key.begin(), key.end(), [](char c) { return c >= '0' && c <= '9'; });
        require(digits, "config-error", path + " keys must be timesteps (got '" + key + "')");
        check_num_list(value, path + "." + key, false);
      }
      return;
    }
    case FieldType::model_list: {
      require(v.is_array(), "config-error", path + " must be an array of {id, path} entries");
      for (size_t i = 0; i < v.size(); ++i) {
        const json& m = v[i];
        std::string at = path + "[" + std::to_string(i) + "]";
        require(m.is_object(), "config-error", at + " must be an object with 'id' and 'path'");
        for (const auto& [key, value] : m.items()) {
          require(key == "id" || key == "path", "unknown-key", at + "." + key);
          require(value.is_string(), "config-error", at + "." + key + " must be a string");
        }
        require(m.contains("id") && m.contains("path"), "config-error",
                at + " needs both 'id' and 'path'");
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Typed access into a validated section.

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) const { return j_.at(key); }

  int geti(const char* key, int def) const { return has(key) ? j_.at(key).get<int>() : def; }
  double getd(const char* key, double def) const { return has(key) ? j_.at(key).get<double>() : def; }
  bool getb(const char* key, bool def) const { return has(key) ? j_.at(key).get<bool>() : def; }
  std::string gets(const char* key, const std::string& def) const {
    return has(key) ? j_.at(key).get<std::string>() : def;
  }

  int reqi(const char* key) const {
    need(key);
    return j_.at(key).get<int>();
  }
  std::string reqs(const char* key) const {
    need(key);
    return j_.at(key).get<std::string>();
  }
  const json& reqraw(const char* key) const {
    need(key);
    return j_.at(key);
  }

  std::vector<int> ints(const char* key) const {
    std::vector<int> out;
    for (const json& x : j_.at(key)) out.push_back(x.get<int>());
    return out;
  }
  std::vector<float> floats(const char* key) const {
    std::vector<float> out;
    for (const json& x : j_.at(key)) out.push_back(x.get<float>());
    return out;
  }
  std::vector<std::string> strings(const char* key) const {
    std::vector<std::string> out;
    for (const json& x : j_.at(key)) out.push_back(x.get<std::string>());
    return out;
  }

 private:
  void need(const char* key) const {
    require(has(key), "config-error", path_ + "." + key + " is required");
  }

  const json& j_;
  std::string path_;
};

Section require_section(const json& cfg, const char* name, const std::string& cmd) {
  require(cfg.contains(name), "config-error", cmd + " needs a '" + name + "' config section");
  return Section(cfg.at(name), name);
}

std::vector<std::vector<float>> vec_list_of(const json& j) {
  std::vector<std::vector<float>> out;
  for (const json& row : j) {
    std::vector<float> v;
    for (const json& x : row) v.push_back(x.get<float>());
    out.push_back(std::move(v));
  }
  return out;
}

std::map<int, std::vector<float>> vec_map_of(const json& j) {
  std::map<int, std::vector<float>> out;
  for (const auto& [key, value] : j.items()) {
    std::vector<float> v;
    for (const json& x : value) v.push_back(x.get<float>());
    out[std::stoi(key)] = std::move(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Environment construction from the env section.

struct BuiltEnv {
  std::string kind;
  int horizon = 0;
  std::optional<DoorKey> grid;
  std::optional<Maze> maze;
};

BuiltEnv build_env(const json& cfg, const std::string& cmd) {
  Section e = require_section(cfg, "env", cmd);
  BuiltEnv out;
  out.kind = e.reqs("kind");
  auto forbid = [&](std::initializer_list<const char*> keys, const char* other) {
    for (const char* key : keys)
      require(!e.has(key), "config-error",
              std::string("env.") + key + " only applies to " + other + " environments");
  };
  if (out.kind == "doorkey") {
    forbid({"rows", "dt", "damping", "v_max", "kp", "kd", "noise_var", "start_jitter"}, "maze");
    GridLayout layout;
    if (e.has("walls")) layout.walls = e.ints("walls");
    layout.door = e.geti("door", layout.door);
    layout.goal = e.geti("goal", layout.goal);
    out.grid.emplace(layout);
    out.horizon = e.geti("horizon", 10);
  } else if (out.kind == "maze") {
    forbid({"walls", "door", "goal"}, "doorkey");
    MazeGrid grid = e.has("rows") ? MazeGrid::from_rows(e.strings("rows")) : MazeGrid::canonical();
    MazeParams p;
    p.dt = e.getd("dt", p.dt);
    p.damping = e.getd("damping", p.damping);
    p.v_max = e.getd("v_max", p.v_max);
    p.kp = e.getd("kp", p.kp);
    p.kd = e.getd("kd", p.kd);
    p.noise_var = e.getd("noise_var", p.noise_var);
    p.start_jitter = e.getd("start_jitter", p.start_jitter);
    out.maze.emplace(grid, p);
    out.horizon = e.geti("horizon", 200);
  } else {
    fail("config-error", "env.kind must be 'doorkey' or 'maze' (got '" + out.kind + "')");
  }
  require(out.horizon > 0, "config-error", "env.horizon must be positive");
  return out;
}

void check_env_kind(const BuiltEnv& env, const EnvSpec& spec) {
  require(env.kind == spec.env_id, "env-mismatch",
          "checkpoint expects env '" + spec.env_id + "' but config env.kind is '" + env.kind + "'");
}

/// Closed-loop adapter over the configured environment, matching the
/// checkpoint's spec (in particular its horizon, so spec checks pass).
std::unique_ptr<RolloutEnv> make_adapter(const BuiltEnv& env, const EnvSpec& spec,
                                         std::optional<GridState> grid_start,
                                         std::optional<std::pair<int, int>> maze_cells) {
  check_env_kind(env, spec);
  if (env.grid) return std::make_unique<GridRollout>(*env.grid, spec.horizon, grid_start);
  return std::make_unique<MazeRollout>(*env.maze, spec.horizon, maze_cells);
}

// ---------------------------------------------------------------------------
// Model / regime / training options from their sections.

ModelConfig model_from(const json& cfg, const EnvSpec& env, const std::string& cmd) {
  Section m = require_section(cfg, "model", cmd);
  ModelConfig mc;
  mc.arch = arch_from_string(m.gets("arch", to_string(mc.arch)));
  mc.k = m.geti("k", mc.k);
  mc.embed_dim = m.geti("embed_dim", mc.embed_dim);
  mc.num_layers = m.geti("num_layers", mc.num_layers);
  mc.num_heads = m.geti("num_heads", mc.num_heads);
  mc.mlp_width = m.geti("mlp_width", mc.mlp_width);
  mc.dropout = m.getd("dropout", mc.dropout);
  mc.action_state_loss_ratio = m.getd("action_state_loss_ratio", mc.action_state_loss_ratio);
  mc.env = env;
  mc.validate();
  return mc;
}

RegimeSpec regime_from(const json& cfg, const std::string& cmd) {
  Section r = require_section(cfg, "regime", cmd);
  RegimeSpec spec;
  std::string kind = r.reqs("kind");
  if (kind == "single-task") {
    spec.kind = RegimeSpec::Kind::single_task;
    spec.scheme = scheme_from_string(r.reqs("scheme"));
  } else if (kind == "multi-task" || kind == "random-mask") {
    spec.kind = kind == "multi-task" ? RegimeSpec::Kind::multi_task : RegimeSpec::Kind::random_mask;
    require(!r.has("scheme"), "config-error", "regime.scheme only applies to single-task regimes");
  } else {
    fail("config-error", "regime.kind must be 'single-task', 'multi-task', or 'random-mask'");
  }
  spec.waypoint.prob = r.getd("waypoint_prob", spec.waypoint.prob);
  return spec;
}

/// Training knobs. stop_metric "loss" keeps the default masked-loss early
/// stop; "reward" evaluates mean return over a fixed batch of rollouts
/// instead (return-conditioned models roll the RC protocol with targets
/// selected from the training data, everything else the plain policy).
TrainOptions train_opts_from(const json& cfg, const std::string& cmd, uint64_t seed,
                             const std::string& dir, const Dataset& data, const RegimeSpec& regime) {
  Section t = require_section(cfg, "train", cmd);
  TrainOptions opt;
  opt.max_epochs = t.geti("max_epochs", opt.max_epochs);
  opt.lr = t.getd("lr", opt.lr);
  opt.batch_size = t.geti("batch_size", opt.batch_size);
  opt.patience = t.geti("patience", opt.patience);
  opt.seed = seed;
  opt.curve_path = dir + "/curve.csv";

  std::string stop = t.gets("stop_metric", "loss");
  if (stop == "loss") {
    opt.eval_every = t.geti("eval_every", 1);
  } else if (stop == "reward") {
    opt.eval_every = t.geti("eval_every", 10);
    int rollouts = t.geti("stop_rollouts", 50);
    require(rollouts > 0, "config-error", "train.stop_rollouts must be positive");
    BuiltEnv env = build_env(cfg, cmd + " with train.stop_metric=reward");
    check_env_kind(env, data.env);
    std::shared_ptr<RolloutEnv> adapter = make_adapter(env, data.env, {}, {});
    bool rc = regime.kind == RegimeSpec::Kind::single_task && regime.scheme == SchemeId::RC;
    std::vector<uint64_t> seeds = {seed};
    const Dataset* source = &data;
    opt.eval_metric = [adapter, seeds, rollouts, rc, source](const ModelConfig& mc,
                                                             const ParamStore& params,
                                                             const Normalization& norm) {
      Checkpoint probe{mc, params, norm, "", 0};
      RewardStats stats =
          reward_eval(probe, *adapter, rc ? SchemeId::RC : SchemeId::BC, rollouts,
                      std::span<const uint64_t>(seeds.data(), seeds.size()), rc ? source : nullptr);
      return -stats.mean;  // the trainer minimizes
    };
  } else {
    fail("config-error", "train.stop_metric must be 'loss' or 'reward'");
  }
  return opt;
}

// ---------------------------------------------------------------------------
// Command bodies. Each fills the outcome's artifacts (name -> path) and
// human-readable notes; the caller writes the manifest afterwards.

void cmd_gen_data(const json& cfg, uint64_t seed, RunOutcome& out) {
  BuiltEnv env = build_env(cfg, "gen-data");
  Section d = require_section(cfg, "data", "gen-data");
  int n_train = d.reqi("n_train");
  int n_val = d.reqi("n_val");
  Dataset ds = env.grid ? generate_grid_dataset(*env.grid, n_train, n_val, env.horizon, seed)
                        : generate_maze_dataset(*env.maze, n_train, n_val, env.horizon, seed);
  std::string path = out.dir + "/data.traj";
  save_dataset(ds, path);
  out.artifacts["data.traj"] = path;
  out.notes.push_back("generated " + env.kind + " dataset: " + std::to_string(n_train) + " train + " +
                      std::to_string(n_val) + " validation episodes of length " +
                      std::to_string(env.horizon));
}

void cmd_train(const json& cfg, uint64_t seed, RunOutcome& out, bool is_finetune) {
  const std::string cmd = is_finetune ? "finetune" : "train";
  Section d = require_section(cfg, "data", cmd);
  Dataset data = load_dataset(d.reqs("path"));
  RegimeSpec regime = regime_from(cfg, cmd);
  TrainOptions opt = train_opts_from(cfg, cmd, seed, out.dir, data, regime);

  TrainResult res;
  if (is_finetune) {
    Section ft = require_section(cfg, "finetune", cmd);
    Checkpoint base = load_checkpoint(ft.reqs("base"));
    // The architecture comes from the base checkpoint. A model section is
    // allowed (configs are often shared with the original train run) but
    // must then describe that checkpoint exactly.
    if (cfg.contains("model")) {
      ModelConfig described = model_from(cfg, base.config.env, cmd);
      require(described == base.config, "config-error",
              "the model section disagrees with the finetune.base checkpoint; "
              "drop it or make it match");
    }
    res = finetune(base, data, regime, opt);
  } else {
    ModelConfig mc = model_from(cfg, data.env, cmd);
    require(mc.k <= data.env.horizon, "config-error",
            "model.k=" + std::to_string(mc.k) + " exceeds the episode length " +
                std::to_string(data.env.horizon));
    res = train(mc, data, regime, opt);
  }

  std::string ckpt_path = out.dir + "/model.ckpt";
  save_checkpoint(res.best, ckpt_path);
  out.artifacts["model.ckpt"] = ckpt_path;
  out.artifacts["curve.csv"] = opt.curve_path;
  std::ostringstream note;
  note << (is_finetune ? "finetuned" : "trained") << " '" << res.best.regime << "': best epoch "
       << res.best_epoch << " with validation metric " << res.best_metric << " (" << res.epochs_run
       << " epochs run)";
  out.notes.push_back(note.str());
}

void cmd_eval_loss(const json& cfg, uint64_t seed, RunOutcome& out, bool with_heatmap) {
  const std::string cmd = with_heatmap ? "heatmap" : "eval-loss";
  Section d = require_section(cfg, "data", cmd);
  Dataset data = load_dataset(d.reqs("path"));
  Section e = require_section(cfg, "eval", cmd);

  std::vector<EvalModel> models;
  for (const json& m : e.reqraw("models")) {
    EvalModel em;
    em.model_id = m.at("id").get<std::string>();
    em.ckpt = load_checkpoint(m.at("path").get<std::string>());
    models.push_back(std::move(em));
  }
  require(!models.empty(), "config-error", cmd + " needs at least one entry in eval.models");

  std::vector<SchemeId> tasks;
  if (e.has("tasks")) {
    for (const std::string& s : e.strings("tasks")) tasks.push_back(scheme_from_string(s));
    require(!tasks.empty(), "config-error", "eval.tasks must not be empty");
  } else {
    tasks.assign(std::begin(kConcreteSchemes), std::end(kConcreteSchemes));
  }

  EvalReport report = cross_task_eval(models, tasks, data, seed, e.geti("draws_per_window", 16));
  std::string rpath = out.dir + "/report.csv";
  write_report_csv(report, rpath);
  out.artifacts["report.csv"] = rpath;
  out.notes.push_back("evaluated " + std::to_string(models.size()) + " model(s) on " +
                      std::to_string(tasks.size()) + " task(s): " + std::to_string(report.rows.size()) +
                      " report rows");

  if (with_heatmap) {
    Heatmap h = assemble_heatmap(report);
    std::string hpath = out.dir + "/heatmap.csv";
    write_heatmap_csv(h, hpath);
    out.artifacts["heatmap.csv"] = hpath;
    std::ostringstream note;
    note << "heatmap " << h.row_labels.size() << "x" << h.col_labels.size() << " (rows:";
    for (const std::string& r : h.row_labels) note << " " << r;
    note << "; columns:";
    for (const std::string& c : h.col_labels) note << " " << c;
    note << ")";
    out.notes.push_back(note.str());
  }
}

void cmd_eval_reward(const json& cfg, uint64_t seed, RunOutcome& out) {
  Section e = require_section(cfg, "eval", "eval-reward");
  std::string ckpt_path = e.reqs("checkpoint");
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  BuiltEnv env = build_env(cfg, "eval-reward");
  std::unique_ptr<RolloutEnv> adapter = make_adapter(env, ckpt.config.env, {}, {});

  SchemeId mode = scheme_from_string(e.gets("mode", "BC"));
  int n_rollouts = e.geti("n_rollouts", 200);
  int n_seeds = e.geti("n_seeds", 3);
  require(n_seeds > 0, "config-error", "eval.n_seeds must be positive");
  std::vector<uint64_t> seeds(n_seeds);
  for (int i = 0; i < n_seeds; ++i) seeds[i] = seed + static_cast<uint64_t>(i);

  std::optional<Dataset> rtg_source;
  if (e.has("rtg_source")) rtg_source = load_dataset(e.reqs("rtg_source"));

  RewardStats stats = reward_eval(ckpt, *adapter, mode, n_rollouts, seeds,
                                  rtg_source ? &*rtg_source : nullptr, e.getd("rtg_target", 0.0));

  std::string model_id = std::filesystem::path(ckpt_path).stem().string();
  std::string schemes = schemes_of_regime(ckpt.regime);
  EvalReport report;
  for (int i = 0; i < n_seeds; ++i)
    report.add({model_id, ckpt.regime, schemes, to_string(mode), seeds[i], "reward_mean",
                stats.per_seed[i]});
  report.add({model_id, ckpt.regime, schemes, to_string(mode), seed, "reward_mean_avg", stats.mean});
  report.add({model_id, ckpt.regime, schemes, to_string(mode), seed, "reward_se", stats.stderr_});
  std::string rpath = out.dir + "/rewards.csv";
  write_report_csv(report, rpath);
  out.artifacts["rewards.csv"] = rpath;

  std::ostringstream note;
  note << to_string(mode) << " reward: mean " << stats.mean << ", se " << stats.stderr_ << " over "
       << n_seeds << " seed(s) x " << n_rollouts << " rollout(s)";
  out.notes.push_back(note.str());
}

void write_rollout_csv(const std::vector<RolloutResult>& results, const EnvSpec& env,
                       const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "io-error", "cannot write " + path);
  f << "episode,t,w0,reward,rtg_in,remaining_in";
  for (int a = 0; a < env.action_width; ++a) f << ",action" << a;
  f << "\n" << std::setprecision(17);
  for (size_t e = 0; e < results.size(); ++e) {
    const RolloutResult& res = results[e];
    for (int t = 0; t < res.traj.length(); ++t) {
      f << e << "," << t << "," << res.window_starts[t] << "," << res.traj.rewards[t] << ",";
      if (!std::isnan(res.rtg_fed[t])) f << res.rtg_fed[t];
      f << "," << res.remaining_fed[t];
      for (float a : res.traj.actions[t]) f << "," << a;
      f << "\n";
    }
  }
  f.flush();
  require(f.good(), "io-error", "failed writing " + path);
}

void cmd_rollout(const json& cfg, uint64_t seed, RunOutcome& out) {
  Section e = require_section(cfg, "eval", "rollout");
  Checkpoint ckpt = load_checkpoint(e.reqs("checkpoint"));
  BuiltEnv env = build_env(cfg, "rollout");
  check_env_kind(env, ckpt.config.env);
  Section r = require_section(cfg, "rollout", "rollout");

  std::optional<GridState> grid_start;
  std::optional<std::pair<int, int>> maze_cells;
  if (r.has("start")) {
    std::vector<int> start = r.ints("start");
    require(start.size() == 2, "config-error",
            "rollout.start must be [agent, key] cells (doorkey) or [start, goal] cells (maze)");
    if (env.grid)
      grid_start = GridState{start[0], start[1]};
    else
      maze_cells = std::make_pair(start[0], start[1]);
  }
  std::unique_ptr<RolloutEnv> adapter = make_adapter(env, ckpt.config.env, grid_start, maze_cells);

  RolloutSpec spec;
  spec.scheme = scheme_from_string(r.gets("scheme", "BC"));
  spec.horizon = r.geti("horizon", -1);
  require(spec.horizon != 0, "config-error", "rollout.horizon 0 writes nothing; use a positive horizon");
  spec.sample_actions = r.getb("sample_actions", false);
  if (r.has("goal")) spec.goal_state = r.floats("goal");
  spec.rtg_target = r.getd("rtg_target", 0.0);
  std::optional<Dataset> rtg_source;
  if (r.has("rtg_source")) {
    rtg_source = load_dataset(r.reqs("rtg_source"));
    const Dataset& source = *rtg_source;
    spec.rtg_selector = [&source](const std::vector<float>& obs) {
      return select_eval_rtg(obs, source).rtg;
    };
  }
  if (r.has("waypoints")) spec.waypoints = vec_map_of(r.raw("waypoints"));
  int n = r.geti("n", 1);
  require(n > 0, "config-error", "rollout.n must be positive");

  Rng rng(seed);
  std::vector<RolloutResult> results;
  results.reserve(n);
  for (int i = 0; i < n; ++i) results.push_back(conditioned_rollout(ckpt, *adapter, spec, rng));

  Dataset dump;
  dump.env = ckpt.config.env;
  dump.env.horizon = results.front().traj.length();
  dump.seed = seed;
  for (const RolloutResult& res : results) dump.trajectories.push_back(res.traj);
  dump.split.assign(results.size(), Split::train);
  dump.norm = ckpt.norm;
  std::string tpath = out.dir + "/rollouts.traj";
  save_dataset(dump, tpath);
  out.artifacts["rollouts.traj"] = tpath;

  std::string cpath = out.dir + "/rollouts.csv";
  write_rollout_csv(results, ckpt.config.env, cpath);
  out.artifacts["rollouts.csv"] = cpath;

  for (int i = 0; i < n; ++i) {
    std::ostringstream note;
    note << "episode " << i << ": return " << results[i].total_reward << " over "
         << results[i].traj.length() << " steps";
    out.notes.push_back(note.str());
  }
}

void write_backwards_csv(const BackwardsResult& res,
                         std::span<const std::vector<float>> suffix_states,
                         std::span<const std::vector<float>> suffix_actions, const EnvSpec& env,
                         const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "io-error", "cannot write " + path);
  f << "step,side";
  for (int s = 0; s < env.state_width; ++s) f << ",state" << s;
  for (int a = 0; a < env.action_width; ++a) f << ",action" << a;
  f << "\n" << std::setprecision(17);
  auto row = [&](int step, const char* side, const std::vector<float>& state,
                 const std::vector<float>& action) {
    f << step << "," << side;
    for (float v : state) f << "," << v;
    for (float v : action) f << "," << v;
    f << "\n";
  };
  int step = 0;
  for (size_t i = 0; i < res.states.size(); ++i) row(step++, "inferred", res.states[i], res.actions[i]);
  for (size_t i = 0; i < suffix_states.size(); ++i)
    row(step++, "observed", suffix_states[i], suffix_actions[i]);
  f.flush();
  require(f.good(), "io-error", "failed writing " + path);
}

void cmd_backwards(const json& cfg, uint64_t seed, RunOutcome& out) {
  Section e = require_section(cfg, "eval", "backwards");
  Checkpoint ckpt = load_checkpoint(e.reqs("checkpoint"));
  BuiltEnv env = build_env(cfg, "backwards");
  require(env.grid.has_value(), "config-error", "backwards inference supports doorkey environments only");
  check_env_kind(env, ckpt.config.env);
  Section b = require_section(cfg, "backwards", "backwards");
  std::vector<std::vector<float>> suffix_states = vec_list_of(b.reqraw("suffix_states"));
  std::vector<std::vector<float>> suffix_actions = vec_list_of(b.reqraw("suffix_actions"));
  int count = b.reqi("count");
  int max_attempts = b.geti("max_attempts", 256);

  Rng rng(seed);
  BackwardsResult res =
      backwards_infer(ckpt, *env.grid, suffix_states, suffix_actions, count, rng, max_attempts);

  std::string path = out.dir + "/backwards.csv";
  write_backwards_csv(res, suffix_states, suffix_actions, ckpt.config.env, path);
  out.artifacts["backwards.csv"] = path;

  for (size_t i = 0; i < res.states.size(); ++i) {
    std::ostringstream note;
    note << "t=" << i << " inferred: state (";
    for (size_t s = 0; s < res.states[i].size(); ++s) note << (s ? ", " : "") << res.states[i][s];
    note << "), action";
    for (float a : res.actions[i]) note << " " << a;
    out.notes.push_back(note.str());
  }
}

void cmd_marginals(const json& cfg, RunOutcome& out) {
  Section e = require_section(cfg, "eval", "marginals");
  Checkpoint ckpt = load_checkpoint(e.reqs("checkpoint"));
  Section m = require_section(cfg, "marginals", "marginals");
  std::map<int, std::vector<float>> pinned;
  if (m.has("pinned")) pinned = vec_map_of(m.raw("pinned"));
  int query_t = m.reqi("query_t");

  std::vector<Vec> dists = future_marginals(ckpt, pinned, query_t);

  std::string path = out.dir + "/marginals.csv";
  std::ofstream f(path);
  require(f.good(), "io-error", "cannot write " + path);
  f << "factor,index,probability\n" << std::setprecision(17);
  for (size_t factor = 0; factor < dists.size(); ++factor)
    for (int i = 0; i < dists[factor].size(); ++i)
      f << factor << "," << i << "," << dists[factor](i) << "\n";
  f.flush();
  require(f.good(), "io-error", "failed writing " + path);
  out.artifacts["marginals.csv"] = path;

  for (size_t factor = 0; factor < dists.size(); ++factor) {
    int best = 0;
    dists[factor].maxCoeff(&best);
    std::ostringstream note;
    note << "factor " << factor << " at t=" << query_t << ": mode " << best << " with probability "
         << dists[factor](best);
    out.notes.push_back(note.str());
  }
}

void cmd_compare_dist(const json& cfg, uint64_t seed, RunOutcome& out) {
  Section e = require_section(cfg, "eval", "compare-dist");
  Checkpoint ckpt = load_checkpoint(e.reqs("checkpoint"));
  BuiltEnv env = build_env(cfg, "compare-dist");
  require(env.grid.has_value(), "config-error", "compare-dist supports doorkey environments only");
  check_env_kind(env, ckpt.config.env);
  Section d = require_section(cfg, "data", "compare-dist");
  Dataset data = load_dataset(d.reqs("path"));
  Section c = require_section(cfg, "compare", "compare-dist");
  int n_samples = c.geti("n_samples", 500);
  std::optional<GridState> pin;
  if (c.has("start")) {
    std::vector<int> start = c.ints("start");
    require(start.size() == 2, "config-error", "compare.start must be [agent, key] cells");
    pin = GridState{start[0], start[1]};
  }

  DistributionComparison cmp = distribution_compare(ckpt, *env.grid, data, pin, n_samples, seed);
  std::string path = out.dir + "/distribution.csv";
  write_distribution_csv(cmp, path);
  out.artifacts["distribution.csv"] = path;

  std::ostringstream note;
  note << "total-variation distance " << cmp.tv_distance << " (validation data vs " << n_samples
       << " sampled episodes)";
  out.notes.push_back(note.str());
}

// ---------------------------------------------------------------------------
// Shared JSON file plumbing.

json parse_json_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "missing-file", "cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& err) {
    std::string msg = err.what();
    size_t pos = msg.find("] ");
    if (pos != std::string::npos) msg = msg.substr(pos + 2);
    fail("config-error", path + ": " + msg);
  }
}

}  // namespace

json load_config_file(const std::string& path) {
  json cfg = parse_json_file(path);
  require(cfg.is_object(), "config-error", path + ": config root must be a JSON object");
  return cfg;
}

void apply_override(json& cfg, const std::string& assignment) {
  size_t eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, "config-error",
          "override must look like section.key=value (got '" + assignment + "')");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);
  std::string pointer = "/";
  pointer.reserve(path.size() + 1);
  for (char c : path) pointer += (c == '.') ? '/' : c;
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  cfg[json::json_pointer(pointer)] = std::move(parsed);
}

void validate_config(const json& cfg) {
  require(cfg.is_object(), "config-error", "config root must be a JSON object");
  const auto& schema = section_schema();
  for (const auto& [key, value] : cfg.items()) {
    if (key == "out_dir") {
      require(value.is_string(), "config-error", "out_dir must be a string");
      continue;
    }
    auto it = schema.find(key);
    require(it != schema.end(), "unknown-key", key);
    require(value.is_object(), "config-error", key + " must be an object section");
    for (const auto& [fkey, fval] : value.items()) {
      std::string path = key + "." + fkey;
      const FieldSpec* spec = nullptr;
      for (const FieldSpec& f : it->second)
        if (fkey == f.key) {
          spec = &f;
          break;
        }
      require(spec != nullptr, "unknown-key", path);
      check_value(fval, path, spec->type);
    }
  }
}

uint64_t run_hash(const std::string& command, const json& cfg, std::optional<uint64_t> seed) {
  Fnv1a h;
  h.update(command);
  h.update("\n");
  h.update(cfg.dump());
  h.update("\n");
  h.update(seed ? "seed=" + std::to_string(*seed) : std::string("seed=none"));
  return h.digest();
}

Manifest load_manifest(const std::string& path) {
  json m = parse_json_file(path);
  require(m.is_object(), "manifest-error", path + ": manifest root must be an object");
  for (const char* key : {"command", "config", "run_hash", "artifacts", "versions"})
    require(m.contains(key), "manifest-error", path + ": manifest lacks '" + std::string(key) + "'");
  require(m.at("command").is_string(), "manifest-error", path + ": command must be a string");
  require(m.at("config").is_object(), "manifest-error", path + ": config must be an object");
  require(m.at("run_hash").is_string(), "manifest-error", path + ": run_hash must be a string");
  require(m.at("artifacts").is_object(), "manifest-error", path + ": artifacts must be an object");
  require(m.at("versions").is_object(), "manifest-error", path + ": versions must be an object");

  Manifest out;
  out.command = m.at("command").get<std::string>();
  out.config = m.at("config");
  if (m.contains("seed")) {
    require(m.at("seed").is_number_integer() || m.at("seed").is_number_unsigned(), "manifest-error",
            path + ": seed must be an integer");
    out.seed = m.at("seed").get<uint64_t>();
  }
  out.hash = m.at("run_hash").get<std::string>();
  for (const auto& [name, art] : m.at("artifacts").items()) {
    require(art.is_object() && art.contains("fnv1a") && art.at("fnv1a").is_string(), "manifest-error",
            path + ": artifact '" + name + "' lacks its fnv1a hash");
    out.artifacts[name] = art.at("fnv1a").get<std::string>();
    if (art.value("volatile", false)) out.volatile_artifacts.push_back(name);
  }
  for (const auto& [key, value] : m.at("versions").items()) {
    require(value.is_string(), "manifest-error", path + ": versions entries must be strings");
    out.versions[key] = value.get<std::string>();
  }
  return out;
}

RunOutcome run_command(const std::string& command, json cfg, std::optional<uint64_t> seed) {
  static const std::vector<std::string> kStochastic = {
      "gen-data", "train",     "finetune",  "eval-loss",   "heatmap",
      "rollout",  "backwards", "marginals", "eval-reward", "compare-dist"};
  require(std::find(kStochastic.begin(), kStochastic.end(), command) != kStochastic.end(),
          "config-error", "unknown command '" + command + "'");
  validate_config(cfg);
  if (command == "marginals")
    require(!seed.has_value(), "config-error", "marginals is deterministic and takes no --seed");
  else
    require(seed.has_value(), "config-error", command + " is stochastic and needs --seed");
  require(cfg.contains("out_dir"), "config-error", "config needs out_dir");

  uint64_t hash = run_hash(command, cfg, seed);
  std::string dir = cfg.at("out_dir").get<std::string>() + "-" + hex_u64(hash);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, "io-error", "cannot create run directory " + dir + ": " + ec.message());

  RunOutcome out;
  out.dir = dir;
  out.manifest_path = dir + "/manifest.json";
  std::vector<std::string> volatiles;

  if (command == "gen-data") {
    cmd_gen_data(cfg, *seed, out);
  } else if (command == "train" || command == "finetune") {
    cmd_train(cfg, *seed, out, command == "finetune");
    volatiles.push_back("curve.csv");  // carries wall-clock timings
  } else if (command == "eval-loss" || command == "heatmap") {
    cmd_eval_loss(cfg, *seed, out, command == "heatmap");
  } else if (command == "eval-reward") {
    cmd_eval_reward(cfg, *seed, out);
  } else if (command == "rollout") {
    cmd_rollout(cfg, *seed, out);
  } else if (command == "backwards") {
    cmd_backwards(cfg, *seed, out);
  } else if (command == "marginals") {
    cmd_marginals(cfg, out);
  } else {
    cmd_compare_dist(cfg, *seed, out);
  }

  json manifest;
  manifest["command"] = command;
  manifest["config"] = cfg;
  if (seed) manifest["seed"] = *seed;
  manifest["run_hash"] = hex_u64(hash);
  json artifacts = json::object();
  for (const auto& [name, path] : out.artifacts) {
    json art;
    art["path"] = name;  // relative to the manifest's directory
    art["fnv1a"] = hex_u64(fnv1a_file(path));
    if (std::find(volatiles.begin(), volatiles.end(), name) != volatiles.end())
      art["volatile"] = true;
    artifacts[name] = art;
  }
  manifest["artifacts"] = artifacts;
  manifest["versions"] = {{"workbench", kWorkbenchVersion},
                          {"dataset_format", kDatasetFormat},
                          {"checkpoint_format", kCheckpointFormat}};
  std::ofstream mf(out.manifest_path);
  require(mf.good(), "io-error", "cannot write " + out.manifest_path);
  mf << manifest.dump(2) << "\n";
  mf.flush();
  require(mf.good(), "io-error", "failed writing " + out.manifest_path);
  return out;
}

std::string inspect_file(const std::string& path) {
  std::ifstream probe(path);
  require(probe.good(), "missing-file", "cannot open " + path);
  std::string first;
  std::getline(probe, first);
  probe.close();

  std::ostringstream os;
  auto render_env = [&os](const EnvSpec& e) {
    os << "env: " << e.env_id << " (state " << to_string(e.state_kind) << " x" << e.state_width
       << ", action " << to_string(e.action_kind) << " x" << e.action_width << ", horizon "
       << e.horizon << ")\n";
  };

  if (first.rfind("trajmask-dataset", 0) == 0) {
    Dataset d = load_dataset(path);
    os << "file: dataset (" << first << ")\n";
    render_env(d.env);
    os << "episodes: " << d.indices_of(Split::train).size() << " train + "
       << d.indices_of(Split::validation).size() << " validation\n";
    os << "seed: " << d.seed << "\n";
  } else if (first.rfind("trajmask-checkpoint", 0) == 0) {
    Checkpoint c = load_checkpoint(path);
    os << "file: checkpoint (" << first << ")\n";
    os << "arch: " << to_string(c.config.arch) << ", context k=" << c.config.k << "\n";
    os << "shape: embed " << c.config.embed_dim << ", layers " << c.config.num_layers << ", heads "
       << c.config.num_heads << ", mlp " << c.config.mlp_width << "\n";
    os << "loss: action + " << c.config.action_state_loss_ratio << " * state, dropout "
       << c.config.dropout << "\n";
    render_env(c.config.env);
    os << "regime: " << c.regime << "\n";
    os << "seed: " << c.seed << "\n";
    os << "parameters: " << c.params.scalar_count() << "\n";
  } else {
    Manifest m;
    try {
      m = load_manifest(path);
    } catch (const Error&) {
      fail("format-error", path + " is not a dataset, checkpoint, or run manifest");
    }
    os << "file: run manifest\n";
    os << "command: " << m.command << "\n";
    if (m.seed)
      os << "seed: " << *m.seed << "\n";
    else
      os << "seed: (none)\n";
    os << "run_hash: " << m.hash << "\n";
    for (const auto& [key, value] : m.versions) os << "version " << key << ": " << value << "\n";
    for (const auto& [name, hashhex] : m.artifacts) {
      bool vol = std::find(m.volatile_artifacts.begin(), m.volatile_artifacts.end(), name) !=
                 m.volatile_artifacts.end();
      os << "artifact: " << name << " fnv1a " << hashhex << (vol ? " (volatile)" : "") << "\n";
    }
  }
  return os.str();
}

}  // namespace trajmask
