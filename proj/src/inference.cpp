#include "trajmask/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace trajmask {

namespace {

// Softmax over one factor block of a logit row, with max subtraction.
std::vector<double> softmax_block(const Mat& logits, int row, int off, int cards) {
  double mx = logits(row, off);
  for (int d = 1; d < cards; ++d) mx = std::max(mx, logits(row, off + d));
  std::vector<double> p(static_cast<size_t>(cards));
  double total = 0.0;
  for (int d = 0; d < cards; ++d) {
    p[static_cast<size_t>(d)] = std::exp(logits(row, off + d) - mx);
    total += p[static_cast<size_t>(d)];
  }
  for (double& v : p) v /= total;
  return p;
}

int argmax_block(const Mat& logits, int row, int off, int cards) {
  int pick = 0;
  for (int d = 1; d < cards; ++d) {
    if (logits(row, off + d) > logits(row, off + pick)) pick = d;
  }
  return pick;
}

void require_state_width(const EnvSpec& env, const std::vector<float>& s, const char* what) {
  require(s.size() == static_cast<size_t>(env.state_width), "config-error",
          std::string(what) + " width " + std::to_string(s.size()) + " != state width " +
              std::to_string(env.state_width));
}

}  // namespace

GridRollout::GridRollout(DoorKey env, int horizon, std::optional<GridState> fixed_start)
    : env_(std::move(env)), spec_(env_.env_spec(horizon)), fixed_(fixed_start) {
  if (fixed_) {
    require(fixed_->agent >= 0 && fixed_->agent < 16 && fixed_->key >= 0 && fixed_->key < 16,
            "config-error", "fixed start cells out of range");
  }
}

std::vector<float> GridRollout::reset(Rng& rng) {
  last_reward_ = 0.0;
  if (fixed_) {
    state_ = *fixed_;
  } else {
    const auto& spawn = env_.spawn_cells();
    state_.agent = spawn[static_cast<size_t>(rng.uniform_int(static_cast<int>(spawn.size())))];
    do {
      state_.key = spawn[static_cast<size_t>(rng.uniform_int(static_cast<int>(spawn.size())))];
    } while (state_.key == state_.agent);
  }
  return {static_cast<float>(state_.agent), static_cast<float>(state_.key)};
}

std::vector<float> GridRollout::step(std::span<const float> action) {
  require(action.size() == 1, "invalid-action", "grid actions are a single index");
  const GridState prev = state_;
  state_ = env_.step(prev, static_cast<int>(std::lround(action[0])));
  last_reward_ = env_.reward(prev, state_);
  return {static_cast<float>(state_.agent), static_cast<float>(state_.key)};
}

MazeRollout::MazeRollout(Maze env, int horizon, std::optional<std::pair<int, int>> fixed_cells)
    : env_(std::move(env)), spec_(env_.env_spec(horizon)), fixed_(fixed_cells) {
  if (fixed_) {
    const auto& g = env_.grid();
    const int cells = g.width * g.height;
    require(fixed_->first >= 0 && fixed_->first < cells && fixed_->second >= 0 &&
                fixed_->second < cells,
            "config-error", "fixed start/goal cells out of range");
    require(!g.blocked[static_cast<size_t>(fixed_->first)] &&
                !g.blocked[static_cast<size_t>(fixed_->second)],
            "config-error", "fixed start/goal must be free cells");
    require(fixed_->first != fixed_->second, "config-error", "start and goal cells must differ");
  }
}

std::vector<float> MazeRollout::reset(Rng& rng) {
  last_reward_ = 0.0;
  const auto& g = env_.grid();
  int start = 0, goal = 0;
  if (fixed_) {
    start = fixed_->first;
    goal = fixed_->second;
  } else {
    const auto free = g.free_cells();
    start = free[static_cast<size_t>(rng.uniform_int(static_cast<int>(free.size())))];
    do {
      goal = free[static_cast<size_t>(rng.uniform_int(static_cast<int>(free.size())))];
    } while (goal == start);
  }
  const double j = env_.params().start_jitter;
  state_ = MazeState{};
  state_.pos[0] = start % g.width + 0.5 + rng.uniform(-j, j);
  state_.pos[1] = start / g.width + 0.5 + rng.uniform(-j, j);
  state_.goal[0] = goal % g.width + 0.5 + rng.uniform(-j, j);
  state_.goal[1] = goal / g.width + 0.5 + rng.uniform(-j, j);
  return {static_cast<float>(state_.pos[0]), static_cast<float>(state_.pos[1]),
          static_cast<float>(state_.goal[0]), static_cast<float>(state_.goal[1])};
}

std::vector<float> MazeRollout::step(std::span<const float> action) {
  require(action.size() == 2, "invalid-action", "maze actions have two components");
  const MazeState prev = state_;
  state_ = env_.step(prev, action[0], action[1]);
  last_reward_ = env_.reward(prev, state_);
  return {static_cast<float>(state_.pos[0]), static_cast<float>(state_.pos[1]),
          static_cast<float>(state_.goal[0]), static_cast<float>(state_.goal[1])};
}

RolloutQuery build_rollout_query(const EnvSpec& env, const RolloutSpec& spec, int k, int T, int t,
                                 std::span<const std::vector<float>> states,
                                 std::span<const std::vector<float>> actions,
                                 std::span<const float> rewards) {
  require(k >= 1 && T >= k, "config-error", "episode length must be at least the context length");
  require(t >= 0 && t < T, "config-error", "query timestep outside the episode");
  require(states.size() == static_cast<size_t>(t) + 1 &&
              actions.size() == static_cast<size_t>(t) &&
              rewards.size() == static_cast<size_t>(t),
          "config-error", "history must hold t+1 states and t actions/rewards at step t");

  RolloutQuery q;
  q.w0 = std::clamp(t - k + 1, 0, T - k);
  const int i = t - q.w0;

  q.mask = bc_family_mask_at(SchemeId::BC, k, i, nullptr);
  q.window.start = q.w0;
  q.window.states.assign(static_cast<size_t>(k),
                         std::vector<float>(static_cast<size_t>(env.state_width), 0.f));
  q.window.actions.assign(static_cast<size_t>(k),
                          std::vector<float>(static_cast<size_t>(env.action_width), 0.f));
  q.window.rewards.assign(static_cast<size_t>(k), 0.f);
  for (int j = 0; j <= i; ++j) q.window.states[static_cast<size_t>(j)] = states[q.w0 + j];
  for (int j = 0; j < i; ++j) q.window.actions[static_cast<size_t>(j)] = actions[q.w0 + j];

  switch (spec.scheme) {
    case SchemeId::BC:
      break;
    case SchemeId::GOAL:
      require_state_width(env, spec.goal_state, "goal state");
      if (i < k - 1) {
        q.mask.state_in[static_cast<size_t>(k - 1)] = 1;
        q.window.states[static_cast<size_t>(k - 1)] = spec.goal_state;
      }
      break;
    case SchemeId::RC: {
      double before = 0.0;
      for (int s = 0; s < q.w0; ++s) before += rewards[s];
      q.mask.rtg_in = true;
      q.window.rtg = RtgToken{spec.rtg_target - before, T - q.w0};
      break;
    }
    case SchemeId::WAYPOINT:
      for (const auto& [ts, st] : spec.waypoints) {
        const int j = ts - q.w0;
        if (j <= i || j >= k - 1) continue;  // outside this window's open interval
        require_state_width(env, st, "waypoint state");
        q.mask.state_in[static_cast<size_t>(j)] = 1;
        q.window.states[static_cast<size_t>(j)] = st;
      }
      break;
    default:
      fail("config-error", "conditioned rollouts support BC, GOAL, RC, and WAYPOINT");
  }
  q.mask.validate();
  return q;
}

std::vector<float> decode_action(const EnvSpec& env, const Normalization& norm,
                                 const Mat& action_logits, int row, bool sample, Rng* rng) {
  require(row >= 0 && row < action_logits.rows(), "index-error", "logit row out of range");
  std::vector<float> a;
  a.reserve(static_cast<size_t>(env.action_width));
  if (env.action_kind == Modality::discrete) {
    require(action_logits.cols() == env.action_repr_width(), "env-mismatch",
            "action logit width does not match the environment");
    require(!sample || rng != nullptr, "config-error", "sampling actions needs an rng");
    int off = 0;
    for (int cards : env.action_cards) {
      int pick = 0;
      if (sample) {
        const std::vector<double> p = softmax_block(action_logits, row, off, cards);
        pick = rng->categorical(p);
      } else {
        pick = argmax_block(action_logits, row, off, cards);
      }
      a.push_back(static_cast<float>(pick));
      off += cards;
    }
  } else {
    require(action_logits.cols() == env.action_width, "env-mismatch",
            "action logit width does not match the environment");
    require(norm.action_mean.size() == static_cast<size_t>(env.action_width) &&
                norm.action_std.size() == static_cast<size_t>(env.action_width),
            "env-mismatch", "normalization does not match the action width");
    for (int d = 0; d < env.action_width; ++d) {
      a.push_back(static_cast<float>(action_logits(row, d) * norm.action_std[static_cast<size_t>(d)] +
                                     norm.action_mean[static_cast<size_t>(d)]));
    }
  }
  return a;
}

RolloutResult conditioned_rollout(const Checkpoint& ckpt, RolloutEnv& env, const RolloutSpec& spec,
                                  Rng& rng) {
  const ModelConfig& cfg = ckpt.config;
  require(env.spec() == cfg.env, "env-mismatch",
          "rollout environment does not match the checkpoint");
  const bool supported = spec.scheme == SchemeId::BC || spec.scheme == SchemeId::GOAL ||
                         spec.scheme == SchemeId::RC || spec.scheme == SchemeId::WAYPOINT;
  require(supported, "config-error", "conditioned rollouts support BC, GOAL, RC, and WAYPOINT");

  const int T = spec.horizon < 0 ? cfg.env.horizon : spec.horizon;
  RolloutResult res;
  if (T == 0) return res;
  require(T >= cfg.k, "config-error", "rollout horizon must be at least the context length");

  std::vector<std::vector<float>> states;
  std::vector<std::vector<float>> actions;
  std::vector<float> rewards;
  states.push_back(env.reset(rng));

  RolloutSpec episode = spec;
  if (spec.scheme == SchemeId::RC && spec.rtg_selector) {
    episode.rtg_target = spec.rtg_selector(states[0]);
  }

  for (int t = 0; t < T; ++t) {
    const RolloutQuery q =
        build_rollout_query(cfg.env, episode, cfg.k, T, t, states, actions, rewards);
    const ModelBatch batch =
        make_batch(cfg, std::span<const Window>(&q.window, 1),
                   std::span<const MaskPattern>(&q.mask, 1), ckpt.norm);
    const Forward f = forward(cfg, ckpt.params, batch.X, 1);
    const int row = t - q.w0;
    const std::vector<float> a =
        decode_action(cfg.env, ckpt.norm, f.action_logits, row, spec.sample_actions, &rng);
    states.push_back(env.step(a));
    actions.push_back(a);
    rewards.push_back(static_cast<float>(env.last_reward()));
    res.window_starts.push_back(q.w0);
    res.rtg_fed.push_back(q.mask.rtg_in ? q.window.rtg.rtg
                                        : std::numeric_limits<double>::quiet_NaN());
    res.remaining_fed.push_back(q.mask.rtg_in ? q.window.rtg.remaining : 0);
  }

  res.traj.states.assign(states.begin(), states.begin() + T);
  res.traj.actions = std::move(actions);
  res.traj.rewards = std::move(rewards);
  res.total_reward = std::accumulate(res.traj.rewards.begin(), res.traj.rewards.end(), 0.0);
  EnvSpec episode_env = cfg.env;
  episode_env.horizon = T;
  validate_trajectory(episode_env, res.traj);
  return res;
}

std::vector<Trajectory> sample_full_trajectories(const Checkpoint& ckpt, RolloutEnv& env, int n,
                                                 Rng& rng) {
  require(n >= 0, "config-error", "need a non-negative sample count");
  RolloutSpec spec;
  spec.scheme = SchemeId::BC;
  spec.sample_actions = true;
  std::vector<Trajectory> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(conditioned_rollout(ckpt, env, spec, rng).traj);
  return out;
}

BackwardsResult backwards_infer(const Checkpoint& ckpt, const DoorKey& env,
                                std::span<const std::vector<float>> suffix_states,
                                std::span<const std::vector<float>> suffix_actions, int count,
                                Rng& rng, int max_attempts) {
  const ModelConfig& cfg = ckpt.config;
  require(cfg.env.state_kind == Modality::discrete && cfg.env.action_kind == Modality::discrete,
          "config-error", "backwards inference needs a discrete environment");
  require(cfg.env == env.env_spec(cfg.env.horizon), "env-mismatch",
          "environment does not match the checkpoint");
  require(!suffix_states.empty(), "config-error",
          "backwards inference needs at least one observed state");
  require(suffix_states.size() == suffix_actions.size(), "config-error",
          "need one action per observed suffix state");
  require(count >= 0, "config-error", "need a non-negative step count");
  require(max_attempts >= 1, "config-error", "need at least one sampling attempt");
  for (const auto& s : suffix_states) require_state_width(cfg.env, s, "suffix state");

  // Chain of known steps, oldest first; inferred steps are prepended.
  std::vector<std::vector<float>> st(suffix_states.begin(), suffix_states.end());
  std::vector<std::vector<float>> ac(suffix_actions.begin(), suffix_actions.end());

  for (int n = 0; n < count; ++n) {
    // The query sits just before the window tail holding the chain's oldest
    // (up to) k-1 steps; older chain entries have slid out of the window.
    const int len = std::min(cfg.k - 1, static_cast<int>(st.size()));
    const int query = cfg.k - 1 - len;

    MaskPattern m;
    m.k = cfg.k;
    m.state_in.assign(static_cast<size_t>(cfg.k), 0);
    m.action_in.assign(static_cast<size_t>(cfg.k), 0);
    m.state_out.assign(static_cast<size_t>(cfg.k), 0);
    m.action_out.assign(static_cast<size_t>(cfg.k), 0);
    m.state_out[static_cast<size_t>(query)] = 1;
    m.action_out[static_cast<size_t>(query)] = 1;

    Window w;
    w.start = 0;
    w.states.assign(static_cast<size_t>(cfg.k),
                    std::vector<float>(static_cast<size_t>(cfg.env.state_width), 0.f));
    w.actions.assign(static_cast<size_t>(cfg.k),
                     std::vector<float>(static_cast<size_t>(cfg.env.action_width), 0.f));
    w.rewards.assign(static_cast<size_t>(cfg.k), 0.f);
    for (int j = 0; j < len; ++j) {
      m.state_in[static_cast<size_t>(query + 1 + j)] = 1;
      m.action_in[static_cast<size_t>(query + 1 + j)] = 1;
      w.states[static_cast<size_t>(query + 1 + j)] = st[static_cast<size_t>(j)];
      w.actions[static_cast<size_t>(query + 1 + j)] = ac[static_cast<size_t>(j)];
    }
    m.validate();

    const ModelBatch batch = make_batch(cfg, std::span<const Window>(&w, 1),
                                        std::span<const MaskPattern>(&m, 1), ckpt.norm);
    const Forward f = forward(cfg, ckpt.params, batch.X, 1);
    const std::vector<double> agent_p =
        softmax_block(f.state_logits, query, 0, cfg.env.state_cards[0]);
    const std::vector<double> key_p =
        softmax_block(f.state_logits, query, cfg.env.state_cards[0], cfg.env.state_cards[1]);
    const std::vector<double> action_p =
        softmax_block(f.action_logits, query, 0, cfg.env.action_cards[0]);

    const GridState next{static_cast<int>(std::lround(st.front()[0])),
                         static_cast<int>(std::lround(st.front()[1]))};
    bool accepted = false;
    for (int attempt = 0; attempt < max_attempts && !accepted; ++attempt) {
      const GridState cand{rng.categorical(agent_p), rng.categorical(key_p)};
      const int act = rng.categorical(action_p);
      if (env.step(cand, act) == next) {
        st.insert(st.begin(), {static_cast<float>(cand.agent), static_cast<float>(cand.key)});
        ac.insert(ac.begin(), {static_cast<float>(act)});
        accepted = true;
      }
    }
    require(accepted, "rejection-exhausted",
            "no dynamics-consistent predecessor at inferred step " + std::to_string(n) +
                " after " + std::to_string(max_attempts) + " attempts");
  }

  BackwardsResult out;
  out.states.assign(st.begin(), st.begin() + count);
  out.actions.assign(ac.begin(), ac.begin() + count);
  return out;
}

std::vector<Vec> future_marginals(const Checkpoint& ckpt,
                                  const std::map<int, std::vector<float>>& pinned, int query_t) {
  const ModelConfig& cfg = ckpt.config;
  require(cfg.env.state_kind == Modality::discrete, "config-error",
          "state marginals need a discrete state space");
  require(query_t >= 0 && query_t < cfg.k, "index-error",
          "query timestep outside the context window");
  const auto& cards = cfg.env.state_cards;
  for (const auto& [t, s] : pinned) {
    require(t >= 0 && t < cfg.k, "index-error", "pinned timestep outside the context window");
    require_state_width(cfg.env, s, "pinned state");
    for (size_t d = 0; d < s.size(); ++d) {
      const int cls = static_cast<int>(std::lround(s[d]));
      require(cls >= 0 && cls < cards[d], "index-error", "pinned state class out of range");
    }
  }

  std::vector<Vec> out;
  if (auto it = pinned.find(query_t); it != pinned.end()) {
    for (size_t d = 0; d < cards.size(); ++d) {
      Vec v = Vec::Zero(cards[d]);
      v[static_cast<int>(std::lround(it->second[d]))] = 1.0;
      out.push_back(std::move(v));
    }
    return out;
  }

  MaskPattern m;
  m.k = cfg.k;
  m.state_in.assign(static_cast<size_t>(cfg.k), 0);
  m.action_in.assign(static_cast<size_t>(cfg.k), 0);
  m.state_out.assign(static_cast<size_t>(cfg.k), 0);
  m.action_out.assign(static_cast<size_t>(cfg.k), 0);
  m.state_out[static_cast<size_t>(query_t)] = 1;

  Window w;
  w.start = 0;
  w.states.assign(static_cast<size_t>(cfg.k),
                  std::vector<float>(static_cast<size_t>(cfg.env.state_width), 0.f));
  w.actions.assign(static_cast<size_t>(cfg.k),
                   std::vector<float>(static_cast<size_t>(cfg.env.action_width), 0.f));
  w.rewards.assign(static_cast<size_t>(cfg.k), 0.f);
  for (const auto& [t, s] : pinned) {
    m.state_in[static_cast<size_t>(t)] = 1;
    w.states[static_cast<size_t>(t)] = s;
  }
  m.validate();

  const ModelBatch batch = make_batch(cfg, std::span<const Window>(&w, 1),
                                      std::span<const MaskPattern>(&m, 1), ckpt.norm);
  const Forward f = forward(cfg, ckpt.params, batch.X, 1);
  int off = 0;
  for (int c : cards) {
    const std::vector<double> p = softmax_block(f.state_logits, query_t, off, c);
    Vec v(c);
    for (int d = 0; d < c; ++d) v[d] = p[static_cast<size_t>(d)];
    out.push_back(std::move(v));
    off += c;
  }
  return out;
}

}  // namespace trajmask
