#include "trajmask/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "doctest.h"
#include "trajmask/doorkey.hpp"
#include "trajmask/maze.hpp"

using namespace trajmask;

namespace {

ModelConfig tiny_config(Arch arch, const EnvSpec& env) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.k = 3;
  cfg.embed_dim = 8;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.mlp_width = 16;
  cfg.dropout = 0.0;
  cfg.env = env;
  return cfg;
}

Normalization identity_norm(const EnvSpec& env) {
  Normalization n;
  n.state_mean.assign(env.state_width, 0.0f);
  n.state_std.assign(env.state_width, 1.0f);
  n.action_mean.assign(env.action_width, 0.0f);
  n.action_std.assign(env.action_width, 1.0f);
  return n;
}

/// Hand-built single-row batch so loss values can be checked in closed form.
ModelBatch stub_batch(const ModelConfig& cfg, bool state_target, bool action_target) {
  ModelBatch b;
  b.B = 1;
  b.k = 1;
  b.X = Mat::Zero(1, cfg.input_width());
  b.state_tgt = Mat::Zero(1, cfg.state_target_width());
  b.action_tgt = Mat::Zero(1, cfg.action_target_width());
  b.state_out = {static_cast<uint8_t>(state_target)};
  b.action_out = {static_cast<uint8_t>(action_target)};
  return b;
}

Window random_window(const EnvSpec& env, int k, Rng& rng) {
  Window w;
  w.start = 0;
  for (int t = 0; t < k; ++t) {
    std::vector<float> s(env.state_width), a(env.action_width);
    for (int i = 0; i < env.state_width; ++i)
      s[i] = env.state_kind == Modality::discrete
                 ? static_cast<float>(rng.uniform_int(env.state_cards[i]))
                 : static_cast<float>(rng.uniform(-2.0, 2.0));
    for (int i = 0; i < env.action_width; ++i)
      a[i] = env.action_kind == Modality::discrete
                 ? static_cast<float>(rng.uniform_int(env.action_cards[i]))
                 : static_cast<float>(rng.uniform(-1.0, 1.0));
    w.states.push_back(std::move(s));
    w.actions.push_back(std::move(a));
    w.rewards.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  }
  w.rtg = RtgToken{rng.uniform(-3.0, 3.0), env.horizon};
  return w;
}

TrainOptions micro_options(uint64_t seed, int epochs) {
  TrainOptions opt;
  opt.max_epochs = epochs;
  opt.lr = 3e-3;
  opt.batch_size = 10;
  opt.seed = seed;
  return opt;
}

}  // namespace

TEST_CASE("cross-entropy on uniform two-way logits is ln 2") {
  ModelConfig cfg = tiny_config(Arch::bidirectional, EnvSpec{});
  cfg.env.env_id = "toy";
  cfg.env.state_kind = Modality::discrete;
  cfg.env.state_width = 1;
  cfg.env.state_cards = {2};
  cfg.env.action_kind = Modality::discrete;
  cfg.env.action_width = 1;
  cfg.env.action_cards = {2};
  cfg.env.horizon = 4;

  ModelBatch b = stub_batch(cfg, false, true);
  const Mat sl = Mat::Zero(1, 2), al = Mat::Zero(1, 2);
  const LossResult r = masked_loss(cfg, sl, al, b);
  CHECK(r.action_term == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(r.state_term == 0.0);
  CHECK(r.total == r.action_term);
  CHECK(r.action_targets == 1);
  CHECK(r.state_targets == 0);
  CHECK(r.d_action(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(r.d_action(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.d_state.isZero());
}

TEST_CASE("gridworld state loss sums both factor cross-entropies") {
  ModelConfig cfg = tiny_config(Arch::bidirectional, DoorKey().env_spec(10));
  cfg.action_state_loss_ratio = 0.5;
  ModelBatch b = stub_batch(cfg, true, false);
  b.state_tgt(0, 0) = 5;  // agent cell
  b.state_tgt(0, 1) = 9;  // key cell
  const Mat sl = Mat::Zero(1, 32), al = Mat::Zero(1, 4);
  const LossResult r = masked_loss(cfg, sl, al, b);
  CHECK(r.state_term == doctest::Approx(2.0 * std::log(16.0)).epsilon(1e-12));
  CHECK(r.action_term == 0.0);
  CHECK(r.total == doctest::Approx(0.5 * 2.0 * std::log(16.0)).epsilon(1e-12));
  // Gradient: softmax (1/16 everywhere) minus one-hot, scaled by the ratio.
  CHECK(r.d_state(0, 5) == doctest::Approx(0.5 * (1.0 / 16.0 - 1.0)).epsilon(1e-12));
  CHECK(r.d_state(0, 16 + 9) == doctest::Approx(0.5 * (1.0 / 16.0 - 1.0)).epsilon(1e-12));
  CHECK(r.d_state(0, 0) == doctest::Approx(0.5 / 16.0).epsilon(1e-12));
  CHECK(r.d_action.isZero());
}

TEST_CASE("continuous loss is the per-dimension mean of squared error") {
  ModelConfig cfg = tiny_config(Arch::bidirectional, Maze().env_spec(200));
  cfg.action_state_loss_ratio = 2.0;
  ModelBatch b = stub_batch(cfg, true, true);
  Mat sl(1, 4), al(1, 2);
  sl << 1.0, 2.0, 3.0, 4.0;
  al << 0.5, -0.5;
  const LossResult r = masked_loss(cfg, sl, al, b);  // all targets zero
  CHECK(r.state_term == doctest::Approx((1.0 + 4.0 + 9.0 + 16.0) / 4.0).epsilon(1e-12));
  CHECK(r.action_term == doctest::Approx((0.25 + 0.25) / 2.0).epsilon(1e-12));
  CHECK(r.total == doctest::Approx(r.action_term + 2.0 * r.state_term).epsilon(1e-12));
  CHECK(r.d_state(0, 2) == doctest::Approx(2.0 * (2.0 * 3.0 / 4.0)).epsilon(1e-12));
  CHECK(r.d_action(0, 1) == doctest::Approx(2.0 * -0.5 / 2.0).epsilon(1e-12));
}

TEST_CASE("a batch with no targets at all is an error") {
  ModelConfig cfg = tiny_config(Arch::bidirectional, DoorKey().env_spec(10));
  ModelBatch b = stub_batch(cfg, false, false);
  const Mat sl = Mat::Zero(1, 32), al = Mat::Zero(1, 4);
  CHECK_THROWS_WITH_AS(masked_loss(cfg, sl, al, b), doctest::Contains("no target"),
                       Error);
}

TEST_CASE("loss-to-parameter gradients match central differences") {
  struct Case {
    Arch arch;
    EnvSpec env;
  };
  const Case cases[] = {{Arch::bidirectional, DoorKey().env_spec(10)},
                        {Arch::causal, Maze().env_spec(200)},
                        {Arch::feedforward, Maze().env_spec(200)}};
  for (const Case& c : cases) {
    CAPTURE(to_string(c.arch));
    ModelConfig cfg = tiny_config(c.arch, c.env);
    cfg.action_state_loss_ratio = 0.5;
    const Normalization norm = identity_norm(cfg.env);

    Rng rng(derive_seed(55, 1));
    std::vector<Window> ws{random_window(cfg.env, cfg.k, rng),
                           random_window(cfg.env, cfg.k, rng)};
    std::vector<MaskPattern> ms{bc_family_mask_at(SchemeId::RC, cfg.k, 1, nullptr, {}),
                                future_mask_at(cfg.k, 0)};
    const ModelBatch batch = make_batch(cfg, ws, ms, norm);

    ParamStore params = init_params(cfg, 55);
    const Forward f = forward(cfg, params, batch.X, batch.B);
    const LossResult loss = masked_loss(cfg, f.state_logits, f.action_logits, batch);
    const ParamStore grads = backward(cfg, params, f, loss.d_state, loss.d_action);

    auto eval_total = [&](const ParamStore& p) {
      const Forward ff = forward(cfg, p, batch.X, batch.B);
      return masked_loss(cfg, ff.state_logits, ff.action_logits, batch).total;
    };
    const double h = 1e-4;
    double worst = 0.0;
    for (const std::string& name : params.names) {
      Mat& m = params.at(name);
      const Mat& g = grads.at(name);
      for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
          const double keep = m(i, j);
          m(i, j) = keep + h;
          const double up = eval_total(params);
          m(i, j) = keep - h;
          const double dn = eval_total(params);
          m(i, j) = keep;
          const double fd = (up - dn) / (2.0 * h);
          const double a = g(i, j);
          const double err =
              std::abs(a - fd) / std::max({1e-6, std::abs(a), std::abs(fd)});
          worst = std::max(worst, err);
        }
      }
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("adam takes the textbook bias-corrected first step") {
  ParamStore p;
  p.add("w", 1, 1)(0, 0) = 0.0;
  ParamStore g = p.zeros_like();
  g.at("w")(0, 0) = 1.0;
  AdamState st = make_adam_state(p);
  adam_step(p, g, st, 0.1);
  // First step: m_hat = g, v_hat = g^2, so the update is lr * 1/(1 + eps).
  CHECK(p.at("w")(0, 0) == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(st.t == 1);

  // A second identical gradient keeps walking in the same direction.
  adam_step(p, g, st, 0.1);
  CHECK(p.at("w")(0, 0) == doctest::Approx(-0.2).epsilon(1e-6));
}

TEST_CASE("regime tags and mask draws dispatch by kind") {
  RegimeSpec single{RegimeSpec::Kind::single_task, SchemeId::FWD_DYN, {}};
  RegimeSpec multi{RegimeSpec::Kind::multi_task, SchemeId::BC, {}};
  RegimeSpec random{RegimeSpec::Kind::random_mask, SchemeId::BC, {}};
  CHECK(single.tag() == "single-task:FWD_DYN");
  CHECK(multi.tag() == "multi-task");
  CHECK(random.tag() == "random-mask");

  Rng rng(4);
  const MaskPattern m = draw_regime_mask(single, 5, rng);
  CHECK(m.k == 5);
  CHECK(m.state_out != std::vector<uint8_t>(5, 0));  // dynamics targets a state
}

TEST_CASE("training reduces the loss and is seed-reproducible") {
  const DoorKey env;
  const Dataset data = generate_grid_dataset(env, 40, 10, 10, 123);
  ModelConfig cfg = tiny_config(Arch::bidirectional, env.env_spec(10));
  cfg.k = 10;
  const RegimeSpec regime{RegimeSpec::Kind::single_task, SchemeId::BC, {}};

  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    CAPTURE(seed);
    const TrainResult res = train(cfg, data, regime, micro_options(seed, 10));
    REQUIRE(res.curve.size() == 10);
    CHECK(res.curve.back().train_loss < res.curve.front().train_loss);
    CHECK(res.best_epoch >= 1);
  }

  const TrainResult a = train(cfg, data, regime, micro_options(9, 5));
  const TrainResult b = train(cfg, data, regime, micro_options(9, 5));
  REQUIRE(a.best.params.names == b.best.params.names);
  for (const std::string& name : a.best.params.names)
    CHECK(a.best.params.at(name) == b.best.params.at(name));
  for (size_t i = 0; i < a.curve.size(); ++i)
    CHECK(a.curve[i].train_loss == b.curve[i].train_loss);
  CHECK(a.best.regime == "single-task:BC");
  CHECK(a.best.seed == 9);
}

TEST_CASE("a constant mask source in the random regime replays single-task") {
  const DoorKey env;
  const Dataset data = generate_grid_dataset(env, 30, 8, 10, 321);
  ModelConfig cfg = tiny_config(Arch::causal, env.env_spec(10));
  cfg.k = 10;

  const RegimeSpec single{RegimeSpec::Kind::single_task, SchemeId::BC, {}};
  const TrainResult direct = train(cfg, data, single, micro_options(5, 5));

  RegimeSpec random{RegimeSpec::Kind::random_mask, SchemeId::BC, {}};
  TrainOptions opt = micro_options(5, 5);
  opt.mask_override = [](int k, Rng& rng) {
    return build_mask(SchemeId::BC, k, rng, {});
  };
  const TrainResult injected = train(cfg, data, random, opt);

  REQUIRE(direct.best.params.names == injected.best.params.names);
  for (const std::string& name : direct.best.params.names)
    CHECK(direct.best.params.at(name) == injected.best.params.at(name));
}

TEST_CASE("early stopping returns the checkpoint at the metric optimum") {
  const DoorKey env;
  const Dataset data = generate_grid_dataset(env, 20, 5, 10, 77);
  ModelConfig cfg = tiny_config(Arch::bidirectional, env.env_spec(10));
  cfg.k = 10;

  const std::vector<double> script{5.0, 4.0, 3.0, 2.0, 3.0, 4.0, 5.0, 6.0};
  auto calls = std::make_shared<int>(0);
  auto snapshot = std::make_shared<ParamStore>();
  TrainOptions opt = micro_options(13, 50);
  opt.patience = 2;
  opt.eval_metric = [=](const ModelConfig&, const ParamStore& p,
                        const Normalization&) {
    const double v = script.at(*calls);
    if (v == 2.0) *snapshot = p;  // parameters at the scripted optimum
    ++*calls;
    return v;
  };

  const RegimeSpec regime{RegimeSpec::Kind::single_task, SchemeId::BC, {}};
  const TrainResult res = train(cfg, data, regime, opt);
  CHECK(res.epochs_run == 6);  // optimum at epoch 4 plus two bad evaluations
  CHECK(res.best_epoch == 4);
  CHECK(res.best_metric == 2.0);
  REQUIRE(!snapshot->names.empty());
  for (const std::string& name : snapshot->names)
    CHECK(res.best.params.at(name) == snapshot->at(name));
}

TEST_CASE("finetuning starts from the base and zero epochs is the identity") {
  const DoorKey env;
  const Dataset data = generate_grid_dataset(env, 20, 5, 10, 55);
  ModelConfig cfg = tiny_config(Arch::bidirectional, env.env_spec(10));
  cfg.k = 10;
  const RegimeSpec bc{RegimeSpec::Kind::single_task, SchemeId::BC, {}};
  const Checkpoint base = train(cfg, data, bc, micro_options(3, 3)).best;

  const RegimeSpec goal{RegimeSpec::Kind::single_task, SchemeId::GOAL, {}};
  const TrainResult frozen = finetune(base, data, goal, micro_options(4, 0));
  for (const std::string& name : base.params.names)
    CHECK(frozen.best.params.at(name) == base.params.at(name));
  CHECK(frozen.epochs_run == 0);

  const TrainResult moved = finetune(base, data, goal, micro_options(4, 2));
  CHECK(moved.best.params.at("embed.W") != base.params.at("embed.W"));
  CHECK(moved.best.regime == "finetune:single-task:GOAL (from single-task:BC)");

  Checkpoint other = base;
  other.norm.rtg_std += 1.0f;
  CHECK_THROWS_WITH_AS(finetune(other, data, goal, micro_options(4, 1)),
                       doctest::Contains("normalization"), Error);
}

TEST_CASE("learning curves land on disk with blank metrics between evals") {
  const DoorKey env;
  const Dataset data = generate_grid_dataset(env, 12, 4, 10, 88);
  ModelConfig cfg = tiny_config(Arch::bidirectional, env.env_spec(10));
  cfg.k = 10;
  TrainOptions opt = micro_options(6, 4);
  opt.eval_every = 2;
  opt.curve_path = "curve_test.csv";
  const RegimeSpec regime{RegimeSpec::Kind::single_task, SchemeId::BC, {}};
  const TrainResult res = train(cfg, data, regime, opt);
  REQUIRE(res.curve.size() == 4);
  CHECK(std::isnan(res.curve[0].val_metric));
  CHECK(std::isfinite(res.curve[1].val_metric));
  CHECK(res.curve[3].wall_time >= res.curve[0].wall_time);

  std::ifstream is("curve_test.csv");
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,train_loss,val_metric,wall_time");
  std::getline(is, line);  // epoch 1: no evaluation, empty metric field
  CHECK(line.find(",,") != std::string::npos);
  std::getline(is, line);  // epoch 2: metric present
  CHECK(line.find(",,") == std::string::npos);
  std::remove("curve_test.csv");
}
