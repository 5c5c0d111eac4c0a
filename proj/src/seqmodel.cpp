#include "trajmask/seqmodel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian; big-endian hosts unsupported");

namespace trajmask {

std::string to_string(Arch a) {
  switch (a) {
    case Arch::bidirectional: return "bidirectional";
    case Arch::causal: return "causal";
    case Arch::feedforward: return "feedforward";
  }
  fail("config-error", "unknown architecture value");
}

Arch arch_from_string(const std::string& s) {
  if (s == "bidirectional") return Arch::bidirectional;
  if (s == "causal") return Arch::causal;
  if (s == "feedforward") return Arch::feedforward;
  fail("config-error", "unknown architecture '" + s + "'");
}

void ModelConfig::validate() const {
  require(k >= 1, "config-error", "context length must be >= 1");
  require(embed_dim >= 1, "config-error", "embed_dim must be >= 1");
  require(num_layers >= 1, "config-error", "num_layers must be >= 1");
  require(mlp_width >= 1, "config-error", "mlp_width must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "config-error", "dropout must be in [0, 1)");
  require(action_state_loss_ratio >= 0.0, "config-error",
          "action_state_loss_ratio must be >= 0");
  require(env.horizon >= 1, "config-error", "env horizon must be >= 1");
  require(env.state_width >= 1 && env.action_width >= 1, "config-error",
          "env modality widths must be >= 1");
  if (env.state_kind == Modality::discrete)
    require(static_cast<int>(env.state_cards.size()) == env.state_width, "config-error",
            "state_cards size mismatch");
  if (env.action_kind == Modality::discrete)
    require(static_cast<int>(env.action_cards.size()) == env.action_width, "config-error",
            "action_cards size mismatch");
  if (arch != Arch::feedforward) {
    require(num_heads >= 1, "config-error", "num_heads must be >= 1");
    require(embed_dim % num_heads == 0, "config-error",
            "embed_dim must be divisible by num_heads");
  }
}

std::string ModelConfig::fingerprint() const {
  std::ostringstream os;
  os << "arch=" << to_string(arch) << ";k=" << k << ";embed=" << embed_dim
     << ";layers=" << num_layers << ";heads=" << num_heads << ";mlp=" << mlp_width
     << ";dropout=" << std::hexfloat << dropout
     << ";ratio=" << action_state_loss_ratio << std::defaultfloat
     << ";env=" << env.env_id << ";state=" << to_string(env.state_kind) << ":"
     << env.state_width;
  for (int c : env.state_cards) os << "," << c;
  os << ";action=" << to_string(env.action_kind) << ":" << env.action_width;
  for (int c : env.action_cards) os << "," << c;
  os << ";horizon=" << env.horizon;
  return os.str();
}

Mat& ParamStore::add(const std::string& name, int rows, int cols) {
  require(arrays.count(name) == 0, "config-error", "duplicate parameter '" + name + "'");
  names.push_back(name);
  Mat& m = arrays[name];
  m = Mat::Zero(rows, cols);
  return m;
}

Mat& ParamStore::at(const std::string& name) {
  auto it = arrays.find(name);
  require(it != arrays.end(), "config-error", "unknown parameter '" + name + "'");
  return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
  auto it = arrays.find(name);
  require(it != arrays.end(), "config-error", "unknown parameter '" + name + "'");
  return it->second;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [name, m] : arrays) n += static_cast<size_t>(m.size());
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const std::string& name : names) {
    const Mat& m = arrays.at(name);
    out.add(name, static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  }
  return out;
}

void ParamStore::check_finite(const std::string& context) const {
  for (const auto& [name, m] : arrays)
    require(m.allFinite(), "numeric-failure",
            context + ": non-finite values in '" + name + "'");
}

namespace {

/// Declares every array of the architecture, all zero-initialized.
/// init_params fills weights afterwards in this same creation order.
ParamStore build_param_shapes(const ModelConfig& cfg) {
  const int d = cfg.embed_dim, m = cfg.mlp_width;
  ParamStore p;
  p.add("embed.W", cfg.input_width(), d);
  p.add("embed.b", 1, d);
  if (cfg.arch == Arch::feedforward) {
    int in = cfg.k * d;
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string base = "ff.layer" + std::to_string(l);
      p.add(base + ".W", in, m);
      p.add(base + ".b", 1, m);
      in = m;
    }
    p.add("ff.out.W", in, cfg.k * d);
    p.add("ff.out.b", 1, cfg.k * d);
  } else {
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string base = "layer" + std::to_string(l);
      p.add(base + ".ln1.g", 1, d);
      p.add(base + ".ln1.b", 1, d);
      p.add(base + ".attn.Wq", d, d);
      p.add(base + ".attn.bq", 1, d);
      p.add(base + ".attn.Wk", d, d);
      p.add(base + ".attn.bk", 1, d);
      p.add(base + ".attn.Wv", d, d);
      p.add(base + ".attn.bv", 1, d);
      p.add(base + ".attn.Wo", d, d);
      p.add(base + ".attn.bo", 1, d);
      p.add(base + ".ln2.g", 1, d);
      p.add(base + ".ln2.b", 1, d);
      p.add(base + ".mlp.W1", d, m);
      p.add(base + ".mlp.b1", 1, m);
      p.add(base + ".mlp.W2", m, d);
      p.add(base + ".mlp.b2", 1, d);
    }
    p.add("ln_f.g", 1, d);
    p.add("ln_f.b", 1, d);
  }
  p.add("head.state.W", d, cfg.state_head_width());
  p.add("head.state.b", 1, cfg.state_head_width());
  p.add("head.action.W", d, cfg.action_head_width());
  p.add("head.action.b", 1, cfg.action_head_width());
  return p;
}

/// Last dotted segment of a parameter name classifies it: W* weights get
/// scaled-uniform init, g* gains start at one, b* biases stay zero.
char param_class(const std::string& name) {
  const auto dot = name.rfind('.');
  return name[dot == std::string::npos ? 0 : dot + 1];
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143268;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Mat dropout_mask(int rows, int cols, double p, Rng& rng) {
  const double keep = 1.0 - p, scale = 1.0 / keep;
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform01() < keep ? scale : 0.0;
  return m;
}

constexpr double kLnEps = 1e-5;

void layernorm(const Mat& x, const Mat& g, const Mat& b, Mat& hat, Vec& istd, Mat& out) {
  const Vec mu = x.rowwise().mean();
  const Mat centered = x.colwise() - mu;
  const Vec var = centered.cwiseProduct(centered).rowwise().mean();
  istd = (var.array() + kLnEps).rsqrt().matrix();
  hat = (centered.array().colwise() * istd.array()).matrix();
  out = hat;
  out.array().rowwise() *= g.row(0).array();
  out.rowwise() += b.row(0);
}

Mat layernorm_backward(const Mat& dy, const Mat& hat, const Vec& istd, const Mat& g,
                       Mat& dg, Mat& db) {
  dg = dy.cwiseProduct(hat).colwise().sum();
  db = dy.colwise().sum();
  Mat u = dy;
  u.array().rowwise() *= g.row(0).array();
  const Vec mean_u = u.rowwise().mean();
  const Vec mean_uh = u.cwiseProduct(hat).rowwise().mean();
  Mat dx = u;
  dx.colwise() -= mean_u;
  dx.array() -= hat.array().colwise() * mean_uh.array();
  dx.array().colwise() *= istd.array();
  return dx;
}

void require_finite(const Mat& m, const std::string& layer) {
  require(m.allFinite(), "numeric-failure", "non-finite activations in " + layer);
}

/// One-hot for each discrete factor, or per-dimension standardization.
void encode_values(Modality kind, std::span<const int> cards,
                   std::span<const float> mean, std::span<const float> stdd,
                   std::span<const float> vals, double* out) {
  if (kind == Modality::discrete) {
    int off = 0;
    for (size_t f = 0; f < vals.size(); ++f) {
      out[off + static_cast<int>(std::lround(vals[f]))] = 1.0;
      off += cards[f];
    }
  } else {
    for (size_t i = 0; i < vals.size(); ++i)
      out[i] = (vals[i] - mean[i]) / stdd[i];
  }
}

void encode_targets(Modality kind, std::span<const float> mean, std::span<const float> stdd,
                    std::span<const float> vals, double* out) {
  if (kind == Modality::discrete) {
    for (size_t f = 0; f < vals.size(); ++f) out[f] = std::lround(vals[f]);
  } else {
    for (size_t i = 0; i < vals.size(); ++i)
      out[i] = (vals[i] - mean[i]) / stdd[i];
  }
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamStore p = build_param_shapes(cfg);
  Rng rng(derive_seed(seed, 0x1717));
  for (const std::string& name : p.names) {
    Mat& m = p.arrays.at(name);
    switch (param_class(name)) {
      case 'g': m.setOnes(); break;
      case 'b': break;  // biases stay zero
      default: {
        const double s = 1.0 / std::sqrt(static_cast<double>(m.rows()));
        for (int i = 0; i < m.rows(); ++i)
          for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-s, s);
      }
    }
  }
  return p;
}

void positional_row(int t, int d, double* out) {
  for (int i = 0; i < d; ++i) {
    const double angle = t * std::exp(-std::log(10000.0) * (2.0 * (i / 2)) / d);
    out[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
}

void stack_window(const ModelConfig& cfg, const Window& w, const MaskPattern& m,
                  const Normalization& norm, ModelBatch& batch, int b) {
  const EnvSpec& env = cfg.env;
  const int k = cfg.k;
  require(m.k == k, "config-error",
          "mask length " + std::to_string(m.k) + " != context " + std::to_string(k));
  require(static_cast<int>(w.states.size()) == k, "index-error",
          "window length " + std::to_string(w.states.size()) + " != context");
  require(b >= 0 && b < batch.B, "index-error", "batch slot out of range");
  m.validate();

  if (env.state_kind == Modality::continuous)
    require(static_cast<int>(norm.state_mean.size()) == env.state_width &&
                static_cast<int>(norm.state_std.size()) == env.state_width,
            "env-mismatch", "state normalization width mismatch");
  if (env.action_kind == Modality::continuous)
    require(static_cast<int>(norm.action_mean.size()) == env.action_width &&
                static_cast<int>(norm.action_std.size()) == env.action_width,
            "env-mismatch", "action normalization width mismatch");

  const int sw = env.state_repr_width(), aw = env.action_repr_width();
  for (int t = 0; t < k; ++t) {
    const int row = b * k + t;
    double* x = batch.X.row(row).data();
    if (m.state_in[t]) {
      encode_values(env.state_kind, env.state_cards, norm.state_mean, norm.state_std,
                    w.states[t], x);
      x[sw] = 1.0;
    }
    if (m.action_in[t]) {
      encode_values(env.action_kind, env.action_cards, norm.action_mean, norm.action_std,
                    w.actions[t], x + sw + 1);
      x[sw + 1 + aw] = 1.0;
    }
    if (m.rtg_in && t == 0) {
      x[sw + aw + 2] = (w.rtg.rtg - norm.rtg_mean) / norm.rtg_std;
      x[sw + aw + 3] = static_cast<double>(w.rtg.remaining) / env.horizon;
      x[sw + aw + 4] = 1.0;
    }
    if (m.state_out[t]) {
      batch.state_out[row] = 1;
      encode_targets(env.state_kind, norm.state_mean, norm.state_std, w.states[t],
                     batch.state_tgt.row(row).data());
    }
    if (m.action_out[t]) {
      batch.action_out[row] = 1;
      encode_targets(env.action_kind, norm.action_mean, norm.action_std, w.actions[t],
                     batch.action_tgt.row(row).data());
    }
  }
  batch.rtg_in = batch.rtg_in || m.rtg_in;
}

ModelBatch make_batch(const ModelConfig& cfg, std::span<const Window> windows,
                      std::span<const MaskPattern> masks, const Normalization& norm) {
  require(!windows.empty(), "index-error", "empty batch");
  require(windows.size() == masks.size(), "index-error",
          "window/mask count mismatch");
  ModelBatch batch;
  batch.B = static_cast<int>(windows.size());
  batch.k = cfg.k;
  const int n = batch.B * batch.k;
  batch.X = Mat::Zero(n, cfg.input_width());
  batch.state_tgt = Mat::Zero(n, cfg.state_target_width());
  batch.action_tgt = Mat::Zero(n, cfg.action_target_width());
  batch.state_out.assign(n, 0);
  batch.action_out.assign(n, 0);
  for (int b = 0; b < batch.B; ++b)
    stack_window(cfg, windows[b], masks[b], norm, batch, b);
  return batch;
}

Forward forward(const ModelConfig& cfg, const ParamStore& params, const Mat& X, int B,
                bool train, Rng* rng) {
  cfg.validate();
  const int k = cfg.k, d = cfg.embed_dim;
  const int n = B * k;
  require(X.rows() == n && X.cols() == cfg.input_width(), "index-error",
          "input shape mismatch");
  const bool drop = train && cfg.dropout > 0.0;
  if (drop)
    require(rng != nullptr, "config-error", "dropout in train mode requires an rng");

  Forward f;
  f.B = B;
  f.k = k;
  f.train = train;
  f.X = X;

  // Shared front end: linear projection plus fixed sinusoidal positions.
  Mat pe(k, d);
  for (int t = 0; t < k; ++t) positional_row(t, d, pe.row(t).data());
  f.embedded = X * params.at("embed.W");
  f.embedded.rowwise() += params.at("embed.b").row(0);
  for (int b = 0; b < B; ++b) f.embedded.middleRows(b * k, k) += pe;
  require_finite(f.embedded, "embed");

  if (cfg.arch == Arch::feedforward) {
    // The whole window is flattened; hidden layers see all timesteps at once.
    f.ff_flat = Eigen::Map<const Mat>(f.embedded.data(), B, k * d);
    Mat h = f.ff_flat;
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string base = "ff.layer" + std::to_string(l);
      f.ff_h.push_back(h * params.at(base + ".W"));
      f.ff_h.back().rowwise() += params.at(base + ".b").row(0);
      Mat act = f.ff_h.back().unaryExpr([](double v) { return gelu(v); });
      if (drop) {
        f.ff_drop_mask.push_back(dropout_mask(static_cast<int>(act.rows()),
                                              static_cast<int>(act.cols()), cfg.dropout,
                                              *rng));
        act = act.cwiseProduct(f.ff_drop_mask.back());
      } else {
        f.ff_drop_mask.emplace_back();
      }
      require_finite(act, base);
      f.ff_act.push_back(std::move(act));
      h = f.ff_act.back();
    }
    f.ff_out = h * params.at("ff.out.W");
    f.ff_out.rowwise() += params.at("ff.out.b").row(0);
    require_finite(f.ff_out, "ff.out");
    f.final_out = Eigen::Map<const Mat>(f.ff_out.data(), n, d);
  } else {
    const int H = cfg.num_heads, dh = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool causal = cfg.arch == Arch::causal;
    Mat x = f.embedded;
    f.layers.resize(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string base = "layer" + std::to_string(l);
      Forward::Layer& L = f.layers[l];
      L.x_in = x;
      layernorm(L.x_in, params.at(base + ".ln1.g"), params.at(base + ".ln1.b"), L.ln1_hat,
                L.ln1_istd, L.ln1_out);
      L.q = L.ln1_out * params.at(base + ".attn.Wq");
      L.q.rowwise() += params.at(base + ".attn.bq").row(0);
      L.k_ = L.ln1_out * params.at(base + ".attn.Wk");
      L.k_.rowwise() += params.at(base + ".attn.bk").row(0);
      L.v = L.ln1_out * params.at(base + ".attn.Wv");
      L.v.rowwise() += params.at(base + ".attn.bv").row(0);

      L.attn_cat = Mat::Zero(n, d);
      L.probs.resize(B);
      for (int b = 0; b < B; ++b) {
        L.probs[b] = Mat::Zero(H * k, k);
        for (int h = 0; h < H; ++h) {
          const auto Qh = L.q.block(b * k, h * dh, k, dh);
          const auto Kh = L.k_.block(b * k, h * dh, k, dh);
          const auto Vh = L.v.block(b * k, h * dh, k, dh);
          Mat s = Qh * Kh.transpose() * scale;
          auto P = L.probs[b].middleRows(h * k, k);
          for (int i = 0; i < k; ++i) {
            const int limit = causal ? i + 1 : k;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < limit; ++j) mx = std::max(mx, s(i, j));
            double sum = 0.0;
            for (int j = 0; j < limit; ++j) sum += std::exp(s(i, j) - mx);
            for (int j = 0; j < limit; ++j) P(i, j) = std::exp(s(i, j) - mx) / sum;
          }
          L.attn_cat.block(b * k, h * dh, k, dh) = P * Vh;
        }
      }
      L.attn_proj = L.attn_cat * params.at(base + ".attn.Wo");
      L.attn_proj.rowwise() += params.at(base + ".attn.bo").row(0);
      if (drop) {
        L.attn_drop_mask = dropout_mask(n, d, cfg.dropout, *rng);
        L.res1 = L.x_in + L.attn_proj.cwiseProduct(L.attn_drop_mask);
      } else {
        L.res1 = L.x_in + L.attn_proj;
      }

      layernorm(L.res1, params.at(base + ".ln2.g"), params.at(base + ".ln2.b"), L.ln2_hat,
                L.ln2_istd, L.ln2_out);
      L.mlp_h = L.ln2_out * params.at(base + ".mlp.W1");
      L.mlp_h.rowwise() += params.at(base + ".mlp.b1").row(0);
      L.mlp_act = L.mlp_h.unaryExpr([](double v) { return gelu(v); });
      L.mlp_proj = L.mlp_act * params.at(base + ".mlp.W2");
      L.mlp_proj.rowwise() += params.at(base + ".mlp.b2").row(0);
      if (drop) {
        L.mlp_drop_mask = dropout_mask(n, d, cfg.dropout, *rng);
        x = L.res1 + L.mlp_proj.cwiseProduct(L.mlp_drop_mask);
      } else {
        x = L.res1 + L.mlp_proj;
      }
      require_finite(x, base);
    }
    f.final_in = x;
    layernorm(f.final_in, params.at("ln_f.g"), params.at("ln_f.b"), f.final_hat,
              f.final_istd, f.final_out);
    require_finite(f.final_out, "ln_f");
  }

  f.state_logits = f.final_out * params.at("head.state.W");
  f.state_logits.rowwise() += params.at("head.state.b").row(0);
  f.action_logits = f.final_out * params.at("head.action.W");
  f.action_logits.rowwise() += params.at("head.action.b").row(0);
  require_finite(f.state_logits, "head.state");
  require_finite(f.action_logits, "head.action");
  return f;
}

ParamStore backward(const ModelConfig& cfg, const ParamStore& params, const Forward& f,
                    const Mat& d_state, const Mat& d_action) {
  const int k = cfg.k, d = cfg.embed_dim, B = f.B;
  const int n = B * k;
  require(d_state.rows() == n && d_action.rows() == n, "index-error",
          "head gradient shape mismatch");
  ParamStore g = params.zeros_like();

  g.at("head.state.W") = f.final_out.transpose() * d_state;
  g.at("head.state.b") = d_state.colwise().sum();
  g.at("head.action.W") = f.final_out.transpose() * d_action;
  g.at("head.action.b") = d_action.colwise().sum();
  Mat dx = d_state * params.at("head.state.W").transpose() +
           d_action * params.at("head.action.W").transpose();

  if (cfg.arch == Arch::feedforward) {
    Mat d_flat_out = Eigen::Map<const Mat>(dx.data(), B, k * d);
    const Mat& last = cfg.num_layers > 0 ? f.ff_act.back() : f.ff_flat;
    g.at("ff.out.W") = last.transpose() * d_flat_out;
    g.at("ff.out.b") = d_flat_out.colwise().sum();
    Mat dh = d_flat_out * params.at("ff.out.W").transpose();
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
      const std::string base = "ff.layer" + std::to_string(l);
      if (f.ff_drop_mask[l].size() > 0) dh = dh.cwiseProduct(f.ff_drop_mask[l]);
      dh = dh.cwiseProduct(f.ff_h[l].unaryExpr([](double v) { return gelu_grad(v); }));
      const Mat& in = l == 0 ? f.ff_flat : f.ff_act[l - 1];
      g.at(base + ".W") = in.transpose() * dh;
      g.at(base + ".b") = dh.colwise().sum();
      dh = dh * params.at(base + ".W").transpose();
    }
    dx = Eigen::Map<const Mat>(dh.data(), n, d);
  } else {
    const int H = cfg.num_heads, dh_dim = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_dim));
    dx = layernorm_backward(dx, f.final_hat, f.final_istd, params.at("ln_f.g"),
                            g.at("ln_f.g"), g.at("ln_f.b"));
    for (int l = cfg.num_layers - 1; l >= 0; --l) {
      const std::string base = "layer" + std::to_string(l);
      const Forward::Layer& L = f.layers[l];

      // MLP sub-block: x_out = res1 + drop(W2 gelu(W1 ln2(res1) + b1) + b2).
      Mat d_mlp_proj =
          L.mlp_drop_mask.size() > 0 ? dx.cwiseProduct(L.mlp_drop_mask).eval() : dx;
      g.at(base + ".mlp.W2") = L.mlp_act.transpose() * d_mlp_proj;
      g.at(base + ".mlp.b2") = d_mlp_proj.colwise().sum();
      Mat d_mlp_h = (d_mlp_proj * params.at(base + ".mlp.W2").transpose())
                        .cwiseProduct(L.mlp_h.unaryExpr(
                            [](double v) { return gelu_grad(v); }));
      g.at(base + ".mlp.W1") = L.ln2_out.transpose() * d_mlp_h;
      g.at(base + ".mlp.b1") = d_mlp_h.colwise().sum();
      Mat d_res1 = dx + layernorm_backward(d_mlp_h * params.at(base + ".mlp.W1").transpose(),
                                           L.ln2_hat, L.ln2_istd, params.at(base + ".ln2.g"),
                                           g.at(base + ".ln2.g"), g.at(base + ".ln2.b"));

      // Attention sub-block: res1 = x_in + drop(Wo attn(ln1(x_in)) + bo).
      Mat d_attn_proj = L.attn_drop_mask.size() > 0
                            ? d_res1.cwiseProduct(L.attn_drop_mask).eval()
                            : d_res1;
      g.at(base + ".attn.Wo") = L.attn_cat.transpose() * d_attn_proj;
      g.at(base + ".attn.bo") = d_attn_proj.colwise().sum();
      Mat d_attn_cat = d_attn_proj * params.at(base + ".attn.Wo").transpose();

      Mat dq = Mat::Zero(n, d), dk = Mat::Zero(n, d), dv = Mat::Zero(n, d);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          const auto Qh = L.q.block(b * k, h * dh_dim, k, dh_dim);
          const auto Kh = L.k_.block(b * k, h * dh_dim, k, dh_dim);
          const auto Vh = L.v.block(b * k, h * dh_dim, k, dh_dim);
          const auto P = L.probs[b].middleRows(h * k, k);
          const auto dOh = d_attn_cat.block(b * k, h * dh_dim, k, dh_dim);
          dv.block(b * k, h * dh_dim, k, dh_dim) = P.transpose() * dOh;
          Mat dP = dOh * Vh.transpose();
          const Vec row_dot = dP.cwiseProduct(P).rowwise().sum();
          Mat dS = P.cwiseProduct(dP.colwise() - row_dot) * scale;
          dq.block(b * k, h * dh_dim, k, dh_dim) = dS * Kh;
          dk.block(b * k, h * dh_dim, k, dh_dim) = dS.transpose() * Qh;
        }
      }
      g.at(base + ".attn.Wq") = L.ln1_out.transpose() * dq;
      g.at(base + ".attn.bq") = dq.colwise().sum();
      g.at(base + ".attn.Wk") = L.ln1_out.transpose() * dk;
      g.at(base + ".attn.bk") = dk.colwise().sum();
      g.at(base + ".attn.Wv") = L.ln1_out.transpose() * dv;
      g.at(base + ".attn.bv") = dv.colwise().sum();
      Mat d_ln1_out = dq * params.at(base + ".attn.Wq").transpose() +
                      dk * params.at(base + ".attn.Wk").transpose() +
                      dv * params.at(base + ".attn.Wv").transpose();
      dx = d_res1 + layernorm_backward(d_ln1_out, L.ln1_hat, L.ln1_istd,
                                       params.at(base + ".ln1.g"), g.at(base + ".ln1.g"),
                                       g.at(base + ".ln1.b"));
    }
  }

  g.at("embed.W") = f.X.transpose() * dx;
  g.at("embed.b") = dx.colwise().sum();
  return g;
}

namespace {

constexpr const char* kCkptMagic = "trajmask-checkpoint v1";

std::string join_floats(std::span<const float> v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << std::hexfloat << v[i];
  }
  return os.str();
}

std::vector<float> parse_floats(const std::string& s) {
  std::istringstream is(s);
  std::vector<float> out;
  std::string tok;
  while (is >> tok) out.push_back(std::strtof(tok.c_str(), nullptr));
  return out;
}

std::string join_ints(std::span<const int> v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    os << v[i];
  }
  return os.str();
}

std::vector<int> parse_ints(const std::string& s) {
  std::istringstream is(s);
  std::vector<int> out;
  int v;
  while (is >> v) out.push_back(v);
  return out;
}

std::string hexdouble(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

std::string config_hash_hex(const ModelConfig& c) {
  Fnv1a h;
  h.update(c.fingerprint());
  return hex_u64(h.digest());
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.config.validate();
  ckpt.params.check_finite("save_checkpoint");
  require(ckpt.regime.find('\n') == std::string::npos, "format-error",
          "regime tag must be a single line");
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "missing-file", "cannot open '" + path + "' for writing");

  const ModelConfig& c = ckpt.config;
  os << kCkptMagic << "\n";
  os << "arch = " << to_string(c.arch) << "\n";
  os << "k = " << c.k << "\n";
  os << "embed_dim = " << c.embed_dim << "\n";
  os << "num_layers = " << c.num_layers << "\n";
  os << "num_heads = " << c.num_heads << "\n";
  os << "mlp_width = " << c.mlp_width << "\n";
  os << "dropout = " << hexdouble(c.dropout) << "\n";
  os << "action_state_loss_ratio = " << hexdouble(c.action_state_loss_ratio) << "\n";
  os << "env_id = " << c.env.env_id << "\n";
  os << "state_kind = " << to_string(c.env.state_kind) << "\n";
  os << "state_width = " << c.env.state_width << "\n";
  os << "state_cards = " << join_ints(c.env.state_cards) << "\n";
  os << "action_kind = " << to_string(c.env.action_kind) << "\n";
  os << "action_width = " << c.env.action_width << "\n";
  os << "action_cards = " << join_ints(c.env.action_cards) << "\n";
  os << "horizon = " << c.env.horizon << "\n";
  os << "state_mean = " << join_floats(ckpt.norm.state_mean) << "\n";
  os << "state_std = " << join_floats(ckpt.norm.state_std) << "\n";
  os << "action_mean = " << join_floats(ckpt.norm.action_mean) << "\n";
  os << "action_std = " << join_floats(ckpt.norm.action_std) << "\n";
  os << "rtg_mean = " << join_floats(std::span<const float>(&ckpt.norm.rtg_mean, 1)) << "\n";
  os << "rtg_std = " << join_floats(std::span<const float>(&ckpt.norm.rtg_std, 1)) << "\n";
  os << "regime = " << ckpt.regime << "\n";
  os << "seed = " << ckpt.seed << "\n";
  os << "config_hash = " << config_hash_hex(c) << "\n";
  os << "layernorm = pre\n";
  os << "positional = sinusoidal\n";
  os << "dtype = f64\n";
  os << "n_arrays = " << ckpt.params.names.size() << "\n";
  os << "end-header\n";

  for (const std::string& name : ckpt.params.names) {
    const Mat& m = ckpt.params.arrays.at(name);
    os << name << ' ' << m.rows() << ' ' << m.cols() << "\n";
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  require(os.good(), "format-error", "write failure on '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "missing-file", "cannot open '" + path + "'");

  std::string line;
  std::getline(is, line);
  require(line == kCkptMagic, "format-error",
          "'" + path + "' is not a " + std::string(kCkptMagic) + " file");

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  std::string stored_hash;
  size_t n_arrays = 0;
  while (std::getline(is, line)) {
    if (line == "end-header") break;
    const auto eq = line.find(" = ");
    require(eq != std::string::npos, "format-error", "malformed header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 3);
    if (key == "arch") c.arch = arch_from_string(val);
    else if (key == "k") c.k = std::stoi(val);
    else if (key == "embed_dim") c.embed_dim = std::stoi(val);
    else if (key == "num_layers") c.num_layers = std::stoi(val);
    else if (key == "num_heads") c.num_heads = std::stoi(val);
    else if (key == "mlp_width") c.mlp_width = std::stoi(val);
    else if (key == "dropout") c.dropout = std::strtod(val.c_str(), nullptr);
    else if (key == "action_state_loss_ratio")
      c.action_state_loss_ratio = std::strtod(val.c_str(), nullptr);
    else if (key == "env_id") c.env.env_id = val;
    else if (key == "state_kind") c.env.state_kind = modality_from_string(val);
    else if (key == "state_width") c.env.state_width = std::stoi(val);
    else if (key == "state_cards") c.env.state_cards = parse_ints(val);
    else if (key == "action_kind") c.env.action_kind = modality_from_string(val);
    else if (key == "action_width") c.env.action_width = std::stoi(val);
    else if (key == "action_cards") c.env.action_cards = parse_ints(val);
    else if (key == "horizon") c.env.horizon = std::stoi(val);
    else if (key == "state_mean") ckpt.norm.state_mean = parse_floats(val);
    else if (key == "state_std") ckpt.norm.state_std = parse_floats(val);
    else if (key == "action_mean") ckpt.norm.action_mean = parse_floats(val);
    else if (key == "action_std") ckpt.norm.action_std = parse_floats(val);
    else if (key == "rtg_mean") ckpt.norm.rtg_mean = parse_floats(val).at(0);
    else if (key == "rtg_std") ckpt.norm.rtg_std = parse_floats(val).at(0);
    else if (key == "regime") ckpt.regime = val;
    else if (key == "seed") ckpt.seed = std::stoull(val);
    else if (key == "config_hash") stored_hash = val;
    else if (key == "layernorm")
      require(val == "pre", "checkpoint-error", "unsupported layernorm placement");
    else if (key == "positional")
      require(val == "sinusoidal", "checkpoint-error", "unsupported positional encoding");
    else if (key == "dtype")
      require(val == "f64", "checkpoint-error", "unsupported parameter dtype");
    else if (key == "n_arrays") n_arrays = std::stoull(val);
    else fail("format-error", "unknown header key '" + key + "'");
  }
  require(line == "end-header", "format-error", "missing end-header");
  c.validate();
  const std::string expect_hash = config_hash_hex(c);
  require(stored_hash == expect_hash, "checkpoint-error",
          "config hash mismatch: header says " + stored_hash + ", fields give " +
              expect_hash);

  for (size_t i = 0; i < n_arrays; ++i) {
    require(static_cast<bool>(std::getline(is, line)), "checkpoint-error",
            "truncated checkpoint: missing array header");
    std::istringstream hs(line);
    std::string name;
    long rows = 0, cols = 0;
    require(static_cast<bool>(hs >> name >> rows >> cols) && rows > 0 && cols > 0,
            "checkpoint-error", "malformed array header: " + line);
    Mat& m = ckpt.params.add(name, static_cast<int>(rows), static_cast<int>(cols));
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    require(static_cast<size_t>(is.gcount()) == m.size() * sizeof(double),
            "checkpoint-error", "truncated array '" + name + "'");
  }
  char extra;
  is.read(&extra, 1);
  require(is.eof(), "checkpoint-error", "trailing bytes after last array");

  // The declared config must reproduce exactly this parameter structure.
  const ParamStore expect = build_param_shapes(c);
  require(ckpt.params.names == expect.names, "checkpoint-error",
          "parameter names do not match the declared architecture");
  for (const std::string& name : expect.names) {
    const Mat& got = ckpt.params.arrays.at(name);
    const Mat& want = expect.arrays.at(name);
    require(got.rows() == want.rows() && got.cols() == want.cols(), "checkpoint-error",
            "shape mismatch for '" + name + "'");
  }
  ckpt.params.check_finite("load_checkpoint");
  return ckpt;
}

}  // namespace trajmask
