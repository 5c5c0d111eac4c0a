#include "trajmask/traj.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts unsupported");

namespace trajmask {

std::string to_string(Modality m) {
  return m == Modality::discrete ? "discrete" : "continuous";
}

Modality modality_from_string(const std::string& s) {
  if (s == "discrete") return Modality::discrete;
  if (s == "continuous") return Modality::continuous;
  fail("format-error", "unknown modality '" + s + "'");
}

int EnvSpec::state_repr_width() const {
  if (state_kind == Modality::continuous) return state_width;
  return std::accumulate(state_cards.begin(), state_cards.end(), 0);
}

int EnvSpec::action_repr_width() const {
  if (action_kind == Modality::continuous) return action_width;
  return std::accumulate(action_cards.begin(), action_cards.end(), 0);
}

std::vector<double> compute_rtg(std::span<const float> rewards) {
  require(!rewards.empty(), "invalid-trajectory", "compute_rtg on empty reward sequence");
  for (float r : rewards)
    require(std::isfinite(r), "invalid-trajectory", "non-finite reward");
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

Window slice_window(const Trajectory& traj, int t, int k) {
  const int T = traj.length();
  require(t >= 0 && k >= 1 && t + k <= T, "index-error",
          "window [" + std::to_string(t) + ", " + std::to_string(t + k) +
              ") out of range for T=" + std::to_string(T));
  Window w;
  w.start = t;
  w.states.assign(traj.states.begin() + t, traj.states.begin() + t + k);
  w.actions.assign(traj.actions.begin() + t, traj.actions.begin() + t + k);
  w.rewards.assign(traj.rewards.begin() + t, traj.rewards.begin() + t + k);
  const auto rtg = compute_rtg(traj.rewards);
  w.rtg = RtgToken{rtg[t], T - t};
  return w;
}

std::vector<int> Dataset::indices_of(Split s) const {
  std::vector<int> out;
  for (size_t i = 0; i < split.size(); ++i)
    if (split[i] == s) out.push_back(static_cast<int>(i));
  return out;
}

void validate_trajectory(const EnvSpec& env, const Trajectory& traj) {
  const size_t T = traj.rewards.size();
  require(T > 0, "invalid-trajectory", "empty trajectory");
  require(traj.states.size() == T && traj.actions.size() == T, "invalid-trajectory",
          "states/actions/rewards lengths differ");
  require(env.horizon <= 0 || static_cast<int>(T) == env.horizon, "invalid-trajectory",
          "trajectory length " + std::to_string(T) + " != horizon " +
              std::to_string(env.horizon));
  for (size_t t = 0; t < T; ++t) {
    require(traj.states[t].size() == static_cast<size_t>(env.state_width),
            "invalid-trajectory", "state width mismatch");
    require(traj.actions[t].size() == static_cast<size_t>(env.action_width),
            "invalid-trajectory", "action width mismatch");
    for (float v : traj.states[t])
      require(std::isfinite(v), "invalid-trajectory", "non-finite state");
    for (float v : traj.actions[t])
      require(std::isfinite(v), "invalid-trajectory", "non-finite action");
    require(std::isfinite(traj.rewards[t]), "invalid-trajectory", "non-finite reward");
    if (env.state_kind == Modality::discrete) {
      for (int d = 0; d < env.state_width; ++d) {
        const float v = traj.states[t][d];
        require(v == std::floor(v) && v >= 0 && v < env.state_cards[d],
                "invalid-trajectory", "state index out of range");
      }
    }
    if (env.action_kind == Modality::discrete) {
      for (int d = 0; d < env.action_width; ++d) {
        const float v = traj.actions[t][d];
        require(v == std::floor(v) && v >= 0 && v < env.action_cards[d],
                "invalid-trajectory", "action index out of range");
      }
    }
  }
}

namespace {

void accumulate_moments(const std::vector<std::vector<float>>& rows, std::vector<double>& sum,
                        std::vector<double>& sumsq, long& count) {
  for (const auto& row : rows) {
    for (size_t d = 0; d < row.size(); ++d) {
      sum[d] += row[d];
      sumsq[d] += static_cast<double>(row[d]) * row[d];
    }
    ++count;
  }
}

void finish_moments(const std::vector<double>& sum, const std::vector<double>& sumsq, long count,
                    std::vector<float>& mean, std::vector<float>& std) {
  mean.resize(sum.size());
  std.resize(sum.size());
  for (size_t d = 0; d < sum.size(); ++d) {
    const double m = count > 0 ? sum[d] / count : 0.0;
    double var = count > 0 ? sumsq[d] / count - m * m : 1.0;
    if (var < 1e-12) var = 1.0;  // constant dimension: leave unscaled
    mean[d] = static_cast<float>(m);
    std[d] = static_cast<float>(std::sqrt(var));
  }
}

}  // namespace

void compute_normalization(Dataset& dataset) {
  const EnvSpec& env = dataset.env;
  Normalization n;
  n.state_mean.assign(env.state_width, 0.0f);
  n.state_std.assign(env.state_width, 1.0f);
  n.action_mean.assign(env.action_width, 0.0f);
  n.action_std.assign(env.action_width, 1.0f);

  const auto train = dataset.indices_of(Split::train);

  if (env.state_kind == Modality::continuous && !train.empty()) {
    std::vector<double> sum(env.state_width, 0.0), sumsq(env.state_width, 0.0);
    long count = 0;
    for (int i : train) accumulate_moments(dataset.trajectories[i].states, sum, sumsq, count);
    finish_moments(sum, sumsq, count, n.state_mean, n.state_std);
  }
  if (env.action_kind == Modality::continuous && !train.empty()) {
    std::vector<double> sum(env.action_width, 0.0), sumsq(env.action_width, 0.0);
    long count = 0;
    for (int i : train) accumulate_moments(dataset.trajectories[i].actions, sum, sumsq, count);
    finish_moments(sum, sumsq, count, n.action_mean, n.action_std);
  }

  // RTG is continuous in every environment; standardized over all R^hat_t.
  double sum = 0.0, sumsq = 0.0;
  long count = 0;
  for (int i : train) {
    for (double v : compute_rtg(dataset.trajectories[i].rewards)) {
      sum += v;
      sumsq += v * v;
      ++count;
    }
  }
  if (count > 0) {
    const double m = sum / count;
    double var = sumsq / count - m * m;
    if (var < 1e-12) var = 1.0;
    n.rtg_mean = static_cast<float>(m);
    n.rtg_std = static_cast<float>(std::sqrt(var));
  }
  dataset.norm = n;
}

namespace {

constexpr const char* kMagic = "trajmask-dataset v1";

void write_floats(std::ostream& os, std::span<const float> v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_floats(std::istream& is, std::span<float> v) {
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(float)));
  require(static_cast<size_t>(is.gcount()) == v.size() * sizeof(float), "corrupt-dataset",
          "truncated record");
}

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

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "missing-file", "cannot open '" + path + "' for writing");

  const EnvSpec& e = dataset.env;
  os << kMagic << "\n";
  os << "env_id = " << e.env_id << "\n";
  os << "state_kind = " << to_string(e.state_kind) << "\n";
  os << "state_width = " << e.state_width << "\n";
  os << "state_cards = " << join_ints(e.state_cards) << "\n";
  os << "action_kind = " << to_string(e.action_kind) << "\n";
  os << "action_width = " << e.action_width << "\n";
  os << "action_cards = " << join_ints(e.action_cards) << "\n";
  os << "horizon = " << e.horizon << "\n";
  os << "seed = " << dataset.seed << "\n";
  os << "n_traj = " << dataset.trajectories.size() << "\n";
  os << "state_mean = " << join_floats(dataset.norm.state_mean) << "\n";
  os << "state_std = " << join_floats(dataset.norm.state_std) << "\n";
  os << "action_mean = " << join_floats(dataset.norm.action_mean) << "\n";
  os << "action_std = " << join_floats(dataset.norm.action_std) << "\n";
  os << "rtg_mean = " << join_floats(std::span<const float>(&dataset.norm.rtg_mean, 1)) << "\n";
  os << "rtg_std = " << join_floats(std::span<const float>(&dataset.norm.rtg_std, 1)) << "\n";
  os << "end-header\n";

  for (size_t i = 0; i < dataset.trajectories.size(); ++i) {
    const Trajectory& tr = dataset.trajectories[i];
    const uint32_t T = static_cast<uint32_t>(tr.length());
    os.write(reinterpret_cast<const char*>(&T), sizeof(T));
    for (const auto& row : tr.states) write_floats(os, row);
    for (const auto& row : tr.actions) write_floats(os, row);
    write_floats(os, tr.rewards);
    const uint8_t sp = static_cast<uint8_t>(dataset.split[i]);
    os.write(reinterpret_cast<const char*>(&sp), 1);
  }
  require(os.good(), "format-error", "write failure on '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "missing-file", "cannot open '" + path + "'");

  std::string line;
  std::getline(is, line);
  require(line == kMagic, "format-error",
          "'" + path + "' is not a " + kMagic + " file (got '" + line + "')");

  Dataset d;
  size_t n_traj = 0;
  while (std::getline(is, line)) {
    if (line == "end-header") break;
    const auto eq = line.find(" = ");
    require(eq != std::string::npos, "format-error", "malformed header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 3);
    if (key == "env_id") d.env.env_id = val;
    else if (key == "state_kind") d.env.state_kind = modality_from_string(val);
    else if (key == "state_width") d.env.state_width = std::stoi(val);
    else if (key == "state_cards") d.env.state_cards = parse_ints(val);
    else if (key == "action_kind") d.env.action_kind = modality_from_string(val);
    else if (key == "action_width") d.env.action_width = std::stoi(val);
    else if (key == "action_cards") d.env.action_cards = parse_ints(val);
    else if (key == "horizon") d.env.horizon = std::stoi(val);
    else if (key == "seed") d.seed = std::stoull(val);
    else if (key == "n_traj") n_traj = std::stoull(val);
    else if (key == "state_mean") d.norm.state_mean = parse_floats(val);
    else if (key == "state_std") d.norm.state_std = parse_floats(val);
    else if (key == "action_mean") d.norm.action_mean = parse_floats(val);
    else if (key == "action_std") d.norm.action_std = parse_floats(val);
    else if (key == "rtg_mean") d.norm.rtg_mean = parse_floats(val).at(0);
    else if (key == "rtg_std") d.norm.rtg_std = parse_floats(val).at(0);
    else fail("format-error", "unknown header key '" + key + "'");
  }
  require(line == "end-header", "format-error", "missing end-header");

  d.trajectories.reserve(n_traj);
  d.split.reserve(n_traj);
  for (size_t i = 0; i < n_traj; ++i) {
    uint32_t T = 0;
    is.read(reinterpret_cast<char*>(&T), sizeof(T));
    require(is.gcount() == sizeof(T), "corrupt-dataset", "truncated record");
    require(T == static_cast<uint32_t>(d.env.horizon), "corrupt-dataset",
            "record length " + std::to_string(T) + " != horizon");
    Trajectory tr;
    tr.states.assign(T, std::vector<float>(d.env.state_width));
    tr.actions.assign(T, std::vector<float>(d.env.action_width));
    tr.rewards.assign(T, 0.0f);
    for (auto& row : tr.states) read_floats(is, row);
    for (auto& row : tr.actions) read_floats(is, row);
    read_floats(is, tr.rewards);
    uint8_t sp = 0;
    is.read(reinterpret_cast<char*>(&sp), 1);
    require(is.gcount() == 1 && sp <= 1, "corrupt-dataset", "truncated record");
    validate_trajectory(d.env, tr);  // rejects wrong-modality records
    d.trajectories.push_back(std::move(tr));
    d.split.push_back(static_cast<Split>(sp));
  }
  char extra;
  is.read(&extra, 1);
  require(is.eof(), "corrupt-dataset", "trailing bytes after last record");
  return d;
}

void require_env(const Dataset& dataset, const std::string& env_id) {
  require(dataset.env.env_id == env_id, "env-mismatch",
          "dataset is for '" + dataset.env.env_id + "', run expects '" + env_id + "'");
}

}  // namespace trajmask
