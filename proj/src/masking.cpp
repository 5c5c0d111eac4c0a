#include "trajmask/masking.hpp"

#include <algorithm>
#include <numeric>

namespace trajmask {

namespace {

MaskPattern blank(int k) {
  require(k >= 1, "index-error", "mask window length must be >= 1, got " + std::to_string(k));
  MaskPattern m;
  m.k = k;
  m.state_in.assign(k, 0);
  m.action_in.assign(k, 0);
  m.state_out.assign(k, 0);
  m.action_out.assign(k, 0);
  return m;
}

void append_bits(std::string& out, const std::vector<uint8_t>& v) {
  for (uint8_t b : v) out.push_back(b ? '1' : '0');
}

}  // namespace

int MaskPattern::target_count() const {
  auto ones = [](const std::vector<uint8_t>& v) {
    return static_cast<int>(std::count(v.begin(), v.end(), uint8_t{1}));
  };
  return ones(state_out) + ones(action_out);
}

std::string MaskPattern::debug_string() const {
  std::string s = "state_in=";
  append_bits(s, state_in);
  s += " action_in=";
  append_bits(s, action_in);
  s += rtg_in ? " rtg_in=1" : " rtg_in=0";
  s += " state_out=";
  append_bits(s, state_out);
  s += " action_out=";
  append_bits(s, action_out);
  return s;
}

void MaskPattern::validate() const {
  require(static_cast<int>(state_in.size()) == k && static_cast<int>(action_in.size()) == k &&
              static_cast<int>(state_out.size()) == k && static_cast<int>(action_out.size()) == k,
          "index-error", "mask flag vectors must all have length k");
  for (int t = 0; t < k; ++t) {
    require(!(state_in[t] && state_out[t]), "index-error",
            "state token " + std::to_string(t) + " is both visible and a target");
    require(!(action_in[t] && action_out[t]), "index-error",
            "action token " + std::to_string(t) + " is both visible and a target");
  }
}

std::string to_string(SchemeId s) {
  switch (s) {
    case SchemeId::BC: return "BC";
    case SchemeId::GOAL: return "GOAL";
    case SchemeId::RC: return "RC";
    case SchemeId::WAYPOINT: return "WAYPOINT";
    case SchemeId::FUTURE: return "FUTURE";
    case SchemeId::PAST: return "PAST";
    case SchemeId::FWD_DYN: return "FWD_DYN";
    case SchemeId::INV_DYN: return "INV_DYN";
    case SchemeId::ALL: return "ALL";
    case SchemeId::RND: return "RND";
  }
  fail("config-error", "unknown scheme id");
}

SchemeId scheme_from_string(const std::string& s) {
  for (SchemeId id : {SchemeId::BC, SchemeId::GOAL, SchemeId::RC, SchemeId::WAYPOINT,
                      SchemeId::FUTURE, SchemeId::PAST, SchemeId::FWD_DYN, SchemeId::INV_DYN,
                      SchemeId::ALL, SchemeId::RND}) {
    if (to_string(id) == s) return id;
  }
  fail("config-error", "unknown masking scheme '" + s + "'");
}

int min_window(SchemeId s) {
  switch (s) {
    case SchemeId::BC:
    case SchemeId::GOAL:
    case SchemeId::RC:
    case SchemeId::WAYPOINT:
    case SchemeId::FUTURE:
    case SchemeId::RND:
      return 1;
    default:
      return 2;  // PAST, FWD_DYN, INV_DYN, ALL all reference two timesteps
  }
}

MaskPattern bc_family_mask_at(SchemeId scheme, int k, int i, Rng* rng, const WaypointSpec& wp) {
  require(scheme == SchemeId::BC || scheme == SchemeId::GOAL || scheme == SchemeId::RC ||
              scheme == SchemeId::WAYPOINT,
          "config-error", "bc_family_mask requires BC/GOAL/RC/WAYPOINT, got " + to_string(scheme));
  require(i >= 0 && i < k, "index-error",
          "split point " + std::to_string(i) + " outside window of length " + std::to_string(k));
  MaskPattern m = blank(k);
  for (int t = 0; t <= i; ++t) m.state_in[t] = 1;
  for (int t = 0; t < i; ++t) m.action_in[t] = 1;
  m.action_out[i] = 1;

  if (scheme == SchemeId::GOAL) {
    m.state_in[k - 1] = 1;
  } else if (scheme == SchemeId::RC) {
    m.rtg_in = true;
  } else if (scheme == SchemeId::WAYPOINT) {
    if (wp.explicit_set) {
      for (int t : *wp.explicit_set) {
        require(t > i && t < k - 1, "invalid-waypoint",
                "waypoint index " + std::to_string(t) + " outside open interval (" +
                    std::to_string(i) + ", " + std::to_string(k - 1) + ")");
        m.state_in[t] = 1;
      }
    } else {
      require(rng != nullptr, "config-error", "sampled waypoints need an rng");
      for (int t = i + 1; t <= k - 2; ++t)
        if (rng->bernoulli(wp.prob)) m.state_in[t] = 1;
    }
  }
  m.validate();
  return m;
}

MaskPattern bc_family_mask(SchemeId scheme, int k, Rng& rng, const WaypointSpec& wp) {
  int i = static_cast<int>(rng.uniform_int(k));
  return bc_family_mask_at(scheme, k, i, &rng, wp);
}

MaskPattern future_mask_at(int k, int i) {
  require(i >= 0 && i < k, "index-error",
          "split point " + std::to_string(i) + " outside window of length " + std::to_string(k));
  MaskPattern m = blank(k);
  for (int t = 0; t <= i; ++t) m.state_in[t] = 1;
  for (int t = 0; t < i; ++t) m.action_in[t] = 1;
  for (int t = i; t < k; ++t) m.action_out[t] = 1;
  for (int t = i + 1; t < k; ++t) m.state_out[t] = 1;
  m.validate();
  return m;
}

MaskPattern future_mask(int k, Rng& rng) {
  int i = static_cast<int>(rng.uniform_int(k));
  return future_mask_at(k, i);
}

MaskPattern past_mask_at(int k, int i) {
  require(k >= 2, "scheme-inapplicable", "PAST needs a window of length >= 2");
  require(i >= 1 && i < k, "index-error",
          "PAST split point must lie in {1..k-1}, got " + std::to_string(i));
  MaskPattern m = blank(k);
  for (int t = i; t < k; ++t) {
    m.state_in[t] = 1;
    m.action_in[t] = 1;
  }
  for (int t = 0; t < i; ++t) {
    m.state_out[t] = 1;
    m.action_out[t] = 1;
  }
  m.validate();
  return m;
}

MaskPattern past_mask(int k, Rng& rng) {
  require(k >= 2, "scheme-inapplicable", "PAST needs a window of length >= 2");
  int i = 1 + static_cast<int>(rng.uniform_int(k - 1));
  return past_mask_at(k, i);
}

MaskPattern dynamics_mask_at(DynDirection dir, int k, int i) {
  require(k >= 2, "scheme-inapplicable", "dynamics schemes need a window of length >= 2");
  MaskPattern m = blank(k);
  if (dir == DynDirection::forward) {
    require(i >= 0 && i <= k - 2, "index-error",
            "FWD_DYN split point must lie in {0..k-2}, got " + std::to_string(i));
    m.state_in[i] = 1;
    m.action_in[i] = 1;
    m.state_out[i + 1] = 1;
  } else {
    require(i >= 1 && i < k, "index-error",
            "INV_DYN split point must lie in {1..k-1}, got " + std::to_string(i));
    m.state_in[i] = 1;
    m.action_in[i - 1] = 1;
    m.state_out[i - 1] = 1;
  }
  m.validate();
  return m;
}

MaskPattern dynamics_mask(DynDirection dir, int k, Rng& rng) {
  require(k >= 2, "scheme-inapplicable", "dynamics schemes need a window of length >= 2");
  int i;
  if (dir == DynDirection::forward)
    i = static_cast<int>(rng.uniform_int(k - 1));
  else
    i = 1 + static_cast<int>(rng.uniform_int(k - 1));
  return dynamics_mask_at(dir, k, i);
}

MaskPattern composite_mask(int k, Rng& rng, const WaypointSpec& wp) {
  require(k >= 2, "scheme-inapplicable", "ALL mixes schemes that need windows of length >= 2");
  SchemeId pick = kConcreteSchemes[rng.uniform_int(8)];
  return build_mask(pick, k, rng, wp);
}

MaskPattern random_mask_with(int k, double p_mask, bool rtg_visible, Rng& rng) {
  MaskPattern m = blank(k);
  for (int t = 0; t < k; ++t) {
    bool hide_s = rng.bernoulli(p_mask);
    bool hide_a = rng.bernoulli(p_mask);
    m.state_in[t] = hide_s ? 0 : 1;
    m.state_out[t] = hide_s ? 1 : 0;
    m.action_in[t] = hide_a ? 0 : 1;
    m.action_out[t] = hide_a ? 1 : 0;
  }
  m.rtg_in = rtg_visible;
  m.validate();
  return m;
}

MaskPattern random_mask(int k, Rng& rng) {
  double p = rng.uniform01();
  bool rtg = rng.bernoulli(0.5);
  return random_mask_with(k, p, rtg, rng);
}

MaskPattern build_mask(SchemeId scheme, int k, Rng& rng, const WaypointSpec& wp) {
  switch (scheme) {
    case SchemeId::BC:
    case SchemeId::GOAL:
    case SchemeId::RC:
    case SchemeId::WAYPOINT:
      return bc_family_mask(scheme, k, rng, wp);
    case SchemeId::FUTURE:
      return future_mask(k, rng);
    case SchemeId::PAST:
      return past_mask(k, rng);
    case SchemeId::FWD_DYN:
      return dynamics_mask(DynDirection::forward, k, rng);
    case SchemeId::INV_DYN:
      return dynamics_mask(DynDirection::inverse, k, rng);
    case SchemeId::ALL:
      return composite_mask(k, rng, wp);
    case SchemeId::RND:
      return random_mask(k, rng);
  }
  fail("config-error", "unknown scheme id");
}

}  // namespace trajmask
