// Copyright 2026 The APE Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef APE_SCENARIOGEN_HPP_
#define APE_SCENARIOGEN_HPP_

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ape/core.hpp"

namespace ape::scenariogen {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; }
  template <class Rng>
  double sample(Rng& rng) const {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
};

/// Parameters of one synthetic scene family.
///
/// The ego vehicle follows unicycle kinematics. Its speed starts in
/// `speed_range` and relaxes towards `cruise_speed` at `speed_relaxation`
/// (1/s) under Gaussian acceleration noise. With probability `p_turn` a scene
/// contains one turn of constant yaw rate drawn from `turn_rate_range` (random
/// sign) whose onset step is drawn from `turn_onset` (fraction of the full
/// horizon) and which lasts `turn_duration` seconds.
struct DistributionSpec {
  std::string name;
  Interval speed_range{5.0, 15.0};           // m/s
  Interval turn_rate_range{0.1, 0.4};        // rad/s, magnitude
  double p_turn = 0.5;
  double accel_noise_std = 0.2;              // m/s^2
  double context_density = 3.0;              // mean features per scene
  HorizonSpec horizon;

  double cruise_speed = 10.0;                // m/s
  double speed_relaxation = 0.0;             // 1/s
  Interval turn_onset{0.0, 1.0};             // fraction of t_history + t_future
  Interval turn_duration{2.0, 6.0};          // s
  double neighbor_fraction = 0.5;            // share of context that is neighbor tracks
  std::size_t attr_width = kDefaultAttributeWidth;

  // Sensor noise on the observed history only; the future stays exact.
  double position_noise_std = 0.0;           // m
  double velocity_noise_std = 0.0;           // m/s
};

inline void validate(const DistributionSpec& s) {
  require(!s.name.empty(), "distribution spec needs a name");
  require(s.speed_range.valid() && s.speed_range.lo >= 0.0, "invalid speed_range");
  require(s.turn_rate_range.valid() && s.turn_rate_range.lo >= 0.0, "invalid turn_rate_range");
  require(s.p_turn >= 0.0 && s.p_turn <= 1.0, "p_turn must be in [0, 1]");
  require(std::isfinite(s.accel_noise_std) && s.accel_noise_std >= 0.0,
          "accel_noise_std must be >= 0");
  require(std::isfinite(s.context_density) && s.context_density >= 0.0,
          "context_density must be >= 0");
  require(s.cruise_speed >= 0.0 && s.speed_relaxation >= 0.0, "invalid cruise parameters");
  require(s.turn_onset.valid() && s.turn_onset.lo >= 0.0 && s.turn_onset.hi <= 1.0,
          "turn_onset must lie in [0, 1]");
  require(s.turn_duration.valid() && s.turn_duration.lo > 0.0, "invalid turn_duration");
  require(s.neighbor_fraction >= 0.0 && s.neighbor_fraction <= 1.0,
          "neighbor_fraction must be in [0, 1]");
  require(s.attr_width >= 4, "attr_width must be >= 4");
  require(std::isfinite(s.position_noise_std) && s.position_noise_std >= 0.0 &&
              std::isfinite(s.velocity_noise_std) && s.velocity_noise_std >= 0.0,
          "observation noise std must be >= 0");
  validate(s.horizon);
}

/// Straight-heavy highway traffic: fast, narrow speed band, few gentle turns,
/// no speed regulation.
inline DistributionSpec family_a(HorizonSpec horizon = {}) {
  DistributionSpec s;
  s.name = "family_a";
  s.speed_range = {10.0, 14.0};
  s.turn_rate_range = {0.02, 0.1};
  s.p_turn = 0.1;
  s.accel_noise_std = 0.3;
  s.horizon = horizon;
  s.cruise_speed = 8.0;
  s.speed_relaxation = 0.0;
  s.turn_onset = {0.0, 0.6};
  s.position_noise_std = 0.1;
  s.velocity_noise_std = 0.5;
  return s;
}

/// Turn-heavy urban traffic: wide speed band that relaxes toward a cruise
/// speed, frequent sharper turns.
inline DistributionSpec family_b(HorizonSpec horizon = {}) {
  DistributionSpec s = family_a(horizon);
  s.name = "family_b";
  s.speed_range = {3.0, 14.0};
  s.turn_rate_range = {0.15, 0.45};
  s.p_turn = 0.7;
  s.speed_relaxation = 0.5;
  return s;
}

inline std::optional<DistributionSpec> family_by_name(const std::string& name,
                                                      HorizonSpec horizon = {}) {
  if (name == "family_a") return family_a(horizon);
  if (name == "family_b") return family_b(horizon);
  return std::nullopt;
}

/// Ground-truth labels that are not part of a Scene.
struct ManeuverInfo {
  bool turning = false;
  double yaw_rate = 0.0;  // rad/s, signed
  int onset_step = 0;
};

struct LabeledScene {
  Scene scene;
  ManeuverInfo maneuver;
};

namespace detail {

inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x41504531u};
  return std::mt19937_64(seq);
}

template <class Rng>
std::vector<ContextFeature> sample_context(const DistributionSpec& spec,
                                           const std::vector<AgentState>& ego, Rng& rng) {
  std::vector<ContextFeature> out;
  const int count = std::poisson_distribution<int>(spec.context_density)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const AgentState& now = ego[static_cast<std::size_t>(spec.horizon.t_history - 1)];
  for (int i = 0; i < count; ++i) {
    ContextFeature f;
    f.attributes.assign(spec.attr_width, 0.0);
    const double lateral = (unit(rng) - 0.5) * 20.0;
    const double ahead = (unit(rng) - 0.3) * 40.0;
    const double c = std::cos(now.heading);
    const double s = std::sin(now.heading);
    const double bx = now.x + c * ahead - s * lateral;
    const double by = now.y + s * ahead + c * lateral;
    if (unit(rng) < spec.neighbor_fraction) {
      f.kind = ContextKind::kNeighborTrack;
      const double speed = spec.speed_range.sample(rng);
      const double heading = now.heading + 0.1 * gauss(rng);
      const double vx = speed * std::cos(heading);
      const double vy = speed * std::sin(heading);
      const int len = 1 + static_cast<int>(unit(rng) * 5.0);
      for (int k = len - 1; k >= 0; --k) {
        f.points.push_back({bx - vx * spec.horizon.dt * k, by - vy * spec.horizon.dt * k});
      }
      f.attributes[0] = vx;
      f.attributes[1] = vy;
      f.attributes[2] = speed;
      f.attributes[3] = heading;
    } else {
      f.kind = ContextKind::kMapPolyline;
      const int len = 2 + static_cast<int>(unit(rng) * 8.0);
      for (int k = 0; k < len; ++k) {
        f.points.push_back({bx + c * 5.0 * k, by + s * 5.0 * k});
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace detail

template <class Rng>
LabeledScene generate_one(const DistributionSpec& spec, Rng& rng, std::string id) {
  const HorizonSpec& h = spec.horizon;
  const int total = h.total();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  ManeuverInfo info;
  info.turning = unit(rng) < spec.p_turn;
  if (info.turning) {
    const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    info.yaw_rate = sign * spec.turn_rate_range.sample(rng);
    info.onset_step = static_cast<int>(std::floor(spec.turn_onset.sample(rng) * total));
  }
  const int turn_steps =
      info.turning ? std::max(1, static_cast<int>(std::lround(spec.turn_duration.sample(rng) / h.dt)))
                   : 0;

  double x = (unit(rng) - 0.5) * 200.0;
  double y = (unit(rng) - 0.5) * 200.0;
  double heading = wrap_angle((unit(rng) * 2.0 - 1.0) * std::numbers::pi);
  double v = spec.speed_range.sample(rng);

  std::vector<AgentState> states;
  states.reserve(static_cast<std::size_t>(total));
  for (int k = 0; k < total; ++k) {
    states.push_back({x, y, v * std::cos(heading), v * std::sin(heading), heading});
    const bool in_turn = info.turning && k >= info.onset_step && k < info.onset_step + turn_steps;
    const double yaw_rate = in_turn ? info.yaw_rate : 0.0;
    x += v * std::cos(heading) * h.dt;
    y += v * std::sin(heading) * h.dt;
    heading = wrap_angle(heading + yaw_rate * h.dt);
    const double accel = spec.speed_relaxation * (spec.cruise_speed - v) +
                         spec.accel_noise_std * noise(rng);
    v = std::max(0.0, v + accel * h.dt);
  }

  LabeledScene out;
  out.maneuver = info;
  Scene& sc = out.scene;
  sc.id = std::move(id);
  sc.horizon = h;
  sc.dataset_tag = spec.name;
  sc.ego_history.dt = h.dt;
  sc.ego_history.states.assign(states.begin(), states.begin() + h.t_history);
  if (spec.position_noise_std > 0.0 || spec.velocity_noise_std > 0.0) {
    for (AgentState& st : sc.ego_history.states) {
      st.x += spec.position_noise_std * noise(rng);
      st.y += spec.position_noise_std * noise(rng);
      st.vx += spec.velocity_noise_std * noise(rng);
      st.vy += spec.velocity_noise_std * noise(rng);
    }
  }
  sc.ego_future_gt = Trajectory{{states.begin() + h.t_history, states.end()}, h.dt};
  sc.context = detail::sample_context(spec, states, rng);
  return out;
}

inline std::vector<LabeledScene> generate_labeled(const DistributionSpec& spec, std::size_t n,
                                                  std::uint64_t seed) {
  validate(spec);
  require(n >= 1, "generate needs n >= 1");
  std::vector<LabeledScene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::substream(seed, i);
    out.push_back(generate_one(spec, rng, spec.name + "-" + std::to_string(seed) + "-" +
                                              std::to_string(i)));
  }
  return out;
}

inline std::vector<Scene> generate(const DistributionSpec& spec, std::size_t n,
                                   std::uint64_t seed) {
  std::vector<Scene> out;
  for (auto& l : generate_labeled(spec, n, seed)) out.push_back(std::move(l.scene));
  return out;
}

struct MixSpec {
  DistributionSpec in_dist;
  DistributionSpec out_dist;
  double ood_ratio = 0.0;
  std::size_t n_scenes = 100;
  std::uint64_t seed = 0;
};

inline std::size_t ood_count(const MixSpec& mix) {
  return static_cast<std::size_t>(std::llround(mix.ood_ratio * static_cast<double>(mix.n_scenes)));
}

/// Exactly round(ood_ratio * n) scenes come from out_dist; the rest from
/// in_dist. The combined list is shuffled by the seed.
inline std::vector<Scene> generate_mixture(const MixSpec& mix) {
  require(std::isfinite(mix.ood_ratio) && mix.ood_ratio >= 0.0 && mix.ood_ratio <= 1.0,
          "ood_ratio must be in [0, 1]");
  require(mix.n_scenes >= 1, "mixture needs n_scenes >= 1");
  validate(mix.in_dist);
  validate(mix.out_dist);
  require(mix.in_dist.horizon == mix.out_dist.horizon, "mixture families must share a horizon");
  const std::size_t n_ood = ood_count(mix);
  const std::size_t n_in = mix.n_scenes - n_ood;
  std::vector<Scene> out;
  out.reserve(mix.n_scenes);
  if (n_in > 0) {
    for (auto& s : generate(mix.in_dist, n_in, mix.seed)) out.push_back(std::move(s));
  }
  if (n_ood > 0) {
    for (auto& s : generate(mix.out_dist, n_ood, mix.seed ^ 0x9e3779b97f4a7c15ULL)) {
      out.push_back(std::move(s));
    }
  }
  std::mt19937_64 rng(mix.seed + 0x5851f42d4c957f2dULL);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL scene files. Doubles are written with 17 significant digits so that a
// load reproduces every bit.

namespace detail {

inline void put_double(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

inline void put_string(std::string& out, const std::string& s) { out += nlohmann::json(s).dump(); }

inline void put_trajectory(std::string& out, const Trajectory& t) {
  out += "{\"dt\":";
  put_double(out, t.dt);
  out += ",\"states\":[";
  for (std::size_t i = 0; i < t.states.size(); ++i) {
    const AgentState& s = t.states[i];
    if (i) out += ',';
    out += '[';
    put_double(out, s.x);
    out += ',';
    put_double(out, s.y);
    out += ',';
    put_double(out, s.vx);
    out += ',';
    put_double(out, s.vy);
    out += ',';
    put_double(out, s.heading);
    out += ']';
  }
  out += "]}";
}

inline Trajectory get_trajectory(const nlohmann::json& j) {
  Trajectory t;
  t.dt = j.at("dt").get<double>();
  for (const auto& s : j.at("states")) {
    require(s.size() == 5, "state must have 5 fields");
    t.states.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>(),
                        s[3].get<double>(), s[4].get<double>()});
  }
  return t;
}

}  // namespace detail

inline std::string scene_to_json(const Scene& sc) {
  using detail::put_double;
  std::string out = "{\"id\":";
  detail::put_string(out, sc.id);
  out += ",\"dataset_tag\":";
  detail::put_string(out, sc.dataset_tag);
  out += ",\"horizon\":{\"t_history\":" + std::to_string(sc.horizon.t_history) +
         ",\"t_future\":" + std::to_string(sc.horizon.t_future) + ",\"dt\":";
  put_double(out, sc.horizon.dt);
  out += "},\"ego_history\":";
  detail::put_trajectory(out, sc.ego_history);
  out += ",\"context\":[";
  for (std::size_t i = 0; i < sc.context.size(); ++i) {
    const ContextFeature& c = sc.context[i];
    if (i) out += ',';
    out += "{\"kind\":\"";
    out += c.kind == ContextKind::kMapPolyline ? "map_polyline" : "neighbor_track";
    out += "\",\"points\":[";
    for (std::size_t k = 0; k < c.points.size(); ++k) {
      if (k) out += ',';
      out += '[';
      put_double(out, c.points[k].x);
      out += ',';
      put_double(out, c.points[k].y);
      out += ']';
    }
    out += "],\"attributes\":[";
    for (std::size_t k = 0; k < c.attributes.size(); ++k) {
      if (k) out += ',';
      put_double(out, c.attributes[k]);
    }
    out += "]}";
  }
  out += "],\"ego_future_gt\":";
  if (sc.ego_future_gt) {
    detail::put_trajectory(out, *sc.ego_future_gt);
  } else {
    out += "null";
  }
  if (sc.ego_frame) {
    out += ",\"ego_frame\":[";
    put_double(out, sc.ego_frame->origin_x);
    out += ',';
    put_double(out, sc.ego_frame->origin_y);
    out += ',';
    put_double(out, sc.ego_frame->heading);
    out += ']';
  }
  out += '}';
  return out;
}

inline Scene scene_from_json(std::string_view line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  Scene sc;
  sc.id = j.at("id").get<std::string>();
  sc.dataset_tag = j.at("dataset_tag").get<std::string>();
  const auto& h = j.at("horizon");
  sc.horizon = {h.at("t_history").get<int>(), h.at("t_future").get<int>(), h.at("dt").get<double>()};
  sc.ego_history = detail::get_trajectory(j.at("ego_history"));
  for (const auto& c : j.at("context")) {
    ContextFeature f;
    const std::string kind = c.at("kind").get<std::string>();
    require(kind == "map_polyline" || kind == "neighbor_track", "unknown context kind: " + kind);
    f.kind = kind == "map_polyline" ? ContextKind::kMapPolyline : ContextKind::kNeighborTrack;
    for (const auto& p : c.at("points")) f.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    f.attributes = c.at("attributes").get<std::vector<double>>();
    sc.context.push_back(std::move(f));
  }
  if (!j.at("ego_future_gt").is_null()) sc.ego_future_gt = detail::get_trajectory(j.at("ego_future_gt"));
  if (j.contains("ego_frame")) {
    const auto& f = j.at("ego_frame");
    sc.ego_frame = FrameTransform{f.at(0).get<double>(), f.at(1).get<double>(), f.at(2).get<double>()};
  }
  validate(sc);
  return sc;
}

/// Thrown by load_scenes; `line` is 1-based.
class SceneFileError : public ValidationError {
 public:
  SceneFileError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline bool is_gzip_path(const std::string& path) {
  return path.size() >= 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

inline void write_text(const std::string& path, const std::string& text) {
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.c_str(), "wb");
    require(f != nullptr, "cannot open for writing: " + path);
    const int written = text.empty() ? 0 : gzwrite(f, text.data(), static_cast<unsigned>(text.size()));
    gzclose(f);
    require(written == static_cast<int>(text.size()), "short gzip write: " + path);
    return;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), "cannot open for writing: " + path);
  os << text;
  require(static_cast<bool>(os), "write failed: " + path);
}

inline std::string read_text(const std::string& path) {
  if (is_gzip_path(path)) {
    gzFile f = gzopen(path.c_str(), "rb");
    require(f != nullptr, "cannot open for reading: " + path);
    std::string out;
    char buf[1 << 15];
    int n = 0;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
    gzclose(f);
    require(n == 0, "gzip read failed: " + path);
    return out;
  }
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "cannot open for reading: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_scenes(const std::string& path, std::span<const Scene> scenes) {
  std::string text;
  for (const auto& s : scenes) {
    text += scene_to_json(s);
    text += '\n';
  }
  write_text(path, text);
}

inline std::vector<Scene> load_scenes(const std::string& path) {
  const std::string text = read_text(path);
  std::vector<Scene> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    try {
      out.push_back(scene_from_json(line));
    } catch (const std::exception& e) {
      throw SceneFileError(line_no, e.what());
    }
  }
  return out;
}

}  // namespace ape::scenariogen

#endif  // APE_SCENARIOGEN_HPP_
