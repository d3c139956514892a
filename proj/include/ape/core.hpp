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

#ifndef APE_CORE_HPP_
#define APE_CORE_HPP_

#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ape {

/// Raised when an input violates a documented invariant or precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double angle) {
  constexpr double kPi = std::numbers::pi;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double wrapped = std::fmod(angle + kPi, kTwoPi);
  if (wrapped < 0.0) wrapped += kTwoPi;
  wrapped -= kPi;
  // fmod maps +pi onto -pi; the half-open interval keeps +pi.
  if (wrapped <= -kPi) wrapped = kPi;
  return wrapped;
}

struct Waypoint {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Waypoint&, const Waypoint&) = default;
};

struct AgentState {
  double x = 0.0;        // m
  double y = 0.0;        // m
  double vx = 0.0;       // m/s
  double vy = 0.0;       // m/s
  double heading = 0.0;  // rad, counterclockwise from +x, in (-pi, pi]

  Waypoint position() const { return {x, y}; }
  double speed() const { return std::hypot(vx, vy); }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(vx) && std::isfinite(vy) &&
           std::isfinite(heading);
  }

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

struct Trajectory {
  std::vector<AgentState> states;
  double dt = 0.1;  // s

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
  const AgentState& back() const { return states.back(); }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

inline void validate(const Trajectory& traj) {
  require(!traj.states.empty(), "trajectory must contain at least one state");
  require(std::isfinite(traj.dt) && traj.dt > 0.0, "trajectory dt must be positive");
  for (const auto& s : traj.states) require(s.finite(), "trajectory state is not finite");
}

enum class ContextKind { kMapPolyline, kNeighborTrack };

struct ContextFeature {
  ContextKind kind = ContextKind::kMapPolyline;
  std::vector<Waypoint> points;
  std::vector<double> attributes;

  friend bool operator==(const ContextFeature&, const ContextFeature&) = default;
};

inline constexpr std::size_t kDefaultAttributeWidth = 4;

struct HorizonSpec {
  int t_history = 10;
  int t_future = 30;
  double dt = 0.1;

  int total() const { return t_history + t_future; }

  friend bool operator==(const HorizonSpec&, const HorizonSpec&) = default;
};

inline void validate(const HorizonSpec& h) {
  require(h.t_history >= 1, "t_history must be >= 1");
  require(h.t_future >= 1, "t_future must be >= 1");
  require(std::isfinite(h.dt) && h.dt > 0.0, "horizon dt must be positive");
}

/// Rigid transform that maps world coordinates into a scene's ego frame:
/// p_ego = R(-heading) * (p_world - origin).
struct FrameTransform {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double heading = 0.0;

  friend bool operator==(const FrameTransform&, const FrameTransform&) = default;
};

struct Scene {
  std::string id;
  HorizonSpec horizon;
  Trajectory ego_history;
  std::vector<ContextFeature> context;
  std::optional<Trajectory> ego_future_gt;
  std::string dataset_tag;
  // Set by to_ego_frame: the world-to-ego transform that was applied.
  std::optional<FrameTransform> ego_frame;

  friend bool operator==(const Scene&, const Scene&) = default;
};

inline void validate(const Scene& scene) {
  validate(scene.horizon);
  validate(scene.ego_history);
  require(static_cast<int>(scene.ego_history.size()) == scene.horizon.t_history,
          "scene '" + scene.id + "': history length " + std::to_string(scene.ego_history.size()) +
              " != t_history " + std::to_string(scene.horizon.t_history));
  if (scene.ego_future_gt) {
    validate(*scene.ego_future_gt);
    require(static_cast<int>(scene.ego_future_gt->size()) == scene.horizon.t_future,
            "scene '" + scene.id + "': future length " +
                std::to_string(scene.ego_future_gt->size()) + " != t_future " +
                std::to_string(scene.horizon.t_future));
  }
  for (const auto& c : scene.context) {
    if (c.kind == ContextKind::kMapPolyline) {
      require(c.points.size() >= 2, "map polyline needs at least 2 points");
    } else {
      require(!c.points.empty(), "neighbor track needs at least 1 point");
    }
  }
}

enum class ExpertSource { kLearned, kRule };

inline const char* to_string(ExpertSource s) {
  return s == ExpertSource::kLearned ? "learned" : "rule";
}

struct PredictionCandidate {
  std::vector<Waypoint> waypoints;
  double confidence = 1.0;
  ExpertSource source = ExpertSource::kLearned;

  friend bool operator==(const PredictionCandidate&, const PredictionCandidate&) = default;
};

struct PredictionSet {
  std::vector<PredictionCandidate> candidates;
  ExpertSource source = ExpertSource::kLearned;

  std::size_t size() const { return candidates.size(); }

  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

inline void validate(const PredictionSet& set, int t_future) {
  require(!set.candidates.empty(), "prediction set is empty");
  double total = 0.0;
  for (const auto& c : set.candidates) {
    require(static_cast<int>(c.waypoints.size()) == t_future,
            "candidate length does not match t_future");
    require(std::isfinite(c.confidence) && c.confidence >= 0.0 && c.confidence <= 1.0,
            "candidate confidence outside [0, 1]");
    total += c.confidence;
  }
  if (set.source == ExpertSource::kRule) {
    require(set.candidates.size() == 1 && set.candidates[0].confidence == 1.0,
            "rule set must hold exactly one candidate with confidence 1");
  } else {
    require(std::abs(total - 1.0) <= 1e-6, "learned confidences must sum to 1");
  }
}

inline double displacement(Waypoint a, Waypoint b) {
  require(std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(b.x) && std::isfinite(b.y),
          "displacement of non-finite waypoint");
  return std::hypot(a.x - b.x, a.y - b.y);
}

namespace detail {

struct Rigid {
  double c = 1.0;
  double s = 0.0;
  double ox = 0.0;
  double oy = 0.0;
  double dheading = 0.0;

  // Forward: world -> ego.
  static Rigid to_ego(const FrameTransform& f) {
    return {std::cos(f.heading), std::sin(f.heading), f.origin_x, f.origin_y, -f.heading};
  }

  Waypoint point(Waypoint p) const {
    const double dx = p.x - ox;
    const double dy = p.y - oy;
    return {c * dx + s * dy, -s * dx + c * dy};
  }
  AgentState state(const AgentState& st) const {
    const Waypoint p = point(st.position());
    return {p.x, p.y, c * st.vx + s * st.vy, -s * st.vx + c * st.vy,
            wrap_angle(st.heading + dheading)};
  }
};

struct InverseRigid {
  double c = 1.0;
  double s = 0.0;
  double ox = 0.0;
  double oy = 0.0;
  double heading = 0.0;

  Waypoint point(Waypoint p) const { return {c * p.x - s * p.y + ox, s * p.x + c * p.y + oy}; }
  AgentState state(const AgentState& st) const {
    const Waypoint p = point(st.position());
    return {p.x, p.y, c * st.vx - s * st.vy, s * st.vx + c * st.vy, wrap_angle(st.heading + heading)};
  }
};

template <class Map>
Scene map_scene(const Scene& in, const Map& m) {
  Scene out = in;
  for (auto& s : out.ego_history.states) s = m.state(s);
  if (out.ego_future_gt) {
    for (auto& s : out.ego_future_gt->states) s = m.state(s);
  }
  for (auto& c : out.context) {
    for (auto& p : c.points) p = m.point(p);
  }
  return out;
}

}  // namespace detail

/// Re-expresses every coordinate of the scene so that the last history state
/// sits at the origin facing +x. The applied transform is composed into
/// `scene.ego_frame` so that from_ego_frame can undo it.
inline Scene to_ego_frame(const Scene& scene) {
  validate(scene);
  const AgentState& last = scene.ego_history.back();
  const FrameTransform step{last.x, last.y, last.heading};
  Scene out = detail::map_scene(scene, detail::Rigid::to_ego(step));
  // The last state may carry rounding noise; pin it exactly.
  out.ego_history.states.back().x = 0.0;
  out.ego_history.states.back().y = 0.0;
  out.ego_history.states.back().heading = 0.0;

  if (scene.ego_frame) {
    // world -> previous frame -> new frame.
    const FrameTransform& prev = *scene.ego_frame;
    const double c = std::cos(prev.heading);
    const double s = std::sin(prev.heading);
    out.ego_frame = FrameTransform{prev.origin_x + c * step.origin_x - s * step.origin_y,
                                   prev.origin_y + s * step.origin_x + c * step.origin_y,
                                   wrap_angle(prev.heading + step.heading)};
  } else {
    out.ego_frame = step;
  }
  return out;
}

/// Inverse of to_ego_frame. Scenes without a recorded transform are returned as is.
inline Scene from_ego_frame(const Scene& scene) {
  if (!scene.ego_frame) return scene;
  const FrameTransform& f = *scene.ego_frame;
  Scene out = detail::map_scene(
      scene, detail::InverseRigid{std::cos(f.heading), std::sin(f.heading), f.origin_x,
                                  f.origin_y, f.heading});
  out.ego_frame.reset();
  return out;
}

/// Maps ego-frame waypoints back to world coordinates using the scene's transform.
inline std::vector<Waypoint> waypoints_to_world(const Scene& ego_scene,
                                                std::span<const Waypoint> points) {
  std::vector<Waypoint> out(points.begin(), points.end());
  if (!ego_scene.ego_frame) return out;
  const FrameTransform& f = *ego_scene.ego_frame;
  const detail::InverseRigid inv{std::cos(f.heading), std::sin(f.heading), f.origin_x, f.origin_y,
                                 f.heading};
  for (auto& p : out) p = inv.point(p);
  return out;
}

inline std::pair<Trajectory, Trajectory> split_history_future(const Trajectory& traj,
                                                              const HorizonSpec& horizon) {
  validate(horizon);
  require(static_cast<int>(traj.size()) == horizon.total(),
          "trajectory length " + std::to_string(traj.size()) + " != t_history + t_future (" +
              std::to_string(horizon.total()) + ")");
  const auto split = traj.states.begin() + horizon.t_history;
  return {Trajectory{{traj.states.begin(), split}, traj.dt},
          Trajectory{{split, traj.states.end()}, traj.dt}};
}

inline std::vector<Waypoint> positions(const Trajectory& traj) {
  std::vector<Waypoint> out;
  out.reserve(traj.size());
  for (const auto& s : traj.states) out.push_back(s.position());
  return out;
}

}  // namespace ape

#endif  // APE_CORE_HPP_
