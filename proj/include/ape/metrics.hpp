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

#ifndef APE_METRICS_HPP_
#define APE_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ape/core.hpp"

namespace ape::metrics {

/// Lateral/longitudinal box around the ground truth at `eval_step` (1-based).
/// An error equal to the tolerance counts as inside.
struct MissTolerance {
  double lateral = 1.0;
  double longitudinal = 2.0;
  // 1..t_future; 0 selects the final step.
  int eval_step = 0;
};

inline int resolve_eval_step(const MissTolerance& tol, int t_future) {
  require(tol.lateral > 0.0 && tol.longitudinal > 0.0, "miss tolerances must be positive");
  const int step = tol.eval_step == 0 ? t_future : tol.eval_step;
  require(step >= 1 && step <= t_future, "miss eval_step out of range");
  return step;
}

struct MetricReport {
  std::string dataset_tag;
  std::string method;
  double min_ade = 0.0;
  double min_fde = 0.0;
  double miss_rate = 0.0;
  double map_score = 0.0;
  std::size_t n_scenes = 0;
};

inline void check_lengths(std::span<const PredictionCandidate> candidates, const Trajectory& gt) {
  require(!candidates.empty(), "metric needs at least one candidate");
  require(!gt.empty(), "metric needs a non-empty ground truth");
  for (const auto& c : candidates) {
    require(c.waypoints.size() == gt.size(), "candidate length does not match ground truth");
  }
}

inline double ade(const PredictionCandidate& candidate, const Trajectory& gt) {
  double sum = 0.0;
  for (std::size_t t = 0; t < gt.size(); ++t) {
    sum += displacement(candidate.waypoints[t], gt.states[t].position());
  }
  return sum / static_cast<double>(gt.size());
}

inline double fde(const PredictionCandidate& candidate, const Trajectory& gt) {
  return displacement(candidate.waypoints.back(), gt.back().position());
}

inline double min_ade(std::span<const PredictionCandidate> candidates, const Trajectory& gt) {
  check_lengths(candidates, gt);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) best = std::min(best, ade(c, gt));
  return best;
}

inline double min_ade(const PredictionSet& set, const Trajectory& gt) {
  return min_ade(std::span<const PredictionCandidate>(set.candidates), gt);
}

inline double min_fde(std::span<const PredictionCandidate> candidates, const Trajectory& gt) {
  check_lengths(candidates, gt);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) best = std::min(best, fde(c, gt));
  return best;
}

inline double min_fde(const PredictionSet& set, const Trajectory& gt) {
  return min_fde(std::span<const PredictionCandidate>(set.candidates), gt);
}

/// Error of `p` relative to the ground-truth state, split along its heading.
struct BoxError {
  double longitudinal = 0.0;
  double lateral = 0.0;
};

inline BoxError box_error(Waypoint p, const AgentState& gt) {
  const double dx = p.x - gt.x;
  const double dy = p.y - gt.y;
  const double c = std::cos(gt.heading);
  const double s = std::sin(gt.heading);
  return {c * dx + s * dy, -s * dx + c * dy};
}

inline bool within(const PredictionCandidate& candidate, const Trajectory& gt, int step,
                   const MissTolerance& tol) {
  const BoxError e = box_error(candidate.waypoints[step - 1], gt.states[step - 1]);
  return std::abs(e.longitudinal) <= tol.longitudinal && std::abs(e.lateral) <= tol.lateral;
}

inline bool is_miss(std::span<const PredictionCandidate> candidates, const Trajectory& gt,
                    const MissTolerance& tol) {
  check_lengths(candidates, gt);
  const int step = resolve_eval_step(tol, static_cast<int>(gt.size()));
  return std::none_of(candidates.begin(), candidates.end(),
                      [&](const PredictionCandidate& c) { return within(c, gt, step, tol); });
}

inline bool is_miss(const PredictionSet& set, const Trajectory& gt, const MissTolerance& tol) {
  return is_miss(std::span<const PredictionCandidate>(set.candidates), gt, tol);
}

struct ScoredScene {
  const PredictionSet* predictions = nullptr;
  const Trajectory* gt = nullptr;
};

/// What recall is measured against. Each scene holds one ground-truth object,
/// so the scene count is the natural denominator; counting only true
/// positives is kept for comparison with detectors that ignore misses.
enum class RecallBase { kScenes, kTruePositives };

inline std::size_t top_candidate(const PredictionSet& set) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < set.candidates.size(); ++i) {
    if (set.candidates[i].confidence > set.candidates[best].confidence) best = i;
  }
  return best;
}

/// All-point interpolated average precision over one detection per scene.
inline double average_precision(std::span<const double> confidences,
                                const std::vector<bool>& true_positive,
                                RecallBase base = RecallBase::kScenes) {
  require(!confidences.empty(), "average precision of an empty input");
  require(confidences.size() == true_positive.size(), "confidence/label size mismatch");
  const std::size_t n = confidences.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });

  const std::size_t positives =
      static_cast<std::size_t>(std::count(true_positive.begin(), true_positive.end(), true));
  const double denom = base == RecallBase::kScenes ? static_cast<double>(n)
                                                   : static_cast<double>(positives);
  if (positives == 0) return 0.0;

  std::vector<double> precision(n);
  std::vector<double> recall(n);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (true_positive[order[r]]) ++tp;
    precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
    recall[r] = static_cast<double>(tp) / denom;
  }
  for (std::size_t r = n - 1; r-- > 0;) precision[r] = std::max(precision[r], precision[r + 1]);

  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    ap += (recall[r] - prev_recall) * precision[r];
    prev_recall = recall[r];
  }
  return ap;
}

inline double map_score(std::span<const ScoredScene> scenes, const MissTolerance& tol,
                        RecallBase base = RecallBase::kScenes) {
  require(!scenes.empty(), "map_score of an empty input");
  std::vector<double> conf;
  std::vector<bool> tp;
  conf.reserve(scenes.size());
  tp.reserve(scenes.size());
  for (const auto& s : scenes) {
    require(s.predictions && s.gt, "map_score scene missing predictions or ground truth");
    require(!s.predictions->candidates.empty(), "map_score scene with empty prediction set");
    const PredictionCandidate& top = s.predictions->candidates[top_candidate(*s.predictions)];
    conf.push_back(top.confidence);
    tp.push_back(!is_miss(std::span<const PredictionCandidate>(&top, 1), *s.gt, tol));
  }
  return average_precision(conf, tp, base);
}

/// Relative improvement of a lower-is-better metric, in percent.
inline double perf_gain(double metric_proposed, double metric_baseline) {
  require(std::isfinite(metric_baseline) && metric_baseline > 0.0,
          "perf_gain baseline must be positive");
  require(std::isfinite(metric_proposed), "perf_gain proposed metric must be finite");
  return (1.0 - metric_proposed / metric_baseline) * 100.0;
}

/// Aggregates the four metrics over scenes in input order.
inline MetricReport evaluate(std::span<const ScoredScene> scenes, const MissTolerance& tol,
                             std::string dataset_tag, std::string method) {
  require(!scenes.empty(), "evaluate needs at least one scene");
  MetricReport report;
  report.dataset_tag = std::move(dataset_tag);
  report.method = std::move(method);
  double ade_sum = 0.0;
  double fde_sum = 0.0;
  std::size_t misses = 0;
  for (const auto& s : scenes) {
    ade_sum += min_ade(*s.predictions, *s.gt);
    fde_sum += min_fde(*s.predictions, *s.gt);
    if (is_miss(*s.predictions, *s.gt, tol)) ++misses;
  }
  const double n = static_cast<double>(scenes.size());
  report.min_ade = ade_sum / n;
  report.min_fde = fde_sum / n;
  report.miss_rate = static_cast<double>(misses) / n;
  report.map_score = map_score(scenes, tol);
  report.n_scenes = scenes.size();
  return report;
}

inline const char* csv_header() {
  return "dataset_tag,method,min_ade,min_fde,miss_rate,map_score,n_scenes";
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string to_csv_row(const MetricReport& r) {
  return r.dataset_tag + "," + r.method + "," + format_double(r.min_ade) + "," +
         format_double(r.min_fde) + "," + format_double(r.miss_rate) + "," +
         format_double(r.map_score) + "," + std::to_string(r.n_scenes);
}

}  // namespace ape::metrics

#endif  // APE_METRICS_HPP_
