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

// Deliberately naive reference implementations of the metrics, written
// without reusing any library code path.

#ifndef APE_TESTS_ORACLES_HPP_
#define APE_TESTS_ORACLES_HPP_

#include <algorithm>
#include <cmath>
#include <vector>

#include "ape/core.hpp"

namespace ape::oracle {

inline double dist(double ax, double ay, double bx, double by) {
  return std::sqrt((ax - bx) * (ax - bx) + (ay - by) * (ay - by));
}

inline double min_ade(const PredictionSet& set, const Trajectory& gt) {
  double best = 1e300;
  for (const auto& c : set.candidates) {
    double s = 0.0;
    for (std::size_t t = 0; t < gt.states.size(); ++t) {
      s += dist(c.waypoints[t].x, c.waypoints[t].y, gt.states[t].x, gt.states[t].y);
    }
    best = std::min(best, s / static_cast<double>(gt.states.size()));
  }
  return best;
}

inline double min_fde(const PredictionSet& set, const Trajectory& gt) {
  double best = 1e300;
  const std::size_t t = gt.states.size() - 1;
  for (const auto& c : set.candidates) {
    best = std::min(best, dist(c.waypoints[t].x, c.waypoints[t].y, gt.states[t].x, gt.states[t].y));
  }
  return best;
}

/// Polar decomposition of the error against the gt heading.
inline bool candidate_within(const PredictionCandidate& c, const Trajectory& gt, int step,
                             double lat_tol, double lon_tol) {
  const auto& g = gt.states[static_cast<std::size_t>(step - 1)];
  const double ex = c.waypoints[static_cast<std::size_t>(step - 1)].x - g.x;
  const double ey = c.waypoints[static_cast<std::size_t>(step - 1)].y - g.y;
  const double r = std::sqrt(ex * ex + ey * ey);
  const double a = std::atan2(ey, ex) - g.heading;
  const double lon = r * std::cos(a);
  const double lat = r * std::sin(a);
  return std::abs(lon) <= lon_tol && std::abs(lat) <= lat_tol;
}

inline bool is_miss(const PredictionSet& set, const Trajectory& gt, int step, double lat_tol,
                    double lon_tol) {
  for (const auto& c : set.candidates) {
    if (candidate_within(c, gt, step, lat_tol, lon_tol)) return false;
  }
  return true;
}

/// AP as the sum, over true positives in rank order, of the recall increment
/// times the best precision at any equal or later rank.
inline double average_precision(const std::vector<double>& conf, const std::vector<bool>& tp,
                                bool denominator_is_scenes) {
  const std::size_t n = conf.size();
  std::vector<std::size_t> order;
  std::vector<bool> used(n, false);
  for (std::size_t r = 0; r < n; ++r) {
    // Selection sort: highest confidence, earliest index on ties.
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i] && (pick == n || conf[i] > conf[pick])) pick = i;
    }
    used[pick] = true;
    order.push_back(pick);
  }
  std::size_t positives = 0;
  for (bool b : tp) positives += b ? 1 : 0;
  if (positives == 0) return 0.0;
  const double denom = denominator_is_scenes ? static_cast<double>(n) : static_cast<double>(positives);
  std::vector<double> prec(n);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (tp[order[r]]) ++hits;
    prec[r] = static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  double ap = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!tp[order[r]]) continue;
    double best = 0.0;
    for (std::size_t j = r; j < n; ++j) best = std::max(best, prec[j]);
    ap += best / denom;
  }
  return ap;
}

/// Mean over steps of the population variance of x plus that of y.
inline double variance_statistic(const std::vector<std::vector<Waypoint>>& tops) {
  const std::size_t steps = tops[0].size();
  const double n = static_cast<double>(tops.size());
  double total = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    double sx = 0, sy = 0, sxx = 0, syy = 0;
    for (const auto& t : tops) {
      sx += t[s].x;
      sy += t[s].y;
    }
    const double mx = sx / n, my = sy / n;
    for (const auto& t : tops) {
      sxx += (t[s].x - mx) * (t[s].x - mx);
      syy += (t[s].y - my) * (t[s].y - my);
    }
    total += sxx / n + syy / n;
  }
  return total / static_cast<double>(steps);
}

}  // namespace ape::oracle

#endif  // APE_TESTS_ORACLES_HPP_
