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

#ifndef APE_ROUTING_HPP_
#define APE_ROUTING_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ape/core.hpp"
#include "ape/experts.hpp"
#include "ape/nn.hpp"

namespace ape::routing {

using nn::Vector;

struct RouterShape {
  int t_future = 30;
  int candidate_hidden = 64;
  int candidate_embed = 64;
  int head_width = 64;
  int head_layers = 3;

  friend bool operator==(const RouterShape&, const RouterShape&) = default;
};

/// Scores (scene, candidate) pairs. The scene embedding comes from a copy of
/// the learned expert's encoder that router updates never touch.
struct RouterParams {
  RouterShape shape;
  experts::SceneEncoder shared_encoder;
  nn::Mlp candidate_encoder;  // 2*t_future -> hidden -> embed, tanh
  nn::Mlp routing_head;       // [scene embed | candidate embed] -> ... -> 1
  // Metres per unit of candidate-encoder input.
  double waypoint_scale = 1.0;
};

/// Visits the trainable blocks only; the shared encoder is frozen.
template <class P, class F>
  requires std::is_same_v<std::remove_const_t<P>, RouterParams>
void for_each_block(P& p, F&& f) {
  nn::for_each_block(p.candidate_encoder, f);
  nn::for_each_block(p.routing_head, f);
}

inline RouterParams zeros_like(const RouterParams& p) {
  RouterParams z = p;
  z.candidate_encoder = p.candidate_encoder.zeros_like();
  z.routing_head = p.routing_head.zeros_like();
  z.shared_encoder.mlp = p.shared_encoder.mlp.zeros_like();
  return z;
}

inline RouterParams init_router(const RouterShape& shape, const experts::SceneEncoder& encoder,
                                std::uint64_t seed) {
  require(shape.t_future >= 1, "router horizon must be positive");
  require(shape.head_layers >= 1, "routing head needs at least one layer");
  std::mt19937_64 rng(seed);
  RouterParams p;
  p.shape = shape;
  p.shared_encoder = encoder;
  const int cand_widths[] = {2 * shape.t_future, shape.candidate_hidden, shape.candidate_embed};
  p.candidate_encoder = nn::make_mlp(cand_widths, true, false, rng);
  std::vector<int> head_widths{encoder.shape.embed_width + shape.candidate_embed};
  for (int i = 0; i + 1 < shape.head_layers; ++i) head_widths.push_back(shape.head_width);
  head_widths.push_back(1);
  p.routing_head = nn::make_mlp(head_widths, false, /*zero_last=*/true, rng);
  return p;
}

inline Vector candidate_features(const RouterParams& p, const PredictionCandidate& c) {
  require(static_cast<int>(c.waypoints.size()) == p.shape.t_future,
          "candidate length does not match the router horizon");
  Vector f(2 * p.shape.t_future);
  const double inv = 1.0 / p.waypoint_scale;
  for (std::size_t t = 0; t < c.waypoints.size(); ++t) {
    f[2 * t] = c.waypoints[t].x * inv;
    f[2 * t + 1] = c.waypoints[t].y * inv;
  }
  return f;
}

struct ScoreTape {
  nn::Tape scene;
  nn::Tape candidate;
  nn::Tape head;
};

/// `scene_raw` is experts::scene_features of an ego-frame scene.
inline double route_score(const RouterParams& p, const Vector& scene_raw,
                          const PredictionCandidate& c, ScoreTape* tape = nullptr) {
  const Vector e = experts::encode(p.shared_encoder, scene_raw, tape ? &tape->scene : nullptr);
  const Vector ce =
      nn::forward(p.candidate_encoder, candidate_features(p, c), tape ? &tape->candidate : nullptr);
  Vector joint(e.size() + ce.size());
  joint << e, ce;
  return nn::forward(p.routing_head, joint, tape ? &tape->head : nullptr)[0];
}

inline double route_score(const RouterParams& p, const Scene& scene, const PredictionCandidate& c) {
  require(scene.horizon.t_future == p.shape.t_future, "scene horizon does not match the router");
  return route_score(p, experts::scene_features(scene, p.shared_encoder.shape), c);
}

/// Adds d(score)/d(theta) * upstream into `grad` (trainable blocks only).
inline void score_backward(const RouterParams& p, const ScoreTape& tape, double upstream,
                           RouterParams& grad) {
  Vector g(1);
  g[0] = upstream;
  const Vector d_joint = nn::backward(p.routing_head, tape.head, g, grad.routing_head);
  const Eigen::Index scene_width = p.shared_encoder.shape.embed_width;
  const Vector d_cand = d_joint.tail(d_joint.size() - scene_width);
  nn::backward(p.candidate_encoder, tape.candidate, d_cand, grad.candidate_encoder);
  // The scene half of d_joint would flow into the frozen encoder; dropped.
}

struct RoutingPair {
  std::string scene_id;
  Vector scene_features;  // raw experts::scene_features, ego frame
  PredictionCandidate chosen;
  PredictionCandidate rejected;
  double ade_chosen = 0.0;
  double ade_rejected = 0.0;
};

inline void validate(const RoutingPair& pair) {
  require(pair.ade_chosen <= pair.ade_rejected, "routing pair has ade_chosen > ade_rejected");
}

enum class Link { kLogistic, kReluEps };

inline constexpr double kReluEps = 1e-6;

inline const char* to_string(Link l) { return l == Link::kLogistic ? "logistic" : "relu_eps"; }

/// Loss on the score gap and its derivative with respect to that gap.
inline std::pair<double, double> link_loss(double gap, Link link) {
  if (link == Link::kLogistic) {
    // -log(sigmoid(gap)) = softplus(-gap)
    return {nn::softplus(-gap), -nn::sigmoid(-gap)};
  }
  if (gap > kReluEps) return {-std::log(gap), -1.0 / gap};
  return {-std::log(kReluEps), 0.0};
}

struct RouterLossAndGrad {
  double loss = 0.0;
  double gap = 0.0;
  RouterParams grad;
};

inline double routing_loss_accumulate(const RouterParams& p, const RoutingPair& pair, Link link,
                                      RouterParams& grad, double* gap_out = nullptr) {
  validate(pair);
  ScoreTape chosen_tape;
  ScoreTape rejected_tape;
  const double s_c = route_score(p, pair.scene_features, pair.chosen, &chosen_tape);
  const double s_r = route_score(p, pair.scene_features, pair.rejected, &rejected_tape);
  const double gap = s_c - s_r;
  const auto [loss, d_gap] = link_loss(gap, link);
  if (d_gap != 0.0) {
    score_backward(p, chosen_tape, d_gap, grad);
    score_backward(p, rejected_tape, -d_gap, grad);
  }
  if (gap_out) *gap_out = gap;
  return loss;
}

inline RouterLossAndGrad routing_loss_and_grad(const RouterParams& p, const RoutingPair& pair,
                                               Link link = Link::kLogistic) {
  RouterLossAndGrad out{0.0, 0.0, zeros_like(p)};
  out.loss = routing_loss_accumulate(p, pair, link, out.grad, &out.gap);
  return out;
}

inline double routing_loss(const RouterParams& p, const RoutingPair& pair,
                           Link link = Link::kLogistic) {
  RouterParams scratch = zeros_like(p);
  return routing_loss_accumulate(p, pair, link, scratch);
}

/// One descent step on the mean pair loss. The shared encoder is copied
/// through untouched.
inline RouterParams router_update(const RouterParams& p, std::span<const RoutingPair* const> pairs,
                                  double lr, Link link = Link::kLogistic,
                                  double* loss_out = nullptr) {
  require(!pairs.empty(), "router batch is empty");
  require(lr >= 0.0, "learning rate must be non-negative");
  RouterParams grad = zeros_like(p);
  double loss = 0.0;
  for (const RoutingPair* pair : pairs) loss += routing_loss_accumulate(p, *pair, link, grad);
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  if (loss_out) *loss_out = loss * inv_n;
  RouterParams next = p;
  if (lr == 0.0) return next;
  nn::axpy(-lr * inv_n, grad, next);
  return next;
}

inline RouterParams router_update(const RouterParams& p, std::span<const RoutingPair> pairs,
                                  double lr, Link link = Link::kLogistic) {
  std::vector<const RoutingPair*> ptrs;
  for (const auto& pr : pairs) ptrs.push_back(&pr);
  return router_update(p, std::span<const RoutingPair* const>(ptrs), lr, link);
}

enum class SelectionMode { kExpertLevel, kCandidateLevel };

/// Picks among expert prediction sets by route score. Expert level returns the
/// set holding the best-scoring candidate; candidate level pools all candidates
/// and returns the top `k_out` with confidences renormalized. Ties favour the
/// learned expert, then lower candidate index.
inline PredictionSet select_by_scores(std::span<const PredictionSet> sets,
                                      const std::vector<std::vector<double>>& scores,
                                      SelectionMode mode, int k_out = 6) {
  require(!sets.empty(), "select_prediction needs at least one set");
  for (const auto& s : sets) require(!s.candidates.empty(), "select_prediction got an empty set");
  if (sets.size() == 1 && mode == SelectionMode::kExpertLevel) return sets.front();

  struct Entry {
    std::size_t set;
    std::size_t cand;
    double score;
    int priority;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const int priority = sets[i].source == ExpertSource::kLearned ? 0 : 1;
    for (std::size_t j = 0; j < sets[i].candidates.size(); ++j) {
      entries.push_back({i, j, scores[i][j], priority});
    }
  }
  auto better = [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.priority != b.priority) return a.priority < b.priority;
    if (a.set != b.set) return a.set < b.set;
    return a.cand < b.cand;
  };

  if (mode == SelectionMode::kExpertLevel) {
    const Entry best = *std::min_element(entries.begin(), entries.end(),
                                         [&](const Entry& a, const Entry& b) { return better(a, b); });
    return sets[best.set];
  }

  require(k_out >= 1, "k_out must be >= 1");
  std::stable_sort(entries.begin(), entries.end(), better);
  const std::size_t keep = std::min(entries.size(), static_cast<std::size_t>(k_out));
  PredictionSet out;
  out.source = sets[entries.front().set].source;
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    out.candidates.push_back(sets[entries[i].set].candidates[entries[i].cand]);
    total += out.candidates.back().confidence;
  }
  for (auto& c : out.candidates) {
    c.confidence = total > 0.0 ? c.confidence / total : 1.0 / static_cast<double>(keep);
  }
  return out;
}

inline std::vector<std::vector<double>> score_sets(const RouterParams& p, const Vector& scene_raw,
                                                   std::span<const PredictionSet> sets) {
  std::vector<std::vector<double>> scores;
  for (const auto& s : sets) {
    std::vector<double> row;
    for (const auto& c : s.candidates) row.push_back(route_score(p, scene_raw, c));
    scores.push_back(std::move(row));
  }
  return scores;
}

inline PredictionSet select_prediction(const RouterParams& p, const Scene& scene,
                                       std::span<const PredictionSet> sets,
                                       SelectionMode mode = SelectionMode::kExpertLevel,
                                       int k_out = 6) {
  require(!sets.empty(), "select_prediction needs at least one set");
  if (sets.size() == 1 && mode == SelectionMode::kExpertLevel) return sets.front();
  const Vector raw = experts::scene_features(scene, p.shared_encoder.shape);
  return select_by_scores(sets, score_sets(p, raw, sets), mode, k_out);
}

// ---------------------------------------------------------------------------
// Bootstrap-variance baseline.

struct VarianceRouterConfig {
  int n_bootstrap = 3;
  double variance_threshold = 1.0;  // m^2
};

inline void validate(const VarianceRouterConfig& c) {
  require(c.n_bootstrap >= 2, "n_bootstrap must be >= 2");
  require(std::isfinite(c.variance_threshold) && c.variance_threshold > 0.0,
          "variance threshold must be positive");
}

/// Mean over steps of the positional variance (x variance + y variance,
/// population form) across the members' top-confidence candidates.
inline double variance_statistic(std::span<const PredictionSet> members) {
  require(members.size() >= 2, "variance statistic needs at least two members");
  std::vector<const PredictionCandidate*> tops;
  for (const auto& m : members) {
    require(!m.candidates.empty(), "ensemble member has no candidates");
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.candidates.size(); ++i) {
      if (m.candidates[i].confidence > m.candidates[best].confidence) best = i;
    }
    tops.push_back(&m.candidates[best]);
  }
  const std::size_t steps = tops.front()->waypoints.size();
  for (const auto* t : tops) {
    require(t->waypoints.size() == steps, "ensemble member length mismatch");
  }
  require(steps > 0, "ensemble members have no waypoints");
  const double n = static_cast<double>(tops.size());
  double total = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    double mx = 0.0;
    double my = 0.0;
    for (const auto* t : tops) {
      mx += t->waypoints[s].x;
      my += t->waypoints[s].y;
    }
    mx /= n;
    my /= n;
    double var = 0.0;
    for (const auto* t : tops) {
      const double dx = t->waypoints[s].x - mx;
      const double dy = t->waypoints[s].y - my;
      var += dx * dx + dy * dy;
    }
    total += var / n;
  }
  return total / static_cast<double>(steps);
}

/// Falls back to the rule set when ensemble disagreement exceeds the threshold;
/// otherwise returns the first member's set.
inline PredictionSet variance_route(const VarianceRouterConfig& config,
                                    std::span<const PredictionSet> ensemble_sets,
                                    const PredictionSet& rule_set) {
  validate(config);
  require(static_cast<int>(ensemble_sets.size()) == config.n_bootstrap,
          "ensemble size does not match n_bootstrap");
  const double stat = variance_statistic(ensemble_sets);
  return stat > config.variance_threshold ? rule_set : ensemble_sets.front();
}

}  // namespace ape::routing

#endif  // APE_ROUTING_HPP_
