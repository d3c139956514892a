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

#ifndef APE_PIPELINE_HPP_
#define APE_PIPELINE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ape/core.hpp"
#include "ape/experts.hpp"
#include "ape/metrics.hpp"
#include "ape/routing.hpp"

namespace ape::pipeline {

using experts::LearnedExpertParams;
using routing::RouterParams;
using routing::RoutingPair;

enum class PairingMode { kBestMode, kPerMode };

struct TrainConfig {
  double lr_predictor = 0.02;
  double lr_router = 0.05;
  int epochs = 8;
  int batch_size = 32;
  std::uint64_t seed = 1;
  double lr_decay_factor = 0.5;
  int lr_decay_period = 2;  // epochs

  double sigma = 1.0;       // m, isotropic std of the regression term
  double clip_norm = 10.0;  // global gradient norm cap for the predictor; 0 disables
  int router_batch_size = 64;
  PairingMode pairing = PairingMode::kPerMode;
  routing::Link link = routing::Link::kLogistic;
  int bootstrap_members = 3;  // 0 disables the variance baseline

  int attr_width = static_cast<int>(kDefaultAttributeWidth);
  int hidden_width = 64;
  int embed_width = 64;
  int k_modes = 6;
  int router_width = 64;
  int router_layers = 3;
};

inline void validate(const TrainConfig& c) {
  require(c.lr_predictor > 0.0 && c.lr_router > 0.0, "learning rates must be positive");
  require(c.epochs >= 0, "epochs must be >= 0");
  require(c.batch_size >= 1 && c.router_batch_size >= 1, "batch sizes must be >= 1");
  require(c.lr_decay_factor > 0.0 && c.lr_decay_period >= 1, "invalid learning-rate decay");
  require(c.sigma > 0.0, "sigma must be positive");
  require(c.bootstrap_members == 0 || c.bootstrap_members >= 2,
          "bootstrap_members must be 0 or >= 2");
  require(c.k_modes >= 1, "k_modes must be >= 1");
}

/// Step decay: base * factor^(epoch / period).
inline double learning_rate(double base, int epoch, const TrainConfig& c) {
  return base * std::pow(c.lr_decay_factor, epoch / c.lr_decay_period);
}

/// Append-only store of routing pairs. A bounded buffer refuses appends once
/// full.
class RoutingBuffer {
 public:
  explicit RoutingBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  bool append(RoutingPair pair) {
    routing::validate(pair);
    if (capacity_ != 0 && records_.size() >= capacity_) return false;
    records_.push_back(std::move(pair));
    return true;
  }

  template <class Rng>
  std::vector<const RoutingPair*> sample(std::size_t n, Rng& rng) const {
    require(!records_.empty(), "cannot sample from an empty routing buffer");
    std::uniform_int_distribution<std::size_t> pick(0, records_.size() - 1);
    std::vector<const RoutingPair*> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(&records_[pick(rng)]);
    return out;
  }

  const std::vector<RoutingPair>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::vector<RoutingPair> records_;
  std::size_t capacity_;
};

struct TrainedEnsemble {
  LearnedExpertParams expert;
  RouterParams router;
  std::vector<LearnedExpertParams> bootstrap;  // member 0 is `expert`
  double variance_threshold = 1.0;
  TrainConfig config;
  HorizonSpec horizon;
  std::string dataset_tag;
  int epochs_trained = 0;
};

struct EpochLog {
  int epoch = 0;
  double predictor_loss = 0.0;
  double router_loss = 0.0;
  double router_pair_accuracy = 0.0;
};

struct TrainResult {
  TrainedEnsemble ensemble;
  RoutingBuffer buffer;
  std::vector<EpochLog> log;
};

inline constexpr double kPairTieTolerance = 1e-9;

/// Labels learned-vs-rule candidate pairs by ADE against the ground truth.
inline std::vector<RoutingPair> pair_candidates(const PredictionSet& learned,
                                                const PredictionSet& rule, const Trajectory& gt,
                                                PairingMode mode, const std::string& scene_id = {},
                                                const nn::Vector& scene_features = {}) {
  require(!learned.candidates.empty() && !rule.candidates.empty(),
          "pairing needs non-empty learned and rule sets");
  const PredictionCandidate& rule_cand = rule.candidates.front();
  const double rule_ade = metrics::min_ade(std::span(&rule_cand, 1), gt);

  std::vector<std::size_t> modes;
  if (mode == PairingMode::kPerMode) {
    modes.resize(learned.candidates.size());
    std::iota(modes.begin(), modes.end(), std::size_t{0});
  } else {
    std::size_t best = 0;
    double best_ade = metrics::ade(learned.candidates[0], gt);
    for (std::size_t k = 1; k < learned.candidates.size(); ++k) {
      const double a = metrics::ade(learned.candidates[k], gt);
      if (a < best_ade) {
        best_ade = a;
        best = k;
      }
    }
    modes.push_back(best);
  }

  std::vector<RoutingPair> out;
  for (std::size_t k : modes) {
    const PredictionCandidate& lc = learned.candidates[k];
    const double learned_ade = metrics::min_ade(std::span(&lc, 1), gt);
    if (std::abs(learned_ade - rule_ade) < kPairTieTolerance) continue;
    RoutingPair p;
    p.scene_id = scene_id;
    p.scene_features = scene_features;
    if (learned_ade < rule_ade) {
      p.chosen = lc;
      p.rejected = rule_cand;
      p.ade_chosen = learned_ade;
      p.ade_rejected = rule_ade;
    } else {
      p.chosen = rule_cand;
      p.rejected = lc;
      p.ade_chosen = rule_ade;
      p.ade_rejected = learned_ade;
    }
    out.push_back(std::move(p));
  }
  return out;
}

/// Fraction of pairs whose chosen candidate outscores the rejected one,
/// restricted to pairs with |ADE gap| > min_gap. Returns NaN when none qualify.
inline double pair_accuracy(const RouterParams& router, std::span<const RoutingPair> pairs,
                            double min_gap = 0.0) {
  std::size_t total = 0;
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    if (p.ade_rejected - p.ade_chosen <= min_gap) continue;
    ++total;
    if (routing::route_score(router, p.scene_features, p.chosen) >
        routing::route_score(router, p.scene_features, p.rejected)) {
      ++correct;
    }
  }
  return total == 0 ? std::nan("") : static_cast<double>(correct) / static_cast<double>(total);
}

inline Scene ensure_ego_frame(const Scene& scene) {
  return scene.ego_frame ? scene : to_ego_frame(scene);
}

inline std::vector<Scene> to_ego_frames(std::span<const Scene> scenes) {
  std::vector<Scene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(ensure_ego_frame(s));
  return out;
}

/// Routing pairs for a set of ego-frame scenes under a fixed expert.
inline std::vector<RoutingPair> make_pairs(const LearnedExpertParams& expert,
                                           std::span<const Scene> ego_scenes, PairingMode mode) {
  std::vector<RoutingPair> out;
  for (const auto& s : ego_scenes) {
    require(s.ego_future_gt.has_value(), "pairing needs a ground-truth future");
    auto pairs = pair_candidates(experts::learned_predict(expert, s),
                                 experts::const_velocity_predict(s), *s.ego_future_gt, mode, s.id,
                                 experts::scene_features(s, expert.shape()));
    for (auto& p : pairs) out.push_back(std::move(p));
  }
  return out;
}

namespace detail {

inline void check_dataset(std::span<const Scene> dataset) {
  require(!dataset.empty(), "training dataset is empty");
  const HorizonSpec& h = dataset.front().horizon;
  const std::string& tag = dataset.front().dataset_tag;
  for (const auto& s : dataset) {
    validate(s);
    require(s.ego_future_gt.has_value(), "training scene '" + s.id + "' has no ground truth");
    require(s.horizon == h, "training scenes have mixed horizons");
    require(s.dataset_tag == tag, "training scenes have mixed dataset tags");
  }
}

inline experts::ExpertShape expert_shape(const HorizonSpec& h, const TrainConfig& c) {
  return {h.t_history, h.t_future, c.attr_width, c.hidden_width, c.embed_width, c.k_modes};
}

/// Fits input standardization and output scales to the training scenes.
inline void fit_scales(std::span<const Scene> ego, LearnedExpertParams& expert) {
  std::vector<nn::Vector> feats;
  feats.reserve(ego.size());
  double speed_sum = 0.0;
  for (const auto& s : ego) {
    feats.push_back(experts::scene_features(s, expert.shape()));
    speed_sum += s.ego_history.back().speed();
  }
  expert.encoder.norm = experts::fit_norm(feats);
  const double mean_speed = speed_sum / static_cast<double>(ego.size());
  expert.offset_scale = std::max(mean_speed * ego.front().horizon.dt, 1e-3);
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                           std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// Predictor-only training, used for the extra bootstrap members.
inline LearnedExpertParams train_predictor_only(std::span<const Scene> ego,
                                                LearnedExpertParams params,
                                                const TrainConfig& c) {
  std::mt19937_64 order_rng(c.seed);
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    const double lr = learning_rate(c.lr_predictor, epoch, c);
    for (const auto& batch : epoch_batches(ego.size(), c.batch_size, order_rng)) {
      std::vector<const Scene*> ptrs;
      for (std::size_t i : batch) ptrs.push_back(&ego[i]);
      params = experts::predictor_update(params, ptrs, lr, c.sigma, c.clip_norm);
    }
  }
  return params;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty list");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace detail

inline std::vector<PredictionSet> bootstrap_predict(const TrainedEnsemble& e, const Scene& ego) {
  std::vector<PredictionSet> out;
  for (const auto& m : e.bootstrap) out.push_back(experts::learned_predict(m, ego));
  return out;
}

/// Concurrent training of the learned expert and the routing function. Each
/// predictor batch is followed by one router step on a uniform sample of the
/// whole routing buffer.
inline TrainResult train(std::span<const Scene> dataset, const TrainConfig& config) {
  validate(config);
  detail::check_dataset(dataset);
  const std::vector<Scene> ego = to_ego_frames(dataset);
  const HorizonSpec horizon = ego.front().horizon;

  TrainResult result;
  TrainedEnsemble& ens = result.ensemble;
  ens.config = config;
  ens.horizon = horizon;
  ens.dataset_tag = ego.front().dataset_tag;

  ens.expert = experts::init_learned_expert(detail::expert_shape(horizon, config), config.seed);
  detail::fit_scales(ego, ens.expert);
  routing::RouterShape rshape{horizon.t_future, config.router_width, config.router_width,
                              config.router_width, config.router_layers};
  ens.router = routing::init_router(rshape, ens.expert.encoder, config.seed ^ 0xA5A5A5A5ULL);
  ens.router.waypoint_scale = ens.expert.offset_scale * horizon.t_future;

  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 buffer_rng(config.seed + 7919);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr_p = learning_rate(config.lr_predictor, epoch, config);
    const double lr_r = learning_rate(config.lr_router, epoch, config);
    double p_loss = 0.0;
    double r_loss = 0.0;
    std::size_t n_batches = 0;
    const std::size_t epoch_start = result.buffer.size();

    for (const auto& batch : detail::epoch_batches(ego.size(), config.batch_size, order_rng)) {
      std::vector<const Scene*> ptrs;
      std::vector<RoutingPair> fresh;
      for (std::size_t i : batch) {
        const Scene& s = ego[i];
        ptrs.push_back(&s);
        const PredictionSet rule = experts::const_velocity_predict(s);
        const PredictionSet learned = experts::learned_predict(ens.expert, s);
        for (auto& p : pair_candidates(learned, rule, *s.ego_future_gt, config.pairing, s.id,
                                       experts::scene_features(s, ens.expert.shape()))) {
          fresh.push_back(std::move(p));
        }
      }
      double batch_loss = 0.0;
      ens.expert = experts::predictor_update(ens.expert, ptrs, lr_p, config.sigma,
                                             config.clip_norm, &batch_loss);
      p_loss += batch_loss;
      for (auto& p : fresh) result.buffer.append(std::move(p));

      ens.router.shared_encoder = ens.expert.encoder;
      if (!result.buffer.empty()) {
        const auto sample = result.buffer.sample(
            static_cast<std::size_t>(config.router_batch_size), buffer_rng);
        double rl = 0.0;
        ens.router = routing::router_update(ens.router, sample, lr_r, config.link, &rl);
        r_loss += rl;
      }
      ++n_batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.predictor_loss = p_loss / static_cast<double>(n_batches);
    log.router_loss = r_loss / static_cast<double>(n_batches);
    const auto& recs = result.buffer.records();
    log.router_pair_accuracy = pair_accuracy(
        ens.router, std::span(recs).subspan(epoch_start, recs.size() - epoch_start));
    result.log.push_back(log);
    ++ens.epochs_trained;
  }

  if (config.bootstrap_members >= 2) {
    ens.bootstrap.push_back(ens.expert);
    for (int m = 1; m < config.bootstrap_members; ++m) {
      TrainConfig member_cfg = config;
      LearnedExpertParams init = experts::init_learned_expert(
          ens.expert.shape(), config.seed + 1000003ULL * static_cast<std::uint64_t>(m));
      init.encoder.norm = ens.expert.encoder.norm;
      init.offset_scale = ens.expert.offset_scale;
      ens.bootstrap.push_back(detail::train_predictor_only(ego, std::move(init), member_cfg));
    }
    std::vector<double> stats;
    stats.reserve(ego.size());
    for (const auto& s : ego) stats.push_back(routing::variance_statistic(bootstrap_predict(ens, s)));
    ens.variance_threshold = std::max(detail::median(stats), 1e-12);
  }
  return result;
}

enum class RouterKind { kLearned, kVariance, kOracle, kLearnedOnly, kRuleOnly };

inline const char* to_string(RouterKind k) {
  switch (k) {
    case RouterKind::kLearned: return "ape";
    case RouterKind::kVariance: return "ape_bs";
    case RouterKind::kOracle: return "oracle";
    case RouterKind::kLearnedOnly: return "learned_only";
    case RouterKind::kRuleOnly: return "rule_only";
  }
  return "?";
}

inline std::optional<RouterKind> router_kind_from_string(const std::string& s) {
  for (RouterKind k : {RouterKind::kLearned, RouterKind::kVariance, RouterKind::kOracle,
                       RouterKind::kLearnedOnly, RouterKind::kRuleOnly}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

/// Predicts for one scene (converted to its ego frame if it is not already).
/// The returned waypoints are in that ego frame.
inline PredictionSet infer(const TrainedEnsemble& e, const Scene& scene, RouterKind kind,
                           routing::SelectionMode selection = routing::SelectionMode::kExpertLevel) {
  const Scene ego = ensure_ego_frame(scene);
  require(ego.horizon.t_history == e.horizon.t_history &&
              ego.horizon.t_future == e.horizon.t_future,
          "scene horizon does not match the trained ensemble");
  const PredictionSet rule = experts::const_velocity_predict(ego);
  switch (kind) {
    case RouterKind::kRuleOnly:
      return rule;
    case RouterKind::kLearnedOnly:
      return experts::learned_predict(e.expert, ego);
    case RouterKind::kLearned: {
      const PredictionSet sets[] = {experts::learned_predict(e.expert, ego), rule};
      return routing::select_prediction(e.router, ego, sets, selection, e.config.k_modes);
    }
    case RouterKind::kVariance: {
      require(e.bootstrap.size() >= 2, "ensemble was trained without bootstrap members");
      routing::VarianceRouterConfig vc{static_cast<int>(e.bootstrap.size()), e.variance_threshold};
      return routing::variance_route(vc, bootstrap_predict(e, ego), rule);
    }
    case RouterKind::kOracle: {
      require(ego.ego_future_gt.has_value(), "oracle routing needs a ground-truth future");
      PredictionSet learned = experts::learned_predict(e.expert, ego);
      const double l = metrics::min_ade(learned, *ego.ego_future_gt);
      const double r = metrics::min_ade(rule, *ego.ego_future_gt);
      return r < l ? rule : learned;
    }
  }
  throw ValidationError("unknown router kind");
}

}  // namespace ape::pipeline

#endif  // APE_PIPELINE_HPP_
