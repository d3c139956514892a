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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ape/metrics.hpp"
#include "ape/pipeline.hpp"
#include "ape/scenariogen.hpp"
#include "test_util.hpp"

namespace ape::pipeline {
namespace {

const HorizonSpec kHorizon{4, 6, 0.1};

TrainConfig small_config(int epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.router_batch_size = 16;
  c.hidden_width = 16;
  c.embed_width = 16;
  c.k_modes = 3;
  c.router_width = 16;
  c.seed = 5;
  return c;
}

std::vector<Scene> small_data(std::size_t n = 64, std::uint64_t seed = 1) {
  return scenariogen::generate(scenariogen::family_b(kHorizon), n, seed);
}

PredictionCandidate straight(double speed, int steps, ExpertSource src) {
  PredictionCandidate c;
  c.source = src;
  for (int t = 1; t <= steps; ++t) c.waypoints.push_back({speed * 0.1 * t, 0.0});
  return c;
}

Trajectory straight_gt(double speed, int steps) {
  Trajectory t;
  t.dt = 0.1;
  for (int k = 1; k <= steps; ++k) t.states.push_back({speed * 0.1 * k, 0.0, speed, 0.0, 0.0});
  return t;
}

TEST(PairCandidates, LabelsByAde) {
  const Trajectory gt = straight_gt(10, 5);
  PredictionSet rule{{straight(10, 5, ExpertSource::kRule)}, ExpertSource::kRule};
  PredictionSet learned{{straight(8, 5, ExpertSource::kLearned), straight(12, 5, ExpertSource::kLearned)},
                        ExpertSource::kLearned};
  const auto pairs = pair_candidates(learned, rule, gt, PairingMode::kPerMode);
  ASSERT_EQ(pairs.size(), 2u);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.chosen.source, ExpertSource::kRule);
    EXPECT_EQ(p.ade_chosen, 0.0);
    EXPECT_GT(p.ade_rejected, 0.0);
  }
  rule = {{straight(5, 5, ExpertSource::kRule)}, ExpertSource::kRule};
  const auto best = pair_candidates(learned, rule, gt, PairingMode::kBestMode);
  ASSERT_EQ(best.size(), 1u);
  EXPECT_EQ(best[0].chosen.source, ExpertSource::kLearned);
  EXPECT_LT(best[0].ade_chosen, best[0].ade_rejected);
}

TEST(PairCandidates, DropsTiesAndBoundsCount) {
  const Trajectory gt = straight_gt(10, 5);
  const PredictionSet rule{{straight(9, 5, ExpertSource::kRule)}, ExpertSource::kRule};
  const PredictionSet tie{{straight(9, 5, ExpertSource::kLearned)}, ExpertSource::kLearned};
  EXPECT_TRUE(pair_candidates(tie, rule, gt, PairingMode::kPerMode).empty());
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const PredictionSet learned = testing::random_set(rng, 6, 5);
    const auto pairs = pair_candidates(learned, rule, gt, PairingMode::kPerMode);
    EXPECT_LE(pairs.size(), 6u);
    for (const auto& p : pairs) EXPECT_LT(p.ade_chosen, p.ade_rejected);
    EXPECT_LE(pair_candidates(learned, rule, gt, PairingMode::kBestMode).size(), 1u);
  }
}

TEST(RoutingBuffer, CapacityAndAppendOnly) {
  std::mt19937_64 rng(2);
  RoutingBuffer buf(3);
  RoutingPair p;
  p.chosen = straight(1, 2, ExpertSource::kRule);
  p.rejected = straight(2, 2, ExpertSource::kLearned);
  p.ade_chosen = 0.0;
  p.ade_rejected = 1.0;
  EXPECT_THROW(buf.sample(1, rng), ValidationError);
  for (int i = 0; i < 3; ++i) {
    p.scene_id = std::to_string(i);
    EXPECT_TRUE(buf.append(p));
  }
  EXPECT_FALSE(buf.append(p));
  ASSERT_EQ(buf.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(buf.records()[i].scene_id, std::to_string(i));
  const auto s = buf.sample(100, rng);
  EXPECT_EQ(s.size(), 100u);
  RoutingPair bad = p;
  std::swap(bad.ade_chosen, bad.ade_rejected);
  RoutingBuffer unbounded;
  EXPECT_THROW(unbounded.append(bad), ValidationError);
}

TEST(Train, ZeroEpochsLeavesInitialParameters) {
  const auto data = small_data();
  const auto res = train(data, small_config(0));
  EXPECT_TRUE(res.buffer.empty());
  EXPECT_TRUE(res.log.empty());
  EXPECT_EQ(res.ensemble.epochs_trained, 0);
  const auto init = experts::init_learned_expert(res.ensemble.expert.shape(), 5);
  EXPECT_EQ(nn::flatten(res.ensemble.expert), nn::flatten(init));
  const Scene ego = ensure_ego_frame(data[0]);
  const PredictionSet rule = experts::const_velocity_predict(ego);
  EXPECT_EQ(routing::route_score(res.ensemble.router, ego, rule.candidates[0]), 0.0);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto data = small_data();
  const auto a = train(data, small_config());
  const auto b = train(data, small_config());
  EXPECT_EQ(nn::flatten(a.ensemble.expert), nn::flatten(b.ensemble.expert));
  EXPECT_EQ(nn::flatten(a.ensemble.router), nn::flatten(b.ensemble.router));
  EXPECT_EQ(a.ensemble.variance_threshold, b.ensemble.variance_threshold);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].predictor_loss, b.log[i].predictor_loss);
    EXPECT_EQ(a.log[i].router_loss, b.log[i].router_loss);
  }
  ASSERT_EQ(a.buffer.size(), b.buffer.size());
  TrainConfig other = small_config();
  other.seed = 6;
  EXPECT_NE(nn::flatten(train(data, other).ensemble.expert), nn::flatten(a.ensemble.expert));
}

TEST(Train, BufferHoldsBothDirectionsAndSyncedEncoder) {
  const auto data = small_data(128);
  const auto res = train(data, small_config());
  int rule_wins = 0;
  int learned_wins = 0;
  for (const auto& p : res.buffer.records()) {
    (p.chosen.source == ExpertSource::kRule ? rule_wins : learned_wins)++;
    EXPECT_NE(p.chosen.source, p.rejected.source);
  }
  EXPECT_GT(rule_wins, 0);
  EXPECT_GT(learned_wins, 0);
  EXPECT_LE(res.buffer.size(), data.size() * 3 * 2);
  EXPECT_TRUE(res.ensemble.router.shared_encoder == res.ensemble.expert.encoder);
  ASSERT_EQ(res.log.size(), 2u);
  for (const auto& l : res.log) {
    EXPECT_TRUE(std::isfinite(l.predictor_loss));
    EXPECT_TRUE(std::isfinite(l.router_loss));
  }
  EXPECT_EQ(res.ensemble.bootstrap.size(), 3u);
  EXPECT_GT(res.ensemble.variance_threshold, 0.0);
}

TEST(Infer, OracleIsALowerBound) {
  const auto data = small_data(64);
  const auto res = train(data, small_config(1));
  for (const auto& s : small_data(40, 77)) {
    const Scene ego = ensure_ego_frame(s);
    const Trajectory& gt = *ego.ego_future_gt;
    const double o = metrics::min_ade(infer(res.ensemble, ego, RouterKind::kOracle), gt);
    for (auto k : {RouterKind::kLearned, RouterKind::kVariance, RouterKind::kLearnedOnly,
                   RouterKind::kRuleOnly}) {
      EXPECT_LE(o, metrics::min_ade(infer(res.ensemble, ego, k), gt) + 1e-12);
    }
    EXPECT_EQ(infer(res.ensemble, s, RouterKind::kRuleOnly), experts::const_velocity_predict(ego));
    const auto cand = infer(res.ensemble, ego, RouterKind::kLearned, routing::SelectionMode::kCandidateLevel);
    EXPECT_EQ(cand.candidates.size(), 3u);
  }
}

TEST(Infer, OraclePicksRuleOnConstantVelocity) {
  auto spec = scenariogen::family_a(kHorizon);
  spec.p_turn = 0.0;
  spec.accel_noise_std = 0.0;
  spec.position_noise_std = 0.0;
  spec.velocity_noise_std = 0.0;
  const auto cv = scenariogen::generate(spec, 20, 3);
  const auto res = train(small_data(), small_config(1));
  for (const auto& s : cv) {
    const auto out = infer(res.ensemble, s, RouterKind::kOracle);
    EXPECT_EQ(out.source, ExpertSource::kRule);
    EXPECT_LT(metrics::min_ade(out, *ensure_ego_frame(s).ego_future_gt), 1e-9);
  }
}

TEST(Train, RejectsBadDatasets) {
  EXPECT_THROW(train(std::vector<Scene>{}, small_config()), ValidationError);
  auto data = small_data(8);
  auto mixed_tag = data;
  mixed_tag[3].dataset_tag = "other";
  EXPECT_THROW(train(mixed_tag, small_config()), ValidationError);
  auto mixed_h = data;
  mixed_h.push_back(scenariogen::generate(scenariogen::family_b({4, 7, 0.1}), 1, 2)[0]);
  mixed_h.back().dataset_tag = data[0].dataset_tag;
  EXPECT_THROW(train(mixed_h, small_config()), ValidationError);
  auto no_gt = data;
  no_gt[0].ego_future_gt.reset();
  EXPECT_THROW(train(no_gt, small_config()), ValidationError);
  TrainConfig bad = small_config();
  bad.bootstrap_members = 1;
  EXPECT_THROW(train(data, bad), ValidationError);
}

TEST(Infer, RejectsWrongHorizon) {
  const auto res = train(small_data(16), small_config(1));
  const auto other = scenariogen::generate(scenariogen::family_b({4, 7, 0.1}), 1, 2);
  EXPECT_THROW(infer(res.ensemble, other[0], RouterKind::kLearned), ValidationError);
  Scene no_gt = small_data(1)[0];
  no_gt.ego_future_gt.reset();
  EXPECT_THROW(infer(res.ensemble, no_gt, RouterKind::kOracle), ValidationError);
  EXPECT_EQ(router_kind_from_string("ape"), RouterKind::kLearned);
  EXPECT_EQ(router_kind_from_string("ape_bs"), RouterKind::kVariance);
  EXPECT_FALSE(router_kind_from_string("nope").has_value());
}

TEST(LearningRate, StepDecay) {
  TrainConfig c;
  EXPECT_EQ(learning_rate(0.1, 0, c), 0.1);
  EXPECT_EQ(learning_rate(0.1, 1, c), 0.1);
  EXPECT_EQ(learning_rate(0.1, 2, c), 0.05);
  EXPECT_EQ(learning_rate(0.1, 5, c), 0.025);
}

}  // namespace
}  // namespace ape::pipeline
