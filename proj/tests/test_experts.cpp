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

#include "ape/experts.hpp"
#include "ape/metrics.hpp"
#include "test_util.hpp"

namespace ape::experts {
namespace {

ExpertShape small_shape() { return {4, 5, 4, 8, 8, 3}; }

template <class P>
void perturb(P& p, std::uint64_t seed, double std_dev = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, std_dev);
  for_each_block(p, [&](double* d, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) d[k] += g(rng);
  });
}

LearnedExpertParams random_expert(const ExpertShape& shape, std::uint64_t seed) {
  auto p = init_learned_expert(shape, seed);
  perturb(p, seed + 1);
  p.offset_scale = 0.7;
  return p;
}

TEST(ConstVelocity, WorkedExample) {
  Trajectory h{{{0, 0, 2, -1, 0.3}}, 1.0};
  const PredictionSet s = const_velocity_predict(h, 2);
  ASSERT_EQ(s.candidates.size(), 1u);
  EXPECT_EQ(s.source, ExpertSource::kRule);
  EXPECT_EQ(s.candidates[0].confidence, 1.0);
  EXPECT_EQ(s.candidates[0].waypoints[0], (Waypoint{2, -1}));
  EXPECT_EQ(s.candidates[0].waypoints[1], (Waypoint{4, -2}));
  EXPECT_NO_THROW(validate(s, 2));
}

TEST(ConstVelocity, ZeroVelocityIsFixedPoint) {
  Trajectory h{{{3, 4, 0, 0, 1.0}}, 0.1};
  const PredictionSet out = const_velocity_predict(h, 7);
  for (const auto& w : out.candidates[0].waypoints) {
    EXPECT_EQ(w, (Waypoint{3, 4}));
  }
  EXPECT_THROW(const_velocity_predict(Trajectory{}, 3), ValidationError);
}

TEST(ConstVelocity, ExactOnConstantVelocityFuture) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-10, 10);
  for (int i = 0; i < 100; ++i) {
    const double vx = u(rng), vy = u(rng), dt = 0.1;
    Scene s;
    s.horizon = {3, 20, dt};
    double x = u(rng), y = u(rng);
    for (int k = 0; k < 3; ++k, x += vx * dt, y += vy * dt) s.ego_history.states.push_back({x, y, vx, vy, 0});
    s.ego_history.dt = dt;
    s.ego_future_gt = Trajectory{{}, dt};
    x = s.ego_history.back().x;
    y = s.ego_history.back().y;
    for (int k = 0; k < 20; ++k) {
      x += vx * dt;
      y += vy * dt;
      s.ego_future_gt->states.push_back({x, y, vx, vy, 0});
    }
    EXPECT_LT(metrics::min_ade(const_velocity_predict(s), *s.ego_future_gt), 1e-9);
  }
}

TEST(ConstVelocity, OutputIsStraightLine) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 200; ++i) {
    const Trajectory h = testing::random_trajectory(rng, 3);
    const int tf = 1 + static_cast<int>(rng() % 40);
    const auto w = const_velocity_predict(h, tf).candidates[0].waypoints;
    ASSERT_EQ(static_cast<int>(w.size()), tf);
    const Waypoint o = h.back().position();
    const double dx = h.back().vx, dy = h.back().vy;
    const double norm = std::hypot(dx, dy);
    for (const auto& p : w) {
      // Distance from the line through the last position along the velocity.
      const double cross = (p.x - o.x) * dy - (p.y - o.y) * dx;
      EXPECT_NEAR(cross / std::max(norm, 1e-12), 0.0, 1e-9);
    }
  }
}

TEST(LearnedExpert, ZeroHeadsGiveOriginAndUniformConfidence) {
  std::mt19937_64 rng(3);
  const auto p = init_learned_expert(small_shape(), 7);
  const Scene s = testing::random_scene(rng, {4, 5, 0.1});
  const PredictionSet set = learned_predict(p, s);
  ASSERT_EQ(set.candidates.size(), 3u);
  for (const auto& c : set.candidates) {
    EXPECT_DOUBLE_EQ(c.confidence, 1.0 / 3.0);
    EXPECT_EQ(c.source, ExpertSource::kLearned);
    for (const auto& w : c.waypoints) EXPECT_EQ(w, (Waypoint{0, 0}));
  }
}

TEST(LearnedExpert, DeterministicFiniteAndNormalized) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    auto p = random_expert(small_shape(), 100 + i);
    perturb(p, 900 + i, 3.0);  // large weights still give finite output
    const Scene s = testing::random_scene(rng, {4, 5, 0.1});
    const PredictionSet a = learned_predict(p, s);
    const PredictionSet b = learned_predict(p, s);
    EXPECT_EQ(a, b);
    double total = 0.0;
    for (const auto& c : a.candidates) {
      total += c.confidence;
      for (const auto& w : c.waypoints) EXPECT_TRUE(std::isfinite(w.x) && std::isfinite(w.y));
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(LearnedExpert, RejectsMismatchedFeatures) {
  std::mt19937_64 rng(5);
  const auto p = init_learned_expert(small_shape(), 1);
  EXPECT_THROW(learned_predict(p, testing::random_scene(rng, {5, 5, 0.1})), ValidationError);
  EXPECT_THROW(learned_predict(p, testing::random_scene(rng, {4, 5, 0.1}, 2, 3)), ValidationError);
  Scene no_gt = testing::random_scene(rng, {4, 5, 0.1});
  no_gt.ego_future_gt.reset();
  EXPECT_NO_THROW(learned_predict(p, no_gt));
  EXPECT_THROW(predictor_loss(p, no_gt), ValidationError);
}

TEST(PredictorLoss, RegressionTermVanishesWhenModeMatchesGt) {
  std::mt19937_64 rng(6);
  Scene s = testing::random_scene(rng, {4, 5, 0.1});
  auto p = init_learned_expert(small_shape(), 2);
  p.offset_scale = 1.0;
  // Bias-only head reproducing the gt increments exactly; huge logit margin.
  double px = 0, py = 0;
  for (int t = 0; t < 5; ++t) {
    p.mode_heads[1].bias[2 * t] = s.ego_future_gt->states[t].x - px;
    p.mode_heads[1].bias[2 * t + 1] = s.ego_future_gt->states[t].y - py;
    px = s.ego_future_gt->states[t].x;
    py = s.ego_future_gt->states[t].y;
  }
  // Rebuild gt from the integrated offsets so the match is bit-exact.
  const auto w = integrate_offsets(p.mode_heads[1].bias, 1.0);
  for (int t = 0; t < 5; ++t) {
    s.ego_future_gt->states[t].x = w[t].x;
    s.ego_future_gt->states[t].y = w[t].y;
  }
  p.mode_logits.bias[1] = 60.0;
  EXPECT_LT(predictor_loss(p, s), 1e-20);
  p.mode_logits.bias[1] = 0.0;
  EXPECT_NEAR(predictor_loss(p, s), std::log(3.0), 1e-12);
}

TEST(PredictorLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int inst = 0; inst < 5; ++inst) {
    const auto p = random_expert(small_shape(), 200 + inst);
    const Scene s = testing::random_scene(rng, {4, 5, 0.1});
    const auto lg = predictor_loss_and_grad(p, s, 1.3);
    const auto analytic = nn::flatten(lg.grad);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      auto q = p;
      double* x = nn::scalar_at(q, i);
      const double x0 = *x, h = 1e-6;
      *x = x0 + h;
      const double lp = predictor_loss(q, s, 1.3);
      *x = x0 - h;
      const double lm = predictor_loss(q, s, 1.3);
      const double fd = (lp - lm) / (2 * h);
      EXPECT_LT(testing::rel_error(analytic[i], fd), 1e-5) << "coordinate " << i;
      num += (analytic[i] - fd) * (analytic[i] - fd);
      den += fd * fd;
    }
    EXPECT_LT(std::sqrt(num / std::max(den, 1e-300)), 1e-5);
  }
}

TEST(PredictorLoss, PermutationInvariantBatchMean) {
  std::mt19937_64 rng(8);
  const auto p = random_expert(small_shape(), 300);
  std::vector<Scene> scenes;
  for (int i = 0; i < 6; ++i) scenes.push_back(testing::random_scene(rng, {4, 5, 0.1}));
  std::vector<const Scene*> fwd, rev;
  for (auto& s : scenes) fwd.push_back(&s);
  rev.assign(fwd.rbegin(), fwd.rend());
  EXPECT_NEAR(batch_loss_and_grad(p, fwd).loss, batch_loss_and_grad(p, rev).loss, 1e-12);
}

TEST(PredictorUpdate, LrZeroIsIdentityAndInputUntouched) {
  std::mt19937_64 rng(9);
  const auto p = random_expert(small_shape(), 400);
  const auto before = nn::flatten(p);
  std::vector<Scene> batch{testing::random_scene(rng, {4, 5, 0.1})};
  const auto q = predictor_update(p, std::span<const Scene>(batch), 0.0);
  EXPECT_EQ(nn::flatten(q), before);
  const auto r = predictor_update(p, std::span<const Scene>(batch), 0.1);
  EXPECT_EQ(nn::flatten(p), before);
  EXPECT_NE(nn::flatten(r), before);
  EXPECT_THROW(predictor_update(p, std::span<const Scene>{}, 0.1), ValidationError);
}

TEST(PredictorUpdate, SmallStepsDescend) {
  std::mt19937_64 rng(10);
  auto p = random_expert(small_shape(), 500);
  std::vector<Scene> batch{testing::random_scene(rng, {4, 5, 0.1}, 3)};
  double prev = predictor_loss(p, batch[0]);
  for (int i = 0; i < 10; ++i) {
    p = predictor_update(p, std::span<const Scene>(batch), 1e-3);
    const double cur = predictor_loss(p, batch[0]);
    EXPECT_LE(cur, prev);
    prev = cur;
  }
}

TEST(PredictorUpdate, OverfitsOneScene) {
  std::mt19937_64 rng(11);
  auto p = init_learned_expert(small_shape(), 600);
  Scene s = testing::random_scene(rng, {4, 5, 0.1});
  // Scale the gt into a plausible range for unit offsets.
  for (auto& st : s.ego_future_gt->states) {
    st.x *= 0.2;
    st.y *= 0.2;
  }
  std::vector<Scene> batch{s};
  const double initial = predictor_loss(p, s);
  for (int i = 0; i < 200; ++i) p = predictor_update(p, std::span<const Scene>(batch), 0.02);
  EXPECT_LT(predictor_loss(p, s), 0.1 * initial);
}

TEST(PredictorUpdate, Deterministic) {
  std::mt19937_64 rng(12);
  std::vector<Scene> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(testing::random_scene(rng, {4, 5, 0.1}));
  auto a = init_learned_expert(small_shape(), 9);
  auto b = init_learned_expert(small_shape(), 9);
  for (int i = 0; i < 5; ++i) {
    a = predictor_update(a, std::span<const Scene>(batch), 0.01, 1.0, 10.0);
    b = predictor_update(b, std::span<const Scene>(batch), 0.01, 1.0, 10.0);
  }
  EXPECT_EQ(nn::flatten(a), nn::flatten(b));
}

TEST(PredictorUpdate, ClipNormBoundsTheStep) {
  std::mt19937_64 rng(13);
  const auto p = random_expert(small_shape(), 700);
  std::vector<Scene> batch{testing::random_scene(rng, {4, 5, 0.1})};
  const auto q = predictor_update(p, std::span<const Scene>(batch), 1.0, 1.0, 0.5);
  const auto a = nn::flatten(p), b = nn::flatten(q);
  double sq = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_LE(std::sqrt(sq), 0.5 + 1e-9);
}

TEST(InputNorm, StandardizesSamples) {
  std::vector<Vector> samples;
  std::mt19937_64 rng(14);
  std::normal_distribution<double> g(3.0, 2.0);
  for (int i = 0; i < 500; ++i) {
    Vector v(3);
    v << g(rng), 5.0, g(rng) * 10;
    samples.push_back(v);
  }
  const InputNorm n = fit_norm(samples);
  Vector mean = Vector::Zero(3);
  for (const auto& s : samples) mean += n.apply(s);
  mean /= 500.0;
  EXPECT_NEAR(mean[0], 0.0, 1e-12);
  EXPECT_NEAR(mean[2], 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(n.inv_std[1]));
}

}  // namespace
}  // namespace ape::experts
