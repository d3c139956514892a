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
#include <filesystem>
#include <fstream>

#include "ape/experts.hpp"
#include "ape/metrics.hpp"
#include "ape/scenariogen.hpp"
#include "test_util.hpp"

namespace ape::scenariogen {
namespace {

DistributionSpec quiet_spec() {
  DistributionSpec s = family_a({5, 8, 0.1});
  s.name = "quiet";
  s.p_turn = 0.0;
  s.accel_noise_std = 0.0;
  s.position_noise_std = 0.0;
  s.velocity_noise_std = 0.0;
  return s;
}

TEST(Generate, NoTurnNoNoiseIsConstantVelocity) {
  for (const auto& s : generate(quiet_spec(), 50, 1)) {
    const Scene ego = to_ego_frame(s);
    EXPECT_LT(metrics::min_ade(experts::const_velocity_predict(ego), *ego.ego_future_gt), 1e-9);
  }
}

TEST(Generate, Deterministic) {
  const auto a = generate(family_b(), 20, 9);
  EXPECT_EQ(a, generate(family_b(), 20, 9));
  EXPECT_NE(a, generate(family_b(), 20, 10));
  // Each scene depends only on (seed, index).
  const auto longer = generate(family_b(), 30, 9);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], longer[i]);
  EXPECT_EQ(a[0].dataset_tag, "family_b");
  EXPECT_THROW(generate(family_b(), 0, 1), ValidationError);
}

TEST(Generate, TurnFractionMatchesProbability) {
  for (double p : {0.1, 0.7}) {
    auto spec = family_b({2, 2, 0.1});
    spec.p_turn = p;
    spec.context_density = 0.0;
    const auto scenes = generate_labeled(spec, 10000, 4);
    double turning = 0;
    for (const auto& l : scenes) turning += l.maneuver.turning ? 1 : 0;
    EXPECT_NEAR(turning / 10000.0, p, 0.02);
  }
}

TEST(Generate, GroundTruthIsKinematicallyConsistent) {
  for (const auto& spec : {family_a(), family_b()}) {
    for (const auto& s : generate(spec, 30, 2)) {
      const auto& st = s.ego_future_gt->states;
      for (std::size_t k = 0; k + 1 < st.size(); ++k) {
        EXPECT_NEAR(st[k + 1].x - st[k].x, st[k].vx * 0.1, 1e-9);
        EXPECT_NEAR(st[k + 1].y - st[k].y, st[k].vy * 0.1, 1e-9);
        EXPECT_NEAR(std::hypot(st[k].vx, st[k].vy) * std::cos(st[k].heading), st[k].vx, 1e-9);
      }
    }
  }
}

TEST(Generate, ObservationNoiseLeavesFutureUnchanged) {
  auto clean = family_b();
  clean.position_noise_std = 0.0;
  clean.velocity_noise_std = 0.0;
  const auto a = generate(clean, 10, 3);
  const auto b = generate(family_b(), 10, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ego_future_gt, b[i].ego_future_gt);
    EXPECT_NE(a[i].ego_history, b[i].ego_history);
  }
}

double mean_heading_change(const std::vector<Scene>& scenes) {
  double total = 0;
  for (const auto& s : scenes) {
    total += std::abs(wrap_angle(s.ego_future_gt->states.back().heading - s.ego_history.states.back().heading));
  }
  return total / static_cast<double>(scenes.size());
}

TEST(Families, DifferInManeuvers) {
  const double a = mean_heading_change(generate(family_a(), 500, 5));
  const double b = mean_heading_change(generate(family_b(), 500, 5));
  EXPECT_GT(b, 3 * a);
  EXPECT_TRUE(family_by_name("family_a").has_value());
  EXPECT_FALSE(family_by_name("family_c").has_value());
  EXPECT_EQ(family_by_name("family_b", {3, 4, 0.2})->horizon.t_future, 4);
}

TEST(Mixture, CountsAndTags) {
  for (double r : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    MixSpec m{family_b(), family_a(), r, 101, 7};
    const auto scenes = generate_mixture(m);
    ASSERT_EQ(scenes.size(), 101u);
    std::size_t ood = 0;
    for (const auto& s : scenes) ood += s.dataset_tag == "family_a" ? 1 : 0;
    EXPECT_EQ(ood, static_cast<std::size_t>(std::llround(r * 101)));
  }
  MixSpec bad{family_b(), family_a({10, 20, 0.1}), 0.5, 10, 1};
  EXPECT_THROW(generate_mixture(bad), ValidationError);
  MixSpec out_of_range{family_b(), family_a(), 1.5, 10, 1};
  EXPECT_THROW(generate_mixture(out_of_range), ValidationError);
}

TEST(SceneFiles, RoundTripPlainAndGzip) {
  const auto dir = testing::temp_dir("scenes");
  auto scenes = generate(family_b(), 25, 11);
  scenes[1] = to_ego_frame(scenes[1]);
  scenes[2].ego_future_gt.reset();
  for (const char* name : {"s.jsonl", "s.jsonl.gz"}) {
    const std::string path = (dir / name).string();
    save_scenes(path, scenes);
    EXPECT_EQ(load_scenes(path), scenes);
  }
  const std::string empty = (dir / "e.jsonl").string();
  save_scenes(empty, std::vector<Scene>{});
  EXPECT_TRUE(load_scenes(empty).empty());
  EXPECT_THROW(load_scenes((dir / "missing.jsonl").string()), ValidationError);
}

TEST(SceneFiles, TruncatedLineReportsItsNumber) {
  const auto dir = testing::temp_dir("truncated");
  const std::string path = (dir / "t.jsonl").string();
  save_scenes(path, generate(family_b(), 3, 1));
  std::string text = read_text(path);
  const std::size_t second_end = text.find('\n', text.find('\n') + 1);
  text = text.substr(0, second_end + 40);
  write_text(path, text);
  try {
    load_scenes(path);
    FAIL() << "expected a SceneFileError";
  } catch (const SceneFileError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Validate, RejectsBadSpecs) {
  auto s = family_a();
  s.p_turn = 1.5;
  EXPECT_THROW(generate(s, 1, 1), ValidationError);
  s = family_a();
  s.position_noise_std = -1;
  EXPECT_THROW(generate(s, 1, 1), ValidationError);
  s = family_a();
  s.turn_onset = {0.2, 1.2};
  EXPECT_THROW(generate(s, 1, 1), ValidationError);
}

}  // namespace
}  // namespace ape::scenariogen
