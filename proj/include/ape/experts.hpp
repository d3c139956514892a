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

#ifndef APE_EXPERTS_HPP_
#define APE_EXPERTS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "ape/core.hpp"
#include "ape/nn.hpp"

namespace ape::experts {

using nn::Vector;

/// Rule expert: carries the last history state forward at constant velocity.
inline PredictionSet const_velocity_predict(const Trajectory& history, int t_future) {
  require(!history.empty(), "constant-velocity prediction needs a history");
  require(t_future >= 1, "t_future must be >= 1");
  AgentState s = history.back();
  PredictionCandidate c;
  c.source = ExpertSource::kRule;
  c.confidence = 1.0;
  c.waypoints.reserve(static_cast<std::size_t>(t_future));
  for (int k = 0; k < t_future; ++k) {
    s.x += s.vx * history.dt;
    s.y += s.vy * history.dt;
    c.waypoints.push_back(s.position());
  }
  return {{std::move(c)}, ExpertSource::kRule};
}

inline PredictionSet const_velocity_predict(const Scene& scene) {
  return const_velocity_predict(scene.ego_history, scene.horizon.t_future);
}

// ---------------------------------------------------------------------------
// Scene encoder shared by the learned expert and the routing function.

inline constexpr int kStateFeatures = 5;  // x, y, vx, vy, heading

struct ExpertShape {
  int t_history = 10;
  int t_future = 30;
  int attr_width = static_cast<int>(kDefaultAttributeWidth);
  int hidden_width = 64;
  int embed_width = 64;
  int k_modes = 6;

  int input_width() const { return kStateFeatures * t_history + attr_width; }

  friend bool operator==(const ExpertShape&, const ExpertShape&) = default;
};

/// Per-feature affine standardization, fitted once on training data and
/// then held fixed.
struct InputNorm {
  Vector mean;
  Vector inv_std;

  static InputNorm identity(Eigen::Index width) {
    return {Vector::Zero(width), Vector::Ones(width)};
  }
  Vector apply(const Vector& raw) const { return (raw - mean).cwiseProduct(inv_std); }
};

inline InputNorm fit_norm(std::span<const Vector> samples, double min_std = 1e-3) {
  require(!samples.empty(), "cannot fit a normalizer on zero samples");
  const Eigen::Index w = samples.front().size();
  Vector mean = Vector::Zero(w);
  for (const auto& s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  Vector var = Vector::Zero(w);
  for (const auto& s : samples) var += (s - mean).cwiseAbs2();
  var /= static_cast<double>(samples.size());
  Vector inv = var.cwiseSqrt().cwiseMax(min_std).cwiseInverse();
  return {mean, inv};
}

/// Raw (unnormalized) encoder input: flattened ego-frame history followed by
/// the mean of all context attribute vectors.
inline Vector scene_features(const Scene& scene, const ExpertShape& shape) {
  require(static_cast<int>(scene.ego_history.size()) == shape.t_history,
          "history length does not match the trained horizon");
  Vector f = Vector::Zero(shape.input_width());
  Eigen::Index i = 0;
  for (const auto& s : scene.ego_history.states) {
    f[i++] = s.x;
    f[i++] = s.y;
    f[i++] = s.vx;
    f[i++] = s.vy;
    f[i++] = s.heading;
  }
  if (!scene.context.empty()) {
    for (const auto& c : scene.context) {
      require(static_cast<int>(c.attributes.size()) == shape.attr_width,
              "context attribute width does not match the trained feature layout");
      for (int a = 0; a < shape.attr_width; ++a) f[i + a] += c.attributes[a];
    }
    for (int a = 0; a < shape.attr_width; ++a) {
      f[i + a] /= static_cast<double>(scene.context.size());
    }
  }
  return f;
}

struct SceneEncoder {
  ExpertShape shape;
  InputNorm norm;
  nn::Mlp mlp;  // input -> hidden -> embedding, tanh throughout

  friend bool operator==(const SceneEncoder& a, const SceneEncoder& b) {
    return a.shape == b.shape && nn::flatten(a.mlp) == nn::flatten(b.mlp) &&
           a.norm.mean == b.norm.mean && a.norm.inv_std == b.norm.inv_std;
  }
};

template <class Rng>
SceneEncoder make_encoder(const ExpertShape& shape, Rng& rng) {
  const int widths[] = {shape.input_width(), shape.hidden_width, shape.embed_width};
  return {shape, InputNorm::identity(shape.input_width()),
          nn::make_mlp(widths, /*bounded_output=*/true, /*zero_last=*/false, rng)};
}

inline Vector encode(const SceneEncoder& enc, const Vector& raw_features, nn::Tape* tape = nullptr) {
  require(raw_features.size() == enc.shape.input_width(), "scene feature width mismatch");
  return nn::forward(enc.mlp, enc.norm.apply(raw_features), tape);
}

// ---------------------------------------------------------------------------
// Learned expert.

struct LearnedExpertParams {
  SceneEncoder encoder;
  std::vector<nn::Dense> mode_heads;  // K heads, embed -> 2 * t_future offsets
  nn::Dense mode_logits;              // embed -> K
  // Metres per unit of head output.
  double offset_scale = 1.0;

  const ExpertShape& shape() const { return encoder.shape; }
};

template <class P, class F>
  requires std::is_same_v<std::remove_const_t<P>, LearnedExpertParams>
void for_each_block(P& p, F&& f) {
  nn::for_each_block(p.encoder.mlp, f);
  for (auto& h : p.mode_heads) nn::for_each_block(h, f);
  nn::for_each_block(p.mode_logits, f);
}

inline LearnedExpertParams zeros_like(const LearnedExpertParams& p) {
  LearnedExpertParams z;
  z.encoder = {p.encoder.shape, p.encoder.norm, p.encoder.mlp.zeros_like()};
  for (const auto& h : p.mode_heads) z.mode_heads.push_back(nn::Dense::zeros(h.in(), h.out()));
  z.mode_logits = nn::Dense::zeros(p.mode_logits.in(), p.mode_logits.out());
  z.offset_scale = p.offset_scale;
  return z;
}

/// Encoder weights uniform in +-1/sqrt(fan_in); heads start at zero.
inline LearnedExpertParams init_learned_expert(const ExpertShape& shape, std::uint64_t seed) {
  require(shape.t_history >= 1 && shape.t_future >= 1, "expert horizon must be positive");
  require(shape.k_modes >= 1, "k_modes must be >= 1");
  require(shape.attr_width >= 0 && shape.hidden_width >= 1 && shape.embed_width >= 1,
          "expert widths must be positive");
  std::mt19937_64 rng(seed);
  LearnedExpertParams p;
  p.encoder = make_encoder(shape, rng);
  for (int k = 0; k < shape.k_modes; ++k) {
    p.mode_heads.push_back(nn::Dense::zeros(shape.embed_width, 2 * shape.t_future));
  }
  p.mode_logits = nn::Dense::zeros(shape.embed_width, shape.k_modes);
  return p;
}

inline void check_compatible(const LearnedExpertParams& p, const Scene& scene) {
  require(scene.horizon.t_history == p.shape().t_history &&
              scene.horizon.t_future == p.shape().t_future,
          "scene horizon does not match the trained expert");
}

struct ExpertForward {
  Vector features;  // normalized encoder input
  nn::Tape encoder_tape;
  Vector embedding;
  std::vector<Vector> head_out;  // per mode, 2*T_f raw offsets
  Vector logits;
};

inline ExpertForward expert_forward(const LearnedExpertParams& p, const Scene& scene) {
  check_compatible(p, scene);
  ExpertForward fw;
  fw.embedding = encode(p.encoder, scene_features(scene, p.shape()), &fw.encoder_tape);
  fw.head_out.reserve(p.mode_heads.size());
  for (const auto& h : p.mode_heads) fw.head_out.push_back(h.weight * fw.embedding + h.bias);
  fw.logits = p.mode_logits.weight * fw.embedding + p.mode_logits.bias;
  return fw;
}

inline std::vector<Waypoint> integrate_offsets(const Vector& offsets, double scale) {
  std::vector<Waypoint> w(static_cast<std::size_t>(offsets.size() / 2));
  double x = 0.0;
  double y = 0.0;
  for (std::size_t t = 0; t < w.size(); ++t) {
    x += scale * offsets[2 * t];
    y += scale * offsets[2 * t + 1];
    w[t] = {x, y};
  }
  return w;
}

/// Expects an ego-frame scene. Candidates are the cumulative sums of each
/// head's per-step offsets; confidences are the softmax of the mode logits.
inline PredictionSet learned_predict(const LearnedExpertParams& p, const Scene& scene) {
  const ExpertForward fw = expert_forward(p, scene);
  const Vector conf = nn::softmax(fw.logits);
  PredictionSet set;
  set.source = ExpertSource::kLearned;
  for (std::size_t k = 0; k < fw.head_out.size(); ++k) {
    set.candidates.push_back(
        {integrate_offsets(fw.head_out[k], p.offset_scale), conf[static_cast<Eigen::Index>(k)],
         ExpertSource::kLearned});
  }
  return set;
}

struct LossAndGrad {
  double loss = 0.0;
  LearnedExpertParams grad;
};

/// Winner-takes-all mixture NLL: the mode with the lowest ADE gets an
/// isotropic Gaussian regression term, and the logits get cross-entropy
/// towards that mode. Accumulates into `grad` and returns the loss.
inline double predictor_loss_accumulate(const LearnedExpertParams& p, const Scene& scene,
                                        double sigma, LearnedExpertParams& grad) {
  require(scene.ego_future_gt.has_value(), "predictor loss needs a ground-truth future");
  require(sigma > 0.0, "sigma must be positive");
  const ExpertForward fw = expert_forward(p, scene);
  const Trajectory& gt = *scene.ego_future_gt;
  const int tf = p.shape().t_future;

  std::size_t best = 0;
  double best_ade = std::numeric_limits<double>::infinity();
  std::vector<std::vector<Waypoint>> modes;
  for (std::size_t k = 0; k < fw.head_out.size(); ++k) {
    modes.push_back(integrate_offsets(fw.head_out[k], p.offset_scale));
    double sum = 0.0;
    for (int t = 0; t < tf; ++t) sum += displacement(modes[k][t], gt.states[t].position());
    if (sum < best_ade) {
      best_ade = sum;
      best = k;
    }
  }

  const double inv_var = 1.0 / (sigma * sigma);
  double reg = 0.0;
  Vector d_way(2 * tf);
  for (int t = 0; t < tf; ++t) {
    const double ex = modes[best][t].x - gt.states[t].x;
    const double ey = modes[best][t].y - gt.states[t].y;
    reg += ex * ex + ey * ey;
    d_way[2 * t] = ex * inv_var;
    d_way[2 * t + 1] = ey * inv_var;
  }
  reg *= 0.5 * inv_var;

  // waypoint[t] = scale * sum_{u<=t} offset[u]
  Vector d_off(2 * tf);
  double gx = 0.0;
  double gy = 0.0;
  for (int t = tf - 1; t >= 0; --t) {
    gx += d_way[2 * t];
    gy += d_way[2 * t + 1];
    d_off[2 * t] = p.offset_scale * gx;
    d_off[2 * t + 1] = p.offset_scale * gy;
  }

  const Vector prob = nn::softmax(fw.logits);
  const double ce = -std::log(std::max(prob[static_cast<Eigen::Index>(best)],
                                       std::numeric_limits<double>::min()));
  Vector d_logits = prob;
  d_logits[static_cast<Eigen::Index>(best)] -= 1.0;

  Vector d_embed = Vector::Zero(fw.embedding.size());
  nn::backward_dense(p.mode_heads[best], fw.embedding, d_off, grad.mode_heads[best], &d_embed);
  nn::backward_dense(p.mode_logits, fw.embedding, d_logits, grad.mode_logits, &d_embed);
  nn::backward(p.encoder.mlp, fw.encoder_tape, d_embed, grad.encoder.mlp);
  return reg + ce;
}

inline LossAndGrad predictor_loss_and_grad(const LearnedExpertParams& p, const Scene& scene,
                                           double sigma = 1.0) {
  LossAndGrad out{0.0, zeros_like(p)};
  out.loss = predictor_loss_accumulate(p, scene, sigma, out.grad);
  return out;
}

inline double predictor_loss(const LearnedExpertParams& p, const Scene& scene, double sigma = 1.0) {
  LearnedExpertParams scratch = zeros_like(p);
  return predictor_loss_accumulate(p, scene, sigma, scratch);
}

/// Mean loss and gradient over a batch, summed in batch order.
inline LossAndGrad batch_loss_and_grad(const LearnedExpertParams& p,
                                       std::span<const Scene* const> batch, double sigma = 1.0) {
  require(!batch.empty(), "predictor batch is empty");
  LossAndGrad out{0.0, zeros_like(p)};
  for (const Scene* s : batch) out.loss += predictor_loss_accumulate(p, *s, sigma, out.grad);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv_n;
  nn::scale(out.grad, inv_n);
  return out;
}

template <class P>
double global_norm(const P& grad) {
  double sq = 0.0;
  for_each_block(grad, [&](const double* d, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) sq += d[k] * d[k];
  });
  return std::sqrt(sq);
}

/// One plain gradient-descent step on the mean batch loss. `clip_norm` > 0
/// rescales the gradient to at most that global norm.
inline LearnedExpertParams predictor_update(const LearnedExpertParams& p,
                                            std::span<const Scene* const> batch, double lr,
                                            double sigma = 1.0, double clip_norm = 0.0,
                                            double* loss_out = nullptr) {
  require(lr >= 0.0, "learning rate must be non-negative");
  LossAndGrad lg = batch_loss_and_grad(p, batch, sigma);
  if (loss_out) *loss_out = lg.loss;
  LearnedExpertParams next = p;
  if (lr == 0.0) return next;
  double step = lr;
  if (clip_norm > 0.0) {
    const double norm = global_norm(lg.grad);
    if (norm > clip_norm) step *= clip_norm / norm;
  }
  nn::axpy(-step, lg.grad, next);
  return next;
}

inline LearnedExpertParams predictor_update(const LearnedExpertParams& p,
                                            std::span<const Scene> batch, double lr,
                                            double sigma = 1.0, double clip_norm = 0.0) {
  std::vector<const Scene*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  return predictor_update(p, std::span<const Scene* const>(ptrs), lr, sigma, clip_norm);
}

}  // namespace ape::experts

#endif  // APE_EXPERTS_HPP_
