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

// Minimal fully-connected stack with hand-written backpropagation. Shared by
// the learned expert and the routing function.

#ifndef APE_NN_HPP_
#define APE_NN_HPP_

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "ape/core.hpp"

namespace ape::nn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Dense {
  Matrix weight;  // out x in
  Vector bias;    // out

  Eigen::Index in() const { return weight.cols(); }
  Eigen::Index out() const { return weight.rows(); }

  static Dense zeros(Eigen::Index in, Eigen::Index out) {
    return {Matrix::Zero(out, in), Vector::Zero(out)};
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <class Rng>
Dense init_uniform(Eigen::Index in, Eigen::Index out, Rng& rng) {
  Dense d = Dense::zeros(in, out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < d.weight.size(); ++i) d.weight.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < d.bias.size(); ++i) d.bias[i] = u(rng);
  return d;
}

/// Layers with tanh between them. The last layer is tanh too when
/// `bounded_output` is set, linear otherwise.
struct Mlp {
  std::vector<Dense> layers;
  bool bounded_output = false;

  Eigen::Index in() const { return layers.front().in(); }
  Eigen::Index out() const { return layers.back().out(); }

  Mlp zeros_like() const {
    Mlp z;
    z.bounded_output = bounded_output;
    for (const auto& l : layers) z.layers.push_back(Dense::zeros(l.in(), l.out()));
    return z;
  }
};

/// widths = {in, h1, ..., out}. The final layer is zeroed when `zero_last`.
template <class Rng>
Mlp make_mlp(std::span<const int> widths, bool bounded_output, bool zero_last, Rng& rng) {
  require(widths.size() >= 2, "mlp needs at least an input and an output width");
  Mlp m;
  m.bounded_output = bounded_output;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(last && zero_last ? Dense::zeros(widths[i], widths[i + 1])
                                         : init_uniform(widths[i], widths[i + 1], rng));
  }
  return m;
}

/// Activations recorded by forward(): acts[0] is the input, acts[i+1] the
/// output of layer i (post-activation).
struct Tape {
  std::vector<Vector> acts;
};

inline bool activated(const Mlp& m, std::size_t layer) {
  return layer + 1 < m.layers.size() || m.bounded_output;
}

inline Vector forward(const Mlp& m, const Vector& x, Tape* tape = nullptr) {
  require(x.size() == m.in(), "mlp input width mismatch");
  if (tape) {
    tape->acts.clear();
    tape->acts.reserve(m.layers.size() + 1);
    tape->acts.push_back(x);
  }
  Vector h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const Dense& l = m.layers[i];
    Vector z = l.weight * h + l.bias;
    if (activated(m, i)) z = z.array().tanh().matrix();
    h = std::move(z);
    if (tape) tape->acts.push_back(h);
  }
  return h;
}

/// Accumulates parameter gradients into `grad` and returns dLoss/dInput.
inline Vector backward(const Mlp& m, const Tape& tape, const Vector& grad_out, Mlp& grad) {
  Vector g = grad_out;
  for (std::size_t i = m.layers.size(); i-- > 0;) {
    if (activated(m, i)) {
      const Vector& y = tape.acts[i + 1];
      g = (g.array() * (1.0 - y.array().square())).matrix();
    }
    grad.layers[i].weight.noalias() += g * tape.acts[i].transpose();
    grad.layers[i].bias += g;
    g = m.layers[i].weight.transpose() * g;
  }
  return g;
}

inline void backward_dense(const Dense& d, const Vector& input, const Vector& grad_out,
                           Dense& grad, Vector* grad_input) {
  grad.weight.noalias() += grad_out * input.transpose();
  grad.bias += grad_out;
  if (grad_input) grad_input->noalias() += d.weight.transpose() * grad_out;
}

// Parameter visitation. `f` receives (double* data, std::size_t n) for each
// weight and bias block in a fixed order.

template <class F>
void for_each_block(Dense& d, F&& f) {
  f(d.weight.data(), static_cast<std::size_t>(d.weight.size()));
  f(d.bias.data(), static_cast<std::size_t>(d.bias.size()));
}

template <class F>
void for_each_block(const Dense& d, F&& f) {
  f(d.weight.data(), static_cast<std::size_t>(d.weight.size()));
  f(d.bias.data(), static_cast<std::size_t>(d.bias.size()));
}

template <class M, class F>
  requires std::is_same_v<std::remove_const_t<M>, Mlp>
void for_each_block(M& m, F&& f) {
  for (auto& l : m.layers) for_each_block(l, f);
}

/// `dst += alpha * src` over matching block lists.
template <class P>
void axpy(double alpha, const P& src, P& dst) {
  std::vector<const double*> src_blocks;
  for_each_block(src, [&](const double* p, std::size_t) { src_blocks.push_back(p); });
  std::size_t i = 0;
  for_each_block(dst, [&](double* p, std::size_t n) {
    const double* s = src_blocks[i++];
    for (std::size_t k = 0; k < n; ++k) p[k] += alpha * s[k];
  });
}

template <class P>
void scale(P& p, double alpha) {
  for_each_block(p, [&](double* d, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) d[k] *= alpha;
  });
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t total = 0;
  for_each_block(p, [&](const double*, std::size_t n) { total += n; });
  return total;
}

template <class P>
bool all_finite(const P& p) {
  bool ok = true;
  for_each_block(p, [&](const double* d, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) ok = ok && std::isfinite(d[k]);
  });
  return ok;
}

template <class P>
std::vector<double> flatten(const P& p) {
  std::vector<double> out;
  out.reserve(parameter_count(p));
  for_each_block(p, [&](const double* d, std::size_t n) { out.insert(out.end(), d, d + n); });
  return out;
}

/// Pointer to the i-th scalar in visitation order.
template <class P>
double* scalar_at(P& p, std::size_t index) {
  double* found = nullptr;
  std::size_t offset = 0;
  for_each_block(p, [&](double* d, std::size_t n) {
    if (!found && index < offset + n) found = d + (index - offset);
    offset += n;
  });
  return found;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

}  // namespace ape::nn

#endif  // APE_NN_HPP_
