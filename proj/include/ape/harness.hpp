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

// Experiment orchestration behind the command-line tool: declarative config,
// run directories, cross-distribution evaluation and the two gain sweeps.

#ifndef APE_HARNESS_HPP_
#define APE_HARNESS_HPP_

#include <algorithm>
#include <cctype>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ape/checkpoint.hpp"
#include "ape/core.hpp"
#include "ape/metrics.hpp"
#include "ape/pipeline.hpp"
#include "ape/routing.hpp"
#include "ape/scenariogen.hpp"

namespace ape::harness {

namespace fs = std::filesystem;
using pipeline::RouterKind;

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

enum class GainMetric { kMinAde, kMinFde, kMissRate };

inline const char* to_string(GainMetric m) {
  switch (m) {
    case GainMetric::kMinAde: return "min_ade";
    case GainMetric::kMinFde: return "min_fde";
    case GainMetric::kMissRate: return "miss_rate";
  }
  return "?";
}

struct ExperimentConfig {
  std::string train_spec = "family_b";
  std::string eval_spec = "family_a";
  // Overrides applied on top of the named presets, keyed by field name.
  std::map<std::string, double> train_overrides;
  std::map<std::string, double> eval_overrides;
  HorizonSpec horizon;
  std::size_t n_train = 2000;
  std::size_t n_eval = 500;
  std::vector<RouterKind> router_kinds{RouterKind::kLearned, RouterKind::kVariance,
                                       RouterKind::kLearnedOnly, RouterKind::kRuleOnly,
                                       RouterKind::kOracle};
  routing::SelectionMode selection = routing::SelectionMode::kExpertLevel;
  metrics::MissTolerance tolerance;
  std::vector<int> horizons{1, 10, 20, 40, 80};
  std::vector<double> ood_ratios{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "run";
  GainMetric gain_metric = GainMetric::kMinAde;
  pipeline::TrainConfig train;

  std::uint64_t seed() const { return seeds.front(); }
};

// ---------------------------------------------------------------------------
// Flat key = value config text. '#' starts a comment; lists are comma
// separated.

namespace detail {

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(d)) throw ConfigError(key + ": not a number: '" + v + "'");
  return d;
}

inline long long to_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw ConfigError(key + ": not an integer: '" + v + "'");
  return n;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  const long long n = to_int(key, v);
  if (n < 0) throw ConfigError(key + ": must be non-negative");
  return static_cast<std::uint64_t>(n);
}

inline std::string fmt(double v) { return metrics::format_double(v); }

template <class T, class F>
std::string join(const std::vector<T>& xs, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += f(xs[i]);
  }
  return out;
}

inline const char* selection_name(routing::SelectionMode m) {
  return m == routing::SelectionMode::kExpertLevel ? "expert_level" : "candidate_level";
}

inline const std::vector<std::string>& family_fields() {
  static const std::vector<std::string> fields{
      "speed_lo",       "speed_hi",           "turn_rate_lo",       "turn_rate_hi",
      "p_turn",         "accel_noise_std",    "context_density",    "cruise_speed",
      "speed_relaxation", "position_noise_std", "velocity_noise_std"};
  return fields;
}

inline void apply_override(scenariogen::DistributionSpec& s, const std::string& field, double v) {
  if (field == "speed_lo") s.speed_range.lo = v;
  else if (field == "speed_hi") s.speed_range.hi = v;
  else if (field == "turn_rate_lo") s.turn_rate_range.lo = v;
  else if (field == "turn_rate_hi") s.turn_rate_range.hi = v;
  else if (field == "p_turn") s.p_turn = v;
  else if (field == "accel_noise_std") s.accel_noise_std = v;
  else if (field == "context_density") s.context_density = v;
  else if (field == "cruise_speed") s.cruise_speed = v;
  else if (field == "speed_relaxation") s.speed_relaxation = v;
  else if (field == "position_noise_std") s.position_noise_std = v;
  else if (field == "velocity_noise_std") s.velocity_noise_std = v;
  else throw ConfigError("unknown family field '" + field + "'");
}

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  pipeline::TrainConfig& t = c.train;
  const auto& v = value;
  for (const char* prefix : {"train_family.", "eval_family."}) {
    const std::string p(prefix);
    if (key.rfind(p, 0) == 0) {
      const std::string field = key.substr(p.size());
      const auto& known = family_fields();
      if (std::find(known.begin(), known.end(), field) == known.end()) {
        throw ConfigError("unknown family field '" + field + "'");
      }
      (p == "train_family." ? c.train_overrides : c.eval_overrides)[field] = to_double(key, v);
      return;
    }
  }
  if (key == "train_spec") c.train_spec = v;
  else if (key == "eval_spec") c.eval_spec = v;
  else if (key == "t_history") c.horizon.t_history = static_cast<int>(to_int(key, v));
  else if (key == "t_future") c.horizon.t_future = static_cast<int>(to_int(key, v));
  else if (key == "dt") c.horizon.dt = to_double(key, v);
  else if (key == "n_train") c.n_train = to_u64(key, v);
  else if (key == "n_eval") c.n_eval = to_u64(key, v);
  else if (key == "router_kinds") {
    c.router_kinds.clear();
    for (const auto& s : split_list(v)) {
      auto k = pipeline::router_kind_from_string(s);
      if (!k) throw ConfigError("router_kinds: unknown router '" + s + "'");
      c.router_kinds.push_back(*k);
    }
  } else if (key == "selection") {
    if (v == "expert_level") c.selection = routing::SelectionMode::kExpertLevel;
    else if (v == "candidate_level") c.selection = routing::SelectionMode::kCandidateLevel;
    else throw ConfigError("selection: expected expert_level or candidate_level");
  } else if (key == "miss_lateral") c.tolerance.lateral = to_double(key, v);
  else if (key == "miss_longitudinal") c.tolerance.longitudinal = to_double(key, v);
  else if (key == "miss_eval_step") c.tolerance.eval_step = static_cast<int>(to_int(key, v));
  else if (key == "horizons") {
    c.horizons.clear();
    for (const auto& s : split_list(v)) c.horizons.push_back(static_cast<int>(to_int(key, s)));
  } else if (key == "ood_ratios") {
    c.ood_ratios.clear();
    for (const auto& s : split_list(v)) c.ood_ratios.push_back(to_double(key, s));
  } else if (key == "seeds") {
    c.seeds.clear();
    for (const auto& s : split_list(v)) c.seeds.push_back(to_u64(key, s));
  } else if (key == "out_dir") c.out_dir = v;
  else if (key == "gain_metric") {
    if (v == "min_ade") c.gain_metric = GainMetric::kMinAde;
    else if (v == "min_fde") c.gain_metric = GainMetric::kMinFde;
    else if (v == "miss_rate") c.gain_metric = GainMetric::kMissRate;
    else throw ConfigError("gain_metric: expected min_ade, min_fde or miss_rate");
  } else if (key == "lr_predictor") t.lr_predictor = to_double(key, v);
  else if (key == "lr_router") t.lr_router = to_double(key, v);
  else if (key == "epochs") t.epochs = static_cast<int>(to_int(key, v));
  else if (key == "batch_size") t.batch_size = static_cast<int>(to_int(key, v));
  else if (key == "lr_decay_factor") t.lr_decay_factor = to_double(key, v);
  else if (key == "lr_decay_period") t.lr_decay_period = static_cast<int>(to_int(key, v));
  else if (key == "sigma") t.sigma = to_double(key, v);
  else if (key == "clip_norm") t.clip_norm = to_double(key, v);
  else if (key == "router_batch_size") t.router_batch_size = static_cast<int>(to_int(key, v));
  else if (key == "pairing") {
    if (v == "per_mode") t.pairing = pipeline::PairingMode::kPerMode;
    else if (v == "best_mode") t.pairing = pipeline::PairingMode::kBestMode;
    else throw ConfigError("pairing: expected per_mode or best_mode");
  } else if (key == "link") {
    if (v == "logistic") t.link = routing::Link::kLogistic;
    else if (v == "relu_eps") t.link = routing::Link::kReluEps;
    else throw ConfigError("link: expected logistic or relu_eps");
  } else if (key == "bootstrap_members") t.bootstrap_members = static_cast<int>(to_int(key, v));
  else if (key == "hidden_width") t.hidden_width = static_cast<int>(to_int(key, v));
  else if (key == "embed_width") t.embed_width = static_cast<int>(to_int(key, v));
  else if (key == "k_modes") t.k_modes = static_cast<int>(to_int(key, v));
  else if (key == "router_width") t.router_width = static_cast<int>(to_int(key, v));
  else if (key == "router_layers") t.router_layers = static_cast<int>(to_int(key, v));
  else throw ConfigError("unknown config key '" + key + "'");
}

inline scenariogen::DistributionSpec resolve_spec(const std::string& name,
                                                  const std::map<std::string, double>& overrides,
                                                  const HorizonSpec& horizon) {
  auto spec = scenariogen::family_by_name(name, horizon);
  if (!spec) throw ConfigError("unknown distribution family '" + name + "'");
  for (const auto& [field, value] : overrides) detail::apply_override(*spec, field, value);
  return *spec;
}

inline void validate(const ExperimentConfig& c) {
  try {
    validate(c.horizon);
    scenariogen::validate(resolve_spec(c.train_spec, c.train_overrides, c.horizon));
    scenariogen::validate(resolve_spec(c.eval_spec, c.eval_overrides, c.horizon));
    pipeline::validate(c.train);
    metrics::resolve_eval_step(c.tolerance, c.horizon.t_future);
  } catch (const ConfigError&) {
    throw;
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  if (c.n_train < 1 || c.n_eval < 1) throw ConfigError("n_train and n_eval must be >= 1");
  if (c.router_kinds.empty()) throw ConfigError("router_kinds must not be empty");
  if (c.horizons.empty()) throw ConfigError("horizons must not be empty");
  if (c.ood_ratios.empty()) throw ConfigError("ood_ratios must not be empty");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  for (int h : c.horizons) {
    if (h < 1) throw ConfigError("horizons must be >= 1");
  }
  for (double r : c.ood_ratios) {
    if (r < 0.0 || r > 1.0) throw ConfigError("ood_ratios must lie in [0, 1]");
  }
  if (c.out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    try {
      set_key(c, key, detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text of every setting; parse_config(canonical_text(c)) == c.
inline std::string canonical_text(const ExperimentConfig& c) {
  using detail::fmt;
  using detail::join;
  const auto& t = c.train;
  std::ostringstream o;
  o << "train_spec = " << c.train_spec << "\n";
  o << "eval_spec = " << c.eval_spec << "\n";
  for (const auto& [k, v] : c.train_overrides) o << "train_family." << k << " = " << fmt(v) << "\n";
  for (const auto& [k, v] : c.eval_overrides) o << "eval_family." << k << " = " << fmt(v) << "\n";
  o << "t_history = " << c.horizon.t_history << "\n";
  o << "t_future = " << c.horizon.t_future << "\n";
  o << "dt = " << fmt(c.horizon.dt) << "\n";
  o << "n_train = " << c.n_train << "\n";
  o << "n_eval = " << c.n_eval << "\n";
  o << "router_kinds = "
    << join(c.router_kinds, [](RouterKind k) { return std::string(pipeline::to_string(k)); })
    << "\n";
  o << "selection = " << detail::selection_name(c.selection) << "\n";
  o << "miss_lateral = " << fmt(c.tolerance.lateral) << "\n";
  o << "miss_longitudinal = " << fmt(c.tolerance.longitudinal) << "\n";
  o << "miss_eval_step = " << c.tolerance.eval_step << "\n";
  o << "horizons = " << join(c.horizons, [](int h) { return std::to_string(h); }) << "\n";
  o << "ood_ratios = " << join(c.ood_ratios, [](double r) { return fmt(r); }) << "\n";
  o << "seeds = " << join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }) << "\n";
  o << "out_dir = " << c.out_dir << "\n";
  o << "gain_metric = " << to_string(c.gain_metric) << "\n";
  o << "lr_predictor = " << fmt(t.lr_predictor) << "\n";
  o << "lr_router = " << fmt(t.lr_router) << "\n";
  o << "epochs = " << t.epochs << "\n";
  o << "batch_size = " << t.batch_size << "\n";
  o << "lr_decay_factor = " << fmt(t.lr_decay_factor) << "\n";
  o << "lr_decay_period = " << t.lr_decay_period << "\n";
  o << "sigma = " << fmt(t.sigma) << "\n";
  o << "clip_norm = " << fmt(t.clip_norm) << "\n";
  o << "router_batch_size = " << t.router_batch_size << "\n";
  o << "pairing = " << (t.pairing == pipeline::PairingMode::kPerMode ? "per_mode" : "best_mode")
    << "\n";
  o << "link = " << routing::to_string(t.link) << "\n";
  o << "bootstrap_members = " << t.bootstrap_members << "\n";
  o << "hidden_width = " << t.hidden_width << "\n";
  o << "embed_width = " << t.embed_width << "\n";
  o << "k_modes = " << t.k_modes << "\n";
  o << "router_width = " << t.router_width << "\n";
  o << "router_layers = " << t.router_layers << "\n";
  return o.str();
}

/// 64-bit FNV-1a over the canonical text, as 16 hex digits. The output
/// directory is excluded so that relocating a run keeps its hash.
inline std::string config_hash(const ExperimentConfig& c) {
  ExperimentConfig h = c;
  h.out_dir = "-";
  const std::string text = canonical_text(h);
  std::uint64_t x = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    x ^= ch;
    x *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, x);
  return buf;
}

// ---------------------------------------------------------------------------
// Datasets. Held-out and evaluation sets are built as mixtures so that the
// ratio-0 and ratio-1 sweep points reproduce them scene for scene.

inline std::uint64_t eval_data_seed(std::uint64_t seed) { return seed + 1000; }

struct Datasets {
  std::vector<Scene> train;
  std::vector<Scene> heldout;  // training distribution
  std::vector<Scene> eval;     // evaluation distribution
};

inline scenariogen::MixSpec mix_spec(const ExperimentConfig& c, double ratio,
                                     const HorizonSpec& horizon) {
  return {resolve_spec(c.train_spec, c.train_overrides, horizon),
          resolve_spec(c.eval_spec, c.eval_overrides, horizon), ratio, c.n_eval,
          eval_data_seed(c.seed())};
}

inline std::vector<Scene> train_set(const ExperimentConfig& c, const HorizonSpec& horizon) {
  return scenariogen::generate(resolve_spec(c.train_spec, c.train_overrides, horizon), c.n_train,
                               c.seed());
}

inline Datasets make_datasets(const ExperimentConfig& c, const HorizonSpec& horizon) {
  return {train_set(c, horizon), scenariogen::generate_mixture(mix_spec(c, 0.0, horizon)),
          scenariogen::generate_mixture(mix_spec(c, 1.0, horizon))};
}

inline pipeline::TrainConfig train_config(const ExperimentConfig& c) {
  pipeline::TrainConfig t = c.train;
  t.seed = c.seed();
  return t;
}

// ---------------------------------------------------------------------------
// Evaluation.

inline metrics::MetricReport evaluate_router(const pipeline::TrainedEnsemble& e,
                                             std::span<const Scene> scenes, RouterKind kind,
                                             const metrics::MissTolerance& tol,
                                             routing::SelectionMode selection,
                                             std::string dataset_tag) {
  require(!scenes.empty(), "evaluation set is empty");
  std::vector<Scene> ego = pipeline::to_ego_frames(scenes);
  std::vector<PredictionSet> preds;
  preds.reserve(ego.size());
  for (const auto& s : ego) preds.push_back(pipeline::infer(e, s, kind, selection));
  std::vector<metrics::ScoredScene> scored;
  scored.reserve(ego.size());
  for (std::size_t i = 0; i < ego.size(); ++i) {
    require(ego[i].ego_future_gt.has_value(), "evaluation scene '" + ego[i].id + "' has no ground truth");
    scored.push_back({&preds[i], &*ego[i].ego_future_gt});
  }
  return metrics::evaluate(scored, tol, std::move(dataset_tag), pipeline::to_string(kind));
}

inline double metric_value(const metrics::MetricReport& r, GainMetric m) {
  switch (m) {
    case GainMetric::kMinAde: return r.min_ade;
    case GainMetric::kMinFde: return r.min_fde;
    case GainMetric::kMissRate: return r.miss_rate;
  }
  return std::nan("");
}

/// Gain of the learned router over the learned expert alone.
inline double ape_gain(const pipeline::TrainedEnsemble& e, std::span<const Scene> scenes,
                       const ExperimentConfig& c) {
  const auto ape = evaluate_router(e, scenes, RouterKind::kLearned, c.tolerance, c.selection, "");
  const auto base =
      evaluate_router(e, scenes, RouterKind::kLearnedOnly, c.tolerance, c.selection, "");
  return metrics::perf_gain(metric_value(ape, c.gain_metric), metric_value(base, c.gain_metric));
}

/// One row per (dataset, method): held-out training distribution first, then
/// the evaluation distribution.
inline std::vector<metrics::MetricReport> eval_table(const pipeline::TrainedEnsemble& e,
                                                     const ExperimentConfig& c,
                                                     const Datasets& d) {
  std::vector<metrics::MetricReport> rows;
  const std::string in_tag = c.train_spec + "_heldout";
  for (RouterKind k : c.router_kinds) {
    rows.push_back(evaluate_router(e, d.heldout, k, c.tolerance, c.selection, in_tag));
  }
  for (RouterKind k : c.router_kinds) {
    rows.push_back(evaluate_router(e, d.eval, k, c.tolerance, c.selection, c.eval_spec));
  }
  return rows;
}

struct GainPoint {
  double x = 0.0;
  double gain_percent = 0.0;
};

inline std::vector<GainPoint> ood_sweep(const pipeline::TrainedEnsemble& e,
                                        const ExperimentConfig& c) {
  std::vector<GainPoint> out;
  for (double r : c.ood_ratios) {
    const auto mix = scenariogen::generate_mixture(mix_spec(c, r, c.horizon));
    out.push_back({r, ape_gain(e, mix, c)});
  }
  return out;
}

/// Trains one ensemble per horizon (or reuses `cached` when it returns one)
/// and measures the gain on the full evaluation distribution.
template <class Cache>
std::vector<GainPoint> horizon_sweep(const ExperimentConfig& c, Cache&& cached) {
  std::vector<GainPoint> out;
  for (int h : c.horizons) {
    HorizonSpec hs = c.horizon;
    hs.t_future = h;
    ExperimentConfig ch = c;
    ch.horizon = hs;
    ch.tolerance.eval_step = 0;  // a fixed step may not exist at every horizon
    std::optional<pipeline::TrainedEnsemble> e = cached(h, ch);
    const auto eval = scenariogen::generate_mixture(mix_spec(ch, 1.0, hs));
    out.push_back({static_cast<double>(h), ape_gain(*e, eval, ch)});
  }
  return out;
}

/// True when the rise over the last interval is slower per step than over the
/// earlier ones. Only logged.
inline bool gains_flatten(const std::vector<GainPoint>& pts) {
  if (pts.size() < 3) return true;
  const auto& a = pts.front();
  const auto& m = pts[pts.size() - 2];
  const auto& b = pts.back();
  const double early = (m.gain_percent - a.gain_percent) / (m.x - a.x);
  const double late = (b.gain_percent - m.gain_percent) / (b.x - m.x);
  return late < early;
}

inline bool non_decreasing(const std::vector<GainPoint>& pts) {
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].gain_percent < pts[i - 1].gain_percent) return false;
  }
  return true;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, "spearman needs two equal lists of >= 2 values");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Run directory files.

inline constexpr const char* kCheckpointFile = "checkpoint.ape";
inline constexpr const char* kBufferFile = "routing_buffer.jsonl";
inline constexpr const char* kTrainLogFile = "train_log.csv";
inline constexpr const char* kEvalFile = "eval.csv";
inline constexpr const char* kOodFile = "ablate_ood.csv";
inline constexpr const char* kHorizonFile = "ablate_horizon.csv";
inline constexpr const char* kSummaryFile = "summary.txt";
inline constexpr const char* kConfigFile = "config.resolved";

inline std::string csv_preamble(const ExperimentConfig& c) {
  return "# config_hash=" + config_hash(c) + ",seed=" + std::to_string(c.seed()) + "\n";
}

inline std::string train_log_csv(const ExperimentConfig& c, const std::vector<pipeline::EpochLog>& log) {
  using detail::fmt;
  std::string out = csv_preamble(c);
  out += "epoch,predictor_loss,router_loss,router_pair_accuracy\n";
  for (const auto& l : log) {
    out += std::to_string(l.epoch) + "," + fmt(l.predictor_loss) + "," + fmt(l.router_loss) + "," +
           fmt(l.router_pair_accuracy) + "\n";
  }
  return out;
}

inline std::string eval_csv(const ExperimentConfig& c, const std::vector<metrics::MetricReport>& rows) {
  std::string out = csv_preamble(c);
  out += metrics::csv_header();
  out += '\n';
  for (const auto& r : rows) {
    out += metrics::to_csv_row(r);
    out += '\n';
  }
  return out;
}

inline std::string gain_csv(const ExperimentConfig& c, const char* x_name,
                            const std::vector<GainPoint>& pts) {
  std::string out = csv_preamble(c);
  out += std::string(x_name) + ",gain_percent\n";
  for (const auto& p : pts) out += detail::fmt(p.x) + "," + detail::fmt(p.gain_percent) + "\n";
  return out;
}

inline void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  scenariogen::write_text(p.string(), text);
}

inline std::string read_file(const fs::path& p) { return scenariogen::read_text(p.string()); }

/// Data rows of a CSV written by this module, comment lines and header dropped.
inline std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(p));
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands. Each writes into c.out_dir and returns its main product.

inline fs::path out_path(const ExperimentConfig& c, const char* name) {
  return fs::path(c.out_dir) / name;
}

inline fs::path horizon_dir(const ExperimentConfig& c, int h) {
  return fs::path(c.out_dir) / ("horizon_" + std::to_string(h));
}

inline Datasets cmd_generate(const ExperimentConfig& c) {
  validate(c);
  fs::create_directories(c.out_dir);
  Datasets d = make_datasets(c, c.horizon);
  scenariogen::save_scenes(out_path(c, "train.jsonl").string(), d.train);
  scenariogen::save_scenes(out_path(c, "heldout.jsonl").string(), d.heldout);
  scenariogen::save_scenes(out_path(c, "eval.jsonl").string(), d.eval);
  return d;
}

/// Trains on the configured training family and writes the checkpoint,
/// routing buffer, per-epoch log and the resolved config into `dir`.
inline pipeline::TrainedEnsemble train_into(const ExperimentConfig& c, const fs::path& dir) {
  fs::create_directories(dir);
  const auto data = train_set(c, c.horizon);
  pipeline::TrainResult r = pipeline::train(data, train_config(c));
  checkpoint::save((dir / kCheckpointFile).string(), r.ensemble);
  checkpoint::save_pairs((dir / kBufferFile).string(), r.buffer.records());
  write_file(dir / kTrainLogFile, train_log_csv(c, r.log));
  write_file(dir / kConfigFile, canonical_text(c));
  return std::move(r.ensemble);
}

inline pipeline::TrainedEnsemble cmd_train(const ExperimentConfig& c) {
  validate(c);
  return train_into(c, c.out_dir);
}

inline pipeline::TrainedEnsemble require_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("missing checkpoint '" + p.string() + "'; run train first");
  return checkpoint::load(p.string());
}

inline std::vector<metrics::MetricReport> cmd_eval(const ExperimentConfig& c) {
  validate(c);
  const auto e = require_checkpoint(out_path(c, kCheckpointFile));
  const Datasets d{{}, scenariogen::generate_mixture(mix_spec(c, 0.0, c.horizon)),
                   scenariogen::generate_mixture(mix_spec(c, 1.0, c.horizon))};
  auto rows = eval_table(e, c, d);
  write_file(out_path(c, kEvalFile), eval_csv(c, rows));
  return rows;
}

inline std::vector<GainPoint> cmd_ablate_ood(const ExperimentConfig& c) {
  validate(c);
  const auto e = require_checkpoint(out_path(c, kCheckpointFile));
  auto pts = ood_sweep(e, c);
  write_file(out_path(c, kOodFile), gain_csv(c, "ood_ratio", pts));
  return pts;
}

/// Reuses horizon_<h>/checkpoint.ape when it was trained under the same
/// settings and trains it otherwise.
inline std::vector<GainPoint> cmd_ablate_horizon(const ExperimentConfig& c) {
  validate(c);
  auto pts = horizon_sweep(c, [&](int h, const ExperimentConfig& ch) {
    const fs::path dir = horizon_dir(c, h);
    const fs::path ckpt = dir / kCheckpointFile;
    const fs::path cfg = dir / kConfigFile;
    if (fs::exists(ckpt) && fs::exists(cfg) && read_file(cfg) == canonical_text(ch)) {
      return std::optional(checkpoint::load(ckpt.string()));
    }
    return std::optional(train_into(ch, dir));
  });
  write_file(out_path(c, kHorizonFile), gain_csv(c, "horizon", pts));
  return pts;
}

struct ReportResult {
  std::string summary;
  std::vector<std::string> files;
  std::size_t table_rows = 0;
};

/// Summarizes the CSVs in `run_dir` into summary.txt and plot-ready
/// whitespace-separated x y files.
inline ReportResult cmd_report(const fs::path& run_dir) {
  const fs::path eval = run_dir / kEvalFile;
  const fs::path ood = run_dir / kOodFile;
  const fs::path hor = run_dir / kHorizonFile;
  const fs::path log = run_dir / kTrainLogFile;
  if (!fs::exists(eval)) {
    std::string missing;
    for (const auto& p : {eval, log, ood, hor}) {
      if (!fs::exists(p)) missing += (missing.empty() ? "" : ", ") + p.string();
    }
    throw ValidationError("report inputs missing: " + missing);
  }

  ReportResult res;
  std::ostringstream s;
  const auto rows = read_csv_rows(eval);
  char line[256];
  std::snprintf(line, sizeof(line), "%-20s %-14s %10s %10s %10s %10s %8s\n", "dataset", "method",
                "min_ade", "min_fde", "miss_rate", "mAP", "scenes");
  s << line;
  for (const auto& r : rows) {
    if (r.size() != 7) throw ValidationError("malformed row in " + eval.string());
    std::snprintf(line, sizeof(line), "%-20s %-14s %10.4f %10.4f %10.4f %10.4f %8s\n",
                  r[0].c_str(), r[1].c_str(), std::stod(r[2]), std::stod(r[3]), std::stod(r[4]),
                  std::stod(r[5]), r[6].c_str());
    s << line;
  }
  res.table_rows = rows.size();

  auto curve = [&](const fs::path& csv, const char* title, const char* dat) {
    if (!fs::exists(csv)) return;
    s << "\n" << title << "\n";
    std::string data;
    for (const auto& r : read_csv_rows(csv)) {
      if (r.size() != 2) throw ValidationError("malformed row in " + csv.string());
      std::snprintf(line, sizeof(line), "  %-10s %10.3f\n", r[0].c_str(), std::stod(r[1]));
      s << line;
      data += r[0] + " " + r[1] + "\n";
    }
    write_file(run_dir / dat, data);
    res.files.push_back((run_dir / dat).string());
  };
  curve(ood, "gain_percent by ood_ratio", "ood_gain.dat");
  curve(hor, "gain_percent by horizon", "horizon_gain.dat");

  if (fs::exists(log)) {
    std::string p_loss, r_loss;
    for (const auto& r : read_csv_rows(log)) {
      if (r.size() != 4) throw ValidationError("malformed row in " + log.string());
      p_loss += r[0] + " " + r[1] + "\n";
      r_loss += r[0] + " " + r[2] + "\n";
    }
    write_file(run_dir / "predictor_loss.dat", p_loss);
    write_file(run_dir / "router_loss.dat", r_loss);
    res.files.push_back((run_dir / "predictor_loss.dat").string());
    res.files.push_back((run_dir / "router_loss.dat").string());
  }

  res.summary = s.str();
  write_file(run_dir / kSummaryFile, res.summary);
  res.files.insert(res.files.begin(), (run_dir / kSummaryFile).string());
  return res;
}

}  // namespace ape::harness

#endif  // APE_HARNESS_HPP_
