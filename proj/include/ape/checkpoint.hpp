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

// Binary checkpoint container and routing-buffer files.
//
// Layout: "APE1", u32 version, u32 section count, then per section a 4-byte
// tag, a u64 payload length and the payload. Integers and doubles are
// little-endian. Dense layers are stored as u64 rows, u64 cols, the row-major
// weight and then the bias, so every file carries its own layer shapes.

#ifndef APE_CHECKPOINT_HPP_
#define APE_CHECKPOINT_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ape/core.hpp"
#include "ape/experts.hpp"
#include "ape/nn.hpp"
#include "ape/pipeline.hpp"
#include "ape/routing.hpp"
#include "ape/scenariogen.hpp"

namespace ape::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

inline constexpr char kMagic[4] = {'A', 'P', 'E', '1'};
inline constexpr std::uint32_t kVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void vec(const nn::Vector& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
  }
  void dense(const nn::Dense& d) {
    u64(static_cast<std::uint64_t>(d.out()));
    u64(static_cast<std::uint64_t>(d.in()));
    raw(d.weight.data(), sizeof(double) * static_cast<std::size_t>(d.weight.size()));
    raw(d.bias.data(), sizeof(double) * static_cast<std::size_t>(d.bias.size()));
  }
  void mlp(const nn::Mlp& m) {
    u32(static_cast<std::uint32_t>(m.layers.size()));
    u32(m.bounded_output ? 1u : 0u);
    for (const auto& l : m.layers) dense(l);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

  void raw(void* p, std::size_t n) {
    if (n > b_.size() - pos_) throw CheckpointError(what_ + ": truncated");
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof v); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof v); return v; }
  double f64() { double v; raw(&v, sizeof v); return v; }
  int i32() { return static_cast<int>(u32()); }

  std::uint64_t count(std::uint64_t max_elems) {
    const std::uint64_t n = u64();
    if (n > max_elems) throw CheckpointError(what_ + ": implausible block size");
    return n;
  }
  nn::Vector vec(Eigen::Index expected) {
    const std::uint64_t n = count(remaining() / sizeof(double));
    if (static_cast<Eigen::Index>(n) != expected) mismatch("vector", expected, 1, n, 1);
    nn::Vector v(static_cast<Eigen::Index>(n));
    raw(v.data(), sizeof(double) * n);
    return v;
  }
  nn::Dense dense(Eigen::Index rows, Eigen::Index cols) {
    const std::uint64_t r = u64();
    const std::uint64_t c = u64();
    if (static_cast<Eigen::Index>(r) != rows || static_cast<Eigen::Index>(c) != cols) {
      mismatch("layer", rows, cols, r, c);
    }
    nn::Dense d = nn::Dense::zeros(cols, rows);
    raw(d.weight.data(), sizeof(double) * static_cast<std::size_t>(d.weight.size()));
    raw(d.bias.data(), sizeof(double) * static_cast<std::size_t>(d.bias.size()));
    return d;
  }
  /// Reads an MLP whose layer shapes must equal `like`.
  nn::Mlp mlp(const nn::Mlp& like) {
    const std::uint32_t n = u32();
    const bool bounded = u32() != 0;
    if (n != like.layers.size() || bounded != like.bounded_output) {
      throw CheckpointError(what_ + ": layer count or activation mismatch");
    }
    nn::Mlp m;
    m.bounded_output = bounded;
    for (const auto& l : like.layers) m.layers.push_back(dense(l.out(), l.in()));
    return m;
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  void expect_end() const {
    if (pos_ != b_.size()) throw CheckpointError(what_ + ": trailing bytes");
  }

 private:
  [[noreturn]] void mismatch(const char* kind, Eigen::Index er, Eigen::Index ec, std::uint64_t r,
                             std::uint64_t c) const {
    std::ostringstream os;
    os << what_ << ": " << kind << " shape mismatch, expected " << er << "x" << ec << ", found "
       << r << "x" << c;
    throw CheckpointError(os.str());
  }

  const std::string& b_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline void write_expert(Writer& w, const experts::LearnedExpertParams& p) {
  w.f64(p.offset_scale);
  w.vec(p.encoder.norm.mean);
  w.vec(p.encoder.norm.inv_std);
  w.mlp(p.encoder.mlp);
  w.u32(static_cast<std::uint32_t>(p.mode_heads.size()));
  for (const auto& h : p.mode_heads) w.dense(h);
  w.dense(p.mode_logits);
}

inline experts::LearnedExpertParams read_expert(Reader& r, const experts::ExpertShape& shape) {
  experts::LearnedExpertParams p = experts::init_learned_expert(shape, 0);
  p.offset_scale = r.f64();
  p.encoder.norm.mean = r.vec(shape.input_width());
  p.encoder.norm.inv_std = r.vec(shape.input_width());
  p.encoder.mlp = r.mlp(p.encoder.mlp);
  const std::uint32_t k = r.u32();
  if (static_cast<int>(k) != shape.k_modes) throw CheckpointError("expert: mode count mismatch");
  for (auto& h : p.mode_heads) h = r.dense(h.out(), h.in());
  p.mode_logits = r.dense(p.mode_logits.out(), p.mode_logits.in());
  return p;
}

inline void write_router(Writer& w, const routing::RouterParams& p) {
  w.f64(p.waypoint_scale);
  w.vec(p.shared_encoder.norm.mean);
  w.vec(p.shared_encoder.norm.inv_std);
  w.mlp(p.shared_encoder.mlp);
  w.mlp(p.candidate_encoder);
  w.mlp(p.routing_head);
}

inline routing::RouterParams read_router(Reader& r, const routing::RouterShape& shape,
                                         const experts::ExpertShape& expert_shape) {
  const auto like_expert = experts::init_learned_expert(expert_shape, 0);
  routing::RouterParams p = routing::init_router(shape, like_expert.encoder, 0);
  p.waypoint_scale = r.f64();
  p.shared_encoder.norm.mean = r.vec(expert_shape.input_width());
  p.shared_encoder.norm.inv_std = r.vec(expert_shape.input_width());
  p.shared_encoder.mlp = r.mlp(p.shared_encoder.mlp);
  p.candidate_encoder = r.mlp(p.candidate_encoder);
  p.routing_head = r.mlp(p.routing_head);
  return p;
}

inline std::string tag_str(const char* t) { return std::string(t, 4); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Config <-> JSON, used for the checkpoint metadata section.

inline nlohmann::json to_json(const pipeline::TrainConfig& c) {
  return {{"lr_predictor", c.lr_predictor},
          {"lr_router", c.lr_router},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_period", c.lr_decay_period},
          {"sigma", c.sigma},
          {"clip_norm", c.clip_norm},
          {"router_batch_size", c.router_batch_size},
          {"pairing", c.pairing == pipeline::PairingMode::kPerMode ? "per_mode" : "best_mode"},
          {"link", routing::to_string(c.link)},
          {"bootstrap_members", c.bootstrap_members},
          {"attr_width", c.attr_width},
          {"hidden_width", c.hidden_width},
          {"embed_width", c.embed_width},
          {"k_modes", c.k_modes},
          {"router_width", c.router_width},
          {"router_layers", c.router_layers}};
}

inline pipeline::TrainConfig train_config_from_json(const nlohmann::json& j) {
  pipeline::TrainConfig c;
  c.lr_predictor = j.at("lr_predictor").get<double>();
  c.lr_router = j.at("lr_router").get<double>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.lr_decay_factor = j.at("lr_decay_factor").get<double>();
  c.lr_decay_period = j.at("lr_decay_period").get<int>();
  c.sigma = j.at("sigma").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.router_batch_size = j.at("router_batch_size").get<int>();
  c.pairing = j.at("pairing").get<std::string>() == "best_mode" ? pipeline::PairingMode::kBestMode
                                                                : pipeline::PairingMode::kPerMode;
  c.link = j.at("link").get<std::string>() == "relu_eps" ? routing::Link::kReluEps
                                                         : routing::Link::kLogistic;
  c.bootstrap_members = j.at("bootstrap_members").get<int>();
  c.attr_width = j.at("attr_width").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.embed_width = j.at("embed_width").get<int>();
  c.k_modes = j.at("k_modes").get<int>();
  c.router_width = j.at("router_width").get<int>();
  c.router_layers = j.at("router_layers").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Ensemble checkpoints.

inline std::string serialize(const pipeline::TrainedEnsemble& e) {
  using detail::Writer;
  const auto& es = e.expert.shape();
  nlohmann::json meta = {
      {"dataset_tag", e.dataset_tag},
      {"epochs_trained", e.epochs_trained},
      {"variance_threshold", e.variance_threshold},
      {"horizon", {{"t_history", e.horizon.t_history}, {"t_future", e.horizon.t_future},
                   {"dt", e.horizon.dt}}},
      {"expert_shape", {{"t_history", es.t_history}, {"t_future", es.t_future},
                        {"attr_width", es.attr_width}, {"hidden_width", es.hidden_width},
                        {"embed_width", es.embed_width}, {"k_modes", es.k_modes}}},
      {"router_shape", {{"t_future", e.router.shape.t_future},
                        {"candidate_hidden", e.router.shape.candidate_hidden},
                        {"candidate_embed", e.router.shape.candidate_embed},
                        {"head_width", e.router.shape.head_width},
                        {"head_layers", e.router.shape.head_layers}}},
      {"bootstrap_members", e.bootstrap.size()},
      {"config", to_json(e.config)}};

  std::vector<std::pair<std::string, std::string>> sections;
  sections.emplace_back("META", meta.dump());
  {
    Writer w;
    detail::write_expert(w, e.expert);
    sections.emplace_back("EXPT", w.bytes());
  }
  {
    Writer w;
    detail::write_router(w, e.router);
    sections.emplace_back("RUTR", w.bytes());
  }
  for (std::size_t m = 0; m < e.bootstrap.size(); ++m) {
    require(m < 10, "at most 10 bootstrap members fit the section naming");
    Writer w;
    detail::write_expert(w, e.bootstrap[m]);
    sections.emplace_back("BST" + std::to_string(m), w.bytes());
  }

  Writer out;
  out.raw(kMagic, 4);
  out.u32(kVersion);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [tag, payload] : sections) {
    out.raw(tag.data(), 4);
    out.u64(payload.size());
    out.raw(payload.data(), payload.size());
  }
  return out.bytes();
}

inline pipeline::TrainedEnsemble deserialize(const std::string& bytes) {
  detail::Reader r(bytes, "checkpoint");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic bytes");
  if (r.u32() != kVersion) throw CheckpointError("checkpoint: unsupported version");
  const std::uint32_t n_sections = r.u32();

  std::vector<std::pair<std::string, std::string>> sections;
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    char tag[4];
    r.raw(tag, 4);
    const std::uint64_t len = r.u64();
    if (len > r.remaining()) throw CheckpointError("checkpoint: truncated section");
    std::string payload(len, '\0');
    r.raw(payload.data(), len);
    sections.emplace_back(std::string(tag, 4), std::move(payload));
  }
  r.expect_end();
  auto find = [&](const std::string& tag) -> const std::string& {
    for (const auto& [t, p] : sections) {
      if (t == tag) return p;
    }
    throw CheckpointError("checkpoint: missing section " + tag);
  };

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(find("META"));
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint: bad metadata: ") + ex.what());
  }

  pipeline::TrainedEnsemble e;
  try {
    e.dataset_tag = meta.at("dataset_tag").get<std::string>();
    e.epochs_trained = meta.at("epochs_trained").get<int>();
    e.variance_threshold = meta.at("variance_threshold").get<double>();
    const auto& h = meta.at("horizon");
    e.horizon = {h.at("t_history").get<int>(), h.at("t_future").get<int>(), h.at("dt").get<double>()};
    e.config = train_config_from_json(meta.at("config"));
    const auto& s = meta.at("expert_shape");
    experts::ExpertShape es{s.at("t_history").get<int>(),  s.at("t_future").get<int>(),
                            s.at("attr_width").get<int>(), s.at("hidden_width").get<int>(),
                            s.at("embed_width").get<int>(), s.at("k_modes").get<int>()};
    const auto& rs = meta.at("router_shape");
    routing::RouterShape rshape{rs.at("t_future").get<int>(), rs.at("candidate_hidden").get<int>(),
                                rs.at("candidate_embed").get<int>(), rs.at("head_width").get<int>(),
                                rs.at("head_layers").get<int>()};
    if (es.t_history != e.horizon.t_history || es.t_future != e.horizon.t_future ||
        rshape.t_future != e.horizon.t_future) {
      throw CheckpointError("checkpoint: member horizons disagree");
    }
    const auto n_boot = meta.at("bootstrap_members").get<std::size_t>();

    {
      detail::Reader sr(find("EXPT"), "expert section");
      e.expert = detail::read_expert(sr, es);
      sr.expect_end();
    }
    {
      detail::Reader sr(find("RUTR"), "router section");
      e.router = detail::read_router(sr, rshape, es);
      sr.expect_end();
    }
    for (std::size_t m = 0; m < n_boot; ++m) {
      detail::Reader sr(find("BST" + std::to_string(m)), "bootstrap section");
      e.bootstrap.push_back(detail::read_expert(sr, es));
      sr.expect_end();
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint: bad metadata: ") + ex.what());
  } catch (const ValidationError& ex) {
    throw CheckpointError(std::string("checkpoint: ") + ex.what());
  }
  return e;
}

inline void save(const std::string& path, const pipeline::TrainedEnsemble& e) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  const std::string bytes = serialize(e);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write to '" + path + "' failed");
}

inline pipeline::TrainedEnsemble load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

// ---------------------------------------------------------------------------
// Routing buffer JSONL. One pair per line; doubles keep 17 significant digits.

namespace detail {

inline void put_waypoints(std::string& out, const std::vector<Waypoint>& w) {
  out += '[';
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) out += ',';
    out += '[';
    scenariogen::detail::put_double(out, w[i].x);
    out += ',';
    scenariogen::detail::put_double(out, w[i].y);
    out += ']';
  }
  out += ']';
}

inline void put_candidate(std::string& out, const PredictionCandidate& c) {
  out += "{\"source\":\"";
  out += to_string(c.source);
  out += "\",\"confidence\":";
  scenariogen::detail::put_double(out, c.confidence);
  out += ",\"waypoints\":";
  put_waypoints(out, c.waypoints);
  out += '}';
}

inline PredictionCandidate get_candidate(const nlohmann::json& j) {
  PredictionCandidate c;
  const auto src = j.at("source").get<std::string>();
  require(src == "learned" || src == "rule", "unknown candidate source '" + src + "'");
  c.source = src == "rule" ? ExpertSource::kRule : ExpertSource::kLearned;
  c.confidence = j.at("confidence").get<double>();
  for (const auto& w : j.at("waypoints")) c.waypoints.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
  return c;
}

}  // namespace detail

inline std::string pair_to_json(const routing::RoutingPair& p) {
  std::string out = "{\"scene_id\":";
  out += nlohmann::json(p.scene_id).dump();
  out += ",\"ade_chosen\":";
  scenariogen::detail::put_double(out, p.ade_chosen);
  out += ",\"ade_rejected\":";
  scenariogen::detail::put_double(out, p.ade_rejected);
  out += ",\"chosen\":";
  detail::put_candidate(out, p.chosen);
  out += ",\"rejected\":";
  detail::put_candidate(out, p.rejected);
  out += ",\"scene_features\":[";
  for (Eigen::Index i = 0; i < p.scene_features.size(); ++i) {
    if (i) out += ',';
    scenariogen::detail::put_double(out, p.scene_features[i]);
  }
  out += "]}";
  return out;
}

inline routing::RoutingPair pair_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  routing::RoutingPair p;
  p.scene_id = j.at("scene_id").get<std::string>();
  p.ade_chosen = j.at("ade_chosen").get<double>();
  p.ade_rejected = j.at("ade_rejected").get<double>();
  p.chosen = detail::get_candidate(j.at("chosen"));
  p.rejected = detail::get_candidate(j.at("rejected"));
  const auto& f = j.at("scene_features");
  p.scene_features.resize(static_cast<Eigen::Index>(f.size()));
  for (std::size_t i = 0; i < f.size(); ++i) p.scene_features[static_cast<Eigen::Index>(i)] = f[i].get<double>();
  routing::validate(p);
  return p;
}

inline void save_pairs(const std::string& path, std::span<const routing::RoutingPair> pairs) {
  std::string text;
  for (const auto& p : pairs) {
    text += pair_to_json(p);
    text += '\n';
  }
  scenariogen::write_text(path, text);
}

inline std::vector<routing::RoutingPair> load_pairs(const std::string& path) {
  const std::string text = scenariogen::read_text(path);
  std::vector<routing::RoutingPair> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(pair_from_json(line));
    } catch (const std::exception& ex) {
      throw scenariogen::SceneFileError(line_no, ex.what());
    }
  }
  return out;
}

}  // namespace ape::checkpoint

#endif  // APE_CHECKPOINT_HPP_
