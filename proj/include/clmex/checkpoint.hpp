#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmex/models.hpp"
#include "clmex/optim.hpp"

namespace clmex {

inline constexpr const char* kVersion = "0.1.0";

// Checkpoint container, all integers little-endian (full layout in
// docs/checkpoint_format.md):
//   bytes 0-7    magic "CLMXCKPT"
//   bytes 8-11   u32 format version (1)
//   bytes 12-19  u64 header length L
//   next L bytes UTF-8 JSON header
//   remainder    IEEE-754 binary64 payload; the header's tensor index gives
//                each tensor's offset and count in payload elements.
inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'M', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const StoredTensor&) const = default;
};

/// Adam state keyed by the names of the parameters it was built over.
struct OptimizerSnapshot {
  std::vector<std::string> params;
  AdamState state;
};

struct Checkpoint {
  ModelConfig architecture;
  std::vector<StoredTensor> tensors;
  std::optional<OptimizerSnapshot> optimizer;
  std::string rng_state;
  nlohmann::json meta = nlohmann::json::object();

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& e) {
  j = {{"conv_channels", e.conv_channels}, {"kernel", e.kernel},         {"stride", e.stride},
       {"padding", e.padding},             {"embedding_dim", e.embedding_dim}, {"input_channels", e.input_channels},
       {"image_size", e.image_size}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& e) {
  j.at("conv_channels").get_to(e.conv_channels);
  j.at("kernel").get_to(e.kernel);
  j.at("stride").get_to(e.stride);
  j.at("padding").get_to(e.padding);
  j.at("embedding_dim").get_to(e.embedding_dim);
  j.at("input_channels").get_to(e.input_channels);
  j.at("image_size").get_to(e.image_size);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"encoder", m.encoder},
       {"projection", {{"hidden_dim", m.projection.hidden_dim}, {"output_dim", m.projection.output_dim}}},
       {"num_classes", m.num_classes}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  j.at("encoder").get_to(m.encoder);
  j.at("projection").at("hidden_dim").get_to(m.projection.hidden_dim);
  j.at("projection").at("output_dim").get_to(m.projection.output_dim);
  j.at("num_classes").get_to(m.num_classes);
}

/// Copies every model parameter and buffer into a checkpoint (no optimizer
/// state).
inline Checkpoint snapshot(const Model& model) {
  Checkpoint c;
  c.architecture = model.config;
  for (const auto& p : model.state()) {
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  return c;
}

/// Attaches optimizer state for the named parameters, in optimizer order.
inline void store_optimizer(Checkpoint& c, std::vector<std::string> names, const AdamState& state) {
  if (!state.first_moment.empty() && state.first_moment.size() != names.size()) {
    throw CheckpointError("optimizer state covers " + std::to_string(state.first_moment.size()) +
                          " tensors, names given for " + std::to_string(names.size()));
  }
  c.optimizer = OptimizerSnapshot{std::move(names), state};
}

/// Overwrites the model's parameters and buffers from the checkpoint; each
/// must be present with a matching shape.
inline void load_parameters(Model& model, const Checkpoint& c) {
  for (auto& p : model.state()) {
    const auto* t = c.find(p.name);
    if (!t) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw CheckpointError("parameter " + p.name + " has shape " + to_string(t->shape) + " in the checkpoint, " +
                            to_string(p.tensor.shape()) + " in the model");
    }
    std::ranges::copy(t->values, p.tensor.mutable_values().begin());
  }
}

/// Rebuilds a model from the architecture stored in the checkpoint.
inline Model restore_model(const Checkpoint& c) {
  Rng unused(0);
  Model m = make_model(c.architecture, unused);
  load_parameters(m, c);
  return m;
}

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace detail

/// Serialises to `path` via a temporary file and rename, so a crash never
/// leaves a half-written checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  using nlohmann::json;
  json index = json::array();
  std::vector<const std::vector<double>*> payload;
  std::uint64_t offset = 0;
  const auto add = [&](const std::string& name, const Shape& shape, const std::vector<double>& values) {
    index.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
    payload.push_back(&values);
    offset += values.size();
  };
  for (const auto& t : c.tensors) add(t.name, t.shape, t.values);

  json header = {{"format_version", kCheckpointVersion}, {"code_version", kVersion}, {"architecture", c.architecture},
                 {"rng_state", c.rng_state},           {"meta", c.meta}};
  if (c.optimizer) {
    const auto& s = c.optimizer->state;
    header["optimizer"] = {{"kind", "adam"},
                           {"step_count", s.step_count},
                           {"beta1", s.options.beta1},
                           {"beta2", s.options.beta2},
                           {"epsilon", s.options.epsilon},
                           {"weight_decay", s.options.weight_decay},
                           {"params", c.optimizer->params},
                           {"has_moments", !s.first_moment.empty()}};
    for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
      const auto& name = c.optimizer->params[i];
      add("optimizer.m/" + name, Shape{s.first_moment[i].size()}, s.first_moment[i]);
      add("optimizer.v/" + name, Shape{s.second_moment[i].size()}, s.second_moment[i]);
    }
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* values : payload)
      for (double v : *values) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  if (const auto v = detail::get_le<std::uint32_t>(is); v != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  }
  const auto header_len = detail::get_le<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw CheckpointError(path.string() + ": truncated header");
  std::vector<double> payload;
  for (std::uint64_t bits; is.peek() != EOF;) {
    bits = detail::get_le<std::uint64_t>(is);
    payload.push_back(std::bit_cast<double>(bits));
  }

  Checkpoint c;
  json header;
  try {
    header = json::parse(text);
    header.at("architecture").get_to(c.architecture);
    c.rng_state = header.value("rng_state", "");
    c.meta = header.value("meta", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  std::map<std::string, std::vector<double>> moments;
  for (const auto& entry : header.at("tensors")) {
    const auto offset = entry.at("offset").get<std::uint64_t>(), count = entry.at("count").get<std::uint64_t>();
    if (offset + count > payload.size()) throw CheckpointError(path.string() + ": tensor index past end of payload");
    StoredTensor t{entry.at("name").get<std::string>(), entry.at("shape").get<Shape>(),
                   {payload.begin() + static_cast<std::ptrdiff_t>(offset),
                    payload.begin() + static_cast<std::ptrdiff_t>(offset + count)}};
    if (numel(t.shape) != t.values.size()) throw CheckpointError("tensor " + t.name + ": shape and count disagree");
    if (t.name.starts_with("optimizer.")) {
      moments[t.name] = std::move(t.values);
    } else {
      c.tensors.push_back(std::move(t));
    }
  }
  if (header.contains("optimizer")) {
    const auto& o = header["optimizer"];
    OptimizerSnapshot snap;
    snap.params = o.at("params").get<std::vector<std::string>>();
    snap.state.step_count = o.at("step_count").get<std::uint64_t>();
    snap.state.options = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("epsilon").get<double>(),
                          o.at("weight_decay").get<double>()};
    if (o.at("has_moments").get<bool>()) {
      for (const auto& name : snap.params) {
        const auto m = moments.find("optimizer.m/" + name), v = moments.find("optimizer.v/" + name);
        if (m == moments.end() || v == moments.end()) throw CheckpointError("missing optimizer moments for " + name);
        snap.state.first_moment.push_back(m->second);
        snap.state.second_moment.push_back(v->second);
      }
    }
    c.optimizer = std::move(snap);
  }
  return c;
}

/// Restores Adam state into `opt`, whose parameters must carry `names`.
inline void restore_optimizer(Adam& opt, const std::vector<std::string>& names, const Checkpoint& c) {
  if (!c.optimizer) throw CheckpointError("checkpoint has no optimizer state");
  if (c.optimizer->params != names) throw CheckpointError("optimizer parameter list differs from the checkpoint");
  opt.state() = c.optimizer->state;
}

}  // namespace clmex
