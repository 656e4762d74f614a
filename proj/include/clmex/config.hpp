#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "clmex/augment.hpp"
#include "clmex/losses.hpp"
#include "clmex/models.hpp"
#include "clmex/optim.hpp"
#include "clmex/sampler.hpp"
#include "clmex/synthetic.hpp"

namespace clmex {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossKind { clmex, simclr, supcon };

struct DataConfig {
  std::string source = "synthetic";  // synthetic | manifest
  std::string manifest;
  SynthConfig synth;
  double test_fraction = 0.2;  // of subjects
};

struct PretrainConfig {
  std::size_t epochs = 50;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  LossKind loss = LossKind::clmex;
  ContrastiveOptions contrastive;
  SamplerConfig sampler;
  AdamOptions adam;
};

struct DownstreamConfig {
  std::size_t probe_epochs = 10;
  std::size_t finetune_epochs = 50;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  double label_fraction = 1.0;
  std::size_t batch_size = 32;
  double validation_fraction = 0.1;
  bool augment = true;
  bool standardize_head_inputs = true;  // frozen per-feature standardisation in front of the linear head
};

struct BaselineConfig {
  std::size_t epochs = 0;  // 0: probe_epochs + finetune_epochs of the downstream stage
  double lr = 1e-4;
  double weight_decay = 1e-4;
};

struct EvalConfig {
  std::vector<double> fractions{1.0, 0.75, 0.5, 0.25, 0.1, 0.05};
};

struct RunSettings {
  std::uint64_t seed = 7;
  bool deterministic = true;
  std::size_t jobs = 1;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  AugmentConfig augment;
  PretrainConfig pretrain;
  DownstreamConfig downstream;
  BaselineConfig baseline;
  EvalConfig eval;
  RunSettings run;

  std::size_t baseline_epochs() const {
    return baseline.epochs ? baseline.epochs : downstream.probe_epochs + downstream.finetune_epochs;
  }
};

namespace detail {

inline std::string format_value(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::string& v) { return v; }
template <typename T>
  requires std::is_integral_v<T>
std::string format_value(T v) {
  return std::to_string(v);
}
template <typename T>
std::string format_value(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_value(v[i]);
  return out;
}

template <typename T>
T parse_number(const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != end) throw ConfigError("not a valid number: '" + text + "'");
  return v;
}

inline void parse_value(const std::string& t, double& v) { v = parse_number<double>(t); }
inline void parse_value(const std::string& t, std::string& v) { v = t; }
inline void parse_value(const std::string& t, bool& v) {
  if (t == "true" || t == "1" || t == "yes") {
    v = true;
  } else if (t == "false" || t == "0" || t == "no") {
    v = false;
  } else {
    throw ConfigError("not a boolean: '" + t + "'");
  }
}
template <typename T>
  requires std::is_integral_v<T>
void parse_value(const std::string& t, T& v) {
  if constexpr (std::is_unsigned_v<T>) {
    if (!t.empty() && t.front() == '-') throw ConfigError("expected a non-negative integer, got '" + t + "'");
  }
  v = parse_number<T>(t);
}
template <typename T>
void parse_value(const std::string& t, std::vector<T>& v) {
  v.clear();
  if (trim(t).empty()) return;
  for (const auto& item : split(t, ',')) {
    T x{};
    parse_value(item, x);
    v.push_back(x);
  }
}

template <typename E>
struct EnumNames;
template <>
struct EnumNames<LossKind> {
  static constexpr std::array<std::pair<LossKind, const char*>, 3> values{
      {{LossKind::clmex, "clmex"}, {LossKind::simclr, "simclr"}, {LossKind::supcon, "supcon"}}};
};
template <>
struct EnumNames<PositiveCount> {
  static constexpr std::array<std::pair<PositiveCount, const char*>, 2> values{
      {{PositiveCount::originals, "originals"}, {PositiveCount::augmented, "augmented"}}};
};
template <>
struct EnumNames<Reduction> {
  static constexpr std::array<std::pair<Reduction, const char*>, 2> values{
      {{Reduction::sum, "sum"}, {Reduction::mean, "mean"}}};
};

template <typename E>
  requires std::is_enum_v<E>
std::string format_value(E v) {
  for (const auto& [e, name] : EnumNames<E>::values)
    if (e == v) return name;
  return "?";
}
template <typename E>
  requires std::is_enum_v<E>
void parse_value(const std::string& t, E& v) {
  std::string options;
  for (const auto& [e, name] : EnumNames<E>::values) {
    if (t == name) {
      v = e;
      return;
    }
    options += (options.empty() ? "" : "|") + std::string(name);
  }
  throw ConfigError("expected one of " + options + ", got '" + t + "'");
}

struct Field {
  std::string section, key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
Field field(std::string section, std::string key, Access access) {
  return {std::move(section), std::move(key),
          [access](RunConfig& c, const std::string& text) { parse_value(text, access(c)); },
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); }};
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      field("data", "source", [](RunConfig& c) -> auto& { return c.data.source; }),
      field("data", "manifest", [](RunConfig& c) -> auto& { return c.data.manifest; }),
      field("data", "subjects", [](RunConfig& c) -> auto& { return c.data.synth.subjects; }),
      field("data", "sessions", [](RunConfig& c) -> auto& { return c.data.synth.sessions; }),
      field("data", "expressions", [](RunConfig& c) -> auto& { return c.data.synth.expressions; }),
      field("data", "views", [](RunConfig& c) -> auto& { return c.data.synth.views; }),
      field("data", "image_size", [](RunConfig& c) -> auto& { return c.data.synth.image_size; }),
      field("data", "seed", [](RunConfig& c) -> auto& { return c.data.synth.seed; }),
      field("data", "view_degradation", [](RunConfig& c) -> auto& { return c.data.synth.view_degradation; }),
      field("data", "noise_std", [](RunConfig& c) -> auto& { return c.data.synth.noise_std; }),
      field("data", "test_fraction", [](RunConfig& c) -> auto& { return c.data.test_fraction; }),

      field("model", "conv_channels", [](RunConfig& c) -> auto& { return c.model.encoder.conv_channels; }),
      field("model", "kernel", [](RunConfig& c) -> auto& { return c.model.encoder.kernel; }),
      field("model", "stride", [](RunConfig& c) -> auto& { return c.model.encoder.stride; }),
      field("model", "padding", [](RunConfig& c) -> auto& { return c.model.encoder.padding; }),
      field("model", "embedding_dim", [](RunConfig& c) -> auto& { return c.model.encoder.embedding_dim; }),
      field("model", "projection_hidden_dim", [](RunConfig& c) -> auto& { return c.model.projection.hidden_dim; }),
      field("model", "projection_dim", [](RunConfig& c) -> auto& { return c.model.projection.output_dim; }),

      field("augment", "min_scale", [](RunConfig& c) -> auto& { return c.augment.min_scale; }),
      field("augment", "max_scale", [](RunConfig& c) -> auto& { return c.augment.max_scale; }),
      field("augment", "flip_probability", [](RunConfig& c) -> auto& { return c.augment.flip_probability; }),
      field("augment", "grayscale_probability", [](RunConfig& c) -> auto& { return c.augment.grayscale_probability; }),
      field("augment", "color_probability", [](RunConfig& c) -> auto& { return c.augment.color_probability; }),
      field("augment", "brightness", [](RunConfig& c) -> auto& { return c.augment.brightness; }),
      field("augment", "contrast", [](RunConfig& c) -> auto& { return c.augment.contrast; }),
      field("augment", "saturation", [](RunConfig& c) -> auto& { return c.augment.saturation; }),
      field("augment", "hue", [](RunConfig& c) -> auto& { return c.augment.hue; }),

      field("pretrain", "epochs", [](RunConfig& c) -> auto& { return c.pretrain.epochs; }),
      field("pretrain", "lr", [](RunConfig& c) -> auto& { return c.pretrain.lr; }),
      field("pretrain", "weight_decay", [](RunConfig& c) -> auto& { return c.pretrain.weight_decay; }),
      field("pretrain", "loss", [](RunConfig& c) -> auto& { return c.pretrain.loss; }),
      field("pretrain", "temperature", [](RunConfig& c) -> auto& { return c.pretrain.contrastive.temperature; }),
      field("pretrain", "positive_count", [](RunConfig& c) -> auto& { return c.pretrain.contrastive.convention; }),
      field("pretrain", "reduction", [](RunConfig& c) -> auto& { return c.pretrain.contrastive.reduction; }),
      field("pretrain", "groups_per_batch", [](RunConfig& c) -> auto& { return c.pretrain.sampler.groups_per_batch; }),
      field("pretrain", "views_per_group", [](RunConfig& c) -> auto& { return c.pretrain.sampler.views_per_group; }),
      field("pretrain", "beta1", [](RunConfig& c) -> auto& { return c.pretrain.adam.beta1; }),
      field("pretrain", "beta2", [](RunConfig& c) -> auto& { return c.pretrain.adam.beta2; }),
      field("pretrain", "epsilon", [](RunConfig& c) -> auto& { return c.pretrain.adam.epsilon; }),

      field("downstream", "probe_epochs", [](RunConfig& c) -> auto& { return c.downstream.probe_epochs; }),
      field("downstream", "finetune_epochs", [](RunConfig& c) -> auto& { return c.downstream.finetune_epochs; }),
      field("downstream", "lr", [](RunConfig& c) -> auto& { return c.downstream.lr; }),
      field("downstream", "weight_decay", [](RunConfig& c) -> auto& { return c.downstream.weight_decay; }),
      field("downstream", "plateau_factor", [](RunConfig& c) -> auto& { return c.downstream.plateau_factor; }),
      field("downstream", "plateau_patience", [](RunConfig& c) -> auto& { return c.downstream.plateau_patience; }),
      field("downstream", "label_fraction", [](RunConfig& c) -> auto& { return c.downstream.label_fraction; }),
      field("downstream", "batch_size", [](RunConfig& c) -> auto& { return c.downstream.batch_size; }),
      field("downstream", "validation_fraction",
            [](RunConfig& c) -> auto& { return c.downstream.validation_fraction; }),
      field("downstream", "augment", [](RunConfig& c) -> auto& { return c.downstream.augment; }),
      field("downstream", "standardize_head_inputs",
            [](RunConfig& c) -> auto& { return c.downstream.standardize_head_inputs; }),

      field("baseline", "epochs", [](RunConfig& c) -> auto& { return c.baseline.epochs; }),
      field("baseline", "lr", [](RunConfig& c) -> auto& { return c.baseline.lr; }),
      field("baseline", "weight_decay", [](RunConfig& c) -> auto& { return c.baseline.weight_decay; }),

      field("eval", "fractions", [](RunConfig& c) -> auto& { return c.eval.fractions; }),

      field("run", "seed", [](RunConfig& c) -> auto& { return c.run.seed; }),
      field("run", "deterministic", [](RunConfig& c) -> auto& { return c.run.deterministic; }),
      field("run", "jobs", [](RunConfig& c) -> auto& { return c.run.jobs; }),
  };
  return table;
}

}  // namespace detail

/// Range and consistency checks; throws ConfigError naming the offending key.
inline void validate(const RunConfig& c) {
  const auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (c.data.source != "synthetic" && c.data.source != "manifest") fail("data.source", "expected synthetic|manifest");
  if (c.data.source == "manifest" && c.data.manifest.empty()) fail("data.manifest", "required when source=manifest");
  if (!(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0)) fail("data.test_fraction", "must lie in (0, 1)");
  if (c.data.synth.views.empty()) fail("data.views", "needs at least one angle");
  if (c.pretrain.epochs < 1) fail("pretrain.epochs", "must be >= 1");
  if (c.downstream.probe_epochs + c.downstream.finetune_epochs < 1) fail("downstream", "needs at least one epoch");
  if (!(c.pretrain.lr >= 0.0)) fail("pretrain.lr", "must be >= 0");
  if (!(c.downstream.lr >= 0.0)) fail("downstream.lr", "must be >= 0");
  if (!(c.baseline.lr >= 0.0)) fail("baseline.lr", "must be >= 0");
  if (!(c.pretrain.contrastive.temperature > 0.0)) fail("pretrain.temperature", "must be > 0");
  if (!(c.downstream.label_fraction > 0.0 && c.downstream.label_fraction <= 1.0)) {
    fail("downstream.label_fraction", "must lie in (0, 1]");
  }
  if (!(c.downstream.validation_fraction >= 0.0 && c.downstream.validation_fraction < 1.0)) {
    fail("downstream.validation_fraction", "must lie in [0, 1)");
  }
  if (!(c.downstream.plateau_factor > 0.0 && c.downstream.plateau_factor <= 1.0)) {
    fail("downstream.plateau_factor", "must lie in (0, 1]");
  }
  if (c.downstream.plateau_patience < 0) fail("downstream.plateau_patience", "must be >= 0");
  if (c.downstream.batch_size < 1) fail("downstream.batch_size", "must be >= 1");
  if (c.pretrain.sampler.groups_per_batch < 1 || c.pretrain.sampler.views_per_group < 1) {
    fail("pretrain", "groups_per_batch and views_per_group must be >= 1");
  }
  for (double f : c.eval.fractions)
    if (!(f > 0.0 && f <= 1.0)) fail("eval.fractions", "every fraction must lie in (0, 1]");
  if (c.run.jobs < 1) fail("run.jobs", "must be >= 1");
  try {
    validate(c.model);
  } catch (const ModelConfigError& e) {
    fail("model", e.what());
  }
}

/// Parses an INI document. Unknown sections or keys are errors.
inline RunConfig parse_config(std::istream& is, RunConfig base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const auto& table = detail::fields();
      const auto it = std::ranges::find_if(table, [&](const detail::Field& f) {
        return f.section == section && f.key == key;
      });
      if (it == table.end()) throw ConfigError("unknown config key " + section + "." + key);
      try {
        it->set(base, detail::trim(value.data()));
      } catch (const ConfigError& e) {
        throw ConfigError(section + "." + key + ": " + e.what());
      }
    }
  }
  validate(base);
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  try {
    return parse_config(is);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

/// Complete INI rendering of every key; parse_config(to_ini(c)) == c.
inline std::string to_ini(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

/// Same content as to_ini, as nested JSON strings keyed by section.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::fields()) j[f.section][f.key] = f.get(c);
  return j;
}

}  // namespace clmex
