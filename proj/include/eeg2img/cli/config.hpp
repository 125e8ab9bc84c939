#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/checkpoint.hpp"
#include "eeg2img/core/error.hpp"
#include "eeg2img/models/cformer.hpp"
#include "eeg2img/models/classifier.hpp"
#include "eeg2img/models/gan.hpp"
#include "eeg2img/models/training.hpp"

namespace eeg2img {

struct DataSection {
  std::string eeg = "data/eeg";
  std::string images = "data/images";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSection, eeg, images)

struct EncoderSection {
  // Empty means <out_dir>/encoder.
  std::string checkpoint;
  CFormerConfig architecture;
  SupervisedConfig training;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EncoderSection, checkpoint, architecture, training)

inline SupervisedConfig default_classifier_training() {
  SupervisedConfig cfg;
  cfg.epochs = 20;
  cfg.batch = 32;
  return cfg;
}

struct ClassifierSection {
  // Empty means <out_dir>/classifier.
  std::string checkpoint;
  ImageClassifierConfig architecture;
  SupervisedConfig training = default_classifier_training();
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ClassifierSection, checkpoint, architecture, training)

struct GanSection {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  GanTrainConfig training;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GanSection, generator, discriminator, training)

struct MetricsSection {
  // Windows embedded and generated per forward pass.
  std::size_t batch = 100;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MetricsSection, batch)

struct RunConfig {
  DataSection data;
  EncoderSection encoder;
  ClassifierSection classifier;
  GanSection gan;
  MetricsSection metrics;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  std::filesystem::path encoder_checkpoint() const {
    return encoder.checkpoint.empty() ? std::filesystem::path(out_dir) / "encoder" : std::filesystem::path(encoder.checkpoint);
  }
  std::filesystem::path classifier_checkpoint() const {
    return classifier.checkpoint.empty() ? std::filesystem::path(out_dir) / "classifier" : std::filesystem::path(classifier.checkpoint);
  }
  std::filesystem::path gan_dir() const { return std::filesystem::path(out_dir) / "gan"; }
  std::filesystem::path log_dir() const { return std::filesystem::path(out_dir) / "logs"; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, data, encoder, classifier, gan, metrics, seed, out_dir)

inline json default_config_json() { return RunConfig{}; }

namespace detail {

inline const char* json_kind(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Every user key must exist in the defaults with a compatible JSON type.
inline void check_keys(const json& user, const json& defaults, const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    const json& d = defaults.at(key);
    const bool same = (d.is_number() && value.is_number()) || std::string(json_kind(d)) == json_kind(value);
    if (!same) {
      throw ConfigError("config key '" + path + "' must be a " + json_kind(d) + ", got " + json_kind(value));
    }
    if (d.is_object()) check_keys(value, d, path);
    const bool non_negative_integer =
        value.is_number_unsigned() || (value.is_number_integer() && value.get<long long>() >= 0);
    if (d.is_number_unsigned() && !non_negative_integer) {
      throw ConfigError("config key '" + path + "' must be a non-negative integer");
    }
  }
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten(value, path, out);
    } else {
      out.emplace_back(path, value.dump());
    }
  }
}

}  // namespace detail

/// Parses a config document over the defaults. Unknown keys and type
/// mismatches are rejected with the offending dotted key path.
inline RunConfig parse_run_config(const json& user) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  const json defaults = default_config_json();
  detail::check_keys(user, defaults, "");
  json merged = defaults;
  merged.merge_patch(user);
  RunConfig cfg;
  try {
    cfg = merged.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  auto section = [](const char* name, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  };
  section("encoder.architecture", [&] { cfg.encoder.architecture.validate(); });
  section("classifier.architecture", [&] { cfg.classifier.architecture.validate(); });
  section("gan.generator", [&] { cfg.gan.generator.validate(); });
  section("gan.discriminator", [&] { cfg.gan.discriminator.validate(); });
  section("gan.training", [&] { cfg.gan.training.validate(); });
  for (const auto* t : {&cfg.encoder.training, &cfg.classifier.training}) {
    if (t->batch < 2) throw ConfigError("training.batch must be at least 2 (batch norm)");
    if (!(t->lr > 0.0)) throw ConfigError("training.lr must be positive");
  }
  if (cfg.metrics.batch == 0) throw ConfigError("metrics.batch must be positive");
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  json user;
  try {
    user = read_json_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(user);
}

/// One "key = default" line per config leaf, for --help.
inline std::string config_reference() {
  std::vector<std::pair<std::string, std::string>> rows;
  detail::flatten(default_config_json(), "", rows);
  std::string out = "Config keys (JSON, dotted path = default):\n";
  for (const auto& [k, v] : rows) out += "  " + k + " = " + v + "\n";
  return out;
}

}  // namespace eeg2img
