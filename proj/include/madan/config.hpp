#pragma once

// Plain-text key=value experiment configuration. One key per line, '#'
// starts a comment, blank lines are ignored. Every key has a default;
// unknown or repeated keys are rejected.

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "madan/detection.hpp"
#include "madan/evaluation.hpp"
#include "madan/training.hpp"

namespace madan {

struct ExperimentConfig {
  std::uint64_t seed = 1;
  TrainConfig train;
  /// false forces beta = 0 regardless of train.beta.
  bool mer = true;
  ModelConfig model;
  SynthSpec synth;
  DetectOptions detect;
  double merge_iou = 0.5;
  double match_iou = 0.5;
  KlForm kl_form = KlForm::standard;
  std::vector<std::string> variants{"baseline", "bin", "madan_no_mer", "madan"};
  /// Empty: run with `seed` only.
  std::vector<std::uint64_t> seeds;

  /// Training setup with the seed and MER switch applied.
  TrainConfig effective_train() const {
    TrainConfig t = train;
    t.seed = seed;
    if (!mer) t.weights.beta = 0.0;
    return t;
  }
  SynthSpec effective_synth() const {
    SynthSpec s = synth;
    s.seed = seed;
    return s;
  }
  void validate() const {
    effective_train().validate();
    model.validate();
    effective_synth().validate();
    if (detect.step == 0) throw ConfigError("detect.step must be positive");
    if (!(detect.score_threshold >= 0.0 && detect.score_threshold <= 1.0)) {
      throw ConfigError("detect.score_threshold must be within [0, 1]");
    }
    if (!(merge_iou > 0.0 && merge_iou <= 1.0)) throw ConfigError("detect.merge_iou must be within (0, 1]");
    if (!(match_iou > 0.0 && match_iou <= 1.0)) throw ConfigError("eval.match_iou must be within (0, 1]");
    if (model.n_classes != synth.n_classes) throw ConfigError("model.n_classes must equal synth.n_classes");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream in(v);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] inline void bad_value(const std::string& key, const std::string& v, const std::string& expected) {
  throw ConfigError("config key '" + key + "': invalid value '" + v + "' (expected " + expected + ")");
}

inline double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  bad_value(key, v, "a real number");
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    bad_value(key, v, "a non-negative integer");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad_value(key, v, "a non-negative integer");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad_value(key, v, "true/false");
}

inline std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) {
    const auto n = to_uint(key, item);
    if (n == 0) bad_value(key, v, "positive integers");
    out.push_back(static_cast<std::size_t>(n));
  }
  if (out.empty()) bad_value(key, v, "a comma-separated list");
  return out;
}

// shortest text that parses back to the same double
inline std::string real_str(double d) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, res.ptr);
}

template <typename C>
std::string join(const C& items) {
  std::ostringstream os;
  bool first = true;
  for (const auto& x : items) {
    os << (first ? "" : ",") << x;
    first = false;
  }
  return os.str();
}

inline std::string bool_str(bool b) { return b ? "true" : "false"; }

struct Key {
  std::string name;
  std::string doc;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define MADAN_REAL(NAME, FIELD, DOC)                                                                       \
  Key {                                                                                                    \
    NAME, DOC, [](ExperimentConfig& c, const std::string& v) { c.FIELD = to_real(NAME, v); },              \
        [](const ExperimentConfig& c) { return real_str(c.FIELD); }                                        \
  }
#define MADAN_SIZE(NAME, FIELD, DOC)                                                                        \
  Key {                                                                                                     \
    NAME, DOC, [](ExperimentConfig& c, const std::string& v) { c.FIELD = static_cast<std::size_t>(to_uint(NAME, v)); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.FIELD); }                                   \
  }
#define MADAN_BOOL(NAME, FIELD, DOC)                                                                       \
  Key {                                                                                                    \
    NAME, DOC, [](ExperimentConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); },              \
        [](const ExperimentConfig& c) { return bool_str(c.FIELD); }                                        \
  }

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"seed", "master seed for data generation, initialization and shuffling",
          [](ExperimentConfig& c, const std::string& v) { c.seed = to_uint("seed", v); },
          [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      MADAN_REAL("train.learning_rate", train.learning_rate, "Adam learning rate"),
      MADAN_SIZE("train.batch_size", train.batch_size, "samples per domain per step"),
      MADAN_SIZE("train.epochs", train.epochs, "training epochs"),
      MADAN_REAL("train.mu", train.weights.mu, "shallow domain loss weight"),
      MADAN_REAL("train.alpha", train.weights.alpha, "deep domain loss weight"),
      MADAN_REAL("train.beta", train.weights.beta, "entropy loss weight"),
      MADAN_REAL("train.grl_lambda", train.grl_lambda, "gradient reversal coefficient"),
      MADAN_BOOL("train.domain_adaptation", train.domain_adaptation, "use target data and discriminators"),
      MADAN_BOOL("train.feature_attention", train.feature_attention, "feature-level attention"),
      MADAN_BOOL("train.entropy_attention", train.entropy_attention, "entropy-level attention"),
      MADAN_BOOL("train.mer", mer, "minimum entropy regularization (false forces beta = 0)"),
      MADAN_BOOL("train.augment", train.augment, "flip/brightness augmentation"),
      MADAN_REAL("train.val_fraction", train.val_fraction, "held-out share of source patches"),
      Key{"model.channels", "output channels of each BIN block",
          [](ExperimentConfig& c, const std::string& v) { c.model.channels = to_sizes("model.channels", v); },
          [](const ExperimentConfig& c) { return join(c.model.channels); }},
      Key{"model.classifier_widths", "hidden widths of the classifier",
          [](ExperimentConfig& c, const std::string& v) {
            c.model.classifier_widths = to_sizes("model.classifier_widths", v);
          },
          [](const ExperimentConfig& c) { return join(c.model.classifier_widths); }},
      MADAN_SIZE("model.disc_hidden", model.disc_hidden, "discriminator hidden width"),
      MADAN_SIZE("model.shallow_block", model.shallow_block, "0-based block feeding the shallow discriminator"),
      MADAN_SIZE("model.n_classes", model.n_classes, "number of patch classes"),
      MADAN_BOOL("model.bin", model.bin, "instance normalization in every block"),
      Key{"model.attention_form", "v: deep features scaled by v; one_plus_v: scaled by 1 + v",
          [](ExperimentConfig& c, const std::string& v) {
            if (v == "v") {
              c.model.attention_form = AttentionForm::v;
            } else if (v == "one_plus_v") {
              c.model.attention_form = AttentionForm::one_plus_v;
            } else {
              bad_value("model.attention_form", v, "v or one_plus_v");
            }
          },
          [](const ExperimentConfig& c) {
            return std::string(c.model.attention_form == AttentionForm::v ? "v" : "one_plus_v");
          }},
      MADAN_SIZE("synth.scene_size", synth.scene_size, "scene width and height in pixels"),
      MADAN_SIZE("synth.palm_count", synth.palm_count, "palms per scene"),
      MADAN_REAL("synth.min_spacing", synth.min_spacing, "minimum palm center distance"),
      MADAN_REAL("synth.palm_radius", synth.palm_radius, "palm crown radius"),
      MADAN_SIZE("synth.vegetation_regions", synth.vegetation_regions, "other-vegetation regions per scene"),
      MADAN_SIZE("synth.impervious_count", synth.impervious_count, "impervious rectangles per scene"),
      MADAN_SIZE("synth.n_classes", synth.n_classes, "3 or 4 land-cover classes"),
      MADAN_SIZE("synth.patches_per_class", synth.patches_per_class, "training patches per class and domain"),
      MADAN_REAL("synth.near_miss_fraction", synth.near_miss_fraction, "background patches cut near palms"),
      MADAN_REAL("synth.sensor_noise", synth.sensor_noise, "noise sigma in both domains"),
      Key{"synth.shift_gain", "per-channel gain of the target domain",
          [](ExperimentConfig& c, const std::string& v) {
            const auto items = split_list(v);
            if (items.size() != 3) bad_value("synth.shift_gain", v, "three comma-separated reals");
            for (std::size_t i = 0; i < 3; ++i) c.synth.shift.gain[i] = to_real("synth.shift_gain", items[i]);
          },
          [](const ExperimentConfig& c) {
            return real_str(c.synth.shift.gain[0]) + "," + real_str(c.synth.shift.gain[1]) + "," +
                   real_str(c.synth.shift.gain[2]);
          }},
      MADAN_REAL("synth.shift_offset", synth.shift.offset, "target brightness offset"),
      MADAN_REAL("synth.shift_noise", synth.shift.noise, "target additive noise sigma"),
      MADAN_BOOL("synth.shift_blur", synth.shift.blur, "3x3 box blur on the target"),
      MADAN_SIZE("detect.step", detect.step, "sliding window step"),
      MADAN_REAL("detect.score_threshold", detect.score_threshold, "minimum palm probability"),
      MADAN_REAL("detect.merge_iou", merge_iou, "IOU linking raw detections"),
      MADAN_REAL("eval.match_iou", match_iou, "IOU for a correct detection"),
      Key{"eval.kl_form", "standard or mu_squared Gaussian KL",
          [](ExperimentConfig& c, const std::string& v) {
            if (v == "standard") {
              c.kl_form = KlForm::standard;
            } else if (v == "mu_squared") {
              c.kl_form = KlForm::mu_squared;
            } else {
              bad_value("eval.kl_form", v, "standard or mu_squared");
            }
          },
          [](const ExperimentConfig& c) {
            return std::string(c.kl_form == KlForm::standard ? "standard" : "mu_squared");
          }},
      Key{"experiment.variants", "comma-separated variant names for run-experiment",
          [](ExperimentConfig& c, const std::string& v) {
            c.variants = split_list(v);
            if (c.variants.empty()) bad_value("experiment.variants", v, "at least one variant");
          },
          [](const ExperimentConfig& c) { return join(c.variants); }},
      Key{"experiment.seeds", "comma-separated seeds for run-experiment (empty: seed)",
          [](ExperimentConfig& c, const std::string& v) {
            c.seeds.clear();
            for (const auto& s : split_list(v)) c.seeds.push_back(to_uint("experiment.seeds", s));
          },
          [](const ExperimentConfig& c) { return join(c.seeds); }},
  };
  return table;
}

#undef MADAN_REAL
#undef MADAN_SIZE
#undef MADAN_BOOL

}  // namespace config_detail

/// Applies one key; unknown keys throw ConfigError naming the key.
inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_detail::keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

/// Parses config text on top of `base` (defaults unless given).
inline ExperimentConfig parse_config(const std::string& text, const std::string& context,
                                     ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::set<std::string> seen;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = context + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + ": config key '" + key + "' given twice");
    try {
      set_config_value(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_text(path), path.string());
}

/// MADAN_SEED from the environment, if set.
inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MADAN_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return config_detail::to_uint("MADAN_SEED", v);
}

/// Seed precedence: flag, then MADAN_SEED, then the file, then the default.
inline void apply_seed_overrides(ExperimentConfig& cfg, std::optional<std::uint64_t> flag) {
  if (flag) {
    cfg.seed = *flag;
  } else if (auto e = env_seed()) {
    cfg.seed = *e;
  }
}

/// Every key with its effective value, in documentation order.
inline std::string format_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_detail::keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

/// Reference listing of keys, defaults and meaning.
inline std::string config_reference() {
  const ExperimentConfig defaults;
  std::ostringstream os;
  for (const auto& k : config_detail::keys()) os << "# " << k.doc << '\n' << k.name << " = " << k.get(defaults) << "\n\n";
  return os.str();
}

}  // namespace madan
