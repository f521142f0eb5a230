#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "polypseg/architectures.hpp"
#include "polypseg/data.hpp"
#include "polypseg/error.hpp"
#include "polypseg/interpretability.hpp"

namespace polypseg {

/// Every setting a command may read. Precedence, lowest first: these
/// defaults, the config file, `--set key=value` overrides, dedicated flags.
struct RunConfig {
  ModelKind model_kind = ModelKind::efcn8;
  std::size_t base_width = 16;
  double dropout_rate = 0.5;

  std::optional<std::filesystem::path> data_root;
  std::size_t synthetic_n = 600;
  std::size_t synthetic_size = 64;

  double lr = 1e-3;
  std::size_t batch_size = 10;
  std::size_t patience = 30;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;

  AugmentConfig augment;

  std::size_t uncertainty_T = 10;
  bool uncertainty_dump = false;

  TargetMode saliency_target = TargetMode::predicted_polyp;
  std::size_t saliency_y = 0;
  std::size_t saliency_x = 0;
  bool saliency_dump = false;

  std::filesystem::path output_dir = "out";
  std::size_t threads = 1;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigError bad_value(const std::string& key, const std::string& value,
                             const std::string& why) {
  return ConfigError("config key '" + key + "': invalid value '" + value + "' (" + why + ")");
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) throw bad_value(key, v, "expected a non-negative integer");
  return out;
}

inline std::size_t to_positive(const std::string& key, const std::string& v) {
  const auto n = to_uint(key, v);
  if (n == 0) throw bad_value(key, v, "must be at least 1");
  return static_cast<std::size_t>(n);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw bad_value(key, v, "expected a number");
  }
  if (used != v.size() || !std::isfinite(out)) throw bad_value(key, v, "expected a number");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw bad_value(key, v, "expected true or false");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    t["model.kind"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      try {
        c.model_kind = parse_model_kind(v);
      } catch (const Error& e) {
        throw bad_value(k, v, "expected efcn8 or esegnet");
      }
    };
    t["model.base_width"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.base_width = to_positive(k, v);
    };
    t["model.dropout_rate"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const double r = to_double(k, v);
      if (!(r >= 0.0 && r < 1.0)) throw bad_value(k, v, "must lie in [0, 1)");
      c.dropout_rate = r;
    };
    t["data.root"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v.empty()) throw bad_value(k, v, "empty path");
      c.data_root = v;
    };
    t["data.synthetic.n"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.synthetic_n = static_cast<std::size_t>(to_uint(k, v));
    };
    t["data.synthetic.size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const auto s = to_positive(k, v);
      if (s % 32) throw bad_value(k, v, "must be a multiple of 32");
      c.synthetic_size = s;
    };
    t["train.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const double lr = to_double(k, v);
      if (!(lr > 0.0)) throw bad_value(k, v, "must be positive");
      c.lr = lr;
    };
    t["train.batch_size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.batch_size = to_positive(k, v);
    };
    t["train.patience"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.patience = static_cast<std::size_t>(to_uint(k, v));
    };
    t["train.max_epochs"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.max_epochs = static_cast<std::size_t>(to_uint(k, v));
    };
    t["train.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.seed = to_uint(k, v);
    };
    t["augment.enabled"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.augment.enabled = to_bool(k, v);
    };
    t["augment.crop_h"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.augment.crop_h = static_cast<std::size_t>(to_uint(k, v));
    };
    t["augment.crop_w"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.augment.crop_w = static_cast<std::size_t>(to_uint(k, v));
    };
    const std::pair<const char*, double AugmentConfig::*> ranges[] = {
        {"augment.rotation_min", &AugmentConfig::rotation_min_deg},
        {"augment.rotation_max", &AugmentConfig::rotation_max_deg},
        {"augment.zoom_min", &AugmentConfig::zoom_min},
        {"augment.zoom_max", &AugmentConfig::zoom_max},
        {"augment.shear_min", &AugmentConfig::shear_min},
        {"augment.shear_max", &AugmentConfig::shear_max},
    };
    for (const auto& [name, field] : ranges) {
      t[name] = [field](RunConfig& c, const std::string& k, const std::string& v) {
        c.augment.*field = to_double(k, v);
      };
    }
    t["uncertainty.T"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.uncertainty_T = to_positive(k, v);
    };
    t["uncertainty.dump"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.uncertainty_dump = to_bool(k, v);
    };
    t["saliency.target"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      try {
        c.saliency_target = parse_target_mode(v);
      } catch (const Error&) {
        throw bad_value(k, v, "expected predicted-polyp, full-polyp-channel or pixel");
      }
    };
    t["saliency.y"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.saliency_y = static_cast<std::size_t>(to_uint(k, v));
    };
    t["saliency.x"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.saliency_x = static_cast<std::size_t>(to_uint(k, v));
    };
    t["saliency.dump"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.saliency_dump = to_bool(k, v);
    };
    t["output.dir"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      if (v.empty()) throw bad_value(k, v, "empty path");
      c.output_dir = v;
    };
    t["threads"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.threads = to_positive(k, v);
    };
    return t;
  }();
  return table;
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : config_detail::setters()) keys.push_back(k);
  return keys;
}

/// Applies one setting; unknown keys and malformed values name the key.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& table = config_detail::setters();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(c, key, value);
}

/// Splits "key=value" (whitespace around either side is ignored).
inline std::pair<std::string, std::string> split_assignment(const std::string& text,
                                                            const std::string& where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(where + ": expected key=value, got '" + text + "'");
  }
  return {config_detail::trim(text.substr(0, eq)), config_detail::trim(text.substr(eq + 1))};
}

/// One assignment per line; '#' starts a comment, blank lines are skipped.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    auto [key, value] = split_assignment(line, where);
    try {
      apply_setting(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str(), path.string());
}

/// Cross-key checks that a single setter cannot make.
inline void validate_config(const RunConfig& c) {
  try {
    c.augment.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("augment.*: ") + e.what());
  }
}

inline ModelSpec model_spec(const RunConfig& c, std::size_t h, std::size_t w) {
  ModelSpec s;
  s.kind = c.model_kind;
  s.base_width = c.base_width;
  s.dropout_rate = c.dropout_rate;
  s.input_h = h;
  s.input_w = w;
  return s;
}

/// Resolved settings in the same key=value form, for the run record.
inline std::string to_config_text(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "model.kind = " << to_string(c.model_kind) << "\n"
    << "model.base_width = " << c.base_width << "\n"
    << "model.dropout_rate = " << c.dropout_rate << "\n";
  if (c.data_root) o << "data.root = " << c.data_root->string() << "\n";
  o << "data.synthetic.n = " << c.synthetic_n << "\n"
    << "data.synthetic.size = " << c.synthetic_size << "\n"
    << "train.lr = " << c.lr << "\n"
    << "train.batch_size = " << c.batch_size << "\n"
    << "train.patience = " << c.patience << "\n"
    << "train.max_epochs = " << c.max_epochs << "\n"
    << "train.seed = " << c.seed << "\n"
    << "augment.enabled = " << (c.augment.enabled ? "true" : "false") << "\n"
    << "augment.crop_h = " << c.augment.crop_h << "\n"
    << "augment.crop_w = " << c.augment.crop_w << "\n"
    << "augment.rotation_min = " << c.augment.rotation_min_deg << "\n"
    << "augment.rotation_max = " << c.augment.rotation_max_deg << "\n"
    << "augment.zoom_min = " << c.augment.zoom_min << "\n"
    << "augment.zoom_max = " << c.augment.zoom_max << "\n"
    << "augment.shear_min = " << c.augment.shear_min << "\n"
    << "augment.shear_max = " << c.augment.shear_max << "\n"
    << "uncertainty.T = " << c.uncertainty_T << "\n"
    << "uncertainty.dump = " << (c.uncertainty_dump ? "true" : "false") << "\n";
  const char* target = c.saliency_target == TargetMode::predicted_polyp      ? "predicted-polyp"
                       : c.saliency_target == TargetMode::full_polyp_channel ? "full-polyp-channel"
                                                                             : "pixel";
  o << "saliency.target = " << target << "\n"
    << "saliency.y = " << c.saliency_y << "\n"
    << "saliency.x = " << c.saliency_x << "\n"
    << "saliency.dump = " << (c.saliency_dump ? "true" : "false") << "\n"
    << "output.dir = " << c.output_dir.string() << "\n"
    << "threads = " << c.threads << "\n";
  return o.str();
}

}  // namespace polypseg
