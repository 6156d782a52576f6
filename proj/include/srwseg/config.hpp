#pragma once

// Training and network settings, and the flat `key = value` text format used for config
// files and command-line overrides.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "srwseg/network.hpp"

namespace srwseg::training {

struct TrainingConfig {
  double lr0 = 1e-2;
  double momentum = 0.9;
  double poly_power = 0.9;
  int epochs = 50;
  int batch_size = 8;
  double lambda_isw = 0.6;
  double lambda_dc = 1.0;
  int warmup_epochs = 5;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  int checkpoint_every = 1;
  double ema_momentum = isw::kDefaultEmaMomentum;
  bool augment = true;
  double style_jitter = 0.3;
  double style_sigma_min = 0.1;
  double style_sigma_max = 1.5;
  int train_limit = 0;
  int val_limit = 0;

  void validate() const {
    if (!(lr0 > 0)) throw ConfigError("lr0 must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(poly_power > 0)) throw ConfigError("poly_power must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lambda_isw >= 0) || !(lambda_dc >= 0)) throw ConfigError("lambda_isw and lambda_dc must be >= 0");
    if (warmup_epochs < 0 || warmup_epochs >= epochs) throw ConfigError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ConfigError("ema_momentum must lie in [0, 1)");
    if (!(style_jitter >= 0) || !(style_sigma_min >= 0) || style_sigma_max < style_sigma_min) {
      throw ConfigError("style transform ranges are invalid");
    }
    if (train_limit < 0 || val_limit < 0) throw ConfigError("train_limit and val_limit must be >= 0");
  }
};

struct RunConfig {
  TrainingConfig train;
  network::NetworkConfig net;

  void validate() const {
    train.validate();
    net.validate();
  }
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class N>
N parse_number(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  N value{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

/// Comma-separated integers; "" and "none" mean an empty list.
inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  const std::string t = trim(text);
  if (t.empty() || t == "none" || t == "[]") return out;
  std::stringstream ss(t);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, item));
  return out;
}

template <class C>
std::string join(const C& values) {
  std::string s;
  for (auto v : values) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s.empty() ? "none" : s;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Every recognised key, in documentation order.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::format_double;
  using detail::parse_bool;
  using detail::parse_number;
#define SRWSEG_DOUBLE(field, sect, text)                                                                   \
  ConfigKey{#field, text, [](RunConfig& c, const std::string& v) { c.sect.field = parse_number<double>(#field, v); }, \
            [](const RunConfig& c) { return format_double(c.sect.field); }}
#define SRWSEG_INT(field, sect, text)                                                                   \
  ConfigKey{#field, text, [](RunConfig& c, const std::string& v) { c.sect.field = parse_number<int>(#field, v); }, \
            [](const RunConfig& c) { return std::to_string(c.sect.field); }}
#define SRWSEG_BOOL(field, sect, text)                                                             \
  ConfigKey{#field, text, [](RunConfig& c, const std::string& v) { c.sect.field = parse_bool(#field, v); }, \
            [](const RunConfig& c) { return std::string(c.sect.field ? "true" : "false"); }}
  static const std::vector<ConfigKey> keys{
      SRWSEG_DOUBLE(lr0, train, "initial SGD learning rate"),
      SRWSEG_DOUBLE(momentum, train, "SGD momentum"),
      SRWSEG_DOUBLE(poly_power, train, "exponent of the polynomial learning-rate decay"),
      SRWSEG_INT(epochs, train, "training epochs"),
      SRWSEG_INT(batch_size, train, "images per step"),
      SRWSEG_DOUBLE(lambda_isw, train, "weight of the selective whitening loss per SRW stage"),
      SRWSEG_DOUBLE(lambda_dc, train, "weight of the dual causality loss per SRW stage"),
      SRWSEG_INT(warmup_epochs, train, "epochs before the whitening loss switches on"),
      ConfigKey{"seed", "seed for initialization, batching and augmentation",
                [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); },
                [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      SRWSEG_DOUBLE(weight_decay, train, "L2 weight decay added to the gradient"),
      SRWSEG_INT(checkpoint_every, train, "epochs between last.ckpt writes"),
      SRWSEG_DOUBLE(ema_momentum, train, "momentum of the covariance-variance moving average"),
      SRWSEG_BOOL(augment, train, "apply scale/crop/flip/jitter/blur augmentation to training images"),
      SRWSEG_DOUBLE(style_jitter, train, "brightness/contrast/saturation range of the whitening-pair transform"),
      SRWSEG_DOUBLE(style_sigma_min, train, "lower blur sigma of the whitening-pair transform"),
      SRWSEG_DOUBLE(style_sigma_max, train, "upper blur sigma of the whitening-pair transform"),
      SRWSEG_INT(train_limit, train, "use only the first N training images (0: all)"),
      SRWSEG_INT(val_limit, train, "use only the first N validation images (0: all)"),
      ConfigKey{"stage_channels", "widths of the four backbone stages, e.g. 32,64,128,256",
                [](RunConfig& c, const std::string& v) {
                  const auto list = detail::parse_int_list("stage_channels", v);
                  if (list.size() != c.net.stage_channels.size()) throw ConfigError("stage_channels needs exactly 4 values");
                  std::copy(list.begin(), list.end(), c.net.stage_channels.begin());
                },
                [](const RunConfig& c) { return detail::join(c.net.stage_channels); }},
      ConfigKey{"srw_stages", "backbone stages followed by an SRW block, subset of 1,2,3,4 (none: baseline)",
                [](RunConfig& c, const std::string& v) { c.net.srw_stages = detail::parse_int_list("srw_stages", v); },
                [](const RunConfig& c) { return detail::join(c.net.srw_stages); }},
      ConfigKey{"aspp_dilations", "dilation rates of the ASPP branches (1: pointwise branch)",
                [](RunConfig& c, const std::string& v) { c.net.aspp_dilations = detail::parse_int_list("aspp_dilations", v); },
                [](const RunConfig& c) { return detail::join(c.net.aspp_dilations); }},
      SRWSEG_INT(num_classes, net, "output classes (binary segmentation: 2)"),
      SRWSEG_INT(input_h, net, "input height, multiple of 16"),
      SRWSEG_INT(input_w, net, "input width, multiple of 16"),
      SRWSEG_INT(aspp_channels, net, "ASPP branch width"),
      SRWSEG_INT(low_level_channels, net, "decoder skip projection width"),
      SRWSEG_INT(decoder_channels, net, "decoder conv width"),
      SRWSEG_INT(reduction, net, "channel-attention bottleneck reduction"),
      SRWSEG_BOOL(attention_batch_shared, net, "share one attention vector across the batch"),
  };
#undef SRWSEG_DOUBLE
#undef SRWSEG_INT
#undef SRWSEG_BOOL
  return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

inline void set_key(RunConfig& cfg, const std::string& name, const std::string& value) {
  find_key(name).set(cfg, value);
}

/// Applies one `key=value` assignment.
inline void apply_assignment(RunConfig& cfg, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + text + "'");
  set_key(cfg, detail::trim(text.substr(0, eq)), text.substr(eq + 1));
}

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_assignment(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

inline std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

}  // namespace srwseg::training
