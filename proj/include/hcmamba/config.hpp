#pragma once

// Run configuration: one flat key=value namespace covering model shape, loss
// weights, optimizer hyperparameters, data generation, and run plumbing.
// A single dispatcher (set_config_key) backs three entry points — config-file
// parsing, --set overrides, and rebuilding a config from a checkpoint's echo —
// so every surface accepts exactly the same keys and spellings.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "hcmamba/data.hpp"
#include "hcmamba/errors.hpp"
#include "hcmamba/loss_metrics.hpp"
#include "hcmamba/model.hpp"

namespace hcm {

struct RunConfig {
  // Model shape.
  int64_t base_channels = 32;
  std::vector<int64_t> stage_depths = {2, 4, 2, 2};
  int64_t state_size = 8;
  int64_t num_classes = 2;
  int64_t input_size = 64;
  std::vector<int64_t> dilation_schedule = {1, 2, 3, 1};
  std::string conv_variant = "both";
  // Loss weights.
  double loss_miou = 0.4;
  double loss_dice = 0.4;
  double loss_boundary = 0.2;
  // Optimizer.
  double learning_rate = 3e-3;
  double lr_min = 1e-5;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  int64_t epochs = 20;
  int64_t batch_size = 8;
  // Data.
  std::string data_dir = "data";
  int64_t num_images = 200;
  double noise_amplitude = 0.08;
  bool augment = true;
  // Run plumbing.
  uint64_t seed = 7;
  std::string out_dir = "runs";
  int64_t threads = 1;

  ModelConfig model() const {
    ModelConfig m;
    m.base_channels = base_channels;
    m.stage_depths = stage_depths;
    m.state_size = state_size;
    m.num_classes = num_classes;
    m.input_size = input_size;
    m.dilation_schedule = dilation_schedule;
    m.conv_variant = conv_variant_from_string(conv_variant);
    return m;
  }

  LossWeights loss_weights() const { return LossWeights{loss_miou, loss_dice, loss_boundary}; }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s;
    s.image_size = input_size;
    s.num_images = num_images;
    s.num_classes = num_classes;
    s.noise_amplitude = noise_amplitude;
    s.seed = seed;
    return s;
  }

  void validate() const {
    model().validate();
    if (loss_miou < 0 || loss_dice < 0 || loss_boundary < 0 ||
        loss_miou + loss_dice + loss_boundary <= 0)
      throw ContractError("loss weights must be non-negative with a positive sum");
    if (!(learning_rate > 0)) throw ContractError("learning_rate must be positive");
    if (!(lr_min > 0) || lr_min > learning_rate)
      throw ContractError("lr_min must be positive and <= learning_rate");
    if (weight_decay < 0) throw ContractError("weight_decay must be non-negative");
    if (momentum < 0 || momentum >= 1)
      throw ContractError("momentum must be in [0, 1), got " + std::to_string(momentum));
    if (epochs < 1) throw ContractError("epochs must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (num_images < 1) throw ContractError("num_images must be >= 1");
    if (noise_amplitude < 0 || noise_amplitude > 0.5)
      throw ContractError("noise_amplitude must lie in [0, 0.5]");
    if (threads < 1) throw ContractError("threads must be >= 1");
    if (data_dir.empty()) throw ContractError("data_dir must not be empty");
    if (out_dir.empty()) throw ContractError("out_dir must not be empty");
  }

  std::vector<std::pair<std::string, std::string>> echo() const;
};

namespace detail {

inline std::string trim_copy(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline int64_t parse_int_value(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long long n = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<int64_t>(n);
  } catch (const std::exception&) {
    throw FormatError("config value for '" + key + "' is not an integer: '" + v + "'");
  }
}

inline uint64_t parse_uint_value(const std::string& key, const std::string& v) {
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    size_t pos = 0;
    unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<uint64_t>(n);
  } catch (const std::exception&) {
    throw FormatError("config value for '" + key + "' is not an unsigned integer: '" + v + "'");
  }
}

inline double parse_double_value(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw FormatError("config value for '" + key + "' is not a number: '" + v + "'");
  }
}

inline bool parse_bool_value(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config value for '" + key + "' is not a boolean (true/false/1/0): '" + v +
                    "'");
}

inline std::vector<int64_t> parse_int_list_value(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  size_t start = 0;
  while (true) {
    size_t comma = v.find(',', start);
    std::string item = trim_copy(v.substr(start, comma == std::string::npos ? std::string::npos
                                                                            : comma - start));
    if (item.empty())
      throw FormatError("config value for '" + key + "' has an empty list element: '" + v + "'");
    out.push_back(parse_int_value(key, item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string format_double_value(double d) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", d);
  return buf;
}

inline std::string format_int_list_value(const std::vector<int64_t>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

}  // namespace detail

// Assigns one key. Throws ContractError for unknown keys and FormatError for
// unparseable values; never partially applies.
inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool_value;
  using detail::parse_double_value;
  using detail::parse_int_list_value;
  using detail::parse_int_value;
  using detail::parse_uint_value;
  if (key == "base_channels")
    cfg.base_channels = parse_int_value(key, value);
  else if (key == "stage_depths")
    cfg.stage_depths = parse_int_list_value(key, value);
  else if (key == "state_size")
    cfg.state_size = parse_int_value(key, value);
  else if (key == "num_classes")
    cfg.num_classes = parse_int_value(key, value);
  else if (key == "input_size")
    cfg.input_size = parse_int_value(key, value);
  else if (key == "dilation_schedule")
    cfg.dilation_schedule = parse_int_list_value(key, value);
  else if (key == "conv_variant")
    cfg.conv_variant = to_string(conv_variant_from_string(value));
  else if (key == "loss_miou")
    cfg.loss_miou = parse_double_value(key, value);
  else if (key == "loss_dice")
    cfg.loss_dice = parse_double_value(key, value);
  else if (key == "loss_boundary")
    cfg.loss_boundary = parse_double_value(key, value);
  else if (key == "learning_rate")
    cfg.learning_rate = parse_double_value(key, value);
  else if (key == "lr_min")
    cfg.lr_min = parse_double_value(key, value);
  else if (key == "weight_decay")
    cfg.weight_decay = parse_double_value(key, value);
  else if (key == "momentum")
    cfg.momentum = parse_double_value(key, value);
  else if (key == "epochs")
    cfg.epochs = parse_int_value(key, value);
  else if (key == "batch_size")
    cfg.batch_size = parse_int_value(key, value);
  else if (key == "data_dir")
    cfg.data_dir = value;
  else if (key == "num_images")
    cfg.num_images = parse_int_value(key, value);
  else if (key == "noise_amplitude")
    cfg.noise_amplitude = parse_double_value(key, value);
  else if (key == "augment")
    cfg.augment = parse_bool_value(key, value);
  else if (key == "seed")
    cfg.seed = parse_uint_value(key, value);
  else if (key == "out_dir")
    cfg.out_dir = value;
  else if (key == "threads")
    cfg.threads = parse_int_value(key, value);
  else
    throw ContractError("unknown config key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> RunConfig::echo() const {
  using detail::format_double_value;
  using detail::format_int_list_value;
  std::vector<std::pair<std::string, std::string>> e;
  e.emplace_back("base_channels", std::to_string(base_channels));
  e.emplace_back("stage_depths", format_int_list_value(stage_depths));
  e.emplace_back("state_size", std::to_string(state_size));
  e.emplace_back("num_classes", std::to_string(num_classes));
  e.emplace_back("input_size", std::to_string(input_size));
  e.emplace_back("dilation_schedule", format_int_list_value(dilation_schedule));
  e.emplace_back("conv_variant", conv_variant);
  e.emplace_back("loss_miou", format_double_value(loss_miou));
  e.emplace_back("loss_dice", format_double_value(loss_dice));
  e.emplace_back("loss_boundary", format_double_value(loss_boundary));
  e.emplace_back("learning_rate", format_double_value(learning_rate));
  e.emplace_back("lr_min", format_double_value(lr_min));
  e.emplace_back("weight_decay", format_double_value(weight_decay));
  e.emplace_back("momentum", format_double_value(momentum));
  e.emplace_back("epochs", std::to_string(epochs));
  e.emplace_back("batch_size", std::to_string(batch_size));
  e.emplace_back("data_dir", data_dir);
  e.emplace_back("num_images", std::to_string(num_images));
  e.emplace_back("noise_amplitude", format_double_value(noise_amplitude));
  e.emplace_back("augment", augment ? "true" : "false");
  e.emplace_back("seed", std::to_string(seed));
  e.emplace_back("out_dir", out_dir);
  e.emplace_back("threads", std::to_string(threads));
  return e;
}

// Rebuilds a config from a checkpoint's key/value echo. Unknown keys are
// rejected just like in a file, so an echo written by a newer field set fails
// loudly instead of silently dropping settings.
inline RunConfig run_config_from_echo(
    const std::vector<std::pair<std::string, std::string>>& echo) {
  RunConfig cfg;
  for (const auto& kv : echo) set_config_key(cfg, kv.first, kv.second);
  return cfg;
}

// Parses a plain-text key=value file. '#' starts a comment (full-line or
// trailing); blank lines are skipped. Errors carry the file name and line.
inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string body = detail::trim_copy(line);
    if (body.empty()) continue;
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      throw FormatError("'" + path + "' line " + std::to_string(line_no) +
                        ": expected key=value, got '" + body + "'");
    std::string key = detail::trim_copy(body.substr(0, eq));
    std::string value = detail::trim_copy(body.substr(eq + 1));
    if (key.empty())
      throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": empty key");
    try {
      set_config_key(cfg, key, value);
    } catch (const ContractError& e) {
      throw ContractError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

// Applies one --set style override of the form key=value.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ContractError("override must look like key=value, got '" + assignment + "'");
  set_config_key(cfg, detail::trim_copy(assignment.substr(0, eq)),
                 detail::trim_copy(assignment.substr(eq + 1)));
}

}  // namespace hcm
