// Training configuration: paper-default loss weights, two presets, and the
// flat key=value config file format used by the CLI.
//
// The `paper` preset mirrors the published recipe (150 epochs, batch 64, LR
// 0.008, weight decay 4e-4, full augmentation, 4-block backbone at native
// resolution). The default `desk` preset is deliberately small so a full
// leave-one-domain-out study runs on a laptop CPU: 3 blocks at 32x32 training
// resolution and short cosine schedules. Loss weights are identical in both.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "adr/common.hpp"

namespace adr {

struct TrainConfig {
  // Loss weights (shared by both presets).
  double lambda_intra = 0.005;
  double lambda_dir = 2.0;
  double lambda_dvr = 1.0;

  // SCE module.
  int topk = 10;
  int scale = 2;

  // Optimization.
  int epochs = 14;
  int batch_size = 32;
  double lr = 0.15;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  // Inter-ADR block set; empty = all blocks.
  std::vector<int> inter_blocks;

  // Architecture overrides (0 / empty = backbone defaults).
  int backbone_blocks = 3;
  std::vector<int> channels = {8, 16, 32};
  int input_size = 32;  // 0 = native image resolution

  // Augmentation.
  bool augment_flip = true;
  bool augment_crop = true;
  bool augment_jitter = true;
  bool augment_grayscale = false;
  double grayscale_p = 0.1;  // conversion probability when grayscale is on

  std::string preset = "desk";
  std::string precision = "f32";  // f32 | f64

  void validate() const {
    if (lambda_intra < 0 || lambda_dir < 0 || lambda_dvr < 0)
      throw ConfigError("TrainConfig: loss weights must be non-negative");
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("TrainConfig: precision must be f32 or f64");
  }
};

inline TrainConfig desk_preset() { return TrainConfig{}; }

inline TrainConfig paper_preset() {
  TrainConfig c;
  c.preset = "paper";
  c.epochs = 150;
  c.batch_size = 64;
  c.lr = 0.008;
  c.weight_decay = 4e-4;
  c.backbone_blocks = 4;
  c.channels = {16, 32, 64, 128};
  c.input_size = 0;  // native
  c.augment_grayscale = true;
  return c;
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoi(tok));
  }
  return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("TrainConfig: bad boolean for " + key + ": " + s);
}

}  // namespace detail

// Applies `key=value` to a config. Field names mirror the struct.
inline void apply_config_kv(TrainConfig& c, const std::string& key, const std::string& value) {
  if (key == "preset") {
    if (value == "desk")
      c = desk_preset();
    else if (value == "paper")
      c = paper_preset();
    else
      throw ConfigError("TrainConfig: unknown preset " + value);
  } else if (key == "lambda_intra") c.lambda_intra = std::stod(value);
  else if (key == "lambda_dir") c.lambda_dir = std::stod(value);
  else if (key == "lambda_dvr") c.lambda_dvr = std::stod(value);
  else if (key == "topk") c.topk = std::stoi(value);
  else if (key == "scale") c.scale = std::stoi(value);
  else if (key == "epochs") c.epochs = std::stoi(value);
  else if (key == "batch_size") c.batch_size = std::stoi(value);
  else if (key == "lr") c.lr = std::stod(value);
  else if (key == "weight_decay") c.weight_decay = std::stod(value);
  else if (key == "momentum") c.momentum = std::stod(value);
  else if (key == "seed") c.seed = std::stoull(value);
  else if (key == "inter_blocks") c.inter_blocks = value == "all" ? std::vector<int>{} : detail::parse_int_list(value);
  else if (key == "backbone_blocks") c.backbone_blocks = std::stoi(value);
  else if (key == "channels") c.channels = detail::parse_int_list(value);
  else if (key == "input_size") c.input_size = std::stoi(value);
  else if (key == "augment_flip") c.augment_flip = detail::parse_bool(value, key);
  else if (key == "augment_crop") c.augment_crop = detail::parse_bool(value, key);
  else if (key == "augment_jitter") c.augment_jitter = detail::parse_bool(value, key);
  else if (key == "augment_grayscale") c.augment_grayscale = detail::parse_bool(value, key);
  else if (key == "grayscale_p") c.grayscale_p = std::stod(value);
  else if (key == "precision") c.precision = value;
  else throw ConfigError("TrainConfig: unknown key " + key);
}

inline TrainConfig parse_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("TrainConfig: cannot open " + path);
  TrainConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(format_msg("TrainConfig: ", path, ":", lineno, ": expected key=value"));
    apply_config_kv(c, line.substr(0, eq), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

inline std::string config_to_string(const TrainConfig& c) {
  std::ostringstream os;
  os << "preset=" << c.preset << "\n";
  os << "lambda_intra=" << c.lambda_intra << "\n";
  os << "lambda_dir=" << c.lambda_dir << "\n";
  os << "lambda_dvr=" << c.lambda_dvr << "\n";
  os << "topk=" << c.topk << "\n";
  os << "scale=" << c.scale << "\n";
  os << "epochs=" << c.epochs << "\n";
  os << "batch_size=" << c.batch_size << "\n";
  os << "lr=" << c.lr << "\n";
  os << "weight_decay=" << c.weight_decay << "\n";
  os << "momentum=" << c.momentum << "\n";
  os << "seed=" << c.seed << "\n";
  os << "inter_blocks=";
  if (c.inter_blocks.empty()) {
    os << "all";
  } else {
    for (std::size_t i = 0; i < c.inter_blocks.size(); ++i)
      os << (i ? "," : "") << c.inter_blocks[i];
  }
  os << "\n";
  os << "backbone_blocks=" << c.backbone_blocks << "\n";
  os << "channels=";
  for (std::size_t i = 0; i < c.channels.size(); ++i) os << (i ? "," : "") << c.channels[i];
  os << "\n";
  os << "input_size=" << c.input_size << "\n";
  os << "augment_flip=" << (c.augment_flip ? "true" : "false") << "\n";
  os << "augment_crop=" << (c.augment_crop ? "true" : "false") << "\n";
  os << "augment_jitter=" << (c.augment_jitter ? "true" : "false") << "\n";
  os << "augment_grayscale=" << (c.augment_grayscale ? "true" : "false") << "\n";
  os << "grayscale_p=" << c.grayscale_p << "\n";
  os << "precision=" << c.precision << "\n";
  return os.str();
}

}  // namespace adr
