#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "sdflow/model.hpp"
#include "sdflow/train.hpp"

namespace sdflow {

// Flat key=value run configuration with section prefixes (model., train.,
// data.). Command-line flags override file values. Unknown keys are rejected
// before any work starts.
struct RunConfig {
  std::map<std::string, std::string> values;

  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      size_t h = line.find('#');
      if (h != std::string::npos) line = line.substr(0, h);
      // trim
      size_t b = line.find_first_not_of(" \t\r");
      if (b == std::string::npos) continue;
      size_t e = line.find_last_not_of(" \t\r");
      line = line.substr(b, e - b + 1);
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw DataError(path + ":" + std::to_string(line_no) + ": expected key=value");
      std::string key = line.substr(0, eq);
      std::string val = line.substr(eq + 1);
      cfg.values[key] = val;
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& val) { values[key] = val; }
  bool has(const std::string& key) const { return values.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
  }

  int64_t get_i64(const std::string& key, int64_t fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw DataError("config key " + key + " is not an integer: " + it->second);
    }
  }

  double get_f64(const std::string& key, double fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw DataError("config key " + key + " is not a number: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    const std::string& v = it->second;
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw DataError("config key " + key + " is not a boolean: " + v);
  }

  std::vector<int64_t> get_list(const std::string& key, std::vector<int64_t> fallback) const {
    auto it = values.find(key);
    if (it == values.end()) return fallback;
    std::vector<int64_t> out;
    std::istringstream is(it->second);
    std::string item;
    while (std::getline(is, item, ',')) {
      try {
        out.push_back(std::stoll(item));
      } catch (...) {
        throw DataError("config key " + key + " is not an integer list: " + it->second);
      }
    }
    return out;
  }

  void reject_unknown_keys(const std::set<std::string>& allowed) const {
    for (const auto& [key, val] : values)
      if (!allowed.count(key)) throw DataError("unknown config key: " + key);
  }
};

inline const std::set<std::string>& known_run_keys() {
  static const std::set<std::string> keys = {
      "model.depths",       "model.heads",          "model.base_dim",
      "model.patch",        "model.window",         "model.neuron",
      "model.attention",    "model.shortcut",       "model.spe_shortcut",
      "model.encoders",     "model.time_steps",     "model.in_channels",
      "model.mlp_ratio",    "model.tau",            "model.v_threshold",
      "model.v_reset",      "model.surrogate_width","model.detach_reset",
      "model.init_seed",
      "train.lr",           "train.weight_decay",   "train.lr_halve_every",
      "train.epochs",       "train.batch",          "train.seed",
      "train.intermediate_supervision",             "train.val_fraction",
      "data.bins",          "data.blocks",          "data.events_dir",
      "data.gt_dir",        "data.dir",
  };
  return keys;
}

inline ModelConfig model_config_from(const RunConfig& rc) {
  ModelConfig cfg;
  cfg.stage_depths = rc.get_list("model.depths", cfg.stage_depths);
  cfg.stage_heads = rc.get_list("model.heads", cfg.stage_heads);
  cfg.base_dim = rc.get_i64("model.base_dim", cfg.base_dim);
  cfg.patch = rc.get_i64("model.patch", cfg.patch);
  auto win = rc.get_list("model.window", {cfg.window_t, cfg.window_h, cfg.window_w});
  if (win.size() != 3) throw DataError("model.window must list three extents");
  cfg.window_t = win[0];
  cfg.window_h = win[1];
  cfg.window_w = win[2];
  std::string neuron = rc.get_str("model.neuron", "lif");
  if (neuron != "lif" && neuron != "psn") throw DataError("model.neuron must be lif or psn");
  cfg.neuron = neuron == "psn" ? NeuronKind::Psn : NeuronKind::Lif;
  std::string att = rc.get_str("model.attention", "dot");
  if (att != "dot" && att != "qk") throw DataError("model.attention must be dot or qk");
  cfg.attention = att == "qk" ? AttentionKind::Qk : AttentionKind::Dot;
  std::string sc = rc.get_str("model.shortcut", "ms");
  if (sc != "ms" && sc != "sew") throw DataError("model.shortcut must be ms or sew");
  cfg.shortcut = sc == "sew" ? ShortcutKind::Sew : ShortcutKind::Ms;
  cfg.use_spe_shortcut = rc.get_bool("model.spe_shortcut", cfg.use_spe_shortcut);
  cfg.encoders = rc.get_i64("model.encoders", cfg.encoders);
  cfg.time_steps = rc.get_i64("model.time_steps", cfg.time_steps);
  cfg.in_channels = rc.get_i64("model.in_channels", cfg.in_channels);
  cfg.mlp_ratio = rc.get_i64("model.mlp_ratio", cfg.mlp_ratio);
  cfg.tau = static_cast<float>(rc.get_f64("model.tau", cfg.tau));
  cfg.v_threshold = static_cast<float>(rc.get_f64("model.v_threshold", cfg.v_threshold));
  cfg.v_reset = static_cast<float>(rc.get_f64("model.v_reset", cfg.v_reset));
  cfg.surrogate_width =
      static_cast<float>(rc.get_f64("model.surrogate_width", cfg.surrogate_width));
  cfg.detach_reset = rc.get_bool("model.detach_reset", cfg.detach_reset);
  cfg.init_seed = static_cast<uint64_t>(rc.get_i64("model.init_seed", 42));
  cfg.validate();
  return cfg;
}

inline TrainConfig train_config_from(const RunConfig& rc) {
  TrainConfig cfg;
  cfg.lr = rc.get_f64("train.lr", cfg.lr);
  cfg.weight_decay = rc.get_f64("train.weight_decay", cfg.weight_decay);
  cfg.lr_halve_every = rc.get_i64("train.lr_halve_every", cfg.lr_halve_every);
  cfg.epochs = rc.get_i64("train.epochs", cfg.epochs);
  cfg.batch = rc.get_i64("train.batch", cfg.batch);
  cfg.seed = static_cast<uint64_t>(rc.get_i64("train.seed", 0));
  cfg.intermediate_supervision =
      rc.get_bool("train.intermediate_supervision", cfg.intermediate_supervision);
  SDFLOW_CHECK(cfg.lr >= 0.0, "train.lr must be non-negative");
  SDFLOW_CHECK(cfg.batch >= 1, "train.batch must be positive");
  return cfg;
}

}  // namespace sdflow
