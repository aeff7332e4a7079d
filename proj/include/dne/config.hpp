// SPDX-License-Identifier: Apache-2.0
//
// Run configuration with JSON round trip. Unknown keys are rejected so that
// typos surface as errors instead of silently falling back to defaults.
#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dne/continual.hpp"

namespace dne {

using Json = nlohmann::json;

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::IA: return "ia";
    case Strategy::STA: return "sta";
    case Strategy::DNE: return "dne";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "ia") return Strategy::IA;
  if (s == "sta") return Strategy::STA;
  if (s == "dne") return Strategy::DNE;
  throw ConfigError("unknown strategy '" + s + "' (expected ia, sta or dne)");
}

inline std::string to_string(StaVariant v) {
  switch (v) {
    case StaVariant::SPDH: return "spdh";
    case StaVariant::DPDH: return "dpdh";
    case StaVariant::Both: return "both";
  }
  return "?";
}

inline StaVariant parse_sta_variant(const std::string& s) {
  if (s == "spdh") return StaVariant::SPDH;
  if (s == "dpdh") return StaVariant::DPDH;
  if (s == "both") return StaVariant::Both;
  throw ConfigError("unknown STA variant '" + s + "' (expected spdh, dpdh or both)");
}

inline std::string to_string(Sharing s) { return s == Sharing::Shared ? "s" : "f"; }

inline Sharing parse_sharing(const std::string& s) {
  if (s == "s" || s == "shared") return Sharing::Shared;
  if (s == "f" || s == "flexible") return Sharing::Flexible;
  throw ConfigError("unknown sharing mode '" + s + "' (expected s or f)");
}

/// Layer mask as a string of 0/1 characters, first layer first.
inline std::vector<bool> parse_layer_mask(const std::string& mask) {
  std::vector<bool> out;
  for (char c : mask) {
    if (c != '0' && c != '1') throw ConfigError("layer mask '" + mask + "' must contain only 0 and 1");
    out.push_back(c == '1');
  }
  return out;
}

inline std::string layer_mask_string(const std::vector<bool>& mask) {
  std::string s;
  for (bool b : mask) s += b ? '1' : '0';
  return s;
}

struct DataConfig {
  std::string source = "synthetic";  // synthetic or cifar100
  std::string cifar_dir;             // holds train.bin and test.bin
  std::size_t classes = 8;
  std::size_t train_per_class = 24;
  std::size_t eval_per_class = 16;
  std::size_t first_task_classes = 4;
  std::size_t step_size = 2;
  double noise = 0.1;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::size_t first_heads = 4;
  std::size_t heads_per_task = 1;
  std::uint64_t seed = 1;
  bool joint_reference = true;

  void validate() const {
    model.validate();
    train.weights.validate();
    if (first_heads == 0 || heads_per_task == 0) throw ConfigError("head counts must be positive");
    if (train.batch_size == 0) throw ConfigError("batch size must be positive");
    if (data.source != "synthetic" && data.source != "cifar100")
      throw ConfigError("unknown data source '" + data.source + "'");
    if (data.first_task_classes == 0 || data.step_size == 0)
      throw ConfigError("task sizes must be positive");
    if (data.first_task_classes > data.classes)
      throw ConfigError("first task has more classes than the dataset");
    if ((data.classes - data.first_task_classes) % data.step_size != 0)
      throw ConfigError("remaining " + std::to_string(data.classes - data.first_task_classes) +
                        " classes are not divisible by step size " +
                        std::to_string(data.step_size));
  }
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline Json to_json(const ModelConfig& m) {
  return Json{{"image_size", m.image_size},
              {"patch_size", m.patch_size},
              {"in_channels", m.in_channels},
              {"head_dim", m.head_dim},
              {"layers", m.layers},
              {"gamma", m.gamma},
              {"input_mean", m.input_mean},
              {"input_std", m.input_std},
              {"strategy", to_string(m.strategy)},
              {"sta_variant", to_string(m.sta_variant)},
              {"cta_layers", layer_mask_string(m.cta_layers)},
              {"cta_mhsa", m.cta_mhsa},
              {"cta_fc1", m.cta_fc1},
              {"cta_fc2", m.cta_fc2},
              {"share_q", to_string(m.share_q)},
              {"share_k", to_string(m.share_k)},
              {"share_v", to_string(m.share_v)}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  detail::check_keys(j,
                     {"image_size", "patch_size", "in_channels", "head_dim", "layers", "gamma",
                      "input_mean", "input_std", "strategy", "sta_variant", "cta_layers", "cta_mhsa", "cta_fc1", "cta_fc2",
                      "share_q", "share_k", "share_v"},
                     "model");
  ModelConfig m;
  detail::read(j, "image_size", m.image_size);
  detail::read(j, "patch_size", m.patch_size);
  detail::read(j, "in_channels", m.in_channels);
  detail::read(j, "head_dim", m.head_dim);
  detail::read(j, "layers", m.layers);
  detail::read(j, "gamma", m.gamma);
  detail::read(j, "input_mean", m.input_mean);
  detail::read(j, "input_std", m.input_std);
  std::string text;
  auto str = [&](const char* key) {
    text.clear();
    detail::read(j, key, text);
    return j.contains(key);
  };
  if (str("strategy")) m.strategy = parse_strategy(text);
  if (str("sta_variant")) m.sta_variant = parse_sta_variant(text);
  if (str("cta_layers")) m.cta_layers = parse_layer_mask(text);
  detail::read(j, "cta_mhsa", m.cta_mhsa);
  detail::read(j, "cta_fc1", m.cta_fc1);
  detail::read(j, "cta_fc2", m.cta_fc2);
  if (str("share_q")) m.share_q = parse_sharing(text);
  if (str("share_k")) m.share_k = parse_sharing(text);
  if (str("share_v")) m.share_v = parse_sharing(text);
  return m;
}

inline Json to_json(const TrainConfig& t) {
  return Json{{"epochs", t.epochs},
              {"tune_epochs", t.tune_epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"tune_lr", t.tune_lr},
              {"momentum", t.momentum},
              {"weight_decay", t.weight_decay},
              {"lambda_ce", t.weights.ce},
              {"lambda_te", t.weights.te},
              {"lambda_dis", t.weights.dis},
              {"buffer", t.buffer},
              {"balanced_tuning", t.balanced_tuning}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  detail::check_keys(j,
                     {"epochs", "tune_epochs", "batch_size", "lr", "tune_lr", "momentum",
                      "weight_decay", "lambda_ce", "lambda_te", "lambda_dis", "buffer",
                      "balanced_tuning"},
                     "train");
  TrainConfig t;
  detail::read(j, "epochs", t.epochs);
  detail::read(j, "tune_epochs", t.tune_epochs);
  detail::read(j, "batch_size", t.batch_size);
  detail::read(j, "lr", t.lr);
  detail::read(j, "tune_lr", t.tune_lr);
  detail::read(j, "momentum", t.momentum);
  detail::read(j, "weight_decay", t.weight_decay);
  detail::read(j, "lambda_ce", t.weights.ce);
  detail::read(j, "lambda_te", t.weights.te);
  detail::read(j, "lambda_dis", t.weights.dis);
  detail::read(j, "buffer", t.buffer);
  detail::read(j, "balanced_tuning", t.balanced_tuning);
  return t;
}

inline Json to_json(const DataConfig& d) {
  return Json{{"source", d.source},
              {"cifar_dir", d.cifar_dir},
              {"classes", d.classes},
              {"train_per_class", d.train_per_class},
              {"eval_per_class", d.eval_per_class},
              {"first_task_classes", d.first_task_classes},
              {"step_size", d.step_size},
              {"noise", d.noise}};
}

inline DataConfig data_config_from_json(const Json& j) {
  detail::check_keys(j,
                     {"source", "cifar_dir", "classes", "train_per_class", "eval_per_class",
                      "first_task_classes", "step_size", "noise"},
                     "data");
  DataConfig d;
  detail::read(j, "source", d.source);
  detail::read(j, "cifar_dir", d.cifar_dir);
  detail::read(j, "classes", d.classes);
  detail::read(j, "train_per_class", d.train_per_class);
  detail::read(j, "eval_per_class", d.eval_per_class);
  detail::read(j, "first_task_classes", d.first_task_classes);
  detail::read(j, "step_size", d.step_size);
  detail::read(j, "noise", d.noise);
  return d;
}

inline Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"data", to_json(c.data)},
              {"first_heads", c.first_heads},
              {"heads_per_task", c.heads_per_task},
              {"seed", c.seed},
              {"joint_reference", c.joint_reference}};
}

inline RunConfig run_config_from_json(const Json& j) {
  detail::check_keys(j,
                     {"model", "train", "data", "first_heads", "heads_per_task", "seed",
                      "joint_reference"},
                     "config");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
  detail::read(j, "first_heads", c.first_heads);
  detail::read(j, "heads_per_task", c.heads_per_task);
  detail::read(j, "seed", c.seed);
  detail::read(j, "joint_reference", c.joint_reference);
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dne
