#pragma once

// Run configuration: `key = value` file, defaults from the published
// training protocol, command-line overrides applied on top.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ps8/dataset.hpp"
#include "ps8/kv_text.hpp"
#include "ps8/model.hpp"
#include "ps8/trainer.hpp"

namespace ps8 {

enum class DatasetKind { cullpdb6133, cullpdb6133_filtered };

inline const char* to_string(DatasetKind k) {
  return k == DatasetKind::cullpdb6133 ? "cullpdb6133" : "cullpdb6133-filtered";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "cullpdb6133") return DatasetKind::cullpdb6133;
  if (s == "cullpdb6133-filtered") return DatasetKind::cullpdb6133_filtered;
  throw ConfigError("dataset must be cullpdb6133|cullpdb6133-filtered, got `" + std::string(s) + "`");
}

struct RunConfig {
  std::filesystem::path data;
  DatasetKind dataset = DatasetKind::cullpdb6133;
  SplitMode split_mode = SplitMode::paper;
  /// Extra evaluation sets, `test.<NAME> = path`.
  std::map<std::string, std::filesystem::path> test_sets;
  std::filesystem::path out = "run";
  std::uint64_t seed = 1;
  /// Width and epoch multiplier.
  double scale = 1.0;
  /// Keep only the first N proteins of each split (0 keeps all).
  std::size_t train_subset = 0;
  std::size_t eval_subset = 0;
  NetConfig net;
  TrainConfig train;

  /// Architecture after scaling.
  NetConfig scaled_net() const { return scale == 1.0 ? net : net.scaled(scale); }
  TrainConfig scaled_train() const {
    TrainConfig t = train;
    t.seed = seed;
    t.out_dir = out;
    if (scale != 1.0)
      t.epochs = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(train.epochs) * scale)));
    return t;
  }

  /// Applies one setting; unknown keys are rejected with the key named.
  void apply(const std::string& key, const std::string& v) {
    auto count = [&](std::size_t& dst, bool allow_zero) {
      const auto n = parse_int(key, v);
      if (n < (allow_zero ? 0 : 1))
        throw ConfigError("`" + key + "` must be " + (allow_zero ? "non-negative" : "positive") + ", got " + v);
      dst = static_cast<std::size_t>(n);
    };
    auto positive = [&](double& dst) {
      dst = parse_double(key, v);
      if (!(dst > 0) || !std::isfinite(dst)) throw ConfigError("`" + key + "` must be positive, got " + v);
    };
    try {
      if (key == "data") data = v;
      else if (key == "dataset") dataset = parse_dataset_kind(v);
      else if (key == "split_mode") split_mode = parse_split_mode(v);
      else if (key.starts_with("test.") && key.size() > 5) test_sets[key.substr(5)] = v;
      else if (key == "out") out = v;
      else if (key == "seed") seed = parse_uint(key, v);
      else if (key == "scale") positive(scale);
      else if (key == "train_subset") count(train_subset, true);
      else if (key == "eval_subset") count(eval_subset, true);
      else if (key == "module_count") {
        std::size_t n = 0;
        count(n, false);
        net.module_widths = module_widths_for_count(n, net.module_widths.front(),
                                                    net.module_widths.size() > 1 ? net.module_widths[1] : net.module_widths.front());
      }
      else if (key == "epochs") count(train.epochs, true);
      else if (key == "batch_size") count(train.batch_size, false);
      else if (key == "eval_batch_size") count(train.eval_batch_size, false);
      else if (key == "learning_rate") positive(train.learning_rate);
      else if (key == "adam_beta1") train.adam.beta1 = parse_double(key, v);
      else if (key == "adam_beta2") train.adam.beta2 = parse_double(key, v);
      else if (key == "adam_epsilon") positive(train.adam.epsilon);
      else if (key == "patience") count(train.patience, true);
      else if (key == "lr_factor") positive(train.lr_factor);
      else if (key == "lr_floor") train.lr_floor = parse_double(key, v);
      else if (key == "min_delta") train.min_delta = parse_double(key, v);
      else if (key == "shuffle") train.shuffle = parse_bool(key, v);
      else if (key == "resume") train.resume = parse_bool(key, v);
      else if (!net.apply(key, v)) throw ConfigError("unknown configuration key `" + key + "`");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.find("`" + key + "`") != std::string::npos) throw;
      throw ConfigError("`" + key + "`: " + msg);
    }
  }

  void validate() const {
    net.validate();
    if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1) || !(train.adam.beta2 >= 0 && train.adam.beta2 < 1))
      throw ConfigError("`adam_beta1` and `adam_beta2` must lie in [0,1)");
    if (!(train.lr_factor < 1)) throw ConfigError("`lr_factor` must be below 1");
  }

  /// Every key with its current value, in file syntax.
  std::string describe() const {
    KeyValues kv = net.to_key_values();
    kv["data"] = data.string();
    kv["dataset"] = to_string(dataset);
    kv["split_mode"] = to_string(split_mode);
    for (const auto& [n, p] : test_sets) kv["test." + n] = p.string();
    kv["out"] = out.string();
    kv["seed"] = std::to_string(seed);
    kv["scale"] = format_double(scale);
    kv["train_subset"] = std::to_string(train_subset);
    kv["eval_subset"] = std::to_string(eval_subset);
    kv["epochs"] = std::to_string(train.epochs);
    kv["batch_size"] = std::to_string(train.batch_size);
    kv["eval_batch_size"] = std::to_string(train.eval_batch_size);
    kv["learning_rate"] = format_double(train.learning_rate);
    kv["adam_beta1"] = format_double(train.adam.beta1);
    kv["adam_beta2"] = format_double(train.adam.beta2);
    kv["adam_epsilon"] = format_double(train.adam.epsilon);
    kv["patience"] = std::to_string(train.patience);
    kv["lr_factor"] = format_double(train.lr_factor);
    kv["lr_floor"] = format_double(train.lr_floor);
    kv["min_delta"] = format_double(train.min_delta);
    kv["shuffle"] = train.shuffle ? "true" : "false";
    kv["resume"] = train.resume ? "true" : "false";
    std::string out_text;
    for (const auto& [k, v] : kv) out_text += k + " = " + v + "\n";
    return out_text;
  }
};

inline RunConfig parse_run_config(std::string_view text, RunConfig base = {}) {
  for (const auto& [k, v] : parse_key_values(text)) base.apply(k, v);
  return base;
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  return parse_run_config(read_file(path), std::move(base));
}

/// Training, validation and test sets of a run, cut from the file at `data`.
struct RunData {
  Dataset train, valid;
  std::vector<std::pair<std::string, Dataset>> tests;
};

inline Dataset first_n(Dataset d, std::size_t n) {
  if (n && d.records.size() > n) d.records.resize(n);
  return d;
}

inline RunData load_run_data(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("`data` is not set (use --data or a config file)");
  const Dataset all = load_psd8(cfg.data);
  const SplitSet s = cfg.dataset == DatasetKind::cullpdb6133 ? split_cullpdb6133(all.size(), cfg.split_mode)
                                                              : split_cullpdb6133_filtered(all.size(), cfg.seed);
  RunData out;
  out.train = first_n(subset(all, s.train.indices, all.name + ".train"), cfg.train_subset);
  out.valid = first_n(subset(all, s.valid.indices, all.name + ".valid"), cfg.eval_subset);
  if (!s.test.indices.empty())
    out.tests.emplace_back("CullPdb6133", first_n(subset(all, s.test.indices, all.name + ".test"), cfg.eval_subset));
  for (const auto& [name, path] : cfg.test_sets) {
    Dataset d = load_psd8(path);
    d.name = name;
    out.tests.emplace_back(name, first_n(std::move(d), cfg.eval_subset));
  }
  return out;
}

}  // namespace ps8
