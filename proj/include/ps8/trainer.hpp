#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ps8/checkpoint.hpp"
#include "ps8/dataset.hpp"
#include "ps8/eval.hpp"
#include "ps8/model.hpp"
#include "ps8/optim.hpp"

namespace ps8 {

struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t batch_size = 64;
  double learning_rate = 2e-4;
  AdamConfig adam;
  std::size_t patience = 7;
  double lr_factor = std::sqrt(0.1);
  double lr_floor = 0.5e-5;
  double min_delta = 1e-4;
  std::uint64_t seed = 1;
  bool shuffle = true;
  std::size_t eval_batch_size = 64;
  /// Root of checkpoints/, logs/ and reports/. Empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Continue from checkpoints/last.ps8n when it exists.
  bool resume = false;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0, val_q8 = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  TrainingState state;
  std::filesystem::path best_checkpoint, final_checkpoint;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,val_loss,val_q8";

inline std::string format_metrics_row(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.6g,%.6g,%.6g,%.6g", m.epoch, m.lr, m.train_loss, m.val_loss, m.val_q8);
  return buf;
}

inline std::string format_metrics(const std::vector<EpochMetrics>& log) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& m : log) out += format_metrics_row(m) + "\n";
  return out;
}

inline std::vector<EpochMetrics> parse_metrics(const std::string& text) {
  std::vector<EpochMetrics> out;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics log: bad header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochMetrics m;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &m.epoch, &m.lr, &m.train_loss, &m.val_loss, &m.val_q8) != 5)
      throw FormatError("metrics log: bad row `" + line + "`");
    out.push_back(m);
  }
  return out;
}

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path last() const { return checkpoints() / "last.ps8n"; }
  std::filesystem::path best() const { return checkpoints() / "best.ps8n"; }
  std::filesystem::path metrics() const { return root / "logs" / "metrics.csv"; }
  std::filesystem::path reports() const { return root / "reports"; }
};

/// Trains `net` in place. Per epoch: seeded shuffle, train-mode forward,
/// masked cross-entropy, backward and one Adam step per batch; then
/// validation loss and Q8, one scheduler step on the validation loss (the
/// training loss when there is no validation set), and checkpoints.
inline TrainResult train(Ps8Net<float>& net, const Dataset& train_set, const Dataset& valid_set, const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  if (train_set.size() == 0) throw ValidationError("training set is empty");
  for (const Dataset* d : {&train_set, &valid_set})
    if (d->size() && d->label_order != net.config.label_order)
      throw ValidationError("dataset `" + d->name + "` label order " + d->label_order + " differs from model order " +
                            net.config.label_order);
  const bool files = !cfg.out_dir.empty();
  const RunPaths paths{cfg.out_dir};

  TrainResult result;
  TrainingState& state = result.state;
  state.adam = Adam<float>(cfg.adam);
  state.scheduler = PlateauScheduler({cfg.learning_rate, cfg.lr_factor, cfg.patience, cfg.lr_floor, cfg.min_delta});
  state.seed = cfg.seed;

  if (files && cfg.resume && std::filesystem::exists(paths.last())) {
    LoadedCheckpoint ck = load_checkpoint(paths.last());
    if (!ck.state) throw FormatError(paths.last().string() + ": no training state to resume from");
    if (ck.net.config != net.config) throw ConfigError("resume: checkpoint architecture differs from the run config");
    net = std::move(ck.net);
    state = std::move(*ck.state);
    if (std::filesystem::exists(paths.metrics()))
      for (const auto& m : parse_metrics(read_file(paths.metrics())))
        if (m.epoch <= state.epoch) result.log.push_back(m);
  }
  if (files) {
    std::filesystem::create_directories(paths.checkpoints());
    std::filesystem::create_directories(paths.reports());
    write_file(paths.metrics(), format_metrics(result.log));
  }

  const auto params = named_parameters(net);
  state.adam.bind(params);
  std::vector<std::size_t> indices(train_set.size());
  std::iota(indices.begin(), indices.end(), 0);

  auto dump_failure = [&](const std::string& what) {
    std::string msg = what;
    if (files) {
      const auto path = paths.checkpoints() / "nonfinite.ps8n";
      save_checkpoint(path, net, &state);
      write_file(paths.reports() / "nonfinite.txt", what + "\n" + format_metrics(result.log));
      msg += "; state saved to " + path.string();
    }
    throw NonFiniteLoss(msg);
  };

  for (std::size_t epoch = state.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = state.scheduler.lr();
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, epoch);
    double loss_sum = 0.0;
    std::uint64_t residues = 0;
    const auto plan = plan_batches(indices, cfg.batch_size, cfg.seed, epoch, cfg.shuffle);
    for (std::size_t b = 0; b < plan.size(); ++b) {
      const Batch batch = make_batch(train_set, plan[b]);
      if (batch.residues == 0) continue;
      Tape<float> tape;
      const auto probs = ps8net_forward(tape, net, Var<float>(batch.features), Mode::train, derive_seed(epoch_seed, b));
      const auto loss = masked_cross_entropy(tape, probs, std::span<const std::int32_t>(batch.labels),
                                             std::span<const std::uint8_t>(batch.mask));
      const double l = loss.value()[0];
      if (!std::isfinite(l))
        dump_failure("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(b));
      backward(tape, loss);
      try {
        state.adam.step(params, m.lr);
      } catch (const NonFiniteGradient& e) {
        dump_failure(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " + std::to_string(b));
      }
      loss_sum += l * static_cast<double>(batch.residues);
      residues += batch.residues;
    }
    m.train_loss = loss_sum / static_cast<double>(residues);
    double monitored = m.train_loss;
    if (valid_set.size()) {
      const EvalReport rep = evaluate(net, valid_set, cfg.eval_batch_size);
      m.val_loss = rep.loss;
      m.val_q8 = rep.q8;
      monitored = rep.loss;
    } else {
      m.val_loss = m.val_q8 = std::numeric_limits<double>::quiet_NaN();
    }
    state.scheduler.step(monitored);
    state.epoch = epoch;
    const bool improved = valid_set.size() == 0 || m.val_q8 > state.best_q8;
    if (improved) {
      state.best_q8 = valid_set.size() ? m.val_q8 : state.best_q8;
      state.best_epoch = epoch;
    }
    result.log.push_back(m);
    if (files) {
      if (improved) save_checkpoint(paths.best(), net, &state);
      save_checkpoint(paths.last(), net, &state);
      write_file(paths.metrics(), format_metrics(result.log));
    }
    if (on_epoch) on_epoch(m);
  }
  if (files) {
    result.final_checkpoint = paths.last();
    result.best_checkpoint = std::filesystem::exists(paths.best()) ? paths.best() : paths.last();
    if (result.log.empty()) save_checkpoint(paths.last(), net, &state);
  }
  return result;
}

}  // namespace ps8
