#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ps8/dataset.hpp"
#include "ps8/model.hpp"

namespace ps8 {

/// Index of the largest of 8 values; ties go to the lowest index.
template <class T>
std::size_t argmax8(const T* p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < kNumClasses; ++k)
    if (p[k] > p[best]) best = k;
  return best;
}

/// Rows are true classes, columns predicted classes.
struct Confusion {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};
  std::uint64_t total = 0;

  std::uint64_t correct() const {
    std::uint64_t c = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) c += counts[k][k];
    return c;
  }
  double q8() const { return static_cast<double>(correct()) / static_cast<double>(total); }
  /// Per-class recall; classes absent from the labels report NaN.
  std::array<double, kNumClasses> recall() const {
    std::array<double, kNumClasses> r{};
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      const auto row = std::accumulate(counts[k].begin(), counts[k].end(), std::uint64_t{0});
      r[k] = row ? static_cast<double>(counts[k][k]) / static_cast<double>(row) : std::nan("");
    }
    return r;
  }
  Confusion& operator+=(const Confusion& o) {
    for (std::size_t i = 0; i < kNumClasses; ++i)
      for (std::size_t j = 0; j < kNumClasses; ++j) counts[i][j] += o.counts[i][j];
    total += o.total;
    return *this;
  }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Counts masked-in positions of `probs` ([..., 8]) against `labels`.
template <class T>
void accumulate_confusion(Confusion& c, const Tensor<T>& probs, std::span<const std::int32_t> labels,
                          std::span<const std::uint8_t> mask) {
  if (probs.channels() != kNumClasses) throw ShapeError("confusion: expected 8 class columns, got " + to_string(probs.shape()));
  const std::size_t rows = probs.size() / kNumClasses;
  if (labels.size() != rows || mask.size() != rows)
    throw ShapeError("confusion: " + std::to_string(rows) + " rows but " + std::to_string(labels.size()) +
                     " labels and " + std::to_string(mask.size()) + " mask entries");
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (labels[r] < 0 || labels[r] >= static_cast<std::int32_t>(kNumClasses))
      throw ValidationError("confusion: label " + std::to_string(labels[r]) + " at masked-in row " + std::to_string(r));
    ++c.counts[static_cast<std::size_t>(labels[r])][argmax8(probs.ptr() + r * kNumClasses)];
    ++c.total;
  }
}

template <class T>
Confusion confusion(const Tensor<T>& probs, std::span<const std::int32_t> labels, std::span<const std::uint8_t> mask) {
  Confusion c;
  accumulate_confusion(c, probs, labels, mask);
  if (c.total == 0) throw ValidationError("confusion: mask selects no residues");
  return c;
}

template <class T>
double q8_accuracy(const Tensor<T>& probs, std::span<const std::int32_t> labels, std::span<const std::uint8_t> mask) {
  return confusion(probs, labels, mask).q8();
}

struct EvalReport {
  std::string dataset;
  std::string checkpoint;
  std::string label_order;
  double q8 = 0.0;
  double loss = 0.0;
  std::array<double, kNumClasses> recall{};
  Confusion confusion;
  std::uint64_t residues = 0;
};

/// Inference-mode pass over a whole dataset.
inline EvalReport evaluate(Ps8Net<float>& net, const Dataset& d, std::size_t batch_size = 64,
                           std::string checkpoint = {}) {
  if (d.label_order != net.config.label_order)
    throw ValidationError("dataset `" + d.name + "` uses label order " + d.label_order + " but the model uses " +
                          net.config.label_order);
  if (d.size() == 0) throw ValidationError("cannot evaluate empty dataset `" + d.name + "`");
  EvalReport rep;
  rep.dataset = d.name;
  rep.checkpoint = std::move(checkpoint);
  rep.label_order = net.config.label_order;
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  double loss_sum = 0.0;
  Tape<float> tape;
  tape.set_recording(false);
  for (const auto& idx : plan_batches(all, batch_size, 0, 0, false)) {
    const Batch b = make_batch(d, idx);
    if (b.residues == 0) continue;
    const auto probs = ps8net_forward(tape, net, Var<float>(b.features), Mode::infer, 0);
    const auto loss = masked_cross_entropy(tape, probs, std::span<const std::int32_t>(b.labels),
                                           std::span<const std::uint8_t>(b.mask));
    loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(b.residues);
    accumulate_confusion(rep.confusion, probs.value(), std::span<const std::int32_t>(b.labels),
                         std::span<const std::uint8_t>(b.mask));
  }
  if (rep.confusion.total == 0) throw ValidationError("dataset `" + d.name + "` has no residues");
  rep.residues = rep.confusion.total;
  rep.q8 = rep.confusion.q8();
  rep.loss = loss_sum / static_cast<double>(rep.residues);
  rep.recall = rep.confusion.recall();
  return rep;
}

inline std::string format_report(const EvalReport& r) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "dataset    %s\ncheckpoint %s\nresidues   %llu\nQ8         %.4f\nloss       %.6g\n",
                r.dataset.c_str(), r.checkpoint.empty() ? "-" : r.checkpoint.c_str(),
                static_cast<unsigned long long>(r.residues), r.q8, r.loss);
  out += line;
  out += "\nconfusion (rows true, columns predicted)\n     ";
  for (char c : r.label_order) {
    std::snprintf(line, sizeof line, "%9c", c);
    out += line;
  }
  out += "   recall\n";
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    std::snprintf(line, sizeof line, "  %c  ", r.label_order[i]);
    out += line;
    for (std::size_t j = 0; j < kNumClasses; ++j) {
      std::snprintf(line, sizeof line, "%9llu", static_cast<unsigned long long>(r.confusion.counts[i][j]));
      out += line;
    }
    std::snprintf(line, sizeof line, "   %.4f\n", r.recall[i]);
    out += line;
  }
  return out;
}

struct Prediction {
  std::string id;
  std::string states;  // one letter per real residue
};

inline std::vector<Prediction> predict(Ps8Net<float>& net, const Dataset& d, std::size_t batch_size = 64) {
  const std::string& letters = net.config.label_order;
  try {
    net.config.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("model has no usable label mapping: ") + e.what());
  }
  std::vector<Prediction> out;
  if (d.size() == 0) return out;
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  Tape<float> tape;
  tape.set_recording(false);
  for (const auto& idx : plan_batches(all, batch_size, 0, 0, false)) {
    const Batch b = make_batch(d, idx);
    const auto probs = ps8net_forward(tape, net, Var<float>(b.features), Mode::infer, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const ProteinRecord& r = d.records[idx[i]];
      Prediction p{r.id, std::string(r.length(), '?')};
      for (std::size_t t = 0; t < r.length(); ++t)
        p.states[t] = letters[argmax8(probs.value().ptr() + (i * kSequenceLength + t) * kNumClasses)];
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// Two lines per protein: `>id`, then the state string.
inline std::string format_predictions(const std::vector<Prediction>& preds) {
  std::string out;
  for (const auto& p : preds) out += ">" + p.id + "\n" + p.states + "\n";
  return out;
}

}  // namespace ps8
