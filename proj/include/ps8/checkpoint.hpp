#pragma once

// "PS8N" checkpoint container:
//   magic "PS8N", u32 version, u32 text length + `key = value` text,
//   u32 entry count, then per entry: u32 name length + name, u32 rank,
//   rank x u32 dims, little-endian float32 values.
// The text holds the architecture (model.*), optimizer (adam.*), scheduler
// (sched.*) and loop (train.*) state. Entries hold parameters, batch-norm
// running statistics and Adam moments (adam.m/<name>, adam.v/<name>).

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ps8/binary_io.hpp"
#include "ps8/kv_text.hpp"
#include "ps8/model.hpp"
#include "ps8/optim.hpp"

namespace ps8 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  KeyValues meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline std::string encode_checkpoint(const CheckpointFile& c) {
  std::string text;
  for (const auto& [k, v] : c.meta) text += k + " = " + v + "\n";
  ByteWriter w;
  w.put_bytes("PS8N");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string32(text);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.put_string32(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_span(std::span<const float>(t.data()));
  }
  return w.take();
}

inline CheckpointFile decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  ByteReader in(bytes, what);
  if (in.get_bytes(4) != "PS8N") in.fail("bad magic");
  if (const auto v = in.get<std::uint32_t>(); v != kCheckpointVersion)
    in.fail("unsupported version " + std::to_string(v));
  CheckpointFile c;
  try {
    c.meta = parse_key_values(in.get_string32(1u << 24));
  } catch (const ConfigError& e) {
    in.fail(std::string("bad metadata: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.get_string32(4096);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) in.fail("implausible rank for `" + name + "`");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = in.get<std::uint32_t>();
      if (d == 0) in.fail("zero dimension in `" + name + "`");
      n *= d;
    }
    if (n * sizeof(float) > in.remaining()) in.fail("truncated tensor `" + name + "`");
    Tensor<float> t(shape);
    in.get_span(std::span<float>(t.data()));
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (in.remaining() != 0) in.fail("trailing bytes");
  return c;
}

/// Optimizer and loop state carried across a resume.
struct TrainingState {
  Adam<float> adam;
  PlateauScheduler scheduler;
  std::size_t epoch = 0;
  double best_q8 = -1.0;
  std::size_t best_epoch = 0;
  std::uint64_t seed = 0;
};

inline KeyValues prefixed(const KeyValues& kv, const std::string& prefix) {
  KeyValues out;
  for (const auto& [k, v] : kv) out[prefix + k] = v;
  return out;
}

inline CheckpointFile make_checkpoint(Ps8Net<float>& net, const TrainingState* state) {
  CheckpointFile c;
  c.meta = prefixed(net.config.to_key_values(), "model.");
  c.meta["label_order"] = net.config.label_order;
  visit_tensors(
      net, [&](const std::string& n, Var<float>& v) { c.tensors.emplace_back(n, v.value()); },
      [&](const std::string& n, Tensor<float>& t) { c.tensors.emplace_back(n, t); });
  if (state) {
    c.meta.merge(state->adam.to_key_values());
    c.meta.merge(state->scheduler.to_key_values());
    c.meta["train.epoch"] = std::to_string(state->epoch);
    c.meta["train.best_q8"] = format_double(state->best_q8);
    c.meta["train.best_epoch"] = std::to_string(state->best_epoch);
    c.meta["train.seed"] = std::to_string(state->seed);
    const auto& names = state->adam.names();
    for (std::size_t i = 0; i < names.size(); ++i) {
      c.tensors.emplace_back("adam.m/" + names[i], state->adam.first_moments()[i]);
      c.tensors.emplace_back("adam.v/" + names[i], state->adam.second_moments()[i]);
    }
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, Ps8Net<float>& net, const TrainingState* state) {
  write_file(path, encode_checkpoint(make_checkpoint(net, state)));
}

struct LoadedCheckpoint {
  Ps8Net<float> net;
  std::optional<TrainingState> state;
  KeyValues meta;
};

/// Rebuilds a model (and training state when present). Every tensor the
/// architecture needs must be present with the right shape; nothing is
/// returned on any mismatch.
inline LoadedCheckpoint restore_checkpoint(CheckpointFile c, const std::string& what = "checkpoint") {
  auto fail = [&](const std::string& msg) -> void { throw FormatError(what + ": " + msg); };
  NetConfig cfg;
  try {
    for (const auto& [k, v] : c.meta)
      if (k.starts_with("model.") && !cfg.apply(k.substr(6), v)) fail("unknown architecture key `" + k + "`");
    cfg.validate();
  } catch (const ConfigError& e) {
    fail(e.what());
  }
  if (auto it = c.meta.find("label_order"); it == c.meta.end() || it->second != cfg.label_order)
    fail("missing or inconsistent label order");

  std::map<std::string, Tensor<float>*> by_name;
  for (auto& [n, t] : c.tensors)
    if (!by_name.emplace(n, &t).second) fail("duplicate tensor `" + n + "`");

  LoadedCheckpoint out{build_ps8net<float>(cfg, 0), std::nullopt, c.meta};
  std::size_t used = 0;
  auto take = [&](const std::string& n, Tensor<float>& dst) {
    auto it = by_name.find(n);
    if (it == by_name.end()) fail("missing tensor `" + n + "`");
    if (it->second->shape() != dst.shape())
      fail("tensor `" + n + "` has shape " + to_string(it->second->shape()) + ", expected " + to_string(dst.shape()));
    dst = std::move(*it->second);
    ++used;
  };
  visit_tensors(
      out.net, [&](const std::string& n, Var<float>& v) { take(n, v.value()); },
      [&](const std::string& n, Tensor<float>& t) { take(n, t); });

  if (c.meta.contains("adam.steps")) {
    TrainingState s;
    std::vector<std::string> names;
    std::vector<Tensor<float>> m, v;
    try {
      for (auto& [n, p] : named_parameters(out.net)) {
        names.push_back(n);
        m.emplace_back(p.shape());
        v.emplace_back(p.shape());
        take("adam.m/" + n, m.back());
        take("adam.v/" + n, v.back());
      }
      s.adam.restore(c.meta, std::move(names), std::move(m), std::move(v));
      s.scheduler = PlateauScheduler::from_key_values(c.meta);
      s.epoch = parse_uint("train.epoch", c.meta.at("train.epoch"));
      s.best_q8 = parse_double("train.best_q8", c.meta.at("train.best_q8"));
      s.best_epoch = parse_uint("train.best_epoch", c.meta.at("train.best_epoch"));
      s.seed = parse_uint("train.seed", c.meta.at("train.seed"));
    } catch (const std::out_of_range&) {
      fail("incomplete training state");
    } catch (const ConfigError& e) {
      fail(e.what());
    }
    out.state = std::move(s);
  }
  if (used != c.tensors.size()) fail("unexpected extra tensors");
  return out;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return restore_checkpoint(decode_checkpoint(read_file(path), path.string()), path.string());
}

}  // namespace ps8
