#pragma once

// Protein records, the raw 57-column matrix ingest, the canonical PSD8
// container, index splits and mini-batch assembly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ps8/binary_io.hpp"
#include "ps8/kv_text.hpp"
#include "ps8/model.hpp"
#include "ps8/tensor.hpp"

namespace ps8 {

inline constexpr std::size_t kRawColumns = 57;
inline constexpr std::size_t kRawRowFloats = kSequenceLength * kRawColumns;
static_assert(kRawRowFloats == 39900);
inline constexpr std::int32_t kNoSeq = 8;

// Column layout of one raw 700x57 protein matrix.
inline constexpr std::size_t kRawResidueBegin = 0;   // 21 residues + NoSeq
inline constexpr std::size_t kRawLabelBegin = 22;    // 8 states + NoSeq
inline constexpr std::size_t kRawProfileBegin = 35;  // 21 profiles + NoSeq

/// One protein. Only real residues are stored; padding up to 700 positions is
/// implicit, so the mask is always a prefix and padded rows are always zero.
struct ProteinRecord {
  std::string id;
  std::vector<std::uint8_t> residues;  // [length], 0..20
  std::vector<std::uint8_t> labels;    // [length], 0..7
  std::vector<float> profile;          // [length, 21], values in [0,1]

  std::size_t length() const noexcept { return residues.size(); }

  Tensor<float> seq_onehot() const {
    Tensor<float> t(Shape{kSequenceLength, kAlphabetSize}, 0.0f);
    for (std::size_t i = 0; i < length(); ++i) t(i, residues[i]) = 1.0f;
    return t;
  }
  Tensor<float> profile_matrix() const {
    Tensor<float> t(Shape{kSequenceLength, kAlphabetSize}, 0.0f);
    std::copy(profile.begin(), profile.end(), t.data().begin());
    return t;
  }
  std::vector<std::int32_t> label_row() const {
    std::vector<std::int32_t> out(kSequenceLength, kNoSeq);
    std::copy(labels.begin(), labels.end(), out.begin());
    return out;
  }
  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> out(kSequenceLength, 0);
    std::fill_n(out.begin(), length(), std::uint8_t{1});
    return out;
  }

  friend bool operator==(const ProteinRecord&, const ProteinRecord&) = default;
};

struct Dataset {
  std::string name;
  std::string label_order = kDefaultLabelOrder;
  std::vector<ProteinRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline void validate_record(const ProteinRecord& r, std::size_t index) {
  auto bad = [&](const std::string& what) {
    throw ValidationError("protein " + std::to_string(index) + " (" + r.id + "): " + what);
  };
  if (r.length() > kSequenceLength) bad("longer than " + std::to_string(kSequenceLength) + " residues");
  if (r.labels.size() != r.length()) bad("label count differs from residue count");
  if (r.profile.size() != r.length() * kAlphabetSize) bad("profile size differs from residue count");
  for (auto v : r.residues)
    if (v >= kAlphabetSize) bad("residue index out of range");
  for (auto v : r.labels)
    if (v >= kNumClasses) bad("label index out of range");
  for (float v : r.profile)
    if (!(v >= 0.0f && v <= 1.0f)) bad("profile value outside [0,1]");
}

// ---------------------------------------------------------------------------
// Raw matrix ingest: N rows of 700x57 little-endian float32 plus a text header.

struct RawHeader {
  std::string name;
  std::size_t count = 0;
  std::size_t rows = kSequenceLength;
  std::size_t cols = kRawColumns;
};

inline RawHeader parse_raw_header(std::string_view text) {
  KeyValues kv;
  try {
    kv = parse_key_values(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("raw header: ") + e.what());
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("raw header: missing `") + key + "`");
    return it->second;
  };
  RawHeader h;
  try {
    h.name = need("name");
    h.count = parse_uint("count", need("count"));
    h.rows = parse_uint("rows", need("rows"));
    h.cols = parse_uint("cols", need("cols"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("raw header: ") + e.what());
  }
  if (h.rows * h.cols != kRawRowFloats)
    throw FormatError("raw header: rows x cols must be " + std::to_string(kSequenceLength) + "x" +
                      std::to_string(kRawColumns) + ", got " + std::to_string(h.rows) + "x" + std::to_string(h.cols));
  return h;
}

inline std::string format_raw_header(const RawHeader& h) {
  return "name = " + h.name + "\ncount = " + std::to_string(h.count) + "\nrows = " + std::to_string(h.rows) +
         "\ncols = " + std::to_string(h.cols) + "\n";
}

/// Converts one 700x57 row. Only residue, label and profile columns are
/// read; the terminal and solvent-accessibility columns are ignored.
inline ProteinRecord record_from_raw(std::span<const float> row, std::size_t index, std::string id) {
  if (row.size() != kRawRowFloats) throw FormatError("raw row must hold " + std::to_string(kRawRowFloats) + " floats");
  auto fail = [&](std::size_t t, const std::string& what) {
    throw ValidationError("protein " + std::to_string(index) + " position " + std::to_string(t) + ": " + what);
  };
  ProteinRecord r;
  r.id = std::move(id);
  bool padding = false;
  for (std::size_t t = 0; t < kSequenceLength; ++t) {
    const float* x = row.data() + t * kRawColumns;
    std::size_t label = kNumClasses + 1, label_hits = 0;
    for (std::size_t k = 0; k <= kNumClasses; ++k) {
      const float v = x[kRawLabelBegin + k];
      if (v == 1.0f) {
        label = k;
        ++label_hits;
      } else if (v != 0.0f) {
        fail(t, "label columns are not one-hot");
      }
    }
    if (label_hits != 1) fail(t, "label columns are not one-hot");
    std::size_t residue = kAlphabetSize, residue_hits = 0;
    for (std::size_t k = 0; k < kAlphabetSize; ++k) {
      const float v = x[kRawResidueBegin + k];
      if (v == 1.0f) {
        residue = k;
        ++residue_hits;
      } else if (v != 0.0f) {
        fail(t, "residue columns are not one-hot");
      }
    }
    if (label == static_cast<std::size_t>(kNoSeq)) {
      if (residue_hits != 0) fail(t, "padding position carries a residue");
      padding = true;
      continue;
    }
    if (padding) throw ValidationError("protein " + std::to_string(index) + ": mask is not a prefix (residue at position " + std::to_string(t) + " follows padding)");
    if (residue_hits != 1) fail(t, "real position must have exactly one residue");
    r.residues.push_back(static_cast<std::uint8_t>(residue));
    r.labels.push_back(static_cast<std::uint8_t>(label));
    for (std::size_t k = 0; k < kAlphabetSize; ++k) r.profile.push_back(x[kRawProfileBegin + k]);
  }
  validate_record(r, index);
  return r;
}

inline void record_to_raw(const ProteinRecord& r, std::span<float> row) {
  std::fill(row.begin(), row.end(), 0.0f);
  for (std::size_t t = 0; t < kSequenceLength; ++t) {
    float* x = row.data() + t * kRawColumns;
    if (t < r.length()) {
      x[kRawResidueBegin + r.residues[t]] = 1.0f;
      x[kRawLabelBegin + r.labels[t]] = 1.0f;
      for (std::size_t k = 0; k < kAlphabetSize; ++k) x[kRawProfileBegin + k] = r.profile[t * kAlphabetSize + k];
    } else {
      x[kRawResidueBegin + kAlphabetSize] = 1.0f;
      x[kRawLabelBegin + kNumClasses] = 1.0f;
      x[kRawProfileBegin + kAlphabetSize] = 1.0f;
    }
  }
}

inline Dataset load_raw_matrix(const std::filesystem::path& data_path, const std::filesystem::path& header_path) {
  const RawHeader h = parse_raw_header(read_file(header_path));
  const auto bytes = std::filesystem::file_size(data_path);
  const auto expected = static_cast<std::uintmax_t>(h.count) * kRawRowFloats * sizeof(float);
  if (bytes != expected)
    throw FormatError(data_path.string() + ": expected " + std::to_string(expected) + " bytes for " +
                      std::to_string(h.count) + " proteins, found " + std::to_string(bytes));
  std::ifstream in(data_path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + data_path.string());
  Dataset d;
  d.name = h.name;
  d.records.reserve(h.count);
  std::string buf(kRawRowFloats * sizeof(float), '\0');
  std::vector<float> row(kRawRowFloats);
  for (std::size_t i = 0; i < h.count; ++i) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in) throw FormatError(data_path.string() + ": short read at protein " + std::to_string(i));
    ByteReader(buf, data_path.string()).get_span(std::span<float>(row));
    d.records.push_back(record_from_raw(row, i, h.name + "_" + std::to_string(i)));
  }
  return d;
}

inline void write_raw_matrix(const Dataset& d, const std::filesystem::path& data_path,
                             const std::filesystem::path& header_path) {
  ByteWriter w;
  std::vector<float> row(kRawRowFloats);
  for (const auto& r : d.records) {
    record_to_raw(r, row);
    w.put_span(std::span<const float>(row));
  }
  write_file(data_path, w.bytes());
  write_file(header_path, format_raw_header({d.name, d.size(), kSequenceLength, kRawColumns}));
}

// ---------------------------------------------------------------------------
// Canonical container: "PSD8", u32 version, 8-letter label order, name,
// u32 count, then per protein: id, u32 length, residues (u8), labels (u8),
// profile (length x 21 float32).

inline constexpr std::uint32_t kPsd8Version = 1;

inline std::string encode_psd8(const Dataset& d) {
  if (d.label_order.size() != kNumClasses) throw ValidationError("label order must have 8 letters");
  ByteWriter w;
  w.put_bytes("PSD8");
  w.put<std::uint32_t>(kPsd8Version);
  w.put_bytes(d.label_order);
  w.put_string32(d.name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& r = d.records[i];
    validate_record(r, i);
    w.put_string32(r.id);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.length()));
    w.put_span(std::span<const std::uint8_t>(r.residues));
    w.put_span(std::span<const std::uint8_t>(r.labels));
    w.put_span(std::span<const float>(r.profile));
  }
  return w.take();
}

inline Dataset decode_psd8(std::string_view bytes, const std::string& what = "PSD8") {
  ByteReader in(bytes, what);
  if (in.get_bytes(4) != "PSD8") in.fail("bad magic");
  if (const auto v = in.get<std::uint32_t>(); v != kPsd8Version) in.fail("unsupported version " + std::to_string(v));
  Dataset d;
  d.label_order = std::string(in.get_bytes(kNumClasses));
  d.name = in.get_string32();
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ProteinRecord r;
    r.id = in.get_string32();
    const auto n = in.get<std::uint32_t>();
    if (n > kSequenceLength) in.fail("protein " + std::to_string(i) + " longer than 700");
    r.residues.resize(n);
    r.labels.resize(n);
    r.profile.resize(n * kAlphabetSize);
    in.get_span(std::span<std::uint8_t>(r.residues));
    in.get_span(std::span<std::uint8_t>(r.labels));
    in.get_span(std::span<float>(r.profile));
    validate_record(r, i);
    d.records.push_back(std::move(r));
  }
  if (in.remaining() != 0) in.fail("trailing bytes");
  return d;
}

inline void save_psd8(const Dataset& d, const std::filesystem::path& path) { write_file(path, encode_psd8(d)); }
inline Dataset load_psd8(const std::filesystem::path& path) { return decode_psd8(read_file(path), path.string()); }

inline Dataset subset(const Dataset& d, std::span<const std::size_t> indices, std::string name = {}) {
  Dataset out{name.empty() ? d.name : std::move(name), d.label_order, {}};
  out.records.reserve(indices.size());
  for (std::size_t i : indices) out.records.push_back(d.records.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Splits.

inline constexpr std::size_t kCullPdb6133Count = 6133;
inline constexpr std::size_t kCullPdbFilteredCount = 5534;

enum class SplitMode { paper, train6128 };

inline const char* to_string(SplitMode m) { return m == SplitMode::paper ? "paper" : "train6128"; }
inline SplitMode parse_split_mode(std::string_view s) {
  if (s == "paper") return SplitMode::paper;
  if (s == "train6128") return SplitMode::train6128;
  throw ConfigError("split mode must be paper|train6128, got `" + std::string(s) + "`");
}

struct DatasetSplit {
  std::string name;
  std::vector<std::size_t> indices;
  std::string provenance;
};

struct SplitSet {
  DatasetSplit train, valid, test;
  std::vector<std::size_t> excluded;
};

namespace detail {
inline std::vector<std::size_t> index_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}
}  // namespace detail

/// Train [0,5600), test [5605,5877), valid [5877,6133); [5600,5605) unused.
/// In train6128 mode every protein outside the test range trains and the
/// validation split is empty.
inline SplitSet split_cullpdb6133(std::size_t count, SplitMode mode) {
  if (count != kCullPdb6133Count)
    throw ValidationError("CullPDB6133 split needs 6133 proteins, got " + std::to_string(count));
  SplitSet s;
  s.test = {"test", detail::index_range(5605, 5877), "cullpdb6133[5605:5877]"};
  if (mode == SplitMode::paper) {
    s.train = {"train", detail::index_range(0, 5600), "cullpdb6133[0:5600]"};
    s.valid = {"valid", detail::index_range(5877, 6133), "cullpdb6133[5877:6133]"};
    s.excluded = detail::index_range(5600, 5605);
  } else {
    auto train = detail::index_range(0, 5605);
    for (std::size_t i = 5877; i < 6133; ++i) train.push_back(i);
    s.train = {"train", std::move(train), "cullpdb6133[0:5605]+[5877:6133]"};
    s.valid = {"valid", {}, "none"};
  }
  return s;
}

/// Seeded random choice of 5234 training proteins; the other 300 validate.
inline SplitSet split_cullpdb6133_filtered(std::size_t count, std::uint64_t seed) {
  if (count != kCullPdbFilteredCount)
    throw ValidationError("filtered CullPDB6133 split needs 5534 proteins, got " + std::to_string(count));
  auto order = detail::index_range(0, count);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> train(order.begin(), order.begin() + 5234), valid(order.begin() + 5234, order.end());
  std::sort(train.begin(), train.end());
  std::sort(valid.begin(), valid.end());
  SplitSet s;
  const std::string prov = "cullpdb6133-filtered seed " + std::to_string(seed);
  s.train = {"train", std::move(train), prov};
  s.valid = {"valid", std::move(valid), prov};
  s.test = {"test", {}, "none"};
  return s;
}

template <class T>
Tensor<T> logistic_rescale(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = T{1} / (T{1} + std::exp(-v));
  return out;
}

// ---------------------------------------------------------------------------
// Batches.

/// Groups `indices` into consecutive batches. With shuffling, the order is a
/// seeded permutation that depends only on (seed, epoch). The last batch may
/// be short.
inline std::vector<std::vector<std::size_t>> plan_batches(std::span<const std::size_t> indices, std::size_t batch_size,
                                                          std::uint64_t seed, std::uint64_t epoch, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (indices.empty()) throw ValidationError("cannot batch an empty split");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  if (shuffle) {
    std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(epoch + 0x9e3779b97f4a7c15ULL)));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch_size)));
  return out;
}

struct Batch {
  Tensor<float> features;             // [B, 700, 42]: sequence one-hot | profile
  std::vector<std::int32_t> labels;   // [B * 700], kNoSeq at padding
  std::vector<std::uint8_t> mask;     // [B * 700]
  std::vector<std::size_t> records;   // source indices
  std::size_t residues = 0;
};

inline Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("cannot build an empty batch");
  Batch b;
  const std::size_t n = indices.size();
  b.features = Tensor<float>(Shape{n, kSequenceLength, kInputFeatures}, 0.0f);
  b.labels.assign(n * kSequenceLength, kNoSeq);
  b.mask.assign(n * kSequenceLength, 0);
  b.records.assign(indices.begin(), indices.end());
  for (std::size_t i = 0; i < n; ++i) {
    const ProteinRecord& r = d.records.at(indices[i]);
    for (std::size_t t = 0; t < r.length(); ++t) {
      float* row = b.features.ptr() + (i * kSequenceLength + t) * kInputFeatures;
      row[r.residues[t]] = 1.0f;
      std::copy_n(r.profile.data() + t * kAlphabetSize, kAlphabetSize, row + kAlphabetSize);
      b.labels[i * kSequenceLength + t] = r.labels[t];
      b.mask[i * kSequenceLength + t] = 1;
    }
    b.residues += r.length();
  }
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic proteins: labels follow a segment process with class-dependent
// segment lengths, residues are emitted from a class-dependent distribution
// and profiles are noisy smoothed versions of that distribution. The
// "world" seed fixes the generative model so that separately sampled sets
// share it.

struct SyntheticOptions {
  std::string name = "synthetic";
  std::size_t count = 64;
  std::size_t min_length = 40;
  std::size_t max_length = 300;
  std::uint64_t seed = 1;
  std::uint64_t world_seed = 20240607;
};

inline Dataset make_synthetic(const SyntheticOptions& opt) {
  if (opt.min_length > opt.max_length || opt.max_length > kSequenceLength)
    throw ConfigError("synthetic lengths must satisfy min <= max <= 700");
  // Order LBEGIHST.
  constexpr std::array<double, kNumClasses> freq{0.19, 0.012, 0.21, 0.04, 0.002, 0.34, 0.08, 0.116};
  constexpr std::array<double, kNumClasses> mean_len{4, 1.2, 5, 3, 5, 11, 2, 3};
  std::mt19937_64 world(opt.world_seed);
  std::array<std::array<double, kAlphabetSize>, kNumClasses> emit{};
  for (auto& e : emit) {
    std::gamma_distribution<double> g(0.4, 1.0);
    double total = 0;
    for (double& v : e) total += (v = g(world) + 0.02);
    for (double& v : e) v /= total;
  }
  std::mt19937_64 rng(opt.seed);
  // Segments are picked in proportion to freq / mean length, so residue
  // frequencies follow freq.
  std::array<double, kNumClasses> pick{};
  for (std::size_t c = 0; c < kNumClasses; ++c) pick[c] = freq[c] / mean_len[c];
  std::discrete_distribution<std::size_t> pick_class(pick.begin(), pick.end());
  std::uniform_int_distribution<std::size_t> pick_len(opt.min_length, opt.max_length);
  std::uniform_real_distribution<double> noise(0.0, 0.12);
  Dataset d;
  d.name = opt.name;
  for (std::size_t i = 0; i < opt.count; ++i) {
    ProteinRecord r;
    r.id = opt.name + "_" + std::to_string(i);
    const std::size_t len = pick_len(rng);
    while (r.labels.size() < len) {
      const std::size_t c = pick_class(rng);
      std::geometric_distribution<std::size_t> seg(1.0 / mean_len[c]);
      const std::size_t run = std::min(len - r.labels.size(), 1 + seg(rng));
      for (std::size_t k = 0; k < run; ++k) r.labels.push_back(static_cast<std::uint8_t>(c));
    }
    for (std::size_t t = 0; t < len; ++t) {
      const auto& e = emit[r.labels[t]];
      std::discrete_distribution<std::size_t> residue(e.begin(), e.end());
      const std::size_t res = residue(rng);
      r.residues.push_back(static_cast<std::uint8_t>(res));
      for (std::size_t k = 0; k < kAlphabetSize; ++k) {
        const double v = 0.15 + 2.5 * e[k] + (k == res ? 0.25 : 0.0) + noise(rng);
        r.profile.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
    }
    d.records.push_back(std::move(r));
  }
  return d;
}

}  // namespace ps8
