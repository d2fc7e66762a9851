#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "ps8/dataset.hpp"

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ps8_dataset_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ps8::Dataset small_set(std::size_t count = 5, std::uint64_t seed = 3) {
  ps8::SyntheticOptions o;
  o.count = count;
  o.min_length = 1;
  o.max_length = 60;
  o.seed = seed;
  o.name = "tiny";
  return ps8::make_synthetic(o);
}

std::vector<float> raw_row(const ps8::ProteinRecord& r) {
  std::vector<float> row(ps8::kRawRowFloats);
  ps8::record_to_raw(r, row);
  return row;
}

TEST(RawMatrix, RowArithmetic) {
  EXPECT_EQ(ps8::kRawRowFloats, 39900u);
  EXPECT_EQ(700u * 57u, ps8::kRawRowFloats);
}

TEST(RawMatrix, LengthThreeProteinGivesPrefixMask) {
  ps8::ProteinRecord r{"p", {3, 0, 20}, {5, 2, 0}, std::vector<float>(63, 0.5f)};
  const auto back = ps8::record_from_raw(raw_row(r), 0, "p");
  EXPECT_EQ(back, r);
  auto mask = back.mask();
  std::vector<std::uint8_t> want(700, 0);
  want[0] = want[1] = want[2] = 1;
  EXPECT_EQ(mask, want);
  const auto labels = back.label_row();
  EXPECT_EQ(labels[2], 0);
  EXPECT_EQ(labels[3], ps8::kNoSeq);
  const auto onehot = back.seq_onehot();
  EXPECT_EQ(onehot(0, 3), 1.0f);
  EXPECT_EQ(onehot(2, 20), 1.0f);
  for (std::size_t t = 3; t < 700; ++t)
    for (std::size_t k = 0; k < 21; ++k) {
      EXPECT_EQ(onehot(t, k), 0.0f);
      EXPECT_EQ(back.profile_matrix()(t, k), 0.0f);
    }
}

TEST(RawMatrix, ColumnExtraction) {
  std::vector<float> row(ps8::kRawRowFloats, 0.0f);
  for (std::size_t t = 0; t < 700; ++t) {
    float* x = row.data() + t * 57;
    if (t < 2) {
      x[7] = 1;             // residue 7
      x[22 + 6] = 1;        // label 6
      for (int k = 0; k < 21; ++k) x[35 + k] = 0.01f * static_cast<float>(k + t);
      x[56] = 0.77f;        // profile NoSeq column is dropped
      x[31] = x[32] = x[33] = x[34] = 0.9f;  // unused columns
    } else {
      x[21] = 1;
      x[30] = 1;
    }
  }
  const auto r = ps8::record_from_raw(row, 4, "x");
  ASSERT_EQ(r.length(), 2u);
  EXPECT_EQ(r.residues, (std::vector<std::uint8_t>{7, 7}));
  EXPECT_EQ(r.labels, (std::vector<std::uint8_t>{6, 6}));
  EXPECT_FLOAT_EQ(r.profile[21 + 20], 0.21f);
  EXPECT_EQ(r.profile.size(), 42u);
}

TEST(RawMatrix, FeaturesIgnoreNonFeatureColumns) {
  const auto d = small_set(4);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = raw_row(d.records[i]);
    const auto base = ps8::record_from_raw(row, i, "a");
    for (std::size_t t = 0; t < d.records[i].length(); ++t) {
      float* x = row.data() + t * 57;
      for (int k = 31; k < 35; ++k) x[k] = -12345.0f;  // terminals, solvent accessibility
      x[56] = -999.0f;                                   // profile NoSeq column
      std::fill(x + 22, x + 30, 0.0f);                   // move the label
      x[22 + (d.records[i].labels[t] + 3) % 8] = 1.0f;
    }
    const auto poisoned = ps8::record_from_raw(row, i, "a");
    EXPECT_EQ(poisoned.residues, base.residues);
    EXPECT_EQ(poisoned.profile, base.profile);
    EXPECT_NE(poisoned.labels, base.labels);
  }
}

TEST(RawMatrix, RejectsNonPrefixMaskNamingProtein) {
  ps8::ProteinRecord r{"p", {1, 2, 3, 4}, {0, 1, 2, 3}, std::vector<float>(84, 0.1f)};
  auto row = raw_row(r);
  float* x = row.data() + 1 * 57;  // turn position 1 into padding
  std::fill(x, x + 57, 0.0f);
  x[21] = 1;
  x[30] = 1;
  try {
    ps8::record_from_raw(row, 17, "p");
    FAIL() << "expected a validation error";
  } catch (const ps8::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("protein 17"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("prefix"), std::string::npos) << e.what();
  }
}

TEST(RawMatrix, RejectsMalformedRows) {
  ps8::ProteinRecord r{"p", {1, 2}, {0, 1}, std::vector<float>(42, 0.1f)};
  auto two_residues = raw_row(r);
  two_residues[5] = 1.0f;
  EXPECT_THROW(ps8::record_from_raw(two_residues, 0, "p"), ps8::ValidationError);
  auto no_label = raw_row(r);
  std::fill(no_label.begin() + 22, no_label.begin() + 31, 0.0f);
  EXPECT_THROW(ps8::record_from_raw(no_label, 0, "p"), ps8::ValidationError);
  auto padded_residue = raw_row(r);
  padded_residue[5 * 57 + 3] = 1.0f;
  EXPECT_THROW(ps8::record_from_raw(padded_residue, 0, "p"), ps8::ValidationError);
  auto bad_profile = raw_row(r);
  bad_profile[35] = 1.5f;
  EXPECT_THROW(ps8::record_from_raw(bad_profile, 0, "p"), ps8::ValidationError);
}

TEST(RawMatrix, FileRoundTripAndLengthCheck) {
  const auto dir = temp_dir("raw");
  const auto d = small_set(6);
  ps8::write_raw_matrix(d, dir / "d.bin", dir / "d.hdr");
  EXPECT_EQ(fs::file_size(dir / "d.bin"), 6u * 39900u * 4u);
  const auto back = ps8::load_raw_matrix(dir / "d.bin", dir / "d.hdr");
  ASSERT_EQ(back.size(), d.size());
  EXPECT_EQ(back.name, "tiny");
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.records[i].residues, d.records[i].residues);
    EXPECT_EQ(back.records[i].labels, d.records[i].labels);
    EXPECT_EQ(back.records[i].profile, d.records[i].profile);
  }
  fs::resize_file(dir / "d.bin", 6u * 39900u * 4u - 4u);
  EXPECT_THROW(ps8::load_raw_matrix(dir / "d.bin", dir / "d.hdr"), ps8::FormatError);
}

TEST(RawMatrix, HeaderValidation) {
  EXPECT_NO_THROW(ps8::parse_raw_header("name = x\ncount = 3\nrows = 700\ncols = 57\n"));
  EXPECT_THROW(ps8::parse_raw_header("name = x\ncount = 3\nrows = 700\ncols = 56\n"), ps8::FormatError);
  EXPECT_THROW(ps8::parse_raw_header("name = x\nrows = 700\ncols = 57\n"), ps8::FormatError);
  EXPECT_THROW(ps8::parse_raw_header("name = x\ncount = -1\nrows = 700\ncols = 57\n"), ps8::FormatError);
}

TEST(Psd8, RoundTripIsBitIdentical) {
  const auto dir = temp_dir("psd8");
  auto d = small_set(7);
  d.records[2].residues.clear();  // an empty protein survives too
  d.records[2].labels.clear();
  d.records[2].profile.clear();
  const std::string bytes = ps8::encode_psd8(d);
  const auto back = ps8::decode_psd8(bytes);
  EXPECT_EQ(back, d);
  EXPECT_EQ(ps8::encode_psd8(back), bytes);
  ps8::save_psd8(d, dir / "a.psd8");
  EXPECT_EQ(ps8::read_file(dir / "a.psd8"), bytes);
  EXPECT_EQ(ps8::load_psd8(dir / "a.psd8"), d);
}

TEST(Psd8, RejectsDamage) {
  const std::string bytes = ps8::encode_psd8(small_set(2));
  EXPECT_THROW(ps8::decode_psd8(bytes.substr(0, bytes.size() - 1)), ps8::FormatError);
  EXPECT_THROW(ps8::decode_psd8(bytes + "x"), ps8::FormatError);
  std::string magic = bytes;
  magic[0] = 'Q';
  EXPECT_THROW(ps8::decode_psd8(magic), ps8::FormatError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(ps8::decode_psd8(version), ps8::FormatError);
}

// Explicit index lists for the oracle.
std::vector<std::size_t> range(std::size_t a, std::size_t b) {
  std::vector<std::size_t> v;
  for (std::size_t i = a; i < b; ++i) v.push_back(i);
  return v;
}

TEST(Splits, PaperRanges) {
  const auto s = ps8::split_cullpdb6133(6133, ps8::SplitMode::paper);
  EXPECT_EQ(s.train.indices.size(), 5600u);
  EXPECT_EQ(s.test.indices.size(), 272u);
  EXPECT_EQ(s.valid.indices.size(), 256u);
  EXPECT_EQ(s.train.indices, range(0, 5600));
  EXPECT_EQ(s.test.indices, range(5605, 5877));
  EXPECT_EQ(s.valid.indices, range(5877, 6133));
  EXPECT_EQ(s.excluded, range(5600, 5605));
}

TEST(Splits, Train6128Mode) {
  const auto s = ps8::split_cullpdb6133(6133, ps8::SplitMode::train6128);
  auto want = range(0, 5605);
  for (auto i : range(5877, 6133)) want.push_back(i);
  EXPECT_EQ(s.train.indices, want);
  EXPECT_EQ(s.train.indices.size(), 5861u);
  EXPECT_EQ(s.test.indices, range(5605, 5877));
  EXPECT_TRUE(s.valid.indices.empty());
  EXPECT_TRUE(s.excluded.empty());
}

TEST(Splits, PartitionProperty) {
  for (auto mode : {ps8::SplitMode::paper, ps8::SplitMode::train6128}) {
    const auto s = ps8::split_cullpdb6133(6133, mode);
    std::multiset<std::size_t> all;
    for (const auto* v : {&s.train.indices, &s.valid.indices, &s.test.indices, &s.excluded}) all.insert(v->begin(), v->end());
    EXPECT_EQ(all.size(), 6133u);
    EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 6133u);
    EXPECT_EQ(*all.rbegin(), 6132u);
  }
  EXPECT_THROW(ps8::split_cullpdb6133(6132, ps8::SplitMode::paper), ps8::ValidationError);
}

TEST(Splits, FilteredSeededChoice) {
  const auto a = ps8::split_cullpdb6133_filtered(5534, 7);
  const auto b = ps8::split_cullpdb6133_filtered(5534, 7);
  const auto c = ps8::split_cullpdb6133_filtered(5534, 8);
  EXPECT_EQ(a.train.indices.size(), 5234u);
  EXPECT_EQ(a.valid.indices.size(), 300u);
  EXPECT_EQ(a.train.indices, b.train.indices);
  EXPECT_EQ(a.valid.indices, b.valid.indices);
  EXPECT_NE(a.valid.indices, c.valid.indices);
  std::set<std::size_t> all(a.train.indices.begin(), a.train.indices.end());
  all.insert(a.valid.indices.begin(), a.valid.indices.end());
  EXPECT_EQ(all.size(), 5534u);
  EXPECT_EQ(*all.rbegin(), 5533u);
  EXPECT_THROW(ps8::split_cullpdb6133_filtered(5533, 1), ps8::ValidationError);
}

TEST(Logistic, Properties) {
  ps8::Tensor<double> x(ps8::Shape{5});
  x[0] = 0;
  x[1] = 40;
  x[2] = -3.5;
  x[3] = 3.5;
  x[4] = 0.25;
  const auto y = ps8::logistic_rescale(x);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
  EXPECT_NEAR(y[2], 1.0 - y[3], 1e-7);
  ps8::Tensor<float> xf(ps8::Shape{1}, -0.25f);
  EXPECT_NEAR(ps8::logistic_rescale(xf)[0], 1.0f - static_cast<float>(y[4]), 1e-7);
}

TEST(Batches, CeilingDivisionCount) {
  std::vector<std::size_t> idx(5600);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto plan = ps8::plan_batches(idx, 64, 1, 1, true);
  EXPECT_EQ(plan.size(), (5600u + 63u) / 64u);
  EXPECT_EQ(plan.size(), 88u);
  for (std::size_t b = 0; b + 1 < plan.size(); ++b) EXPECT_EQ(plan[b].size(), 64u);
  EXPECT_EQ(plan.back().size(), 32u);
  std::set<std::size_t> seen;
  for (const auto& b : plan) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 5600u);
}

TEST(Batches, ShuffleDeterminism) {
  std::vector<std::size_t> idx{9, 3, 4, 8, 1, 0, 2, 7, 6, 5};
  const auto plain = ps8::plan_batches(idx, 3, 1, 1, false);
  std::vector<std::size_t> flat;
  for (const auto& b : plain) flat.insert(flat.end(), b.begin(), b.end());
  EXPECT_EQ(flat, idx);
  EXPECT_EQ(ps8::plan_batches(idx, 3, 5, 2, true), ps8::plan_batches(idx, 3, 5, 2, true));
  EXPECT_NE(ps8::plan_batches(idx, 3, 5, 2, true), ps8::plan_batches(idx, 3, 5, 3, true));
  EXPECT_THROW(ps8::plan_batches({}, 3, 1, 1, true), ps8::ValidationError);
  EXPECT_THROW(ps8::plan_batches(idx, 0, 1, 1, true), ps8::ConfigError);
}

TEST(Batches, FeatureLayout) {
  const auto d = small_set(3);
  const std::vector<std::size_t> idx{2, 0};
  const auto b = ps8::make_batch(d, idx);
  EXPECT_EQ(b.features.shape(), (ps8::Shape{2, 700, 42}));
  EXPECT_EQ(b.residues, d.records[2].length() + d.records[0].length());
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& r = d.records[idx[i]];
    const auto onehot = r.seq_onehot();
    const auto prof = r.profile_matrix();
    const auto labels = r.label_row();
    const auto mask = r.mask();
    for (std::size_t t = 0; t < 700; ++t) {
      for (std::size_t k = 0; k < 21; ++k) {
        ASSERT_EQ(b.features(i, t, k), onehot(t, k));
        ASSERT_EQ(b.features(i, t, 21 + k), prof(t, k));
      }
      ASSERT_EQ(b.labels[i * 700 + t], labels[t]);
      ASSERT_EQ(b.mask[i * 700 + t], mask[t]);
    }
  }
}

TEST(Synthetic, RecordsAreValidAndSeeded) {
  const auto a = small_set(20, 4), b = small_set(20, 4), c = small_set(20, 5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NO_THROW(ps8::validate_record(a.records[i], i));
}

}  // namespace
