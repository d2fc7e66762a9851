#pragma once

// Feature, module-count and skip-connection ablations at configurable scale.
// Reports carry the full-scale reference accuracies as annotations only.

#include <cstdio>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ps8/eval.hpp"
#include "ps8/trainer.hpp"

namespace ps8 {

enum class Study { features, modules, skip };

inline const char* to_string(Study s) {
  switch (s) {
    case Study::features: return "features";
    case Study::modules: return "modules";
    case Study::skip: return "skip";
  }
  return "?";
}

inline Study parse_study(std::string_view s) {
  if (s == "features") return Study::features;
  if (s == "modules") return Study::modules;
  if (s == "skip") return Study::skip;
  throw ConfigError("unknown study `" + std::string(s) + "` (expected features, modules or skip)");
}

/// Evaluation columns of a study, in report order.
inline std::vector<std::string> study_columns(Study s) {
  if (s == Study::features) return {"CB513"};
  return {"CullPdb6133", "CB513", "CASP10", "CASP11"};
}

struct AblationVariant {
  std::string setup;
  NetConfig config;
  std::vector<double> reference;  // fractions, one per column
};

/// The variants of a study derived from `base` (already scaled).
inline std::vector<AblationVariant> study_variants(Study s, const NetConfig& base) {
  std::vector<AblationVariant> out;
  auto with = [&](std::string setup, std::vector<double> ref, auto&& edit) {
    NetConfig c = base;
    edit(c);
    c.validate();
    out.push_back({std::move(setup), std::move(c), std::move(ref)});
  };
  switch (s) {
    case Study::features:
      with("sequence-only", {0.6157}, [](NetConfig& c) { c.features = FeatureSet::sequence; });
      with("profile-only", {0.6972}, [](NetConfig& c) { c.features = FeatureSet::profile; });
      with("sequence+profile", {0.7194}, [](NetConfig& c) { c.features = FeatureSet::both; });
      break;
    case Study::modules: {
      const std::vector<std::vector<double>> refs{{0.7297, 0.6839, 0.7351, 0.7024},
                                                  {0.7588, 0.7061, 0.7570, 0.7293},
                                                  {0.7689, 0.7194, 0.7686, 0.7526},
                                                  {0.7519, 0.7004, 0.7485, 0.7363},
                                                  {0.7434, 0.6947, 0.7379, 0.7254}};
      const std::size_t wide = base.module_widths.front();
      const std::size_t narrow = base.module_widths.size() > 1 ? base.module_widths[1] : wide;
      for (std::size_t n = 1; n <= 5; ++n)
        with(std::to_string(n) + (n == 1 ? " module" : " modules"), refs[n - 1],
             [&](NetConfig& c) { c.module_widths = module_widths_for_count(n, wide, narrow); });
      break;
    }
    case Study::skip:
      with("no skip", {0.6952, 0.6349, 0.7001, 0.6873}, [](NetConfig& c) {
        c.inner_skip = false;
        c.link_skip = false;
      });
      with("SK1 only", {0.7324, 0.6919, 0.7463, 0.7314}, [](NetConfig& c) {
        c.inner_skip = true;
        c.link_skip = false;
      });
      with("SK1+SK2", {0.7689, 0.7194, 0.7686, 0.7526}, [](NetConfig& c) {
        c.inner_skip = true;
        c.link_skip = true;
      });
      break;
  }
  return out;
}

struct AblationRow {
  std::string setup;
  std::size_t parameters = 0;
  std::vector<double> q8;
  std::vector<double> reference;
};

struct AblationReport {
  Study study = Study::modules;
  std::vector<std::string> columns;
  std::vector<AblationRow> rows;
};

struct AblationData {
  Dataset train;
  Dataset valid;  // may be empty
  /// One dataset per study column, matched by name.
  std::vector<std::pair<std::string, Dataset>> eval;

  const Dataset& column(const std::string& name) const {
    for (const auto& [n, d] : eval)
      if (n == name) return d;
    throw ValidationError("ablation: no evaluation set for column `" + name + "`");
  }
};

/// Trains and evaluates every variant of `study`. Each variant starts from
/// the same seed and sees the same batches.
inline AblationReport run_ablation(Study study, const NetConfig& base, const AblationData& data, TrainConfig train_cfg,
                                   const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationReport rep{study, study_columns(study), {}};
  for (const auto& col : rep.columns) (void)data.column(col);
  train_cfg.out_dir.clear();
  train_cfg.resume = false;
  for (const auto& v : study_variants(study, base)) {
    auto net = build_ps8net<float>(v.config, train_cfg.seed);
    train(net, data.train, data.valid, train_cfg);
    AblationRow row{v.setup, parameter_count(net), {}, v.reference};
    for (const auto& col : rep.columns) row.q8.push_back(evaluate(net, data.column(col), train_cfg.eval_batch_size).q8);
    if (on_row) on_row(row);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

/// `setup,parameters,<columns>,ref_<columns>`; accuracies as fractions.
inline std::string format_ablation_csv(const AblationReport& r) {
  std::string out = "setup,parameters";
  for (const auto& c : r.columns) out += "," + c;
  for (const auto& c : r.columns) out += ",ref_" + c;
  out += "\n";
  char buf[64];
  for (const auto& row : r.rows) {
    out += row.setup + "," + std::to_string(row.parameters);
    for (double q : row.q8) {
      std::snprintf(buf, sizeof buf, ",%.6f", q);
      out += buf;
    }
    for (double q : row.reference) {
      std::snprintf(buf, sizeof buf, ",%.4f", q);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string format_ablation_table(const AblationReport& r) {
  char buf[128];
  std::string out = std::string("study: ") + to_string(r.study) + "  (Q8 %, full-scale reference in brackets)\n";
  std::snprintf(buf, sizeof buf, "%-18s %10s", "setup", "params");
  out += buf;
  for (const auto& c : r.columns) {
    std::snprintf(buf, sizeof buf, " %20s", c.c_str());
    out += buf;
  }
  out += "\n";
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%-18s %10zu", row.setup.c_str(), row.parameters);
    out += buf;
    for (std::size_t i = 0; i < row.q8.size(); ++i) {
      std::snprintf(buf, sizeof buf, "      %6.2f [%6.2f]", 100.0 * row.q8[i], 100.0 * row.reference[i]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace ps8
