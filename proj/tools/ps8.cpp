#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ps8/ablation.hpp"
#include "ps8/checkpoint.hpp"
#include "ps8/diagnostics.hpp"
#include "ps8/eval.hpp"
#include "ps8/run_config.hpp"
#include "ps8/trainer.hpp"

namespace fs = std::filesystem;

namespace {

// Flags shared by the workflow subcommands. Each one overrides the config
// file only when given on the command line.
struct CommonFlags {
  std::string config;
  std::string data;
  std::string out;
  std::string dataset;
  std::string split_mode;
  std::uint64_t seed = 0;
  double scale = 1.0;
  CLI::Option *data_opt = nullptr, *out_opt = nullptr, *dataset_opt = nullptr, *split_opt = nullptr,
              *seed_opt = nullptr, *scale_opt = nullptr;

  void add_to(CLI::App& app) {
    const ps8::RunConfig d;
    app.add_option("--config", config, "key = value run configuration file")->check(CLI::ExistingFile);
    data_opt = app.add_option("--data", data, "canonical PSD8 file of the training corpus");
    out_opt = app.add_option("--out", out, "output directory")->default_str(d.out.string());
    dataset_opt = app.add_option("--dataset", dataset, "corpus layout")
                      ->check(CLI::IsMember({"cullpdb6133", "cullpdb6133-filtered"}))
                      ->default_str(ps8::to_string(d.dataset));
    split_opt = app.add_option("--split-mode", split_mode, "CullPDB6133 split")
                    ->check(CLI::IsMember({"paper", "train6128"}))
                    ->default_str(ps8::to_string(d.split_mode));
    seed_opt = app.add_option("--seed", seed, "seed for initialization, shuffling, dropout and splits")
                   ->default_str(std::to_string(d.seed));
    scale_opt = app.add_option("--scale", scale, "width and epoch multiplier")->default_str(ps8::format_double(d.scale));
  }

  ps8::RunConfig resolve() const {
    ps8::RunConfig cfg;
    if (!config.empty()) cfg = ps8::load_run_config(config);
    auto set = [&](CLI::Option* o, const char* key, const std::string& v) {
      if (o && o->count()) cfg.apply(key, v);
    };
    set(data_opt, "data", data);
    set(out_opt, "out", out);
    set(dataset_opt, "dataset", dataset);
    set(split_opt, "split_mode", split_mode);
    set(seed_opt, "seed", std::to_string(seed));
    set(scale_opt, "scale", ps8::format_double(scale));
    cfg.validate();
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) { ps8::write_file(path, text); }

int run_preprocess(const std::string& raw, const std::string& meta, const std::string& out) {
  const ps8::Dataset d = ps8::load_raw_matrix(raw, meta);
  ps8::save_psd8(d, out);
  std::printf("%zu records\n", d.size());
  return 0;
}

struct SynthFlags {
  std::string kind = "cullpdb6133";
  std::size_t count = 0;
  std::size_t min_length = 40, max_length = 300;
  std::uint64_t seed = 1;
  std::string out;
};

int run_synth(const SynthFlags& f) {
  static const std::map<std::string, std::size_t> sizes{{"cullpdb6133", ps8::kCullPdb6133Count},
                                                        {"cullpdb6133-filtered", ps8::kCullPdbFilteredCount},
                                                        {"cb513", 514},
                                                        {"casp10", 123},
                                                        {"casp11", 105}};
  ps8::SyntheticOptions o;
  o.name = f.kind;
  o.count = f.count ? f.count : sizes.at(f.kind);
  o.min_length = f.min_length;
  o.max_length = f.max_length;
  o.seed = f.seed;
  const ps8::Dataset d = ps8::make_synthetic(o);
  ps8::save_psd8(d, f.out);
  std::printf("%zu records\n", d.size());
  return 0;
}

void report_tests(ps8::Ps8Net<float>& net, const ps8::RunData& data, const ps8::RunConfig& cfg,
                  const std::string& checkpoint) {
  const ps8::RunPaths paths{cfg.out};
  auto one = [&](const std::string& name, const ps8::Dataset& d) {
    if (d.size() == 0) return;
    auto rep = ps8::evaluate(net, d, cfg.train.eval_batch_size, checkpoint);
    rep.dataset = name;
    write_text(paths.reports() / (name + ".txt"), ps8::format_report(rep));
    std::printf("%-12s Q8 %.4f over %llu residues\n", name.c_str(), rep.q8,
                static_cast<unsigned long long>(rep.residues));
  };
  one("valid", data.valid);
  for (const auto& [name, d] : data.tests) one(name, d);
}

int run_train(const CommonFlags& flags) {
  const ps8::RunConfig cfg = flags.resolve();
  const ps8::RunData data = ps8::load_run_data(cfg);
  const ps8::TrainConfig tc = cfg.scaled_train();
  auto net = ps8::build_ps8net<float>(cfg.scaled_net(), cfg.seed);
  fs::create_directories(cfg.out);
  write_text(cfg.out / "run.cfg", cfg.describe());
  std::printf("train %zu proteins, valid %zu, %zu parameters, %zu epochs\n", data.train.size(), data.valid.size(),
              ps8::parameter_count(net), tc.epochs);
  const auto result = ps8::train(net, data.train, data.valid, tc, [](const ps8::EpochMetrics& m) {
    std::printf("epoch %4zu  lr %.3g  train_loss %.5f  val_loss %.5f  val_q8 %.4f\n", m.epoch, m.lr, m.train_loss,
                m.val_loss, m.val_q8);
    std::fflush(stdout);
  });
  auto best = ps8::load_checkpoint(result.best_checkpoint);
  report_tests(best.net, data, cfg, result.best_checkpoint.string());
  std::printf("best checkpoint %s (epoch %zu)\n", result.best_checkpoint.string().c_str(), result.state.best_epoch);
  return 0;
}

ps8::Dataset select_split(const ps8::Dataset& all, const std::string& split, const ps8::RunConfig& cfg) {
  if (split == "all") return all;
  const ps8::SplitSet s = cfg.dataset == ps8::DatasetKind::cullpdb6133
                              ? ps8::split_cullpdb6133(all.size(), cfg.split_mode)
                              : ps8::split_cullpdb6133_filtered(all.size(), cfg.seed);
  const auto& part = split == "train" ? s.train : split == "valid" ? s.valid : s.test;
  return ps8::subset(all, part.indices, all.name + "." + split);
}

int run_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& split,
             const std::string& report) {
  const ps8::RunConfig cfg = flags.resolve();
  if (cfg.data.empty()) throw ps8::ConfigError("`data` is not set (use --data or a config file)");
  auto ck = ps8::load_checkpoint(checkpoint);
  const ps8::Dataset d = ps8::first_n(select_split(ps8::load_psd8(cfg.data), split, cfg), cfg.eval_subset);
  const auto rep = ps8::evaluate(ck.net, d, cfg.train.eval_batch_size, checkpoint);
  const std::string text = ps8::format_report(rep);
  std::fputs(text.c_str(), stdout);
  if (!report.empty()) write_text(report, text);
  return 0;
}

int run_predict(const CommonFlags& flags, const std::string& checkpoint, const std::string& split,
                const std::string& output) {
  const ps8::RunConfig cfg = flags.resolve();
  if (cfg.data.empty()) throw ps8::ConfigError("`data` is not set (use --data or a config file)");
  auto ck = ps8::load_checkpoint(checkpoint);
  const ps8::Dataset d = select_split(ps8::load_psd8(cfg.data), split, cfg);
  const std::string text = ps8::format_predictions(ps8::predict(ck.net, d, cfg.train.eval_batch_size));
  if (output.empty() || output == "-") std::fputs(text.c_str(), stdout);
  else write_text(output, text);
  return 0;
}

int run_ablate(const CommonFlags& flags, const std::string& study_name) {
  const ps8::RunConfig cfg = flags.resolve();
  const ps8::Study study = ps8::parse_study(study_name);
  const ps8::RunData run = ps8::load_run_data(cfg);
  ps8::AblationData data{run.train, run.valid, run.tests};
  for (const auto& col : ps8::study_columns(study))
    if (std::none_of(data.eval.begin(), data.eval.end(), [&](const auto& e) { return e.first == col; }))
      throw ps8::ConfigError("study `" + study_name + "` needs an evaluation set for column " + col +
                             (col == "CullPdb6133" ? " (use --dataset cullpdb6133)" : " (set `test." + col + "`)"));
  const ps8::TrainConfig tc = cfg.scaled_train();
  std::printf("ablation %s: %zu training proteins, %zu epochs per variant\n", study_name.c_str(), data.train.size(),
              tc.epochs);
  const auto rep = ps8::run_ablation(study, cfg.scaled_net(), data, tc, [](const ps8::AblationRow& r) {
    std::printf("  %-18s done\n", r.setup.c_str());
    std::fflush(stdout);
  });
  const ps8::RunPaths paths{cfg.out};
  write_text(paths.reports() / ("ablation_" + study_name + ".csv"), ps8::format_ablation_csv(rep));
  const std::string table = ps8::format_ablation_table(rep);
  write_text(paths.reports() / ("ablation_" + study_name + ".txt"), table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

int run_gradcheck(std::uint64_t seed, double tolerance) {
  double worst = 0.0;
  ps8::run_gradient_suite(seed, 1e-3, [&](const ps8::GradCase& c) {
    worst = std::max(worst, c.result.max_rel_error);
    std::printf("%s  %s\n", ps8::format_grad_case(c).c_str(), c.result.max_rel_error < tolerance ? "ok" : "FAIL");
    std::fflush(stdout);
  });
  std::printf("max relative error %.3e (tolerance %.0e)\n", worst, tolerance);
  return worst < tolerance ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Eight-state protein secondary structure prediction with a multi-branch convolutional network"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.footer("Run configuration keys and defaults (`key = value`, `#` comments; flags override the file):\n" +
             ps8::RunConfig{}.describe() + "test.<NAME> = <psd8 path> adds an evaluation set.");

  auto* pre = app.add_subcommand("preprocess", "convert a raw 700x57 float32 matrix into the canonical PSD8 file");
  std::string raw, meta, pre_out;
  pre->add_option("--raw", raw, "raw little-endian float32 matrix")->required()->check(CLI::ExistingFile);
  pre->add_option("--meta", meta, "header with name and protein count")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", pre_out, "PSD8 output path")->required();

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus in PSD8 form");
  SynthFlags sf;
  synth->add_option("--kind", sf.kind, "corpus whose size to mimic")
      ->check(CLI::IsMember({"cullpdb6133", "cullpdb6133-filtered", "cb513", "casp10", "casp11"}))
      ->capture_default_str();
  synth->add_option("--count", sf.count, "protein count (0 uses the corpus size)")->capture_default_str();
  synth->add_option("--min-length", sf.min_length, "shortest protein")->capture_default_str();
  synth->add_option("--max-length", sf.max_length, "longest protein")->capture_default_str();
  synth->add_option("--seed", sf.seed, "record seed")->capture_default_str();
  synth->add_option("--out", sf.out, "PSD8 output path")->required();

  CommonFlags train_flags, eval_flags, predict_flags, ablate_flags;
  auto* train = app.add_subcommand("train", "train, checkpoint every epoch, and report on the held-out sets");
  train_flags.add_to(*train);

  auto* eval = app.add_subcommand("eval", "Q8, loss and confusion matrix of a checkpoint");
  eval_flags.add_to(*eval);
  std::string eval_ckpt, eval_split = "test", eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "part of --data to score")
      ->check(CLI::IsMember({"all", "train", "valid", "test"}))
      ->capture_default_str();
  eval->add_option("--report", eval_report, "also write the report here");

  auto* pred = app.add_subcommand("predict", "per-protein DSSP state strings");
  predict_flags.add_to(*pred);
  std::string pred_ckpt, pred_split = "all", pred_output = "-";
  pred->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  pred->add_option("--split", pred_split, "part of --data to predict")
      ->check(CLI::IsMember({"all", "train", "valid", "test"}))
      ->capture_default_str();
  pred->add_option("--output", pred_output, "prediction file, - for stdout")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "feature, module-count or skip-connection study");
  ablate_flags.add_to(*ablate);
  std::string study;
  ablate->add_option("--study", study, "which study")->required()->check(CLI::IsMember({"features", "modules", "skip"}));

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every layer type");
  std::uint64_t grad_seed = 1;
  double tolerance = 1e-4;
  grad->add_option("--seed", grad_seed, "seed for test points")->capture_default_str();
  grad->add_option("--tolerance", tolerance, "maximum relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pre) return run_preprocess(raw, meta, pre_out);
    if (*synth) return run_synth(sf);
    if (*train) return run_train(train_flags);
    if (*eval) return run_eval(eval_flags, eval_ckpt, eval_split, eval_report);
    if (*pred) return run_predict(predict_flags, pred_ckpt, pred_split, pred_output);
    if (*ablate) return run_ablate(ablate_flags, study);
    if (*grad) return run_gradcheck(grad_seed, tolerance);
  } catch (const ps8::ConfigError& e) {
    std::fprintf(stderr, "ps8: invalid configuration: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ps8: %s\n", e.what());
    return 1;
  }
  return 1;
}
