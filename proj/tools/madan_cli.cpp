// madan: synthetic data, training, detection, evaluation and diagnostics.
//
// Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
// 3 I/O or file-format error, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "madan/experiment.hpp"

namespace fs = std::filesystem;
using namespace madan;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  apply_seed_overrides(cfg, c.seed);
  return cfg;
}

void echo(const ExperimentConfig& cfg) {
  std::cout << "# effective configuration\n";
  std::istringstream in(format_config(cfg));
  for (std::string line; std::getline(in, line);) std::cout << "#   " << line << '\n';
  std::cout.flush();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

int cmd_synth(const Common& c, const std::string& out) {
  ExperimentConfig cfg = resolve(c);
  cfg.validate();
  echo(cfg);
  const SynthOutput data = synth_generate(cfg.effective_synth());
  const fs::path dir(out);
  ensure_dir(dir);
  write_patches(data.source.patches, dir / "src.madp");
  write_patches(data.target.patches, dir / "tgt.madp");
  write_image(data.source.scene.image, dir / "src.mimg");
  write_image(data.target.scene.image, dir / "tgt.mimg");
  io::write_text(dir / "src_gt.csv", format_ground_truth_csv(data.source.scene.ground_truth));
  io::write_text(dir / "tgt_gt.csv", format_ground_truth_csv(data.target.scene.ground_truth));
  std::cout << "wrote " << data.source.patches.size() << " source and " << data.target.patches.size()
            << " target patches, 2 scenes, 2 ground-truth files to " << dir.string() << '\n';
  return kOk;
}

int cmd_train(const Common& c, const std::string& source, const std::string& target, const std::string& out,
              const std::string& ablation) {
  ExperimentConfig cfg = resolve(c);
  if (!ablation.empty()) cfg = apply_variant(cfg, ablation);
  cfg.validate();
  echo(cfg);
  const TrainConfig tc = cfg.effective_train();
  const PatchDataset src = read_patches(source);
  std::optional<PatchDataset> tgt;
  if (tc.domain_adaptation) {
    if (target.empty()) throw ConfigError("train: --target is required for domain adaptation");
    tgt = read_patches(target);
  }
  const fs::path dir(out);
  ensure_dir(dir);
  FitResult r = fit(tc, cfg.model, src, tgt ? &*tgt : nullptr,
                    [](const EpochStats& s) { std::cout << format_epoch_line(s) << std::endl; });
  save_checkpoint(r.model, dir / "model.madm");
  io::write_text(dir / "train_log.csv", format_training_log(r.log, format_config(cfg)));
  std::cout << "checkpoint: " << (dir / "model.madm").string() << '\n';
  return kOk;
}

int cmd_detect(const Common& c, const std::string& model_path, const std::string& image_path, const std::string& out,
               bool raw) {
  ExperimentConfig cfg = resolve(c);
  cfg.validate();
  echo(cfg);
  Model<float> model = load_checkpoint<float>(model_path);
  const Image img = read_image(image_path);
  auto boxes = detect_scene(img, model, cfg.detect);
  const std::size_t n_raw = boxes.size();
  if (!raw) boxes = merge_detections(std::move(boxes), cfg.merge_iou);
  io::write_text(out, format_detections_csv(boxes));
  std::cout << n_raw << " raw detections, " << boxes.size() << " written to " << out << '\n';
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& dets_path, const std::string& gt_path, const std::string& out) {
  ExperimentConfig cfg = resolve(c);
  cfg.validate();
  echo(cfg);
  const auto dets = parse_boxes_csv(io::read_text(dets_path), dets_path);
  const auto gts = parse_boxes_csv(io::read_text(gt_path), gt_path);
  const MatchResult m = match_detections(dets, gts, cfg.match_iou);
  const fs::path dir(out);
  ensure_dir(dir);
  io::write_text(dir / "metrics.csv", format_metrics_csv(m));
  io::write_text(dir / "metrics.txt", format_metrics_report(m));
  std::cout << format_metrics_report(m);
  return kOk;
}

int cmd_diagnose(const Common& c, const std::string& model_path, const std::string& source, const std::string& target,
                 const std::string& out) {
  ExperimentConfig cfg = resolve(c);
  cfg.validate();
  echo(cfg);
  Model<float> model = load_checkpoint<float>(model_path);
  const DivergenceReport r = feature_divergence(model, read_patches(source), read_patches(target), cfg.kl_form);
  io::write_text(out, format_divergence_csv(r));
  std::cout << format_divergence_report(r);
  return kOk;
}

int cmd_run_experiment(const Common& c, const std::string& out) {
  ExperimentConfig cfg = resolve(c);
  cfg.validate();
  echo(cfg);
  const fs::path dir(out);
  ensure_dir(dir);
  auto write = [&](const std::vector<VariantResult>& rows, const std::string& marker) {
    io::write_text(dir / "results.csv", marker + format_results_csv(rows));
    io::write_text(dir / "results.txt", marker + format_results_table(rows));
  };
  try {
    const auto rows = run_experiment(cfg, [](const VariantResult& r) {
      std::cout << r.variant << " seed " << r.seed << ": F1 " << r.metrics.f1 << "%" << std::endl;
    });
    write(rows, "");
    std::cout << format_results_table(rows);
  } catch (const ExperimentFailure& e) {
    write(e.partial, "# PARTIAL RESULTS: " + std::string(e.what()) + "\n");
    std::cerr << "error: " << e.what() << "\npartial results written to " << dir.string() << '\n';
    return e.exit_code;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MADAN domain-adaptive palm detection pipeline"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_flag = 0;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", common.config, "key=value configuration file");
    if (config_required) opt->required();
    sub->add_option("--seed", seed_flag, "seed (overrides MADAN_SEED and the config file)");
  };

  std::string out, source, target, model, image, dets, gt, ablation;
  bool raw = false;

  auto* synth = app.add_subcommand("synth", "generate the synthetic two-domain dataset");
  synth->add_option("--spec", common.config, "configuration file with synth.* keys");
  synth->add_option("--seed", seed_flag, "seed (overrides MADAN_SEED and the spec)");
  synth->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, false);
  train->add_option("--source", source, "labeled source patches (.madp)")->required();
  train->add_option("--target", target, "unlabeled target patches (.madp)");
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--ablation", ablation, "variant name, e.g. baseline, bin, madan_no_mer, madan");

  auto* detect = app.add_subcommand("detect", "sliding-window detection on a scene");
  add_common(detect, false);
  detect->add_option("--model", model, "checkpoint (.madm)")->required();
  detect->add_option("--image", image, "scene (.mimg)")->required();
  detect->add_option("--out", out, "detections CSV")->required();
  detect->add_flag("--raw", raw, "skip IOU merging");

  auto* evaluate = app.add_subcommand("evaluate", "score detections against ground truth");
  add_common(evaluate, false);
  evaluate->add_option("--detections", dets, "detections CSV")->required();
  evaluate->add_option("--ground-truth", gt, "ground-truth CSV")->required();
  evaluate->add_option("--out", out, "output directory")->required();

  auto* diagnose = app.add_subcommand("diagnose", "feature divergence between two patch sets");
  add_common(diagnose, false);
  diagnose->add_option("--model", model, "checkpoint (.madm)")->required();
  diagnose->add_option("--source", source, "source patches (.madp)")->required();
  diagnose->add_option("--target", target, "target patches (.madp)")->required();
  diagnose->add_option("--out", out, "divergence CSV")->required();

  auto* experiment = app.add_subcommand("run-experiment", "train and score every configured variant");
  add_common(experiment, true);
  experiment->add_option("--out", out, "output directory")->required();

  app.add_subcommand("config-reference", "print every configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  for (auto* sub : app.get_subcommands()) {
    const auto* opt = sub->get_option_no_throw("--seed");
    if (opt != nullptr && opt->count() > 0) common.seed = seed_flag;
  }

  try {
    if (*synth) return cmd_synth(common, out);
    if (*train) return cmd_train(common, source, target, out, ablation);
    if (*detect) return cmd_detect(common, model, image, out, raw);
    if (*evaluate) return cmd_evaluate(common, dets, gt, out);
    if (*diagnose) return cmd_diagnose(common, model, source, target, out);
    if (*experiment) return cmd_run_experiment(common, out);
    std::cout << config_reference();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
