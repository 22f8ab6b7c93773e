#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "madan/config.hpp"

namespace madan {

/// Names accepted by apply_variant, in table order.
inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {
      "baseline",          "bin",                  "madan_no_mer",         "madan",
      "bn_no_attention",   "bn_feature_attention", "bn_entropy_attention", "bn_multi_attention",
      "bin_no_attention",  "bin_feature_attention", "bin_entropy_attention", "bin_multi_attention",
      "upper_bound"};
  return names;
}

inline const std::vector<std::string>& attention_ablation_variants() {
  static const std::vector<std::string> names = {
      "bn_no_attention",  "bn_feature_attention",  "bn_entropy_attention",  "bn_multi_attention",
      "bin_no_attention", "bin_feature_attention", "bin_entropy_attention", "bin_multi_attention"};
  return names;
}

/// Overrides the ablation switches of `cfg` for a named variant.
inline ExperimentConfig apply_variant(ExperimentConfig cfg, const std::string& name) {
  auto source_only = [&](bool bin) {
    cfg.model.bin = bin;
    cfg.train.domain_adaptation = false;
    cfg.train.weights = {0.0, 0.0, 0.0};
    cfg.mer = false;
  };
  auto adapted = [&](bool bin, bool feature, bool entropy, bool mer) {
    cfg.model.bin = bin;
    cfg.train.domain_adaptation = true;
    cfg.train.feature_attention = feature;
    cfg.train.entropy_attention = entropy;
    cfg.mer = mer;
  };
  if (name == "baseline") {
    source_only(false);
  } else if (name == "bin" || name == "upper_bound") {
    source_only(true);
  } else if (name == "madan_no_mer") {
    adapted(true, true, true, false);
  } else if (name == "madan") {
    adapted(true, true, true, true);
  } else {
    const std::string prefix = name.substr(0, name.find('_'));
    const std::string rest = name.find('_') == std::string::npos ? "" : name.substr(name.find('_') + 1);
    if (prefix != "bn" && prefix != "bin") throw ConfigError("unknown variant '" + name + "'");
    const bool bin = prefix == "bin";
    // MER only runs together with the entropy-level weighting it feeds.
    if (rest == "no_attention") {
      adapted(bin, false, false, false);
    } else if (rest == "feature_attention") {
      adapted(bin, true, false, false);
    } else if (rest == "entropy_attention") {
      adapted(bin, false, true, true);
    } else if (rest == "multi_attention") {
      adapted(bin, true, true, true);
    } else {
      throw ConfigError("unknown variant '" + name + "'");
    }
  }
  return cfg;
}

struct VariantResult {
  std::string variant;
  std::uint64_t seed = 0;
  MatchResult match;
  Prf1 metrics;
  double divergence = 0.0;
  double target_entropy = 0.0;
  std::vector<EpochStats> log;
};

/// The labeled target patch set (target patches with their held-back labels).
inline PatchDataset labeled_target(const DomainData& target) {
  PatchDataset ds = target.patches;
  if (target.labels.size() != ds.size()) throw DataError("target labels do not match the target patches");
  for (std::size_t i = 0; i < ds.size(); ++i) ds.patches[i].label = target.labels[i];
  return ds;
}

/// Detection metrics of a trained model on one scene.
inline MatchResult evaluate_scene(Model<float>& model, const Scene& scene, const ExperimentConfig& cfg) {
  auto raw = detect_scene(scene.image, model, cfg.detect);
  auto merged = merge_detections(std::move(raw), cfg.merge_iou);
  return match_detections(merged, scene.ground_truth, cfg.match_iou);
}

/// Trains one variant on already generated data and scores it on the
/// target scene. `upper_bound` trains on the labeled target patches.
inline VariantResult run_variant(const ExperimentConfig& base, const std::string& name, const SynthOutput& data) {
  const ExperimentConfig cfg = apply_variant(base, name);
  cfg.validate();
  const TrainConfig tc = cfg.effective_train();
  VariantResult r;
  r.variant = name;
  r.seed = cfg.seed;
  const PatchDataset* target = tc.domain_adaptation ? &data.target.patches : nullptr;
  FitResult fitted = name == "upper_bound" ? fit(tc, cfg.model, labeled_target(data.target), nullptr)
                                           : fit(tc, cfg.model, data.source.patches, target);
  r.log = std::move(fitted.log);
  r.match = evaluate_scene(fitted.model, data.target.scene, cfg);
  r.metrics = prf1(r.match);
  r.divergence = feature_divergence(fitted.model, data.source.patches, data.target.patches, cfg.kl_form).overall;
  std::vector<std::size_t> all(data.target.patches.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  r.target_entropy = mean_prediction_entropy(predict_proba(fitted.model, data.target.patches.batch<float>(all)));
  return r;
}

inline std::string format_results_csv(const std::vector<VariantResult>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "variant,seed,tp,fp,fn,precision,recall,f1,divergence,target_entropy\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.seed << ',' << r.match.tp << ',' << r.match.fp << ',' << r.match.fn << ','
       << r.metrics.precision << ',' << r.metrics.recall << ',' << r.metrics.f1 << ',';
    os.precision(6);
    os << r.divergence << ',' << r.target_entropy << '\n';
    os.precision(4);
  }
  return os.str();
}

inline std::string format_results_table(const std::vector<VariantResult>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  os << pad("variant", 24) << pad("seed", 8) << pad("P%", 9) << pad("R%", 9) << pad("F1%", 9) << pad("div", 12)
     << "entropy\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line.setf(std::ios::fixed);
    line.precision(2);
    line << pad(r.variant, 24) << pad(std::to_string(r.seed), 8);
    auto num = [&](double v, int prec, std::size_t w) {
      std::ostringstream c;
      c.setf(std::ios::fixed);
      c.precision(prec);
      c << v;
      line << pad(c.str(), w);
    };
    num(r.metrics.precision, 2, 9);
    num(r.metrics.recall, 2, 9);
    num(r.metrics.f1, 2, 9);
    num(r.divergence, 5, 12);
    num(r.target_entropy, 4, 0);
    os << line.str() << '\n';
  }
  return os.str();
}

struct ExperimentFailure : Error {
  std::vector<VariantResult> partial;
  int exit_code;
  ExperimentFailure(const std::string& msg, std::vector<VariantResult> rows, int code)
      : Error(msg), partial(std::move(rows)), exit_code(code) {}
};

/// Runs every configured variant for every seed, sequentially. Data is
/// generated once per seed and shared by all variants. On failure the rows
/// finished so far travel in ExperimentFailure.
inline std::vector<VariantResult> run_experiment(
    const ExperimentConfig& cfg, const std::function<void(const VariantResult&)>& on_row = {}) {
  for (const auto& v : cfg.variants) apply_variant(cfg, v);
  const std::vector<std::uint64_t> seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
  std::vector<VariantResult> rows;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig run = cfg;
    run.seed = seed;
    std::optional<SynthOutput> data;
    for (const auto& v : cfg.variants) {
      try {
        if (!data) data = synth_generate(run.effective_synth());
        rows.push_back(run_variant(run, v, *data));
      } catch (const NumericError& e) {
        throw ExperimentFailure("variant " + v + " (seed " + std::to_string(seed) + "): " + e.what(), rows, 4);
      } catch (const ConfigError& e) {
        throw ExperimentFailure("variant " + v + " (seed " + std::to_string(seed) + "): " + e.what(), rows, 2);
      } catch (const Error& e) {
        throw ExperimentFailure("variant " + v + " (seed " + std::to_string(seed) + "): " + e.what(), rows, 1);
      }
      if (on_row) on_row(rows.back());
    }
  }
  return rows;
}

}  // namespace madan
