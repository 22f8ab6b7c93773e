#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "madan/data.hpp"
#include "madan/losses.hpp"
#include "madan/network.hpp"

namespace madan {

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient. Moment buffers are created on the first call.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, AdamState<T>& state, double lr) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                         std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter<T>& p = *params[k];
    if (!p.grad.same_shape(p.value) || !state.m[k].same_shape(p.value)) {
      throw DimensionError("adam_step: gradient/moment shape mismatch for " + p.name + " " +
                           shape_str(p.value.shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    Tensor<T>& m = state.m[k];
    Tensor<T>& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(m[i]) / c1;
      const double vhat = static_cast<double>(v[i]) / c2;
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 128;
  std::size_t epochs = 20;
  LossWeights weights;
  double grl_lambda = 1.0;
  std::uint64_t seed = 1;
  /// false: source-only training, no discriminators and no target data.
  bool domain_adaptation = true;
  bool feature_attention = true;
  bool entropy_attention = true;
  bool augment = false;
  double val_fraction = 0.1;

  void validate() const {
    if (batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (weights.mu < 0.0 || weights.alpha < 0.0 || weights.beta < 0.0) {
      throw ConfigError("loss weights mu, alpha, beta must be non-negative");
    }
    if (grl_lambda < 0.0) throw ConfigError("train.grl_lambda must be non-negative");
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("train.val_fraction must be in [0, 1)");
  }
};

struct EpochStats {
  std::size_t epoch = 0;
  double L_C = 0.0;
  double L_S = 0.0;
  double L_D = 0.0;
  double L_E = 0.0;
  double total = 0.0;
  double val_acc = 0.0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

/// Mutable state carried across epochs: optimizer moments, the fixed
/// train/validation split of the source set, and the epoch counter.
template <typename T>
struct TrainState {
  AdamState<T> adam;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  std::size_t epoch = 0;
};

enum RngPurpose : std::uint64_t { kSplitStream = 11, kShuffleStream, kAugmentStream, kInitStream };

template <typename T>
TrainState<T> prepare_training(const PatchDataset& source, const TrainConfig& cfg) {
  if (source.size() == 0) throw DataError("training: source dataset is empty");
  TrainState<T> st;
  std::vector<std::size_t> idx(source.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(cfg.seed, {kSplitStream});
  rng.shuffle(idx);
  std::size_t n_val = static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(idx.size())));
  if (cfg.val_fraction > 0.0 && idx.size() >= 2) n_val = std::max<std::size_t>(n_val, 1);
  n_val = std::min(n_val, idx.size() - 1);
  st.val_idx.assign(idx.begin(), idx.begin() + static_cast<long>(n_val));
  st.train_idx.assign(idx.begin() + static_cast<long>(n_val), idx.end());
  return st;
}

/// Fraction of samples whose argmax class equals the label.
template <typename T>
double accuracy(Model<T>& model, const PatchDataset& ds, const std::vector<std::size_t>& indices,
                const std::vector<std::uint8_t>* labels = nullptr) {
  if (indices.empty()) return 0.0;
  Tensor<T> probs = predict_proba(model, ds.batch<T>(indices));
  const std::size_t k = probs.dim(1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const T* row = probs.data() + i * k;
    const auto cls = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const std::uint8_t label = labels ? (*labels)[indices[i]] : ds.patches[indices[i]].label;
    hit += cls == label;
  }
  return static_cast<double>(hit) / static_cast<double>(indices.size());
}

namespace detail {

template <typename T>
Tensor<T> gather_batch(const PatchDataset& ds, const std::vector<std::size_t>& order, std::size_t start,
                       std::size_t count, const TrainConfig& cfg, std::size_t epoch, std::uint8_t domain,
                       std::vector<std::uint8_t>* labels) {
  Tensor<T> out(Shape{count, ds.channels, ds.height, ds.width});
  const std::size_t per = ds.patch_values();
  for (std::size_t j = 0; j < count; ++j) {
    const std::size_t pos = (start + j) % order.size();
    const Patch& src = ds.patches[order[pos]];
    if (labels) labels->push_back(src.label);
    if (cfg.augment) {
      Rng rng(cfg.seed, {kAugmentStream, epoch, domain, start + j});
      Patch p = augment(src, rng, ds.channels, ds.height, ds.width);
      std::copy(p.pixels.begin(), p.pixels.end(), out.data() + j * per);
    } else {
      std::copy(src.pixels.begin(), src.pixels.end(), out.data() + j * per);
    }
  }
  return out;
}

}  // namespace detail

/// Attention values of one step, per domain (index 0 source, 1 target).
struct StepAttention {
  std::array<std::vector<double>, 2> feature;
  std::array<std::vector<double>, 2> entropy;
};

/// Per-step losses as graph nodes plus their values.
struct StepLosses {
  ad::Var total;
  ad::Var L_C, L_S, L_D, L_E;
  LossBreakdown values;
  StepAttention attention;
};

/// Builds the full objective for one paired batch on graph g.
template <typename T>
StepLosses build_objective(ad::Graph<T>& g, Model<T>& model, const Tensor<T>& source_x,
                           const std::vector<std::uint8_t>& source_labels, const Tensor<T>* target_x,
                           const TrainConfig& cfg, const StepAttention* frozen = nullptr) {
  ForwardOptions opt;
  opt.mode = Mode::train;
  opt.use_discriminators = target_x != nullptr;
  opt.entropy_attention = cfg.entropy_attention;
  opt.grl_lambda = cfg.grl_lambda;
  auto options_for = [&](std::size_t d) {
    ForwardOptions o = opt;
    if (frozen) {
      o.fixed_v_feature = &frozen->feature[d];
      o.fixed_v_entropy = &frozen->entropy[d];
    }
    return o;
  };

  DomainForward fs = forward_domain(g, g.input(source_x), model, options_for(0));
  ad::Var lc = ad::classification_loss(g, fs.probs, source_labels);
  StepLosses out;
  out.L_C = lc;
  out.attention.feature[0] = fs.v_feature;
  out.attention.entropy[0] = fs.v_entropy;
  if (target_x == nullptr) {
    out.total = ad::weighted_sum<T>(g, {lc}, {T(1)});
    out.values = total_loss(static_cast<double>(g.value(lc)[0]), 0.0, 0.0, 0.0, {0.0, 0.0, 0.0});
    return out;
  }
  DomainForward ft = forward_domain(g, g.input(*target_x), model, options_for(1));
  out.attention.feature[1] = ft.v_feature;
  out.attention.entropy[1] = ft.v_entropy;
  ad::Var ls = ad::domain_loss(g, *fs.p_shallow, *ft.p_shallow);
  ad::Var ld = ad::domain_loss(g, *fs.p_deep, *ft.p_deep);
  ad::Var es = ad::weighted_entropy_sum(g, fs.probs, std::vector<T>(fs.v_entropy.begin(), fs.v_entropy.end()));
  ad::Var et = ad::weighted_entropy_sum(g, ft.probs, std::vector<T>(ft.v_entropy.begin(), ft.v_entropy.end()));
  const T inv_n = T(1) / static_cast<T>(fs.v_entropy.size() + ft.v_entropy.size());
  ad::Var le = ad::weighted_sum<T>(g, {es, et}, {inv_n, inv_n});
  const LossWeights& w = cfg.weights;
  out.total = ad::weighted_sum<T>(g, {lc, ls, ld, le},
                                  {T(1), static_cast<T>(w.mu), static_cast<T>(w.alpha), static_cast<T>(w.beta)});
  out.L_S = ls;
  out.L_D = ld;
  out.L_E = le;
  out.values = total_loss(g.value(lc)[0], g.value(ls)[0], g.value(ld)[0], g.value(le)[0], w);
  return out;
}

/// One pass over paired source/target batches. The epoch length is set by
/// the longer stream; the shorter one wraps around. Target labels are never
/// read.
template <typename T>
EpochStats train_epoch(Model<T>& model, const PatchDataset& source, const PatchDataset* target,
                       const TrainConfig& cfg, TrainState<T>& st) {
  if (st.train_idx.empty()) throw DataError("training: no source samples left after the validation split");
  const bool da = cfg.domain_adaptation && target != nullptr;
  if (cfg.domain_adaptation && (target == nullptr || target->size() == 0)) {
    throw DataError("training: domain adaptation needs a non-empty target dataset");
  }
  if (da && !model.has_discriminators()) throw ContractError("training: model was built without discriminators");
  const std::size_t epoch = st.epoch++;

  std::vector<std::size_t> src_order = st.train_idx;
  Rng(cfg.seed, {kShuffleStream, epoch, kSourceDomain}).shuffle(src_order);
  std::vector<std::size_t> tgt_order;
  if (da) {
    tgt_order.resize(target->size());
    for (std::size_t i = 0; i < tgt_order.size(); ++i) tgt_order[i] = i;
    Rng(cfg.seed, {kShuffleStream, epoch, kTargetDomain}).shuffle(tgt_order);
  }
  const std::size_t bs_src = std::min(cfg.batch_size, src_order.size());
  const std::size_t bs_tgt = da ? std::min(cfg.batch_size, tgt_order.size()) : 0;
  const std::size_t longest = std::max(src_order.size(), tgt_order.size());
  const std::size_t steps = (longest + cfg.batch_size - 1) / cfg.batch_size;

  auto params = model.parameters();
  EpochStats stats;
  stats.epoch = epoch + 1;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::uint8_t> labels;
    Tensor<T> xs = detail::gather_batch<T>(source, src_order, step * bs_src, bs_src, cfg, epoch, kSourceDomain, &labels);
    std::optional<Tensor<T>> xt;
    if (da) xt = detail::gather_batch<T>(*target, tgt_order, step * bs_tgt, bs_tgt, cfg, epoch, kTargetDomain, nullptr);

    ad::Graph<T> g;
    StepLosses losses = build_objective(g, model, xs, labels, xt ? &*xt : nullptr, cfg);
    model.zero_grad();
    g.backward(losses.total);
    adam_step<T>(params, st.adam, cfg.learning_rate);

    stats.L_C += losses.values.L_C;
    stats.L_S += losses.values.L_S;
    stats.L_D += losses.values.L_D;
    stats.L_E += losses.values.L_E;
    stats.total += losses.values.total;
  }
  const double inv = 1.0 / static_cast<double>(steps);
  stats.L_C *= inv;
  stats.L_S *= inv;
  stats.L_D *= inv;
  stats.L_E *= inv;
  stats.total *= inv;
  stats.val_acc = accuracy(model, source, st.val_idx.empty() ? st.train_idx : st.val_idx);
  return stats;
}

/// Model configuration adjusted to what the training setup needs.
inline ModelConfig model_for_training(ModelConfig mc, const TrainConfig& cfg) {
  mc.discriminators = cfg.domain_adaptation;
  mc.feature_attention = cfg.domain_adaptation && cfg.feature_attention;
  return mc;
}

struct FitResult {
  Model<float> model;
  std::vector<EpochStats> log;
};

template <typename Callback>
FitResult fit(const TrainConfig& cfg, const ModelConfig& model_cfg, const PatchDataset& source,
              const PatchDataset* target, Callback&& on_epoch) {
  cfg.validate();
  FitResult out{Model<float>(model_for_training(model_cfg, cfg)), {}};
  out.model.initialize(stream_seed(cfg.seed, {kInitStream}));
  TrainState<float> st = prepare_training<float>(source, cfg);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    out.log.push_back(train_epoch(out.model, source, cfg.domain_adaptation ? target : nullptr, cfg, st));
    on_epoch(out.log.back());
  }
  return out;
}

inline FitResult fit(const TrainConfig& cfg, const ModelConfig& model_cfg, const PatchDataset& source,
                     const PatchDataset* target) {
  return fit(cfg, model_cfg, source, target, [](const EpochStats&) {});
}

inline std::string format_epoch_line(const EpochStats& s) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << s.epoch << ',' << s.L_C << ',' << s.L_S << ',' << s.L_D << ',' << s.L_E << ',' << s.total << ','
     << s.val_acc;
  return os.str();
}

/// Training log: optional "# "-prefixed preamble lines, the column header,
/// then one line per epoch.
inline std::string format_training_log(const std::vector<EpochStats>& log, const std::string& preamble = {}) {
  std::ostringstream os;
  std::istringstream pre(preamble);
  for (std::string line; std::getline(pre, line);) os << "# " << line << '\n';
  os << "epoch,L_C,L_S,L_D,L_E,total,val_acc\n";
  for (const auto& s : log) os << format_epoch_line(s) << '\n';
  return os.str();
}

}  // namespace madan
