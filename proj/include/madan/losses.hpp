#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "madan/autodiff.hpp"

namespace madan {

inline constexpr double kProbClamp = 1e-12;
inline constexpr std::uint8_t kUnlabeled = 255;

struct LossWeights {
  double mu = 0.1;
  double alpha = 0.1;
  double beta = 1.0;
};

struct LossBreakdown {
  double L_C = 0.0;
  double L_S = 0.0;
  double L_D = 0.0;
  double L_E = 0.0;
  double total = 0.0;
  LossWeights hyper;
};

/// Combines the four components; rejects non-finite components by name.
inline LossBreakdown total_loss(double L_C, double L_S, double L_D, double L_E, LossWeights w = {}) {
  const std::pair<const char*, double> parts[] = {{"L_C", L_C}, {"L_S", L_S}, {"L_D", L_D}, {"L_E", L_E}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw NumericError(std::string("loss component ") + name + " is not finite");
  }
  return {L_C, L_S, L_D, L_E, L_C + w.mu * L_S + w.alpha * L_D + w.beta * L_E, w};
}

namespace detail {

inline void check_label(std::uint8_t label, std::size_t n_classes) {
  if (label == kUnlabeled) throw DataError("label error: unlabeled (target) sample reached a supervised loss");
  if (label >= n_classes) {
    throw DataError("label error: class id " + std::to_string(label) + " out of range for " +
                    std::to_string(n_classes) + " classes");
  }
}

}  // namespace detail

// --- plain scalar forms over [N, K] probability rows ---

/// Mean of -ln p[i, y_i], probabilities clamped to [1e-12, 1].
inline double classification_loss(std::span<const double> probs, std::size_t n_classes,
                                  std::span<const std::uint8_t> labels) {
  if (probs.size() != labels.size() * n_classes) throw DimensionError("classification_loss: rows/labels mismatch");
  if (labels.empty()) throw ContractError("classification_loss: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::check_label(labels[i], n_classes);
    s -= std::log(std::max(probs[i * n_classes + labels[i]], kProbClamp));
  }
  return s / static_cast<double>(labels.size());
}

/// Binary cross-entropy averaged per domain, then summed:
/// -mean ln p(source samples) - mean ln(1 - p(target samples)).
inline double domain_loss(std::span<const double> p_source, std::span<const double> p_target) {
  if (p_source.empty() || p_target.empty()) throw ContractError("domain_loss: both domains need at least one sample");
  double s = 0.0, t = 0.0;
  for (double p : p_source) s -= std::log(std::max(p, kProbClamp));
  for (double p : p_target) t -= std::log(std::max(1.0 - p, kProbClamp));
  return s / static_cast<double>(p_source.size()) + t / static_cast<double>(p_target.size());
}

/// -(1/n) sum_i sum_c v_i p_ic ln p_ic.
inline double entropy_loss(std::span<const double> probs, std::size_t n_classes, std::span<const double> v) {
  if (probs.size() != v.size() * n_classes) throw DimensionError("entropy_loss: rows/weights mismatch");
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t c = 0; c < n_classes; ++c) {
      const double p = std::max(probs[i * n_classes + c], kProbClamp);
      s -= v[i] * p * std::log(p);
    }
  }
  return s / static_cast<double>(v.size());
}

// --- differentiable forms ---

namespace ad {

/// Scalar mean cross-entropy of probability rows against class labels.
template <typename T>
Var classification_loss(Graph<T>& g, Var probs, std::vector<std::uint8_t> labels) {
  const Shape& s = g.shape(probs);
  require_rank(s, 2, "classification_loss probs");
  if (s[0] != labels.size()) throw DimensionError("classification_loss: " + std::to_string(labels.size()) +
                                                  " labels for " + std::to_string(s[0]) + " rows");
  if (labels.empty()) throw ContractError("classification_loss: empty batch");
  const std::size_t k = s[1];
  const Tensor<T>& p = g.value(probs);
  T total = T(0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    madan::detail::check_label(labels[i], k);
    total -= std::log(std::max(p[i * k + labels[i]], static_cast<T>(kProbClamp)));
  }
  const T inv_n = T(1) / static_cast<T>(labels.size());
  auto fn = [labels = std::move(labels), k, inv_n](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_buffer(self)[0];
    const std::size_t pi = gr.input_id(self, 0);
    const Tensor<T>& p = gr.value_of(pi);
    Tensor<T>& gp = gr.grad_buffer(pi);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const T q = p[i * k + labels[i]];
      if (q >= static_cast<T>(kProbClamp)) gp[i * k + labels[i]] -= go * inv_n / q;
    }
  };
  return g.push("classification_loss", Tensor<T>::scalar(total * inv_n), {probs.id}, fn);
}

/// Domain BCE on source-probability outputs of one discriminator.
template <typename T>
Var domain_loss(Graph<T>& g, Var p_source, Var p_target) {
  const std::size_t ns = g.value(p_source).size(), nt = g.value(p_target).size();
  if (ns == 0 || nt == 0) throw ContractError("domain_loss: both domains need at least one sample");
  const T clamp = static_cast<T>(kProbClamp);
  T s = T(0), t = T(0);
  for (T p : g.value(p_source).values()) s -= std::log(std::max(p, clamp));
  for (T p : g.value(p_target).values()) t -= std::log(std::max(T(1) - p, clamp));
  const T inv_s = T(1) / static_cast<T>(ns), inv_t = T(1) / static_cast<T>(nt);
  auto fn = [inv_s, inv_t, clamp](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_buffer(self)[0];
    const std::size_t si = gr.input_id(self, 0), ti = gr.input_id(self, 1);
    if (gr.needs_grad(si)) {
      const Tensor<T>& p = gr.value_of(si);
      Tensor<T>& gp = gr.grad_buffer(si);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] >= clamp) gp[i] -= go * inv_s / p[i];
      }
    }
    if (gr.needs_grad(ti)) {
      const Tensor<T>& p = gr.value_of(ti);
      Tensor<T>& gp = gr.grad_buffer(ti);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (T(1) - p[i] >= clamp) gp[i] += go * inv_t / (T(1) - p[i]);
      }
    }
  };
  return g.push("domain_loss", Tensor<T>::scalar(s * inv_s + t * inv_t), {p_source.id, p_target.id}, fn);
}

/// -sum_i sum_c v_i p_ic ln p_ic (unnormalized; divide by the combined batch size).
template <typename T>
Var weighted_entropy_sum(Graph<T>& g, Var probs, std::vector<T> v) {
  const Shape& s = g.shape(probs);
  require_rank(s, 2, "weighted_entropy_sum probs");
  if (s[0] != v.size()) throw DimensionError("weighted_entropy_sum: weights/rows mismatch");
  const std::size_t k = s[1];
  const T clamp = static_cast<T>(kProbClamp);
  const Tensor<T>& p = g.value(probs);
  T total = T(0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const T q = std::max(p[i * k + c], clamp);
      total -= v[i] * q * std::log(q);
    }
  }
  auto fn = [v = std::move(v), k, clamp](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_buffer(self)[0];
    const std::size_t pi = gr.input_id(self, 0);
    const Tensor<T>& p = gr.value_of(pi);
    Tensor<T>& gp = gr.grad_buffer(pi);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t c = 0; c < k; ++c) {
        const T q = p[i * k + c];
        if (q >= clamp) gp[i * k + c] -= go * v[i] * (std::log(q) + T(1));
      }
    }
  };
  return g.push("weighted_entropy_sum", Tensor<T>::scalar(total), {probs.id}, fn);
}

}  // namespace ad
}  // namespace madan
