#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "madan/boxes.hpp"
#include "madan/data.hpp"
#include "madan/network.hpp"

namespace madan {

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  /// (detection index, ground-truth index) in input order.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
};

/// Greedy assignment: detections in descending score order (stable), each
/// taking the unmatched ground truth of highest iou when it reaches iou_min.
/// Equal iou prefers the ground truth with the smaller (y_lt, x_lt).
inline MatchResult match_detections(const std::vector<DetectionBox>& dets, const std::vector<DetectionBox>& gts,
                                    double iou_min = 0.5) {
  for (const auto& b : dets) require_valid(b, "match_detections detection");
  for (const auto& b : gts) require_valid(b, "match_detections ground truth");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> used(gts.size(), false);
  MatchResult r;
  for (std::size_t d : order) {
    std::size_t best = gts.size();
    double best_iou = -1.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double o = iou(dets[d], gts[j]);
      if (o < iou_min) continue;
      const bool better = o > best_iou ||
                          (o == best_iou && std::tie(gts[j].y_lt, gts[j].x_lt) < std::tie(gts[best].y_lt, gts[best].x_lt));
      if (better) {
        best = j;
        best_iou = o;
      }
    }
    if (best < gts.size()) {
      used[best] = true;
      r.pairs.emplace_back(d, best);
    }
  }
  r.tp = r.pairs.size();
  r.fp = dets.size() - r.tp;
  r.fn = gts.size() - r.tp;
  return r;
}

struct Prf1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Precision, recall and F1 in percent; every 0/0 ratio is 0.
inline Prf1 prf1(std::size_t tp, std::size_t fp, std::size_t fn) {
  auto ratio = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  const double t = static_cast<double>(tp);
  Prf1 m;
  m.precision = 100.0 * ratio(t, t + static_cast<double>(fp));
  m.recall = 100.0 * ratio(t, t + static_cast<double>(fn));
  m.f1 = ratio(2.0 * m.precision * m.recall, m.precision + m.recall);
  return m;
}

inline Prf1 prf1(const MatchResult& r) { return prf1(r.tp, r.fp, r.fn); }

// --- feature divergence ---

enum class KlForm { standard, mu_squared };

inline constexpr double kSigmaFloor = 1e-6;

namespace detail {

inline double floored_sigma(double s, const char* which) {
  if (!std::isfinite(s) || s < 0.0) throw NumericError(std::string("gaussian_symmetric_kl: invalid ") + which);
  return std::max(s, kSigmaFloor);
}

inline double gaussian_kl(double mp, double sp, double mq, double sq, KlForm form) {
  const double d = mp - mq;
  if (form == KlForm::standard) return std::log(sq / sp) + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5;
  // mu_squared: 2*mu_Q^2 denominator, inverted log ratio
  return std::log(sp / sq) + (sp * sp + d * d) / (2.0 * mq * mq) - 0.5;
}

}  // namespace detail

/// KL(S||T) + KL(T||S) for univariate Gaussians; sigmas are floored at 1e-6.
inline double gaussian_symmetric_kl(double mu_s, double sigma_s, double mu_t, double sigma_t,
                                    KlForm form = KlForm::standard) {
  const double ss = detail::floored_sigma(sigma_s, "sigma_S"), st = detail::floored_sigma(sigma_t, "sigma_T");
  const double d = detail::gaussian_kl(mu_s, ss, mu_t, st, form) + detail::gaussian_kl(mu_t, st, mu_s, ss, form);
  if (!std::isfinite(d)) throw NumericError("gaussian_symmetric_kl: result is not finite");
  // exact cancellation can leave a tiny negative residue
  return form == KlForm::standard ? std::max(d, 0.0) : d;
}

struct ChannelStats {
  double mean = 0.0;
  double sigma = 0.0;
};

struct DivergenceReport {
  /// values[l][c]
  std::vector<std::vector<double>> values;
  std::vector<double> layer_means;
  double overall = 0.0;
};

/// Per-(layer, channel) mean and standard deviation of every block's
/// post-ReLU activation, pooled over samples and spatial positions.
template <typename T>
std::vector<std::vector<ChannelStats>> activation_stats(Model<T>& model, const PatchDataset& ds,
                                                        std::size_t chunk = 256) {
  if (ds.size() < 2) throw DataError("feature divergence needs at least 2 patches per domain, got " +
                                     std::to_string(ds.size()));
  const std::size_t layers = model.blocks().size();
  std::vector<std::vector<double>> sum(layers), sq(layers);
  std::vector<double> count(layers, 0.0);
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t m = std::min(chunk, ds.size() - start);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), start);
    ad::Graph<T> g;
    ad::Var x = g.input(ds.batch<T>(idx));
    FeaturePair f = extract_features(g, x, model, Mode::eval);
    for (std::size_t l = 0; l < layers; ++l) {
      const Tensor<T>& a = g.value(f.block_outputs[l]);
      const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
      sum[l].resize(c, 0.0);
      sq[l].resize(c, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* p = a.data() + (i * c + ch) * hw;
          for (std::size_t k = 0; k < hw; ++k) {
            const double v = static_cast<double>(p[k]);
            sum[l][ch] += v;
            sq[l][ch] += v * v;
          }
        }
      }
      count[l] += static_cast<double>(n * hw);
    }
  }
  std::vector<std::vector<ChannelStats>> out(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t ch = 0; ch < sum[l].size(); ++ch) {
      const double mean = sum[l][ch] / count[l];
      const double var = std::max(sq[l][ch] / count[l] - mean * mean, 0.0);
      out[l].push_back({mean, std::sqrt(var)});
    }
  }
  return out;
}

inline DivergenceReport divergence_from_stats(const std::vector<std::vector<ChannelStats>>& s,
                                              const std::vector<std::vector<ChannelStats>>& t,
                                              KlForm form = KlForm::standard) {
  if (s.size() != t.size()) throw DimensionError("divergence: layer count differs between domains");
  DivergenceReport r;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < s.size(); ++l) {
    if (s[l].size() != t[l].size()) throw DimensionError("divergence: channel count differs in layer " + std::to_string(l));
    std::vector<double> row;
    for (std::size_t c = 0; c < s[l].size(); ++c) {
      row.push_back(gaussian_symmetric_kl(s[l][c].mean, s[l][c].sigma, t[l][c].mean, t[l][c].sigma, form));
    }
    const double layer_sum = std::accumulate(row.begin(), row.end(), 0.0);
    r.layer_means.push_back(row.empty() ? 0.0 : layer_sum / static_cast<double>(row.size()));
    total += layer_sum;
    n += row.size();
    r.values.push_back(std::move(row));
  }
  r.overall = n ? total / static_cast<double>(n) : 0.0;
  return r;
}

template <typename T>
DivergenceReport feature_divergence(Model<T>& model, const PatchDataset& source, const PatchDataset& target,
                                    KlForm form = KlForm::standard) {
  return divergence_from_stats(activation_stats(model, source), activation_stats(model, target), form);
}

/// Mean over rows of -sum_c p ln p for [N, K] probabilities.
template <typename T>
double mean_prediction_entropy(const Tensor<T>& probs) {
  require_rank(probs.shape(), 2, "mean_prediction_entropy");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      const double p = static_cast<double>(probs[i * k + c]);
      if (p > 0.0) s -= p * std::log(p);
    }
  }
  return s / static_cast<double>(n);
}

// --- reports ---

inline std::string format_metrics_csv(const MatchResult& r) {
  const Prf1 m = prf1(r);
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "metric,value\n"
     << "tp," << r.tp << "\nfp," << r.fp << "\nfn," << r.fn << '\n'
     << "precision," << m.precision << "\nrecall," << m.recall << "\nf1," << m.f1 << '\n';
  return os.str();
}

inline std::string format_metrics_report(const MatchResult& r) {
  const Prf1 m = prf1(r);
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "true positives:  " << r.tp << '\n'
     << "false positives: " << r.fp << '\n'
     << "false negatives: " << r.fn << '\n'
     << "precision: " << m.precision << "%\n"
     << "recall:    " << m.recall << "%\n"
     << "F1:        " << m.f1 << "%\n";
  return os.str();
}

inline std::string format_divergence_csv(const DivergenceReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "layer,channel,divergence\n";
  for (std::size_t l = 0; l < r.values.size(); ++l) {
    for (std::size_t c = 0; c < r.values[l].size(); ++c) os << l << ',' << c << ',' << r.values[l][c] << '\n';
  }
  return os.str();
}

inline std::string format_divergence_report(const DivergenceReport& r) {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t l = 0; l < r.layer_means.size(); ++l) os << "layer " << l << " mean divergence: " << r.layer_means[l] << '\n';
  os << "overall divergence: " << r.overall << '\n';
  return os.str();
}

}  // namespace madan
