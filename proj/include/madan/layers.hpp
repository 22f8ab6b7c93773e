#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "madan/autodiff.hpp"

namespace madan {

enum class Mode { train, eval };

/// Batch-norm affine parameters and running statistics for one layer.
template <typename T>
struct BatchNormParams {
  Parameter<T> gamma;
  Parameter<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormParams() = default;
  BatchNormParams(const std::string& prefix, std::size_t channels)
      : gamma(prefix + ".gamma", Tensor<T>(Shape{channels}, T(1))),
        beta(prefix + ".beta", Tensor<T>(Shape{channels}, T(0))),
        running_mean(channels, T(0)),
        running_var(channels, T(1)) {}

  std::size_t channels() const { return running_mean.size(); }
};

/// One conv -> BN -> IN -> ReLU unit. With instance_norm disabled it
/// degrades to the plain conv -> BN -> ReLU block of the baseline extractor.
template <typename T>
struct BinBlockParams {
  Parameter<T> kernel;
  Parameter<T> bias;
  BatchNormParams<T> bn;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool instance_norm = true;

  BinBlockParams() = default;
  BinBlockParams(const std::string& prefix, std::size_t in_channels, std::size_t out_channels, std::size_t ksize,
                 std::size_t stride_, std::size_t padding_, bool use_in)
      : kernel(prefix + ".conv.weight", Tensor<T>(Shape{out_channels, in_channels, ksize, ksize})),
        bias(prefix + ".conv.bias", Tensor<T>(Shape{out_channels})),
        bn(prefix + ".bn", out_channels),
        stride(stride_),
        padding(padding_),
        instance_norm(use_in) {}

  std::size_t out_channels() const { return kernel.value.dim(0); }
};

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into the running estimates (unbiased variance); eval mode is
/// a fixed per-channel affine map using the running estimates.
template <typename T>
ad::Var batch_norm(ad::Graph<T>& g, ad::Var x, BatchNormParams<T>& p, Mode mode) {
  ad::Var gamma = g.param(p.gamma);
  ad::Var beta = g.param(p.beta);
  if (mode == Mode::eval) {
    return ad::channel_affine_eval(g, x, gamma, beta, p.running_mean, p.running_var, p.eps);
  }
  ad::Moments<T> m;
  ad::Var y = ad::normalize(g, x, &gamma, &beta, p.eps, false, &m, "batch_norm");
  const Shape& s = g.shape(x);
  const T count = static_cast<T>(s[0] * s[2] * s[3]);
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const T unbiased = m.var[c] * count / (count - T(1));
    p.running_mean[c] = (T(1) - p.momentum) * p.running_mean[c] + p.momentum * m.mean[c];
    p.running_var[c] = (T(1) - p.momentum) * p.running_var[c] + p.momentum * unbiased;
  }
  return y;
}

/// Per-(sample, channel) normalization over H*W; identical in train and eval.
template <typename T>
ad::Var instance_norm(ad::Graph<T>& g, ad::Var x, T eps) {
  return ad::normalize<T>(g, x, nullptr, nullptr, eps, true, nullptr, "instance_norm");
}

template <typename T>
ad::Var bin_block(ad::Graph<T>& g, ad::Var x, BinBlockParams<T>& p, Mode mode) {
  ad::Var y = ad::conv2d(g, x, g.param(p.kernel), g.param(p.bias), p.stride, p.padding);
  y = batch_norm(g, y, p.bn, mode);
  if (p.instance_norm) y = instance_norm(g, y, p.bn.eps);
  return ad::relu(g, y);
}

using ad::grad_reverse;

}  // namespace madan
