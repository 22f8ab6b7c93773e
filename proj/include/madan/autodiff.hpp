#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is a tape: every op appends a node holding its forward value and a
// closure that propagates the node's gradient into its inputs. backward()
// walks the tape once in reverse order. Trainable leaves are bound to
// Parameter objects and their gradients are accumulated into Parameter::grad
// so that repeated backward calls add up until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "madan/errors.hpp"
#include "madan/tensor.hpp"

namespace madan {

/// Named trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

namespace ad {

struct Var {
  std::size_t id = 0;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf; receives no gradient.
  Var input(Tensor<T> value) { return push("input", std::move(value), {}, nullptr, false); }

  /// Leaf that tracks a gradient but is not bound to a parameter.
  Var variable(Tensor<T> value) { return push("variable", std::move(value), {}, nullptr, true); }

  /// Trainable leaf; backward() accumulates into p.grad.
  Var param(Parameter<T>& p) {
    Var v = push("param", p.value, {}, nullptr, true);
    nodes_[v.id].param = &p;
    return v;
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const char* op_name(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs_of(Var v) const { return nodes_.at(v.id).inputs; }

  /// Gradient of the last backward() loss w.r.t. this node (zeros if untouched).
  const Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.grad.same_shape(n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Appends an op node. Inputs must already be on the tape.
  Var push(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn,
           bool force_grad = false) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    bool rg = force_grad;
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw ContractError(std::string("op '") + op + "' references a future node");
      rg = rg || nodes_[in].requires_grad;
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  /// Gradient buffer of node `id`, allocated on first touch.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad.same_shape(n.value)) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
  std::size_t input_id(std::size_t self, std::size_t k) const { return nodes_[self].inputs[k]; }

  /// Reverse sweep from a scalar loss. Parameter gradients accumulate.
  void backward(Var loss) {
    if (loss.id >= nodes_.size()) throw ContractError("backward: unknown loss node");
    if (nodes_[loss.id].value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) {
      if (n.requires_grad) {
        if (!n.grad.same_shape(n.value)) n.grad = Tensor<T>(n.value.shape());
        n.grad.fill(T(0));
      }
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        Parameter<T>& p = *n.param;
        if (!p.grad.same_shape(p.value)) p.grad = Tensor<T>(p.value.shape());
        auto& g = nodes_[i].grad;
        for (std::size_t k = 0; k < g.size(); ++k) p.grad[k] += g[k];
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// cols is (Cin*kh*kw) x (Ho*Wo), row-major.
template <typename T>
void im2col(const T* img, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols + ((ci * kh + i) * kw + j) * p;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
          T* dst = row + oh * wo;
          if (ih < 0 || ih >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = img + (ci * h + static_cast<std::size_t>(ih)) * w;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(w)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* img) {
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = cols + ((ci * kh + i) * kw + j) * p;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(h)) continue;
          T* dst = img + (ci * h + static_cast<std::size_t>(ih)) * w;
          const T* src = row + oh * wo;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
            if (iw >= 0 && iw < static_cast<long>(w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// 2-D cross-correlation. input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout].
template <typename T>
Var conv2d(Graph<T>& g, Var input, Var kernel, Var bias, std::size_t stride, std::size_t padding) {
  const Shape& xs = g.shape(input);
  const Shape& ks = g.shape(kernel);
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernel");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (ks[1] != xs[1]) {
    throw DimensionError("conv2d: kernel axis 1 (Cin=" + std::to_string(ks[1]) + ") does not match input axis 1 (C=" +
                         std::to_string(xs[1]) + ")");
  }
  if (g.shape(bias) != Shape{ks[0]}) {
    throw DimensionError("conv2d: bias shape " + shape_str(g.shape(bias)) + " does not match kernel axis 0 (Cout=" +
                         std::to_string(ks[0]) + ")");
  }
  if (ks[2] > xs[2] + 2 * padding || ks[3] > xs[3] + 2 * padding) {
    throw DimensionError("conv2d: kernel axes 2,3 " + shape_str(ks) + " exceed padded input axes 2,3 of " +
                         shape_str(xs));
  }
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
  const std::size_t ho = detail::conv_out_extent(h, kh, stride, padding);
  const std::size_t wo = detail::conv_out_extent(w, kw, stride, padding);
  const std::size_t kdim = cin * kh * kw, p = ho * wo;

  Tensor<T> out(Shape{n, cout, ho, wo});
  {
    const Tensor<T>& x = g.value(input);
    const Tensor<T>& k = g.value(kernel);
    const Tensor<T>& b = g.value(bias);
    std::vector<T> cols(kdim * p);
    detail::ConstMatMap<T> wm(k.data(), cout, kdim);
    for (std::size_t s = 0; s < n; ++s) {
      detail::im2col(x.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, ho, wo, cols.data());
      detail::ConstMatMap<T> cm(cols.data(), kdim, p);
      detail::MatMap<T> om(out.data() + s * cout * p, cout, p);
      om.noalias() = wm * cm;
      for (std::size_t c = 0; c < cout; ++c) om.row(c).array() += b[c];
    }
  }

  auto fn = [=](Graph<T>& gr, std::size_t self) {
    const std::size_t xi = gr.input_id(self, 0), ki = gr.input_id(self, 1), bi = gr.input_id(self, 2);
    const Tensor<T>& gout = gr.grad_buffer(self);
    const Tensor<T>& x = gr.value_of(xi);
    const Tensor<T>& k = gr.value_of(ki);
    std::vector<T> cols(kdim * p);
    std::vector<T> gcols(kdim * p);
    detail::ConstMatMap<T> wm(k.data(), cout, kdim);
    for (std::size_t s = 0; s < n; ++s) {
      detail::ConstMatMap<T> gm(gout.data() + s * cout * p, cout, p);
      if (gr.needs_grad(ki)) {
        detail::im2col(x.data() + s * cin * h * w, cin, h, w, kh, kw, stride, padding, ho, wo, cols.data());
        detail::ConstMatMap<T> cm(cols.data(), kdim, p);
        detail::MatMap<T> gw(gr.grad_buffer(ki).data(), cout, kdim);
        gw.noalias() += gm * cm.transpose();
      }
      if (gr.needs_grad(bi)) {
        Tensor<T>& gb = gr.grad_buffer(bi);
        for (std::size_t c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
      }
      if (gr.needs_grad(xi)) {
        detail::MatMap<T> gc(gcols.data(), kdim, p);
        gc.noalias() = wm.transpose() * gm;
        detail::col2im_add(gcols.data(), cin, h, w, kh, kw, stride, padding, ho, wo,
                           gr.grad_buffer(xi).data() + s * cin * h * w);
      }
    }
  };
  return g.push("conv2d", std::move(out), {input.id, kernel.id, bias.id}, fn);
}

/// Max pooling; backward routes to the first row-major argmax of each window.
template <typename T>
Var maxpool2d(Graph<T>& g, Var input, std::size_t size, std::size_t stride) {
  const Shape& xs = g.shape(input);
  require_rank(xs, 4, "maxpool2d input");
  if (size == 0 || stride == 0) throw ContractError("maxpool2d: size and stride must be positive");
  if (size > xs[2] || size > xs[3]) {
    throw DimensionError("maxpool2d: window " + std::to_string(size) + " exceeds spatial axes 2,3 of " +
                         shape_str(xs));
  }
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t ho = (h - size) / stride + 1, wo = (w - size) / stride + 1;
  const Tensor<T>& x = g.value(input);
  Tensor<T> out(Shape{n, c, ho, wo});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = (oh * stride) * w + ow * stride;
        for (std::size_t i = 0; i < size; ++i) {
          for (std::size_t j = 0; j < size; ++j) {
            const std::size_t idx = (oh * stride + i) * w + ow * stride + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (plane * ho + oh) * wo + ow;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
    }
  }
  auto fn = [argmax = std::move(argmax)](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t o = 0; o < gout.size(); ++o) gin[argmax[o]] += gout[o];
  };
  return g.push("maxpool2d", std::move(out), {input.id}, fn);
}

/// Fully connected layer. x [N,I], weight [O,I], bias [O] -> [N,O].
template <typename T>
Var linear(Graph<T>& g, Var x, Var weight, Var bias) {
  const Shape& xs = g.shape(x);
  const Shape& ws = g.shape(weight);
  require_rank(xs, 2, "linear input");
  require_rank(ws, 2, "linear weight");
  if (ws[1] != xs[1]) {
    throw DimensionError("linear: weight axis 1 (" + std::to_string(ws[1]) + ") does not match input axis 1 (" +
                         std::to_string(xs[1]) + ")");
  }
  if (g.shape(bias) != Shape{ws[0]}) {
    throw DimensionError("linear: bias shape " + shape_str(g.shape(bias)) + " does not match weight axis 0");
  }
  const std::size_t n = xs[0], in = xs[1], out_dim = ws[0];
  Tensor<T> out(Shape{n, out_dim});
  {
    detail::ConstMatMap<T> xm(g.value(x).data(), n, in);
    detail::ConstMatMap<T> wm(g.value(weight).data(), out_dim, in);
    detail::MatMap<T> om(out.data(), n, out_dim);
    om.noalias() = xm * wm.transpose();
    const Tensor<T>& b = g.value(bias);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) om(r, c) += b[c];
    }
  }
  auto fn = [=](Graph<T>& gr, std::size_t self) {
    const std::size_t xi = gr.input_id(self, 0), wi = gr.input_id(self, 1), bi = gr.input_id(self, 2);
    detail::ConstMatMap<T> gm(gr.grad_buffer(self).data(), n, out_dim);
    if (gr.needs_grad(xi)) {
      detail::ConstMatMap<T> wm(gr.value_of(wi).data(), out_dim, in);
      detail::MatMap<T> gx(gr.grad_buffer(xi).data(), n, in);
      gx.noalias() += gm * wm;
    }
    if (gr.needs_grad(wi)) {
      detail::ConstMatMap<T> xm(gr.value_of(xi).data(), n, in);
      detail::MatMap<T> gw(gr.grad_buffer(wi).data(), out_dim, in);
      gw.noalias() += gm.transpose() * xm;
    }
    if (gr.needs_grad(bi)) {
      Tensor<T>& gb = gr.grad_buffer(bi);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < out_dim; ++c) gb[c] += gm(r, c);
      }
    }
  };
  return g.push("linear", std::move(out), {x.id, weight.id, bias.id}, fn);
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  auto fn = [](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& y = gr.value_of(self);
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > T(0)) gin[i] += gout[i];
    }
  };
  return g.push("relu", std::move(out), {x.id}, fn);
}

template <typename T>
Var sigmoid(Graph<T>& g, Var x) {
  Tensor<T> out = g.value(x);
  for (auto& v : out.values()) {
    v = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  auto fn = [](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& y = gr.value_of(self);
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t i = 0; i < y.size(); ++i) gin[i] += gout[i] * y[i] * (T(1) - y[i]);
  };
  return g.push("sigmoid", std::move(out), {x.id}, fn);
}

/// Row-wise softmax over the last axis of an [N,K] tensor.
template <typename T>
Var softmax(Graph<T>& g, Var logits) {
  const Shape& s = g.shape(logits);
  require_rank(s, 2, "softmax input");
  const std::size_t n = s[0], k = s[1];
  Tensor<T> out = g.value(logits);
  for (std::size_t r = 0; r < n; ++r) {
    T* row = out.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T sum = T(0);
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (std::size_t c = 0; c < k; ++c) row[c] /= sum;
  }
  auto fn = [n, k](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& y = gr.value_of(self);
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t r = 0; r < n; ++r) {
      T dot = T(0);
      for (std::size_t c = 0; c < k; ++c) dot += gout[r * k + c] * y[r * k + c];
      for (std::size_t c = 0; c < k; ++c) gin[r * k + c] += y[r * k + c] * (gout[r * k + c] - dot);
    }
  };
  return g.push("softmax", std::move(out), {logits.id}, fn);
}

/// Reshape to [N, rest].
template <typename T>
Var flatten(Graph<T>& g, Var x) {
  const Shape& s = g.shape(x);
  if (s.empty()) throw DimensionError("flatten: rank-0 input");
  const std::size_t n = s[0];
  Tensor<T> out = g.value(x).reshaped(Shape{n, n == 0 ? 0 : g.value(x).size() / n});
  auto fn = [](Graph<T>& gr, std::size_t self) {
    detail::add_into(gr.grad_buffer(gr.input_id(self, 0)), gr.grad_buffer(self));
  };
  return g.push("flatten", std::move(out), {x.id}, fn);
}

/// Identity forward; backward multiplies the incoming gradient by -lambda.
/// lambda = -1 turns it into a plain identity (handy for gradient checks).
template <typename T>
Var grad_reverse(Graph<T>& g, Var x, T lambda) {
  if (!std::isfinite(static_cast<double>(lambda))) throw ContractError("grad_reverse: lambda must be finite");
  auto fn = [lambda](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] -= lambda * gout[i];
  };
  return g.push("grad_reverse", g.value(x), {x.id}, fn);
}

/// Multiplies every element of sample i by the constant scale[i] (no gradient to scale).
template <typename T>
Var scale_samples(Graph<T>& g, Var x, std::vector<T> scale) {
  const Shape& s = g.shape(x);
  if (s.empty() || s[0] != scale.size()) {
    throw DimensionError("scale_samples: " + std::to_string(scale.size()) + " scales for input of shape " +
                         shape_str(s));
  }
  const std::size_t n = s[0];
  const std::size_t per = n == 0 ? 0 : g.value(x).size() / n;
  Tensor<T> out = g.value(x);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < per; ++j) out[i * per + j] *= scale[i];
  }
  auto fn = [scale = std::move(scale), n, per](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < per; ++j) gin[i * per + j] += scale[i] * gout[i * per + j];
    }
  };
  return g.push("scale_samples", std::move(out), {x.id}, fn);
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
  if (g.shape(a) != g.shape(b)) {
    throw DimensionError("add: shapes " + shape_str(g.shape(a)) + " and " + shape_str(g.shape(b)) + " differ");
  }
  Tensor<T> out = g.value(a);
  detail::add_into(out, g.value(b));
  auto fn = [](Graph<T>& gr, std::size_t self) {
    for (std::size_t k = 0; k < 2; ++k) {
      const std::size_t in = gr.input_id(self, k);
      if (gr.needs_grad(in)) detail::add_into(gr.grad_buffer(in), gr.grad_buffer(self));
    }
  };
  return g.push("add", std::move(out), {a.id, b.id}, fn);
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
  if (g.shape(a) != g.shape(b)) {
    throw DimensionError("mul: shapes " + shape_str(g.shape(a)) + " and " + shape_str(g.shape(b)) + " differ");
  }
  Tensor<T> out = g.value(a);
  const Tensor<T>& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto fn = [](Graph<T>& gr, std::size_t self) {
    const std::size_t ai = gr.input_id(self, 0), bi = gr.input_id(self, 1);
    const Tensor<T>& gout = gr.grad_buffer(self);
    const Tensor<T>& av = gr.value_of(ai);
    const Tensor<T>& bv = gr.value_of(bi);
    if (gr.needs_grad(ai)) {
      Tensor<T>& ga = gr.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[i] * bv[i];
    }
    if (gr.needs_grad(bi)) {
      Tensor<T>& gb = gr.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gout[i] * av[i];
    }
  };
  return g.push("mul", std::move(out), {a.id, b.id}, fn);
}

template <typename T>
Var scale(Graph<T>& g, Var a, T factor) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v *= factor;
  auto fn = [factor](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_buffer(self);
    Tensor<T>& gin = gr.grad_buffer(gr.input_id(self, 0));
    for (std::size_t i = 0; i < gout.size(); ++i) gin[i] += factor * gout[i];
  };
  return g.push("scale", std::move(out), {a.id}, fn);
}

/// Sum of all elements as a [1] tensor.
template <typename T>
Var sum(Graph<T>& g, Var a) {
  T total = T(0);
  for (T v : g.value(a).values()) total += v;
  auto fn = [](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_buffer(self)[0];
    for (auto& v : gr.grad_buffer(gr.input_id(self, 0)).values()) v += go;
  };
  return g.push("sum", Tensor<T>::scalar(total), {a.id}, fn);
}

/// sum_k weights[k] * terms[k] over scalar nodes.
template <typename T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& terms, std::vector<T> weights) {
  if (terms.size() != weights.size()) throw ContractError("weighted_sum: terms/weights length mismatch");
  T total = T(0);
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (g.value(terms[k]).size() != 1) throw DimensionError("weighted_sum: term " + std::to_string(k) + " not scalar");
    total += weights[k] * g.value(terms[k])[0];
    ids.push_back(terms[k].id);
  }
  auto fn = [weights = std::move(weights)](Graph<T>& gr, std::size_t self) {
    const T go = gr.grad_buffer(self)[0];
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const std::size_t in = gr.input_id(self, k);
      if (gr.needs_grad(in)) gr.grad_buffer(in)[0] += weights[k] * go;
    }
  };
  return g.push("weighted_sum", Tensor<T>::scalar(total), std::move(ids), fn);
}

/// Per-group mean and biased variance.
template <typename T>
struct Moments {
  std::vector<T> mean;
  std::vector<T> var;
};

namespace detail {

struct NormLayout {
  std::size_t outer, channels, inner;
  bool per_outer;
  std::size_t groups() const { return per_outer ? outer * channels : channels; }
  std::size_t group_len() const { return per_outer ? inner : outer * inner; }
  std::size_t group_of(std::size_t o, std::size_t c) const { return per_outer ? o * channels + c : c; }
};

template <typename T>
Moments<T> group_moments(const Tensor<T>& x, const NormLayout& L) {
  Moments<T> m{std::vector<T>(L.groups(), T(0)), std::vector<T>(L.groups(), T(0))};
  const T inv = T(1) / static_cast<T>(L.group_len());
  for (std::size_t o = 0; o < L.outer; ++o) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T* p = x.data() + (o * L.channels + c) * L.inner;
      T s = T(0);
      for (std::size_t i = 0; i < L.inner; ++i) s += p[i];
      m.mean[L.group_of(o, c)] += s;
    }
  }
  for (auto& v : m.mean) v *= inv;
  for (std::size_t o = 0; o < L.outer; ++o) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      const T* p = x.data() + (o * L.channels + c) * L.inner;
      const T mu = m.mean[L.group_of(o, c)];
      T s = T(0);
      for (std::size_t i = 0; i < L.inner; ++i) s += (p[i] - mu) * (p[i] - mu);
      m.var[L.group_of(o, c)] += s;
    }
  }
  for (auto& v : m.var) v *= inv;
  return m;
}

}  // namespace detail

/// Normalization with statistics computed from x itself, followed by an
/// optional per-channel affine (gamma, beta).
///
/// The [N,C,H,W] input is viewed as [outer=N, channels=C, inner=H*W]. With
/// per_outer=false a group is one channel across (N,H,W) (train-mode batch
/// norm); with per_outer=true a group is one (n,c) plane (instance norm).
/// The biased group moments are reported through stats_out when non-null.
template <typename T>
Var normalize(Graph<T>& g, Var x, const Var* gamma, const Var* beta, T eps, bool per_outer, Moments<T>* stats_out,
              const char* op_name) {
  const Shape& xs = g.shape(x);
  require_rank(xs, 4, op_name);
  const detail::NormLayout L{xs[0], xs[1], xs[2] * xs[3], per_outer};
  if (L.group_len() < 2) {
    throw DataError(std::string(op_name) + ": degenerate normalization group of " + std::to_string(L.group_len()) +
                    " value(s) for input " + shape_str(xs) + "; need at least 2");
  }
  const bool affine = gamma != nullptr;
  if (affine && (g.shape(*gamma) != Shape{L.channels} || g.shape(*beta) != Shape{L.channels})) {
    throw DimensionError(std::string(op_name) + ": gamma/beta must have shape [" + std::to_string(L.channels) + "]");
  }
  const Tensor<T>& xv = g.value(x);
  Moments<T> m = detail::group_moments(xv, L);
  std::vector<T> invstd(L.groups());
  for (std::size_t k = 0; k < invstd.size(); ++k) invstd[k] = T(1) / std::sqrt(m.var[k] + eps);

  Tensor<T> xhat(xs);
  Tensor<T> out(xs);
  const T* gm = affine ? g.value(*gamma).data() : nullptr;
  const T* bt = affine ? g.value(*beta).data() : nullptr;
  for (std::size_t o = 0; o < L.outer; ++o) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      const std::size_t grp = L.group_of(o, c);
      const std::size_t base = (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        const T h = (xv[base + i] - m.mean[grp]) * invstd[grp];
        xhat[base + i] = h;
        out[base + i] = affine ? gm[c] * h + bt[c] : h;
      }
    }
  }
  if (stats_out != nullptr) *stats_out = m;

  std::vector<std::size_t> ins{x.id};
  if (affine) {
    ins.push_back(gamma->id);
    ins.push_back(beta->id);
  }
  auto fn = [L, affine, xhat = std::move(xhat), invstd = std::move(invstd)](Graph<T>& gr, std::size_t self) {
    const Tensor<T>& gout = gr.grad_buffer(self);
    const std::size_t xi = gr.input_id(self, 0);
    const T* gm = affine ? gr.value_of(gr.input_id(self, 1)).data() : nullptr;
    // dy w.r.t. xhat is gout * gamma
    std::vector<T> sum_dy(L.groups(), T(0)), sum_dy_xhat(L.groups(), T(0));
    std::vector<T> sum_g(L.channels, T(0)), sum_g_xhat(L.channels, T(0));
    for (std::size_t o = 0; o < L.outer; ++o) {
      for (std::size_t c = 0; c < L.channels; ++c) {
        const std::size_t grp = L.group_of(o, c);
        const std::size_t base = (o * L.channels + c) * L.inner;
        const T gamma_c = affine ? gm[c] : T(1);
        T sd = T(0), sdx = T(0), sg = T(0), sgx = T(0);
        for (std::size_t i = 0; i < L.inner; ++i) {
          const T go = gout[base + i];
          sg += go;
          sgx += go * xhat[base + i];
          sd += go * gamma_c;
          sdx += go * gamma_c * xhat[base + i];
        }
        sum_dy[grp] += sd;
        sum_dy_xhat[grp] += sdx;
        sum_g[c] += sg;
        sum_g_xhat[c] += sgx;
      }
    }
    if (affine) {
      const std::size_t gi = gr.input_id(self, 1), bi = gr.input_id(self, 2);
      if (gr.needs_grad(gi)) {
        Tensor<T>& gg = gr.grad_buffer(gi);
        for (std::size_t c = 0; c < L.channels; ++c) gg[c] += sum_g_xhat[c];
      }
      if (gr.needs_grad(bi)) {
        Tensor<T>& gb = gr.grad_buffer(bi);
        for (std::size_t c = 0; c < L.channels; ++c) gb[c] += sum_g[c];
      }
    }
    if (!gr.needs_grad(xi)) return;
    Tensor<T>& gin = gr.grad_buffer(xi);
    const T len = static_cast<T>(L.group_len());
    for (std::size_t o = 0; o < L.outer; ++o) {
      for (std::size_t c = 0; c < L.channels; ++c) {
        const std::size_t grp = L.group_of(o, c);
        const std::size_t base = (o * L.channels + c) * L.inner;
        const T gamma_c = affine ? gm[c] : T(1);
        const T k = invstd[grp] / len;
        for (std::size_t i = 0; i < L.inner; ++i) {
          const T dxhat = gout[base + i] * gamma_c;
          gin[base + i] += k * (len * dxhat - sum_dy[grp] - xhat[base + i] * sum_dy_xhat[grp]);
        }
      }
    }
  };
  return g.push(op_name, std::move(out), std::move(ins), fn);
}

/// Per-channel affine y = scale[c] * x + shift[c] where scale/shift are
/// derived from gamma, beta and fixed statistics (eval-mode batch norm).
template <typename T>
Var channel_affine_eval(Graph<T>& g, Var x, Var gamma, Var beta, const std::vector<T>& mean,
                        const std::vector<T>& var, T eps) {
  const Shape& xs = g.shape(x);
  require_rank(xs, 4, "batch_norm(eval) input");
  const std::size_t n = xs[0], c = xs[1], inner = xs[2] * xs[3];
  if (g.shape(gamma) != Shape{c} || mean.size() != c || var.size() != c) {
    throw DimensionError("batch_norm(eval): per-channel parameters must have length " + std::to_string(c));
  }
  std::vector<T> invstd(c);
  for (std::size_t k = 0; k < c; ++k) invstd[k] = T(1) / std::sqrt(var[k] + eps);
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& gm = g.value(gamma);
  const Tensor<T>& bt = g.value(beta);
  Tensor<T> out(xs);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t k = 0; k < c; ++k) {
      const std::size_t base = (s * c + k) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        out[base + i] = gm[k] * ((xv[base + i] - mean[k]) * invstd[k]) + bt[k];
      }
    }
  }
  auto fn = [n, c, inner, mean, invstd](Graph<T>& gr, std::size_t self) {
    const std::size_t xi = gr.input_id(self, 0), gi = gr.input_id(self, 1), bi = gr.input_id(self, 2);
    const Tensor<T>& gout = gr.grad_buffer(self);
    const Tensor<T>& xv = gr.value_of(xi);
    const Tensor<T>& gm = gr.value_of(gi);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t base = (s * c + k) * inner;
        for (std::size_t i = 0; i < inner; ++i) {
          const T go = gout[base + i];
          if (gr.needs_grad(xi)) gr.grad_buffer(xi)[base + i] += go * gm[k] * invstd[k];
          if (gr.needs_grad(gi)) gr.grad_buffer(gi)[k] += go * (xv[base + i] - mean[k]) * invstd[k];
          if (gr.needs_grad(bi)) gr.grad_buffer(bi)[k] += go;
        }
      }
    }
  };
  return g.push("batch_norm_eval", std::move(out), {x.id, gamma.id, beta.id}, fn);
}

/// Max relative error between analytic gradients and central finite
/// differences, |analytic - numeric| / max(1, |numeric|), over every
/// coordinate of every parameter.
///
/// `loss_fn(Graph<T>&) -> Var` must build a deterministic scalar loss from the
/// current parameter values.
template <typename T, typename LossFn>
double grad_check(LossFn&& loss_fn, std::span<Parameter<T>* const> params, T step) {
  for (Parameter<T>* p : params) p->zero_grad();
  {
    Graph<T> g;
    Var loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph<T> g;
    Var loss = loss_fn(g);
    const T v = g.value(loss)[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during perturbation");
    return v;
  };
  double worst = 0.0;
  for (Parameter<T>* p : params) {
    const Tensor<T> analytic = p->grad;
    if (!analytic.all_finite()) throw NumericError("grad_check: non-finite analytic gradient in " + p->name);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T orig = p->value[i];
      p->value[i] = orig + step;
      const T up = eval();
      p->value[i] = orig - step;
      const T down = eval();
      p->value[i] = orig;
      const double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * static_cast<double>(step));
      const double err = std::abs(static_cast<double>(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ad
}  // namespace madan
