#pragma once

// The adaptive detector network: a stack of BIN blocks with one max-pool,
// two adversarial domain discriminators (shallow features before the pool,
// attention-scaled deep features after the last block), and the patch
// classifier.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "madan/autodiff.hpp"
#include "madan/binary_io.hpp"
#include "madan/layers.hpp"
#include "madan/rng.hpp"

namespace madan {

/// How the feature-level attention value scales the deep feature map.
enum class AttentionForm { v, one_plus_v };

struct ModelConfig {
  std::size_t input_size = 17;
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{32, 64, 64, 64, 64};
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  /// 0-based block whose output feeds the shallow discriminator; the pool follows it.
  std::size_t shallow_block = 1;
  std::size_t pool_size = 2;
  std::size_t pool_stride = 2;
  /// Hidden widths of the classifier; the final layer has n_classes outputs.
  std::vector<std::size_t> classifier_widths{256, 128};
  std::size_t disc_hidden = 128;
  std::size_t n_classes = 4;
  /// Instance norm inside every block (BIN); false gives the BN-only baseline extractor.
  bool bin = true;
  bool discriminators = true;
  /// Scale deep features by the shallow discriminator's attention value.
  bool feature_attention = true;
  AttentionForm attention_form = AttentionForm::v;

  void validate() const {
    if (channels.empty()) throw ConfigError("model.channels must list at least one block");
    if (shallow_block >= channels.size()) throw ConfigError("model.shallow_block must index an existing block");
    if (n_classes < 2) throw ConfigError("model.n_classes must be at least 2");
    if (kernel_size == 0 || stride == 0) throw ConfigError("model kernel size and stride must be positive");
    if (discriminators && disc_hidden == 0) throw ConfigError("model.disc_hidden must be positive");
  }

  std::size_t block_extent(std::size_t block) const {
    std::size_t e = input_size;
    for (std::size_t b = 0; b <= block; ++b) {
      e = (e + 2 * padding - kernel_size) / stride + 1;
      if (b == shallow_block && b != block) e = (e - pool_size) / pool_stride + 1;
    }
    return e;
  }
  std::size_t shallow_extent() const { return block_extent(shallow_block); }
  std::size_t deep_extent() const {
    std::size_t e = block_extent(channels.size() - 1);
    if (shallow_block == channels.size() - 1) e = (e - pool_size) / pool_stride + 1;
    return e;
  }
  std::size_t shallow_features() const { return channels[shallow_block] * shallow_extent() * shallow_extent(); }
  std::size_t deep_features() const { return channels.back() * deep_extent() * deep_extent(); }
};

template <typename T>
struct Dense {
  Parameter<T> weight;
  Parameter<T> bias;

  Dense() = default;
  Dense(const std::string& prefix, std::size_t in, std::size_t out)
      : weight(prefix + ".weight", Tensor<T>(Shape{out, in})), bias(prefix + ".bias", Tensor<T>(Shape{out})) {}

  ad::Var apply(ad::Graph<T>& g, ad::Var x) { return ad::linear(g, x, g.param(weight), g.param(bias)); }
};

/// Binary domain classifier: hidden ReLU layer and a sigmoid output giving
/// the probability that a sample comes from the source domain.
template <typename T>
struct Discriminator {
  Dense<T> hidden;
  Dense<T> out;

  Discriminator() = default;
  Discriminator(const std::string& prefix, std::size_t in, std::size_t width)
      : hidden(prefix + ".fc1", in, width), out(prefix + ".fc2", width, 1) {}
};

template <typename T>
class Model {
 public:
  Model() = default;

  explicit Model(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    std::size_t in = config_.in_channels;
    for (std::size_t b = 0; b < config_.channels.size(); ++b) {
      blocks_.emplace_back("block" + std::to_string(b + 1), in, config_.channels[b], config_.kernel_size,
                           config_.stride, config_.padding, config_.bin);
      in = config_.channels[b];
    }
    std::size_t width = config_.deep_features();
    for (std::size_t k = 0; k < config_.classifier_widths.size(); ++k) {
      classifier_.emplace_back("classifier.fc" + std::to_string(k + 1), width, config_.classifier_widths[k]);
      width = config_.classifier_widths[k];
    }
    classifier_.emplace_back("classifier.fc" + std::to_string(config_.classifier_widths.size() + 1), width,
                             config_.n_classes);
    if (config_.discriminators) {
      shallow_disc_.emplace("shallow_disc", config_.shallow_features(), config_.disc_hidden);
      deep_disc_.emplace("deep_disc", config_.deep_features(), config_.disc_hidden);
    }
  }

  /// He-normal weights, zero biases, BN gamma=1 beta=0.
  void initialize(std::uint64_t seed) {
    std::uint64_t key = 0;
    auto he = [&](Parameter<T>& p, std::size_t fan_in) {
      Rng rng(seed, {0x1A17, key++});
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (auto& v : p.value.values()) v = static_cast<T>(rng.normal(0.0, sd));
    };
    for (auto& b : blocks_) {
      const Shape& s = b.kernel.value.shape();
      he(b.kernel, s[1] * s[2] * s[3]);
      b.bias.value.fill(T(0));
      b.bn.gamma.value.fill(T(1));
      b.bn.beta.value.fill(T(0));
      std::fill(b.bn.running_mean.begin(), b.bn.running_mean.end(), T(0));
      std::fill(b.bn.running_var.begin(), b.bn.running_var.end(), T(1));
    }
    for (auto& d : classifier_) {
      he(d.weight, d.weight.value.dim(1));
      d.bias.value.fill(T(0));
    }
    for (auto* disc : {shallow_disc_ ? &*shallow_disc_ : nullptr, deep_disc_ ? &*deep_disc_ : nullptr}) {
      if (disc == nullptr) continue;
      he(disc->hidden.weight, disc->hidden.weight.value.dim(1));
      disc->hidden.bias.value.fill(T(0));
      he(disc->out.weight, disc->out.weight.value.dim(1));
      disc->out.bias.value.fill(T(0));
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<BinBlockParams<T>>& blocks() noexcept { return blocks_; }
  const std::vector<BinBlockParams<T>>& blocks() const noexcept { return blocks_; }
  std::vector<Dense<T>>& classifier() noexcept { return classifier_; }
  bool has_discriminators() const noexcept { return shallow_disc_.has_value(); }
  Discriminator<T>& shallow_disc() { return require(shallow_disc_, "shallow"); }
  Discriminator<T>& deep_disc() { return require(deep_disc_, "deep"); }

  /// Every trainable parameter in a fixed order.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : blocks_) {
      for (auto* p : {&b.kernel, &b.bias, &b.bn.gamma, &b.bn.beta}) out.push_back(p);
    }
    for (auto& d : classifier_) {
      out.push_back(&d.weight);
      out.push_back(&d.bias);
    }
    for (auto* disc : {shallow_disc_ ? &*shallow_disc_ : nullptr, deep_disc_ ? &*deep_disc_ : nullptr}) {
      if (disc == nullptr) continue;
      for (auto* p : {&disc->hidden.weight, &disc->hidden.bias, &disc->out.weight, &disc->out.bias}) out.push_back(p);
    }
    return out;
  }

  std::vector<Parameter<T>*> discriminator_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* disc : {shallow_disc_ ? &*shallow_disc_ : nullptr, deep_disc_ ? &*deep_disc_ : nullptr}) {
      if (disc == nullptr) continue;
      for (auto* p : {&disc->hidden.weight, &disc->hidden.bias, &disc->out.weight, &disc->out.bias}) out.push_back(p);
    }
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Same architecture and values in another scalar type.
  template <typename U>
  Model<U> cast() {
    Model<U> out(config_);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      auto& ob = out.blocks()[b].bn;
      ob.running_mean.assign(blocks_[b].bn.running_mean.begin(), blocks_[b].bn.running_mean.end());
      ob.running_var.assign(blocks_[b].bn.running_var.begin(), blocks_[b].bn.running_var.end());
    }
    return out;
  }

 private:
  static Discriminator<T>& require(std::optional<Discriminator<T>>& d, const char* which) {
    if (!d) throw ContractError(std::string("model has no ") + which + " discriminator (source-only configuration)");
    return *d;
  }

  ModelConfig config_;
  std::vector<BinBlockParams<T>> blocks_;
  std::vector<Dense<T>> classifier_;
  std::optional<Discriminator<T>> shallow_disc_;
  std::optional<Discriminator<T>> deep_disc_;
};

/// Shallow (pre-pool) and deep (last block) feature maps, plus every
/// block's post-ReLU output for divergence diagnostics.
struct FeaturePair {
  ad::Var shallow;
  ad::Var deep;
  std::vector<ad::Var> block_outputs;
};

template <typename T>
FeaturePair extract_features(ad::Graph<T>& g, ad::Var x, Model<T>& model, Mode mode) {
  const ModelConfig& cfg = model.config();
  const Shape& s = g.shape(x);
  require_rank(s, 4, "extract_features input");
  if (s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size) {
    throw DimensionError("extract_features: expected [N," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "] input, got " +
                         shape_str(s));
  }
  FeaturePair fp;
  ad::Var h = x;
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    h = bin_block(g, h, model.blocks()[b], mode);
    fp.block_outputs.push_back(h);
    if (b == cfg.shallow_block) {
      fp.shallow = h;
      h = ad::maxpool2d(g, h, cfg.pool_size, cfg.pool_stride);
    }
  }
  fp.deep = h;
  return fp;
}

/// Source-domain probability per sample, [N] values in (0,1). The gradient
/// reversal sits between the features and the discriminator.
template <typename T>
ad::Var discriminate(ad::Graph<T>& g, ad::Var features, Discriminator<T>& disc, T lambda) {
  ad::Var z = ad::flatten(g, features);
  z = ad::grad_reverse(g, z, lambda);
  z = ad::relu(g, disc.hidden.apply(g, z));
  z = disc.out.apply(g, z);
  return ad::sigmoid(g, z);
}

/// 1 + binary Shannon entropy (natural log) of p, in [1, 1 + ln 2].
inline double attention_value(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("attention_value: probability outside [0,1]");
  auto xlogx = [](double q) { return q > 0.0 ? q * std::log(q) : 0.0; };
  return 1.0 - xlogx(p) - xlogx(1.0 - p);
}

template <typename T>
std::vector<T> attention_values(const Tensor<T>& probs) {
  std::vector<T> v(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) v[i] = static_cast<T>(attention_value(static_cast<double>(probs[i])));
  return v;
}

/// Scales sample i of the deep map by its attention value; the values are
/// constants for backpropagation.
template <typename T>
ad::Var apply_feature_attention(ad::Graph<T>& g, ad::Var deep, std::vector<T> v,
                                AttentionForm form = AttentionForm::v) {
  if (form == AttentionForm::one_plus_v) {
    for (auto& a : v) a = T(1) + a;
  }
  return ad::scale_samples(g, deep, std::move(v));
}

/// Class probabilities [N, n_classes] from (attention-scaled) deep features.
template <typename T>
ad::Var classify(ad::Graph<T>& g, ad::Var h, Model<T>& model) {
  ad::Var z = ad::flatten(g, h);
  auto& layers = model.classifier();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    z = layers[k].apply(g, z);
    if (k + 1 < layers.size()) z = ad::relu(g, z);
  }
  return ad::softmax(g, z);
}

struct ForwardOptions {
  Mode mode = Mode::train;
  bool use_discriminators = true;
  bool entropy_attention = true;
  double grl_lambda = 1.0;
  /// When set, used instead of the values computed from the discriminators
  /// (lets finite-difference checks hold the detached attention fixed).
  const std::vector<double>* fixed_v_feature = nullptr;
  const std::vector<double>* fixed_v_entropy = nullptr;
};

/// Everything one domain's batch contributes to the objective.
struct DomainForward {
  FeaturePair features;
  std::optional<ad::Var> p_shallow;
  std::optional<ad::Var> p_deep;
  ad::Var h;
  ad::Var probs;
  std::vector<double> v_feature;
  std::vector<double> v_entropy;
};

template <typename T>
DomainForward forward_domain(ad::Graph<T>& g, ad::Var x, Model<T>& model, const ForwardOptions& opt) {
  DomainForward out;
  out.features = extract_features(g, x, model, opt.mode);
  const std::size_t n = g.shape(x)[0];
  out.v_feature.assign(n, 1.0);
  out.v_entropy.assign(n, 1.0);
  out.h = out.features.deep;
  const bool disc = opt.use_discriminators && model.has_discriminators();
  for (const auto* fixed : {opt.fixed_v_feature, opt.fixed_v_entropy}) {
    if (fixed && fixed->size() != n) throw DimensionError("forward_domain: fixed attention length differs from batch");
  }
  const T lambda = static_cast<T>(opt.grl_lambda);
  if (disc) {
    out.p_shallow = discriminate(g, out.features.shallow, model.shallow_disc(), lambda);
    if (model.config().feature_attention) {
      const Tensor<T>& p = g.value(*out.p_shallow);
      for (std::size_t i = 0; i < n; ++i) out.v_feature[i] = attention_value(static_cast<double>(p[i]));
      if (opt.fixed_v_feature) out.v_feature = *opt.fixed_v_feature;
      std::vector<T> v(out.v_feature.begin(), out.v_feature.end());
      out.h = apply_feature_attention(g, out.features.deep, std::move(v), model.config().attention_form);
    }
    out.p_deep = discriminate(g, out.h, model.deep_disc(), lambda);
    if (opt.entropy_attention) {
      const Tensor<T>& p = g.value(*out.p_deep);
      for (std::size_t i = 0; i < n; ++i) out.v_entropy[i] = attention_value(static_cast<double>(p[i]));
      if (opt.fixed_v_entropy) out.v_entropy = *opt.fixed_v_entropy;
    }
  }
  out.probs = classify(g, out.h, model);
  return out;
}

/// Eval-mode class probabilities [N, n_classes] for an [N, C, H, W] batch,
/// processed in chunks of `chunk` samples.
template <typename T>
Tensor<T> predict_proba(Model<T>& model, const Tensor<T>& x, std::size_t chunk = 256) {
  require_rank(x.shape(), 4, "predict_proba input");
  const std::size_t n = x.dim(0), per = n ? x.size() / n : 0, k = model.config().n_classes;
  Tensor<T> out(Shape{n, k});
  ForwardOptions opt;
  opt.mode = Mode::eval;
  opt.entropy_attention = false;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    Shape s = x.shape();
    s[0] = m;
    std::vector<T> part(x.data() + start * per, x.data() + (start + m) * per);
    ad::Graph<T> g;
    ad::Var in = g.input(Tensor<T>(s, std::move(part)));
    DomainForward f = forward_domain(g, in, model, opt);
    const Tensor<T>& p = g.value(f.probs);
    std::copy(p.data(), p.data() + p.size(), out.data() + start * k);
  }
  return out;
}

// --- checkpoint (.madm) ---

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline std::vector<float> arch_scalars(const ModelConfig& c) {
  return {static_cast<float>(c.input_size),  static_cast<float>(c.in_channels),   static_cast<float>(c.kernel_size),
          static_cast<float>(c.stride),      static_cast<float>(c.padding),       static_cast<float>(c.shallow_block),
          static_cast<float>(c.pool_size),   static_cast<float>(c.pool_stride),   static_cast<float>(c.disc_hidden),
          static_cast<float>(c.n_classes),   c.bin ? 1.0f : 0.0f,                 c.discriminators ? 1.0f : 0.0f,
          c.attention_form == AttentionForm::one_plus_v ? 1.0f : 0.0f, c.feature_attention ? 1.0f : 0.0f};
}

inline void write_tensor(io::ByteWriter& w, const std::string& name, const Shape& shape, const std::vector<float>& v) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (float x : v) w.f32(x);
}

}  // namespace detail

/// Serializes architecture ("arch.*"), parameters, and BN running statistics
/// ("running.*") in the .madm layout.
template <typename T>
std::vector<char> encode_checkpoint(Model<T>& model) {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  std::vector<Entry> entries;
  const ModelConfig& c = model.config();
  auto to_f = [](const auto& range) { return std::vector<float>(range.begin(), range.end()); };
  entries.push_back({"arch.scalars", {detail::arch_scalars(c).size()}, detail::arch_scalars(c)});
  entries.push_back({"arch.channels", {c.channels.size()}, to_f(c.channels)});
  entries.push_back({"arch.classifier_widths", {c.classifier_widths.size()}, to_f(c.classifier_widths)});
  for (auto* p : model.parameters()) entries.push_back({p->name, p->value.shape(), to_f(p->value.values())});
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    const auto& bn = model.blocks()[b].bn;
    const std::string prefix = "running.block" + std::to_string(b + 1) + ".bn.";
    entries.push_back({prefix + "mean", {bn.channels()}, to_f(bn.running_mean)});
    entries.push_back({prefix + "var", {bn.channels()}, to_f(bn.running_var)});
  }
  io::ByteWriter w;
  w.bytes("MADM");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) detail::write_tensor(w, e.name, e.shape, e.values);
  return w.buffer();
}

template <typename T>
Model<T> decode_checkpoint(const std::vector<char>& bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("MADM");
  const auto version = r.u16("version");
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32("entry count");
  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16("name length");
    std::string name = r.str(len, "name");
    const auto rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("dimension"));
    const std::size_t n = shape_size(shape);
    r.need(n * 4, "tensor values");
    std::vector<float> v(n);
    for (auto& x : v) x = r.f32("value");
    if (!entries.emplace(name, std::make_pair(shape, std::move(v))).second) r.fail("duplicate entry '" + name + "'");
  }
  r.expect_end();

  auto take = [&](const std::string& name) -> const std::pair<Shape, std::vector<float>>& {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError(context + ": missing entry '" + name + "'");
    return it->second;
  };
  const auto& sc = take("arch.scalars").second;
  if (sc.size() != 14) throw FormatError(context + ": arch.scalars has wrong length");
  ModelConfig c;
  auto z = [](float f) { return static_cast<std::size_t>(f); };
  c.input_size = z(sc[0]);
  c.in_channels = z(sc[1]);
  c.kernel_size = z(sc[2]);
  c.stride = z(sc[3]);
  c.padding = z(sc[4]);
  c.shallow_block = z(sc[5]);
  c.pool_size = z(sc[6]);
  c.pool_stride = z(sc[7]);
  c.disc_hidden = z(sc[8]);
  c.n_classes = z(sc[9]);
  c.bin = sc[10] != 0.0f;
  c.discriminators = sc[11] != 0.0f;
  c.attention_form = sc[12] != 0.0f ? AttentionForm::one_plus_v : AttentionForm::v;
  c.feature_attention = sc[13] != 0.0f;
  c.channels.clear();
  for (float f : take("arch.channels").second) c.channels.push_back(z(f));
  c.classifier_widths.clear();
  for (float f : take("arch.classifier_widths").second) c.classifier_widths.push_back(z(f));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(context + ": invalid architecture: " + e.what());
  }

  Model<T> model(c);
  for (auto* p : model.parameters()) {
    const auto& [shape, v] = take(p->name);
    if (shape != p->value.shape()) {
      throw FormatError(context + ": entry '" + p->name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(p->value.shape()));
    }
    p->value = Tensor<T>(shape, std::vector<T>(v.begin(), v.end()));
    p->zero_grad();
  }
  for (std::size_t b = 0; b < model.blocks().size(); ++b) {
    auto& bn = model.blocks()[b].bn;
    const std::string prefix = "running.block" + std::to_string(b + 1) + ".bn.";
    const auto& mean = take(prefix + "mean").second;
    const auto& var = take(prefix + "var").second;
    if (mean.size() != bn.channels() || var.size() != bn.channels()) {
      throw FormatError(context + ": running statistics of block " + std::to_string(b + 1) + " have wrong length");
    }
    bn.running_mean.assign(mean.begin(), mean.end());
    bn.running_var.assign(var.begin(), var.end());
  }
  return model;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(model));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path), path.string());
}

}  // namespace madan
