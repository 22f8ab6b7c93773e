#pragma once

// Patch and scene containers, their binary formats, augmentation, and the
// deterministic two-domain synthetic scene generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "madan/binary_io.hpp"
#include "madan/boxes.hpp"
#include "madan/losses.hpp"
#include "madan/rng.hpp"
#include "madan/tensor.hpp"

namespace madan {

inline constexpr std::size_t kPatchSize = 17;
inline constexpr std::uint8_t kSourceDomain = 0;
inline constexpr std::uint8_t kTargetDomain = 1;

enum LandCover : std::uint8_t { kBackground = 0, kPalm = 1, kVegetation = 2, kImpervious = 3 };

inline const char* class_name(std::uint8_t c) {
  switch (c) {
    case kBackground: return "background";
    case kPalm: return "palm";
    case kVegetation: return "other_vegetation";
    case kImpervious: return "impervious";
    default: return "unknown";
  }
}

struct Patch {
  std::vector<float> pixels;  // C x H x W, channel-major
  std::uint8_t label = kUnlabeled;
  std::uint8_t domain = kSourceDomain;
};

struct PatchDataset {
  std::size_t channels = 3;
  std::size_t height = kPatchSize;
  std::size_t width = kPatchSize;
  std::vector<Patch> patches;

  std::size_t size() const noexcept { return patches.size(); }
  std::size_t patch_values() const noexcept { return channels * height * width; }

  /// Stacks the selected patches into an [N, C, H, W] tensor.
  template <typename T = float>
  Tensor<T> batch(const std::vector<std::size_t>& indices) const {
    Tensor<T> out(Shape{indices.size(), channels, height, width});
    const std::size_t per = patch_values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& px = patches.at(indices[i]).pixels;
      std::copy(px.begin(), px.end(), out.data() + i * per);
    }
    return out;
  }
};

/// Channel-major image with values in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }

  /// Copies the win x win crop with top-left corner (x, y).
  void crop(std::size_t x, std::size_t y, std::size_t win, float* out) const {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t r = 0; r < win; ++r) {
        const float* src = pixels.data() + (c * height + y + r) * width + x;
        std::copy(src, src + win, out + (c * win + r) * win);
      }
    }
  }

  friend bool operator==(const Image&, const Image&) = default;
};

struct Scene {
  Image image;
  std::vector<DetectionBox> ground_truth;
};

inline DetectionBox box_around(std::size_t cx, std::size_t cy) {
  const double h = static_cast<double>(kPatchSize / 2);
  return {static_cast<double>(cx) - h, static_cast<double>(cy) - h, static_cast<double>(cx) - h + kPatchSize,
          static_cast<double>(cy) - h + kPatchSize, 1.0};
}

// --- augmentation ---

inline void flip_horizontal(Patch& p, std::size_t channels, std::size_t h, std::size_t w) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      float* row = p.pixels.data() + (c * h + y) * w;
      std::reverse(row, row + w);
    }
  }
}

inline void flip_vertical(Patch& p, std::size_t channels, std::size_t h, std::size_t w) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      float* a = p.pixels.data() + (c * h + y) * w;
      float* b = p.pixels.data() + (c * h + (h - 1 - y)) * w;
      std::swap_ranges(a, a + w, b);
    }
  }
}

/// Multiplies every value by `factor` and clamps to [0, 1].
inline void adjust_brightness(Patch& p, float factor) {
  for (float& v : p.pixels) v = std::clamp(v * factor, 0.0f, 1.0f);
}

/// Independent horizontal and vertical flips (p = 0.5 each) and a brightness
/// factor uniform in [0.8, 1.2]. Label and domain are untouched.
inline Patch augment(Patch p, Rng& rng, std::size_t channels = 3, std::size_t h = kPatchSize,
                     std::size_t w = kPatchSize) {
  if (rng.coin()) flip_horizontal(p, channels, h, w);
  if (rng.coin()) flip_vertical(p, channels, h, w);
  adjust_brightness(p, static_cast<float>(rng.uniform(0.8, 1.2)));
  return p;
}

// --- .madp / .mimg formats ---

inline constexpr std::uint16_t kPatchFormatVersion = 1;
inline constexpr std::uint16_t kImageFormatVersion = 1;

inline std::vector<char> encode_patches(const PatchDataset& ds) {
  io::ByteWriter w;
  w.bytes("MADP");
  w.u16(kPatchFormatVersion);
  w.u32(static_cast<std::uint32_t>(ds.patches.size()));
  w.u16(static_cast<std::uint16_t>(ds.channels));
  w.u16(static_cast<std::uint16_t>(ds.height));
  w.u16(static_cast<std::uint16_t>(ds.width));
  for (const auto& p : ds.patches) {
    if (p.pixels.size() != ds.patch_values()) throw DataError("patch has wrong number of values");
    w.u8(p.label);
    w.u8(p.domain);
    for (float v : p.pixels) w.f32(v);
  }
  return w.buffer();
}

inline PatchDataset decode_patches(const std::vector<char>& bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("MADP");
  const auto version = r.u16("version");
  if (version != kPatchFormatVersion) r.fail("unsupported patch format version " + std::to_string(version));
  PatchDataset ds;
  const auto count = r.u32("count");
  ds.channels = r.u16("channels");
  ds.height = r.u16("height");
  ds.width = r.u16("width");
  const std::size_t per = ds.patch_values();
  r.need(static_cast<std::size_t>(count) * (2 + 4 * per), "patch records");
  ds.patches.resize(count);
  for (auto& p : ds.patches) {
    p.label = r.u8("label");
    p.domain = r.u8("domain");
    p.pixels.resize(per);
    for (auto& v : p.pixels) v = r.f32("pixel");
  }
  r.expect_end();
  return ds;
}

inline void write_patches(const PatchDataset& ds, const std::filesystem::path& path) {
  io::write_file(path, encode_patches(ds));
}

inline PatchDataset read_patches(const std::filesystem::path& path) {
  return decode_patches(io::read_file(path), path.string());
}

inline std::vector<char> encode_image(const Image& img) {
  io::ByteWriter w;
  w.bytes("MIMG");
  w.u16(kImageFormatVersion);
  w.u16(static_cast<std::uint16_t>(img.channels));
  w.u32(static_cast<std::uint32_t>(img.height));
  w.u32(static_cast<std::uint32_t>(img.width));
  for (float v : img.pixels) w.f32(v);
  return w.buffer();
}

inline Image decode_image(const std::vector<char>& bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("MIMG");
  const auto version = r.u16("version");
  if (version != kImageFormatVersion) r.fail("unsupported image format version " + std::to_string(version));
  Image img;
  img.channels = r.u16("channels");
  img.height = r.u32("height");
  img.width = r.u32("width");
  const std::size_t n = img.channels * img.height * img.width;
  r.need(n * 4, "pixels");
  img.pixels.resize(n);
  for (auto& v : img.pixels) v = r.f32("pixel");
  r.expect_end();
  return img;
}

inline void write_image(const Image& img, const std::filesystem::path& path) { io::write_file(path, encode_image(img)); }

inline Image read_image(const std::filesystem::path& path) {
  return decode_image(io::read_file(path), path.string());
}

// --- synthetic two-domain scenes ---

/// Acquisition differences applied to the target domain.
struct DomainShift {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  double offset = 0.0;
  double noise = 0.0;
  bool blur = false;
};

struct SynthSpec {
  std::uint64_t seed = 7;
  std::size_t scene_size = 256;
  std::size_t palm_count = 64;
  double min_spacing = 22.0;
  double palm_radius = 6.5;
  std::size_t vegetation_regions = 5;
  std::size_t impervious_count = 8;
  std::size_t n_classes = 4;
  std::size_t patches_per_class = 150;
  /// Share of background patches cut 6-9 px off a palm center.
  double near_miss_fraction = 0.4;
  double sensor_noise = 0.01;
  DomainShift shift{{1.25, 0.8, 0.7}, 0.12, 0.03, true};

  void validate() const {
    if (min_spacing < 9.0) throw ConfigError("synth.min_spacing must be at least 9 pixels");
    if (scene_size < kPatchSize) throw ConfigError("synth.scene_size must be at least 17");
    if (n_classes != 3 && n_classes != 4) throw ConfigError("synth.n_classes must be 3 or 4");
    if (palm_radius <= 0.0 || palm_radius > 8.0) throw ConfigError("synth.palm_radius must be in (0, 8]");
    for (double g : shift.gain) {
      if (g <= 0.0 || g > 2.0) throw ConfigError("synth.shift_gain entries must be in (0, 2]");
    }
    if (std::abs(shift.offset) > 0.5) throw ConfigError("synth.shift_offset must be within [-0.5, 0.5]");
    if (shift.noise < 0.0 || shift.noise > 0.2) throw ConfigError("synth.shift_noise must be within [0, 0.2]");
    if (sensor_noise < 0.0 || sensor_noise > 0.2) throw ConfigError("synth.sensor_noise must be within [0, 0.2]");
    if (near_miss_fraction < 0.0 || near_miss_fraction > 1.0) {
      throw ConfigError("synth.near_miss_fraction must be within [0, 1]");
    }
  }
};

struct DomainData {
  PatchDataset patches;
  /// Labels of the patches. For the target domain these are held back from
  /// `patches` (which carry the unlabeled sentinel) and serve evaluation only.
  std::vector<std::uint8_t> labels;
  Scene scene;
};

struct SynthOutput {
  DomainData source;
  DomainData target;
};

namespace synth {

struct Layout {
  Image image;
  std::vector<std::uint8_t> classes;  // per-pixel land cover
  std::vector<std::pair<std::size_t, std::size_t>> palms;
};

struct Circle {
  double x, y, r;
};

inline constexpr std::array<double, 3> kBackgroundColor{0.46, 0.40, 0.28};
inline constexpr std::array<double, 3> kPalmColor{0.22, 0.52, 0.18};
inline constexpr std::array<double, 3> kVegetationColor{0.16, 0.36, 0.14};
inline constexpr std::array<double, 3> kImperviousColor{0.66, 0.64, 0.62};

enum StreamKey : std::uint64_t { kLayout = 1, kBackgroundKey, kVegetationKey, kImperviousKey, kPalmKey, kNoiseKey,
                                 kPatchKey };

/// Renders one scene of the given role (0 = patch source, 1 = test scene).
inline Layout render(const SynthSpec& spec, std::uint8_t domain, std::uint64_t role) {
  const std::size_t n = spec.scene_size;
  Layout L;
  L.image = Image(3, n, n);
  L.classes.assign(n * n, kBackground);
  const std::uint64_t base = stream_seed(spec.seed, {domain, role});

  // low-variance background field: a few slow sinusoids plus mild grain
  {
    Rng rng(base, {kBackgroundKey});
    std::array<std::array<double, 4>, 3> waves{};
    for (auto& w : waves) w = {rng.uniform(0.01, 0.05), rng.uniform(0.01, 0.05), rng.uniform(0, 6.28), 0.03};
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        double s = 0.0;
        for (const auto& w : waves) s += w[3] * std::sin(w[0] * x + w[1] * y + w[2]);
        const double grain = rng.normal(0.0, 0.012);
        for (std::size_t c = 0; c < 3; ++c) L.image.at(c, y, x) = static_cast<float>(kBackgroundColor[c] + s + grain);
      }
    }
  }

  auto paint_class = [&](std::size_t x, std::size_t y, std::uint8_t cls) { L.classes[y * n + x] = cls; };

  // other vegetation: clustered circles with high-frequency texture
  for (std::size_t r = 0; r < spec.vegetation_regions; ++r) {
    Rng rng(base, {kVegetationKey, r});
    const double cx = rng.uniform(0, n), cy = rng.uniform(0, n);
    std::vector<Circle> parts;
    const std::size_t k = 3 + rng.below(3);
    for (std::size_t i = 0; i < k; ++i) {
      parts.push_back({cx + rng.uniform(-14, 14), cy + rng.uniform(-14, 14), rng.uniform(8, 16)});
    }
    const double fx = rng.uniform(0.7, 1.1), fy = rng.uniform(0.5, 0.9), ph = rng.uniform(0, 6.28);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        bool inside = false;
        for (const auto& c : parts) inside = inside || std::hypot(x - c.x, y - c.y) <= c.r;
        if (!inside) continue;
        const double tex = 0.07 * std::sin(fx * x + fy * y + ph) + rng.normal(0.0, 0.07);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          L.image.at(ch, y, x) = static_cast<float>(kVegetationColor[ch] + tex * (ch == 1 ? 1.3 : 0.8));
        }
        paint_class(x, y, kVegetation);
      }
    }
  }

  // impervious / cloud: flat bright rectangles
  if (spec.n_classes == 4) {
    for (std::size_t r = 0; r < spec.impervious_count; ++r) {
      Rng rng(base, {kImperviousKey, r});
      const std::size_t w = 14 + rng.below(18), h = 14 + rng.below(18);
      const std::size_t x0 = rng.below(n - std::min(n, w) + 1), y0 = rng.below(n - std::min(n, h) + 1);
      const double tint = rng.uniform(-0.05, 0.05);
      for (std::size_t y = y0; y < std::min(n, y0 + h); ++y) {
        for (std::size_t x = x0; x < std::min(n, x0 + w); ++x) {
          const double grain = rng.normal(0.0, 0.01);
          for (std::size_t c = 0; c < 3; ++c) L.image.at(c, y, x) = static_cast<float>(kImperviousColor[c] + tint + grain);
          paint_class(x, y, kImpervious);
        }
      }
    }
  }

  // palms: rejection-sampled centers on background, at least min_spacing apart
  {
    Rng rng(base, {kLayout});
    const std::size_t margin = kPatchSize / 2;
    if (n < 2 * margin + 1) throw DataError("scene too small for any palm");
    const std::size_t span = n - 2 * margin;
    const double clearance = spec.palm_radius + 2.0;
    const std::size_t max_attempts = 2000 * std::max<std::size_t>(spec.palm_count, 1);
    std::size_t attempts = 0;
    auto clear_of_cover = [&](std::size_t cx, std::size_t cy) {
      const long r = static_cast<long>(std::ceil(clearance));
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx) {
          const long x = static_cast<long>(cx) + dx, y = static_cast<long>(cy) + dy;
          if (x < 0 || y < 0 || x >= static_cast<long>(n) || y >= static_cast<long>(n)) continue;
          if (std::hypot(dx, dy) > clearance) continue;
          if (L.classes[y * n + x] != kBackground) return false;
        }
      }
      return true;
    };
    while (L.palms.size() < spec.palm_count) {
      if (++attempts > max_attempts) {
        throw DataError("cannot place " + std::to_string(spec.palm_count) + " palms with spacing " +
                        std::to_string(spec.min_spacing) + " in a " + std::to_string(n) + "x" + std::to_string(n) +
                        " scene (placed " + std::to_string(L.palms.size()) + ")");
      }
      const std::size_t cx = margin + rng.below(span), cy = margin + rng.below(span);
      bool ok = true;
      for (const auto& [px, py] : L.palms) {
        if (std::hypot(static_cast<double>(px) - cx, static_cast<double>(py) - cy) < spec.min_spacing) {
          ok = false;
          break;
        }
      }
      if (ok && clear_of_cover(cx, cy)) L.palms.emplace_back(cx, cy);
    }
    for (std::size_t i = 0; i < L.palms.size(); ++i) {
      Rng prng(base, {kPalmKey, i});
      const auto [cx, cy] = L.palms[i];
      const double R = spec.palm_radius * prng.uniform(0.9, 1.1);
      const double phase = prng.uniform(0, 6.28);
      const double shade = prng.uniform(0.9, 1.1);
      const long r = static_cast<long>(std::ceil(R)) + 1;
      for (long dy = -r; dy <= r; ++dy) {
        for (long dx = -r; dx <= r; ++dx) {
          const long x = static_cast<long>(cx) + dx, y = static_cast<long>(cy) + dy;
          if (x < 0 || y < 0 || x >= static_cast<long>(n) || y >= static_cast<long>(n)) continue;
          const double d = std::hypot(dx, dy);
          if (d > R + 0.5) continue;
          const double alpha = std::clamp(R + 0.5 - d, 0.0, 1.0);
          const double radial = std::sqrt(std::max(0.0, 1.0 - (d / R) * (d / R)));
          const double ring = 0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * d / 2.6);
          const double fronds = 0.5 + 0.5 * std::cos(8.0 * std::atan2(dy, dx) + phase);
          const double bright = shade * (0.55 + 0.45 * radial) * (0.85 + 0.1 * ring + 0.1 * fronds);
          for (std::size_t c = 0; c < 3; ++c) {
            float& v = L.image.at(c, y, x);
            const double palm = kPalmColor[c] * bright * 1.6;
            v = static_cast<float>((1.0 - alpha) * v + alpha * palm);
          }
          if (d <= R) paint_class(x, y, kPalm);
        }
      }
    }
  }

  // sensor noise common to both domains
  {
    Rng rng(base, {kNoiseKey});
    for (auto& v : L.image.pixels) v = static_cast<float>(v + rng.normal(0.0, spec.sensor_noise));
  }
  for (auto& v : L.image.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return L;
}

/// Applies the target acquisition shift in place: optional 3x3 box blur,
/// per-channel gain, brightness offset, additive Gaussian noise, clamp.
inline void apply_shift(Image& img, const DomainShift& shift, Rng& rng) {
  const std::size_t h = img.height, w = img.width;
  if (shift.blur) {
    Image src = img;
    for (std::size_t c = 0; c < img.channels; ++c) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double s = 0.0;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              s += src.at(c, yy, xx);
              ++cnt;
            }
          }
          img.at(c, y, x) = static_cast<float>(s / cnt);
        }
      }
    }
  }
  for (std::size_t c = 0; c < img.channels; ++c) {
    const double g = shift.gain[c % 3];
    for (std::size_t i = 0; i < h * w; ++i) {
      float& v = img.pixels[c * h * w + i];
      const double noise = shift.noise > 0.0 ? rng.normal(0.0, shift.noise) : 0.0;
      v = static_cast<float>(std::clamp(g * v + shift.offset + noise, 0.0, 1.0));
    }
  }
}

/// Cuts class-balanced labeled patches from a rendered layout.
inline std::pair<PatchDataset, std::vector<std::uint8_t>> cut_patches(const SynthSpec& spec, const Layout& L,
                                                                       std::uint8_t domain) {
  const std::size_t n = spec.scene_size;
  const std::size_t half = kPatchSize / 2;
  PatchDataset ds;
  std::vector<std::uint8_t> labels;
  Rng rng(stream_seed(spec.seed, {domain, 0}), {kPatchKey});

  auto nearest_palm = [&](long x, long y) {
    double best = 1e300;
    for (const auto& [px, py] : L.palms) best = std::min(best, std::hypot(static_cast<double>(px) - x, static_cast<double>(py) - y));
    return best;
  };
  auto in_bounds = [&](long cx, long cy) {
    return cx >= static_cast<long>(half) && cy >= static_cast<long>(half) && cx + static_cast<long>(half) < static_cast<long>(n) &&
           cy + static_cast<long>(half) < static_cast<long>(n);
  };
  auto emit = [&](long cx, long cy, std::uint8_t label) {
    Patch p;
    p.pixels.resize(3 * kPatchSize * kPatchSize);
    L.image.crop(static_cast<std::size_t>(cx) - half, static_cast<std::size_t>(cy) - half, kPatchSize, p.pixels.data());
    p.label = label;
    p.domain = domain;
    ds.patches.push_back(std::move(p));
    labels.push_back(label);
  };
  // Samples a center satisfying `accept` among uniformly drawn positions.
  auto sample_where = [&](auto accept, const char* what) {
    for (std::size_t attempt = 0; attempt < 200000; ++attempt) {
      const long cx = static_cast<long>(rng.below(n)), cy = static_cast<long>(rng.below(n));
      if (in_bounds(cx, cy) && accept(cx, cy)) return std::make_pair(cx, cy);
    }
    throw DataError(std::string("synthetic scene has no room for ") + what + " patches");
  };
  auto cls_at = [&](long x, long y) { return L.classes[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)]; };

  const std::size_t per = spec.patches_per_class;
  if (L.palms.empty() && per > 0) throw DataError("synthetic scene has no palms to cut patches from");
  for (std::size_t i = 0; i < per; ++i) {
    const auto [px, py] = L.palms[rng.below(L.palms.size())];
    const long cx = static_cast<long>(px) + static_cast<long>(rng.below(3)) - 1;
    const long cy = static_cast<long>(py) + static_cast<long>(rng.below(3)) - 1;
    emit(in_bounds(cx, cy) ? cx : static_cast<long>(px), in_bounds(cx, cy) ? cy : static_cast<long>(py), kPalm);
  }
  for (std::size_t i = 0; i < per; ++i) {
    if (rng.uniform() < spec.near_miss_fraction) {
      bool done = false;
      for (std::size_t attempt = 0; attempt < 1000 && !done; ++attempt) {
        const auto [px, py] = L.palms[rng.below(L.palms.size())];
        const double ang = rng.uniform(0, 2 * std::numbers::pi), dist = rng.uniform(6.0, 9.0);
        const long cx = std::lround(px + dist * std::cos(ang)), cy = std::lround(py + dist * std::sin(ang));
        if (in_bounds(cx, cy) && nearest_palm(cx, cy) >= 6.0 && cls_at(cx, cy) == kBackground) {
          emit(cx, cy, kBackground);
          done = true;
        }
      }
      if (done) continue;
    }
    const auto [cx, cy] = sample_where(
        [&](long x, long y) { return cls_at(x, y) == kBackground && nearest_palm(x, y) >= 9.0; }, "background");
    emit(cx, cy, kBackground);
  }
  for (std::size_t i = 0; per > 0 && spec.vegetation_regions > 0 && i < per; ++i) {
    const auto [cx, cy] = sample_where([&](long x, long y) { return cls_at(x, y) == kVegetation; }, "vegetation");
    emit(cx, cy, kVegetation);
  }
  if (spec.n_classes == 4) {
    for (std::size_t i = 0; per > 0 && spec.impervious_count > 0 && i < per; ++i) {
      const auto [cx, cy] = sample_where([&](long x, long y) { return cls_at(x, y) == kImpervious; }, "impervious");
      emit(cx, cy, kImpervious);
    }
  }
  return {std::move(ds), std::move(labels)};
}

}  // namespace synth

/// Generates both domains. Each domain gets a patch-source scene (role 0)
/// whose class-balanced crops form the patch dataset, and a separate test
/// scene (role 1) with palm ground truth. The target domain additionally
/// receives the acquisition shift; its patch labels are replaced by the
/// unlabeled sentinel and returned separately.
inline SynthOutput synth_generate(const SynthSpec& spec) {
  spec.validate();
  SynthOutput out;
  for (std::uint8_t domain : {kSourceDomain, kTargetDomain}) {
    DomainData& dd = domain == kSourceDomain ? out.source : out.target;
    synth::Layout train = synth::render(spec, domain, 0);
    synth::Layout test = synth::render(spec, domain, 1);
    if (domain == kTargetDomain) {
      Rng r0(spec.seed, {domain, 0, 99});
      Rng r1(spec.seed, {domain, 1, 99});
      synth::apply_shift(train.image, spec.shift, r0);
      synth::apply_shift(test.image, spec.shift, r1);
    }
    auto [patches, labels] = synth::cut_patches(spec, train, domain);
    if (domain == kTargetDomain) {
      for (auto& p : patches.patches) p.label = kUnlabeled;
    }
    dd.patches = std::move(patches);
    dd.labels = std::move(labels);
    dd.scene.image = std::move(test.image);
    for (const auto& [cx, cy] : test.palms) dd.scene.ground_truth.push_back(box_around(cx, cy));
    std::sort(dd.scene.ground_truth.begin(), dd.scene.ground_truth.end(), [](const auto& a, const auto& b) {
      return std::tie(a.y_lt, a.x_lt) < std::tie(b.y_lt, b.x_lt);
    });
  }
  return out;
}

/// Mean L1 distance between per-class, per-channel intensity histograms of
/// two labeled patch sets (classes absent from either side are skipped).
inline double class_histogram_distance(const PatchDataset& a, const std::vector<std::uint8_t>& labels_a,
                                       const PatchDataset& b, const std::vector<std::uint8_t>& labels_b,
                                       std::size_t bins = 16) {
  auto hist = [&](const PatchDataset& ds, const std::vector<std::uint8_t>& labels, std::uint8_t cls, std::size_t ch) {
    std::vector<double> h(bins, 0.0);
    double total = 0.0;
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (labels[i] != cls) continue;
      const float* px = ds.patches[i].pixels.data() + ch * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const auto bin = std::min<std::size_t>(bins - 1, static_cast<std::size_t>(px[k] * bins));
        h[bin] += 1.0;
        total += 1.0;
      }
    }
    if (total > 0.0) {
      for (auto& v : h) v /= total;
    }
    return std::make_pair(h, total);
  };
  double sum = 0.0;
  std::size_t terms = 0;
  for (std::uint8_t cls = 0; cls < 4; ++cls) {
    for (std::size_t ch = 0; ch < a.channels; ++ch) {
      auto [ha, na] = hist(a, labels_a, cls, ch);
      auto [hb, nb] = hist(b, labels_b, cls, ch);
      if (na == 0.0 || nb == 0.0) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < bins; ++k) d += std::abs(ha[k] - hb[k]);
      sum += d;
      ++terms;
    }
  }
  return terms ? sum / static_cast<double>(terms) : 0.0;
}

// --- ground-truth CSV ---

inline std::string format_ground_truth_csv(const std::vector<DetectionBox>& boxes) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "x_lt,y_lt,x_rb,y_rb\n";
  for (const auto& b : boxes) os << b.x_lt << ',' << b.y_lt << ',' << b.x_rb << ',' << b.y_rb << '\n';
  return os.str();
}

}  // namespace madan
