#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <vector>

#include "madan/data.hpp"

using namespace madan;
namespace fs = std::filesystem;

namespace {

const SynthOutput& standard() {
  static const SynthOutput out = [] {
    SynthSpec s;
    s.seed = 1;
    return synth_generate(s);
  }();
  return out;
}

Patch ramp_patch() {
  Patch p;
  p.pixels.resize(3 * 17 * 17);
  for (std::size_t i = 0; i < p.pixels.size(); ++i) p.pixels[i] = static_cast<float>(i % 97) / 97.0f;
  p.label = kVegetation;
  return p;
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("madan_test_data_" + name); }

}  // namespace

TEST(Synth, DeterministicForSeed) {
  SynthSpec s;
  s.seed = 1;
  SynthOutput again = synth_generate(s);
  EXPECT_EQ(encode_patches(again.source.patches), encode_patches(standard().source.patches));
  EXPECT_EQ(encode_patches(again.target.patches), encode_patches(standard().target.patches));
  EXPECT_EQ(encode_image(again.target.scene.image), encode_image(standard().target.scene.image));
  s.seed = 2;
  EXPECT_NE(encode_patches(synth_generate(s).source.patches), encode_patches(standard().source.patches));
}

TEST(Synth, PatchContracts) {
  const auto& d = standard();
  for (const DomainData* dd : {&d.source, &d.target}) {
    EXPECT_EQ(dd->patches.height, 17u);
    EXPECT_EQ(dd->patches.width, 17u);
    EXPECT_EQ(dd->labels.size(), dd->patches.size());
    for (const auto& p : dd->patches.patches) {
      for (float v : p.pixels) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
      }
    }
    std::set<std::uint8_t> classes(dd->labels.begin(), dd->labels.end());
    EXPECT_EQ(classes.size(), 4u);
  }
  for (const auto& p : d.source.patches.patches) EXPECT_LT(p.label, 4);
  for (const auto& p : d.target.patches.patches) {
    EXPECT_EQ(p.label, kUnlabeled);
    EXPECT_EQ(p.domain, kTargetDomain);
  }
}

TEST(Synth, GroundTruthBoxesInsideSceneAndSpaced) {
  const auto& sc = standard().target.scene;
  EXPECT_EQ(sc.ground_truth.size(), SynthSpec{}.palm_count);
  for (const auto& b : sc.ground_truth) {
    EXPECT_EQ(b.width(), 17.0);
    EXPECT_EQ(b.height(), 17.0);
    EXPECT_GE(b.x_lt, 0.0);
    EXPECT_GE(b.y_lt, 0.0);
    EXPECT_LE(b.x_rb, static_cast<double>(sc.image.width));
    EXPECT_LE(b.y_rb, static_cast<double>(sc.image.height));
  }
  for (std::size_t i = 0; i < sc.ground_truth.size(); ++i)
    for (std::size_t j = i + 1; j < sc.ground_truth.size(); ++j) {
      const double dx = sc.ground_truth[i].x_lt - sc.ground_truth[j].x_lt;
      const double dy = sc.ground_truth[i].y_lt - sc.ground_truth[j].y_lt;
      EXPECT_GE(dx * dx + dy * dy, 22.0 * 22.0 - 1e-9);
    }
}

TEST(Synth, DefaultShiftIsMeasurable) {
  SynthSpec zero;
  zero.seed = 1;
  zero.shift = DomainShift{};
  SynthOutput z = synth_generate(zero);
  const auto& d = standard();
  const double dz = class_histogram_distance(z.source.patches, z.source.labels, z.target.patches, z.target.labels);
  const double ds = class_histogram_distance(d.source.patches, d.source.labels, d.target.patches, d.target.labels);
  EXPECT_GE(ds, 5.0 * dz) << "zero-shift " << dz << " default " << ds;
}

TEST(Synth, ZeroShiftKeepsClassMeansClose) {
  SynthSpec zero;
  zero.seed = 3;
  zero.shift = DomainShift{};
  SynthOutput z = synth_generate(zero);
  auto class_mean = [](const DomainData& dd, std::uint8_t cls) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < dd.patches.size(); ++i) {
      if (dd.labels[i] != cls) continue;
      for (float v : dd.patches.patches[i].pixels) s += v;
      n += dd.patches.patch_values();
    }
    return s / static_cast<double>(n);
  };
  for (std::uint8_t c = 0; c < 4; ++c) EXPECT_NEAR(class_mean(z.source, c), class_mean(z.target, c), 0.03) << +c;
}

TEST(Synth, InvalidSpecsRejected) {
  SynthSpec s;
  s.min_spacing = 8.0;
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec{};
  s.shift.gain = {2.5, 1.0, 1.0};
  EXPECT_THROW(synth_generate(s), ConfigError);
  s = SynthSpec{};
  s.palm_count = 2000;
  EXPECT_THROW(synth_generate(s), DataError);
}

TEST(Formats, PatchRoundtripIsBitExact) {
  const auto& ds = standard().source.patches;
  const fs::path f = temp_file("p.madp");
  write_patches(ds, f);
  PatchDataset back = read_patches(f);
  EXPECT_EQ(encode_patches(back), encode_patches(ds));
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.patches[5].pixels, ds.patches[5].pixels);
  fs::remove(f);
}

TEST(Formats, ImageRoundtripIsBitExact) {
  const Image& img = standard().source.scene.image;
  const fs::path f = temp_file("i.mimg");
  write_image(img, f);
  EXPECT_TRUE(read_image(f) == img);
  fs::remove(f);
}

TEST(Formats, TruncationReportsOffset) {
  std::vector<char> bytes = encode_patches(standard().source.patches);
  bytes.resize(bytes.size() - 3);
  try {
    decode_patches(bytes, "t.madp");
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("t.madp"), std::string::npos);
    EXPECT_NE(msg.find("byte offset"), std::string::npos);
  }
  std::vector<char> img = encode_image(standard().source.scene.image);
  img.resize(10);
  EXPECT_THROW(decode_image(img, "t.mimg"), FormatError);
  std::vector<char> magic = encode_image(standard().source.scene.image);
  magic[1] = 'Z';
  EXPECT_THROW(decode_image(magic, "m.mimg"), FormatError);
}

TEST(Formats, MissingFileIsIoError) { EXPECT_THROW(read_patches("/nonexistent/dir/x.madp"), IoError); }

TEST(Augment, FlipsAreInvolutions) {
  Patch p = ramp_patch(), q = p;
  flip_horizontal(q, 3, 17, 17);
  EXPECT_NE(q.pixels, p.pixels);
  EXPECT_EQ(q.pixels[0], p.pixels[16]);
  flip_horizontal(q, 3, 17, 17);
  EXPECT_EQ(q.pixels, p.pixels);
  flip_vertical(q, 3, 17, 17);
  EXPECT_EQ(q.pixels[0], p.pixels[16 * 17]);
  flip_vertical(q, 3, 17, 17);
  EXPECT_EQ(q.pixels, p.pixels);
}

TEST(Augment, BrightnessClampedAndLabelKept) {
  Patch p = ramp_patch();
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    Patch a = augment(p, rng);
    EXPECT_EQ(a.label, kVegetation);
    for (float v : a.pixels) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  Patch b = p;
  adjust_brightness(b, 1.2f);
  EXPECT_FLOAT_EQ(b.pixels[50], std::min(1.0f, p.pixels[50] * 1.2f));
}

TEST(GroundTruthCsv, Format) {
  std::vector<DetectionBox> b{{1, 2, 18, 19, 1.0}};
  EXPECT_EQ(format_ground_truth_csv(b), "x_lt,y_lt,x_rb,y_rb\n1.000,2.000,18.000,19.000\n");
}
