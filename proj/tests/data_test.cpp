#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <map>
#include <sstream>

#include "clmex/augment.hpp"
#include "clmex/dataset.hpp"
#include "clmex/sampler.hpp"
#include "clmex/synthetic.hpp"

using namespace clmex;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("clmex_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SynthConfig tiny_config() {
  SynthConfig cfg;
  cfg.subjects = 2;
  cfg.sessions = 1;
  cfg.expressions = 2;
  cfg.views = {-60, 0, 60};
  cfg.image_size = 16;
  return cfg;
}

Image gradient_image(std::size_t h, std::size_t w) {
  Image img(h, w, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<double>(x) / static_cast<double>(w);
      img.at(y, x, 1) = static_cast<double>(y) / static_cast<double>(h);
      img.at(y, x, 2) = 0.5 * static_cast<double>((x + y) % 3) / 2.0;
    }
  return img;
}

ManifestError::Kind parse_kind(const std::string& text) {
  std::istringstream is(text);
  try {
    parse_manifest(is);
  } catch (const ManifestError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a ManifestError";
  return ManifestError::Kind::parse_error;
}

const std::string kHeader = std::string(kManifestHeader) + "\n";

}  // namespace

TEST(Manifest, ParsesThreeRecords) {
  std::istringstream is(kHeader +
                        "a.png,s1,happy,0,p0\n"
                        "b.png,s1,happy,45,p0\n"
                        "c.png,s2,sad,0,p0\n");
  const auto m = parse_manifest(is);
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_EQ(m.records[1].image_path, "b.png");
  EXPECT_EQ(m.records[1].view_angle_deg, 45);
  EXPECT_EQ(m.expression_vocabulary, (std::vector<std::string>{"happy", "sad"}));
  EXPECT_EQ(m.view_set, (std::vector<int>{0, 45}));
}

TEST(Manifest, DuplicateTripleNamesTheTriple) {
  std::istringstream is(kHeader + "a.png,s1,happy,0,p0\nb.png,s1,happy,0,p0\n");
  try {
    parse_manifest(is);
    FAIL() << "duplicate accepted";
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), ManifestError::Kind::duplicate_record);
    const std::string what = e.what();
    EXPECT_NE(what.find("s1"), std::string::npos);
    EXPECT_NE(what.find("p0"), std::string::npos);
    EXPECT_NE(what.find("angle=0"), std::string::npos);
  }
}

TEST(Manifest, DistinctErrorKinds) {
  using K = ManifestError::Kind;
  EXPECT_EQ(parse_kind(kHeader), K::empty_dataset);
  EXPECT_EQ(parse_kind("# expressions: happy\n" + kHeader + "a.png,s1,angry,0,p0\n"), K::unknown_expression);
  EXPECT_EQ(parse_kind("# views: 0\n" + kHeader + "a.png,s1,happy,30,p0\n"), K::unknown_view);
  EXPECT_EQ(parse_kind("not,a,header\n"), K::parse_error);
  EXPECT_EQ(parse_kind(kHeader + "a.png,s1,happy,zero,p0\n"), K::parse_error);
  try {
    load_manifest("/nonexistent/manifest.csv");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), K::missing_file);
  }
}

TEST(Manifest, DirectivesFixVocabularyOrder) {
  std::istringstream is("# expressions: sad,happy\n# views: 45,0\n" + kHeader + "a.png,s1,happy,0,p0\n");
  const auto m = parse_manifest(is);
  EXPECT_EQ(m.expression_vocabulary, (std::vector<std::string>{"sad", "happy"}));
  EXPECT_EQ(m.view_set, (std::vector<int>{45, 0}));
}

TEST(Dataset, GroupsMixingExpressionsAreRejected) {
  Dataset d{{"a", "b"}, {0, 45}, {}};
  Sample s;
  s.subject_id = "s";
  s.session_id = "p";
  s.expression = 0;
  d.samples.push_back(s);
  s.expression = 1;
  s.view_angle_deg = 45;
  d.samples.push_back(s);
  EXPECT_THROW(assign_view_invariant_ids(d), DatasetError);
}

TEST(Synthetic, CountsImagesAndGroups) {
  const auto d = generate_synthetic_dataset(tiny_config());
  EXPECT_EQ(d.size(), 6u);  // one session per subject: 2 x 1 x 3
  auto cfg = tiny_config();
  cfg.sessions = 2;
  const auto d2 = generate_synthetic_dataset(cfg);
  EXPECT_EQ(d2.size(), 12u);
  const auto groups = d2.groups();
  ASSERT_EQ(groups.size(), 4u);
  for (const auto& g : groups) {
    ASSERT_EQ(g.size(), 3u);
    for (auto i : g) {
      EXPECT_EQ(d2.samples[i].expression, d2.samples[g[0]].expression);
      EXPECT_EQ(d2.samples[i].subject_id, d2.samples[g[0]].subject_id);
    }
  }
}

TEST(Synthetic, CliExampleCount) {
  SynthConfig cfg;
  cfg.subjects = 4;
  cfg.sessions = 2;
  cfg.expressions = 3;
  cfg.views = {-60, 0, 60};
  cfg.seed = 1;
  EXPECT_EQ(generate_synthetic_dataset(cfg).size(), 24u);
}

TEST(Synthetic, SameSeedIsByteIdentical) {
  const auto a = generate_synthetic_dataset(tiny_config());
  const auto b = generate_synthetic_dataset(tiny_config());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.samples[i].image.pixels, b.samples[i].image.pixels);

  const auto da = scratch_dir("det_a"), db = scratch_dir("det_b");
  write_dataset(a, da);
  write_dataset(b, db);
  for (const auto& entry : fs::directory_iterator(da / "images")) {
    std::ifstream fa(entry.path(), std::ios::binary), fb(db / "images" / entry.path().filename(), std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(fa)), {}), bb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(ba, bb) << entry.path();
  }
  auto other = tiny_config();
  other.seed = 8;
  EXPECT_NE(generate_synthetic_dataset(other).samples[0].image.pixels, a.samples[0].image.pixels);
}

TEST(Synthetic, RejectsTinyImagesAndEmptyCounts) {
  auto cfg = tiny_config();
  cfg.image_size = 15;
  EXPECT_THROW(generate_synthetic_dataset(cfg), SynthConfigError);
  cfg = tiny_config();
  cfg.expressions = 0;
  EXPECT_THROW(generate_synthetic_dataset(cfg), SynthConfigError);
  cfg = tiny_config();
  cfg.views.clear();
  EXPECT_THROW(generate_synthetic_dataset(cfg), SynthConfigError);
}

TEST(Synthetic, RoundTripsThroughManifest) {
  const auto d = generate_synthetic_dataset(tiny_config());
  const auto dir = scratch_dir("roundtrip");
  write_dataset(d, dir);
  const auto back = load_dataset(dir / "manifest.csv");
  ASSERT_EQ(back.size(), d.size());
  EXPECT_EQ(back.expression_vocabulary, d.expression_vocabulary);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.samples[i].image, d.samples[i].image);
    EXPECT_EQ(back.samples[i].expression, d.samples[i].expression);
    EXPECT_EQ(back.samples[i].view_invariant_id, d.samples[i].view_invariant_id);
  }
}

// Frontal images of two expressions should be separable by a simple feature:
// nearest class centroid over block-mean luminance, with centroids fitted on
// two thirds of the subjects and scored on the rest.
TEST(Synthetic, FrontalExpressionsCarrySignal) {
  SynthConfig cfg;
  cfg.subjects = 12;
  cfg.sessions = 4;
  cfg.expressions = 2;
  cfg.views = {0};
  const auto d = generate_synthetic_dataset(cfg);
  const std::size_t n = cfg.image_size, cells = 8, step = n / cells;
  const auto features = [&](const Image& img) {
    std::vector<double> f(cells * cells, 0.0);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        f[(y / step) * cells + x / step] +=
            kLumaR * img.at(y, x, 0) + kLumaG * img.at(y, x, 1) + kLumaB * img.at(y, x, 2);
      }
    return f;
  };
  const auto is_train = [](const Sample& s) { return s.subject_id < "s08"; };
  std::array<std::vector<double>, 2> centroid{std::vector<double>(cells * cells), std::vector<double>(cells * cells)};
  std::array<double, 2> count{};
  for (const auto& s : d.samples) {
    if (!is_train(s)) continue;
    const auto f = features(s.image);
    const auto c = static_cast<std::size_t>(s.expression);
    for (std::size_t k = 0; k < f.size(); ++k) centroid[c][k] += f[k];
    count[c] += 1;
  }
  std::size_t correct = 0, total = 0;
  for (const auto& s : d.samples) {
    if (is_train(s)) continue;
    const auto f = features(s.image);
    std::array<double, 2> dist{};
    for (int c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < f.size(); ++k) {
        const double diff = f[k] - centroid[c][k] / count[c];
        dist[c] += diff * diff;
      }
    correct += (dist[1] < dist[0] ? 1 : 0) == s.expression;
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(total), 0.5);
}

TEST(Augment, IdentityParamsReproduceInput) {
  const auto img = gradient_image(12, 12);
  EXPECT_EQ(apply_augment(img, AugmentParams::identity()), img);
}

TEST(Augment, FlipMirrorsAndIsInvolutive) {
  const auto img = gradient_image(8, 10);
  AugmentParams p;
  p.flip = true;
  const auto once = apply_augment(img, p);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 10; ++x)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(once.at(y, x, c), img.at(y, 9 - x, c));
  EXPECT_EQ(apply_augment(once, p), img);
}

TEST(Augment, GrayscaleEqualisesChannelsWithDocumentedWeights) {
  const auto img = gradient_image(6, 6);
  AugmentParams p;
  p.grayscale = true;
  const auto out = apply_augment(img, p);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      const double expect = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      EXPECT_EQ(out.at(y, x, 0), out.at(y, x, 1));
      EXPECT_EQ(out.at(y, x, 1), out.at(y, x, 2));
      EXPECT_NEAR(out.at(y, x, 0), expect, 1e-15);
    }
}

TEST(Augment, HsvRoundTrip) {
  for (double r : {0.0, 0.2, 0.9})
    for (double g : {0.1, 0.5, 1.0})
      for (double b : {0.0, 0.3, 0.7}) {
        double h, s, v, r2, g2, b2;
        detail::rgb_to_hsv(r, g, b, h, s, v);
        detail::hsv_to_rgb(h, s, v, r2, g2, b2);
        EXPECT_NEAR(r2, r, 1e-12);
        EXPECT_NEAR(g2, g, 1e-12);
        EXPECT_NEAR(b2, b, 1e-12);
      }
}

TEST(Augment, RandomDrawsPreserveRangeAndSize) {
  const auto img = gradient_image(20, 20);
  Rng rng(3);
  AugmentConfig cfg;
  for (int i = 0; i < 200; ++i) {
    const auto out = augment(img, cfg, rng);
    ASSERT_EQ(out.height, img.height);
    ASSERT_EQ(out.width, img.width);
    ASSERT_EQ(out.channels, img.channels);
    for (double v : out.pixels) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Augment, ParametersStayInConfiguredRanges) {
  Rng rng(11);
  AugmentConfig cfg;
  int flips = 0, grays = 0;
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) {
    const auto p = sample_augment_params(cfg, 32, 32, rng);
    ASSERT_GE(p.scale, 0.2);
    ASSERT_LE(p.scale, 1.0);
    const double side = std::sqrt(p.scale) * 32;
    ASSERT_GE(p.origin_x, 0.0);
    ASSERT_LE(p.origin_x + side, 32.0 + 1e-9);
    ASSERT_LE(std::abs(p.brightness_factor - 1.0), 0.4);
    ASSERT_LE(std::abs(p.hue_shift_deg), 72.0);
    flips += p.flip;
    grays += p.grayscale;
  }
  EXPECT_NEAR(flips / static_cast<double>(trials), 0.5, 0.04);
  EXPECT_NEAR(grays / static_cast<double>(trials), 0.5, 0.04);
}

TEST(Augment, SameRngSameOutput) {
  const auto img = gradient_image(16, 16);
  Rng a(5), b(5);
  EXPECT_EQ(augment(img, AugmentConfig{}, a), augment(img, AugmentConfig{}, b));
}

class SamplerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthConfig cfg;
    cfg.subjects = 3;
    cfg.sessions = 2;
    cfg.expressions = 2;
    cfg.views = {-45, 0, 45};
    cfg.image_size = 16;
    data = generate_synthetic_dataset(cfg).without_labels();
  }
  Dataset data;
};

TEST_F(SamplerTest, GroupsTimesViewsCounts) {
  Rng rng(1);
  const auto batch = sample_batch(data, {2, 3}, AugmentConfig{}, rng);
  EXPECT_EQ(batch.images.shape(), (Shape{12, 3, 16, 16}));
  std::map<int, int> counts;
  for (int id : batch.view_ids) ++counts[id];
  ASSERT_EQ(counts.size(), 2u);
  for (auto [id, c] : counts) EXPECT_EQ(c, 6);
  EXPECT_TRUE(batch.labels.empty());
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(batch.view_ids[2 * k], batch.view_ids[2 * k + 1]);
    EXPECT_EQ(batch.source_indices[2 * k], batch.source_indices[2 * k + 1]);
  }
}

TEST_F(SamplerTest, SingleViewDegeneratesToPairs) {
  Rng rng(2);
  const auto batch = sample_batch(data, {4, 1}, AugmentConfig{}, rng);
  std::map<int, int> counts;
  for (int id : batch.view_ids) ++counts[id];
  EXPECT_EQ(counts.size(), 4u);
  for (auto [id, c] : counts) EXPECT_EQ(c, 2);
}

TEST_F(SamplerTest, ShortfallIsNamed) {
  Rng rng(3);
  try {
    sample_batch(data, {7, 3}, AugmentConfig{}, rng);
    FAIL();
  } catch (const SamplerError& e) {
    EXPECT_NE(std::string(e.what()).find("short by 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(sample_batch(data, {1, 4}, AugmentConfig{}, rng), SamplerError);
}

TEST_F(SamplerTest, SameSeedSameBatchStream) {
  Rng a(9), b(9);
  for (int i = 0; i < 3; ++i) {
    const auto x = sample_batch(data, {2, 2}, AugmentConfig{}, a);
    const auto y = sample_batch(data, {2, 2}, AugmentConfig{}, b);
    EXPECT_TRUE(std::ranges::equal(x.images.values(), y.images.values()));
    EXPECT_EQ(x.source_indices, y.source_indices);
  }
}

TEST_F(SamplerTest, GroupsAreDrawnUniformly) {
  // Pearson chi-square over group frequencies; 5 degrees of freedom,
  // critical value 20.5 at p = 0.001.
  AugmentConfig none;
  none.flip_probability = none.grayscale_probability = none.color_probability = 0.0;
  none.min_scale = 1.0;
  Rng rng(4);
  std::map<int, double> hits;
  const int draws = 3000;
  for (int i = 0; i < draws; ++i) {
    const auto batch = sample_batch(data, {2, 1}, none, rng);
    hits[batch.view_ids[0]] += 1;
    hits[batch.view_ids[2]] += 1;
  }
  ASSERT_EQ(hits.size(), 6u);
  const double expected = 2.0 * draws / 6.0;
  double chi2 = 0.0;
  for (auto [id, h] : hits) chi2 += (h - expected) * (h - expected) / expected;
  EXPECT_LT(chi2, 20.5);
}

TEST_F(SamplerTest, EpochBatchesCoverGroupsOnce) {
  Rng rng(5);
  const auto batches = epoch_group_batches(data, {4, 3}, rng);
  EXPECT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches_per_epoch(data, {4, 3}), 1u);
  EXPECT_EQ(batches_per_epoch(data, {2, 3}), 3u);
}

TEST_F(SamplerTest, LabeledBatchRejectsStrippedLabels) {
  Rng rng(6);
  std::vector<std::size_t> idx{0, 1};
  EXPECT_THROW(make_labeled_batch(data, idx, false, AugmentConfig{}, rng), SamplerError);
}

TEST(Png, RoundTripsEightBitValues) {
  Image img(5, 7, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<double>((i * 37) % 256) / 255.0;
  const auto path = scratch_dir("png") / "img.png";
  write_png_image(path, img);
  const auto back = read_image(path);
  ASSERT_EQ(back.height, 5u);
  ASSERT_EQ(back.width, 7u);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-12);
}

TEST(RawImage, RejectsWrongMagic) {
  const auto path = scratch_dir("raw") / "bad.rawf";
  std::ofstream(path) << "NOTRAWXX";
  EXPECT_THROW(read_image(path), ImageIoError);
  EXPECT_THROW(read_image(path.parent_path() / "absent.rawf"), ImageIoError);
}
