#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "polypseg/data.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("polypseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Sample pattern_sample(std::size_t h, std::size_t w) {
  Sample s{Tensor<float>({3, h, w}), LabelTensor({h, w}), "p", "s"};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const float v = static_cast<float>(y * w + x) / static_cast<float>(h * w);
      for (std::size_t c = 0; c < 3; ++c) s.image[(c * h + y) * w + x] = v * (c + 1) / 3.0f;
      s.mask[y * w + x] = (y * w + x) % 3 == 0;
    }
  return s;
}

AugmentConfig fixed(double rot, double zoom, double shear) {
  AugmentConfig c;
  c.rotation_min_deg = c.rotation_max_deg = rot;
  c.zoom_min = c.zoom_max = zoom;
  c.shear_min = c.shear_max = shear;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- loading

TEST(Dataset, NormalizationAndMaskThreshold) {
  Image8 rgb{2, 1, 3, {255, 0, 128, 0, 255, 51}};
  const auto t = image_from_png8(rgb);
  EXPECT_EQ(t[0], 1.0f);       // R of pixel 0
  EXPECT_EQ(t[1], 0.0f);       // R of pixel 1
  EXPECT_EQ(t[2 * 2 + 1], 0.2f);  // B of pixel 1
  Image8 gray{4, 1, 1, {0, 127, 128, 255}};
  EXPECT_EQ(mask_from_png8(gray), LabelTensor({1, 4}, {0, 0, 1, 1}));
}

TEST(Dataset, WriteThenLoadRoundTrip) {
  Rng rng(1);
  Dataset ds;
  ds.samples = generate_synthetic(30, 32, 32, rng);
  ds.manifest = split_by_patient(ds.samples);
  const auto root = temp_dir("roundtrip");
  write_dataset(root, ds);
  const auto back = load_dataset(root);
  ASSERT_EQ(back.samples.size(), 30u);
  EXPECT_EQ(back.manifest, ds.manifest);
  for (std::size_t i = 0; i < 30; ++i) {
    EXPECT_EQ(back.samples[i].name, ds.samples[i].name);
    EXPECT_EQ(back.samples[i].patient_id, ds.samples[i].patient_id);
    EXPECT_EQ(back.samples[i].mask, ds.samples[i].mask);
    EXPECT_TRUE(bit_identical(back.samples[i].image, ds.samples[i].image));
  }
  EXPECT_EQ(back.split(Split::val).size(), ds.manifest.val.size());
}

TEST(Dataset, MissingMaskNamesTheStem) {
  Rng rng(2);
  Dataset ds;
  ds.samples = generate_synthetic(5, 32, 32, rng);
  ds.manifest.train = {"s00000", "s00001", "s00002", "s00003", "s00004"};
  const auto root = temp_dir("missing_mask");
  write_dataset(root, ds);
  fs::remove(root / "masks" / "s00003.png");
  try {
    load_dataset(root);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("s00003"), std::string::npos);
  }
}

TEST(Dataset, PatientInTwoSplitsIsManifestError) {
  Rng rng(3);
  Dataset ds;
  ds.samples = generate_synthetic(10, 32, 32, rng);  // patients p0000, p0001
  ds.manifest.train = {"s00000", "s00001", "s00002", "s00003", "s00004"};
  ds.manifest.val = {"s00005", "s00006", "s00007", "s00008", "s00009"};
  const auto root = temp_dir("overlap");
  write_dataset(root, ds);
  EXPECT_NO_THROW(load_dataset(root));
  {
    std::ofstream out(root / "split.txt");
    out << "s00000\tp0000\ttrain\ns00001\tp0000\tval\n";
  }
  EXPECT_THROW(load_dataset(root), ManifestError);
  {
    std::ofstream out(root / "split.txt");
    out << "s00000\tp0000\tholdout\n";
  }
  EXPECT_THROW(load_dataset(root), ManifestError);
}

TEST(Dataset, WithoutManifestEverythingIsTrain) {
  Rng rng(4);
  Dataset ds;
  ds.samples = generate_synthetic(3, 32, 32, rng);
  ds.manifest.train = {"s00000", "s00001", "s00002"};
  const auto root = temp_dir("nomanifest");
  write_dataset(root, ds);
  fs::remove(root / "split.txt");
  const auto back = load_dataset(root);
  EXPECT_EQ(back.manifest.train.size(), 3u);
  EXPECT_TRUE(back.manifest.val.empty());
}

TEST(Dataset, PatientSplitIsDisjointUnderShuffle) {
  Rng rng(5);
  const auto samples = generate_synthetic(600, 32, 32, rng);
  const auto m = split_by_patient(samples);
  EXPECT_EQ(m.train.size(), 500u);
  EXPECT_EQ(m.val.size(), 50u);
  EXPECT_EQ(m.test.size(), 50u);
  EXPECT_TRUE(m.patient_disjoint);
  std::map<std::string, std::string> patient;
  for (const auto& s : samples) patient[s.name] = s.patient_id;
  std::set<std::string> train_patients;
  for (const auto& n : m.train) train_patients.insert(patient[n]);
  // Shuffled batches only permute within a split.
  Rng r(9);
  for (const auto& batch : batch_order(m.val.size(), 7, true, r))
    for (auto i : batch) EXPECT_FALSE(train_patients.count(patient[m.val[i]]));
  EXPECT_THROW(split_by_patient(generate_synthetic(10, 32, 32, rng)), InvalidArgument);
}

// ----------------------------------------------------------- augmentation

TEST(Augment, IdentityConfigLeavesSampleUnchanged) {
  const auto s = pattern_sample(8, 8);
  Rng rng(1);
  const auto out = augment(s, fixed(0, 1, 0), rng);
  EXPECT_TRUE(bit_identical(out.image, s.image));
  EXPECT_EQ(out.mask, s.mask);
}

TEST(Augment, QuarterTurnMatchesHandRotatedPattern) {
  Sample s{Tensor<float>({3, 4, 4}), LabelTensor({4, 4}), "p", "s"};
  // Pattern with every value distinct, mask marks the top row.
  for (int i = 0; i < 16; ++i)
    for (int c = 0; c < 3; ++c) s.image[c * 16 + i] = (i + 1) / 16.0f;
  for (int x = 0; x < 4; ++x) s.mask[x] = 1;
  // Counterclockwise by 90 degrees, written out by hand:
  //  1  2  3  4        4  8 12 16
  //  5  6  7  8   ->   3  7 11 15
  //  9 10 11 12        2  6 10 14
  // 13 14 15 16        1  5  9 13
  const int expected[16] = {4, 8, 12, 16, 3, 7, 11, 15, 2, 6, 10, 14, 1, 5, 9, 13};
  const LabelTensor expected_mask({4, 4}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
  Rng rng(1);
  const auto out = augment(s, fixed(90, 1, 0), rng);
  for (int i = 0; i < 16; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.image[c * 16 + i], expected[i] / 16.0f, 1e-6);
  EXPECT_EQ(out.mask, expected_mask);
}

TEST(Augment, ZoomScalesDiskArea) {
  const std::size_t n = 64;
  Sample s{Tensor<float>({3, n, n}, 0.0f), LabelTensor({n, n}, 0), "p", "s"};
  std::size_t area0 = 0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = x - 31.5, dy = y - 31.5;
      if (dx * dx + dy * dy <= 12.0 * 12.0) {
        s.mask[y * n + x] = 1;
        ++area0;
      }
    }
  Rng rng(1);
  const auto out = augment(s, fixed(0, 1.2, 0), rng);
  std::size_t area1 = 0;
  for (auto v : out.mask.vec()) area1 += v;
  EXPECT_NEAR(static_cast<double>(area1) / area0, 1.44, 0.144);
}

TEST(Augment, MaskStaysBinaryAndMatchesMaskOnlyWarp) {
  Rng gen(2);
  const auto samples = generate_synthetic(20, 64, 64, gen);
  AugmentConfig cfg;
  cfg.crop_h = cfg.crop_w = 32;
  Rng rng(3);
  for (const auto& s : samples) {
    const auto draw = draw_augment(cfg, rng);
    const auto out = apply_augment(s, cfg, draw);
    EXPECT_EQ(out.mask.shape(), (Shape{32, 32}));
    for (auto v : out.mask.vec()) ASSERT_TRUE(v == 0 || v == 1);
    EXPECT_EQ(warp_mask(s.mask, cfg, draw), out.mask);
    for (auto v : out.image.vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Augment, DrawsStayInConfiguredRanges) {
  AugmentConfig cfg;
  Rng rng(4);
  std::set<int> anchors;
  for (int i = 0; i < 2000; ++i) {
    const auto d = draw_augment(cfg, rng);
    ASSERT_GE(d.rotation_deg, -90.0);
    ASSERT_LE(d.rotation_deg, 90.0);
    ASSERT_GE(d.zoom, 0.8);
    ASSERT_LE(d.zoom, 1.2);
    ASSERT_GE(d.shear, 0.0);
    ASSERT_LE(d.shear, 0.4);
    anchors.insert(static_cast<int>(d.anchor));
  }
  EXPECT_EQ(anchors.size(), 5u);
}

TEST(Augment, CornerCropsSelectCorners) {
  const auto s = pattern_sample(8, 8);
  AugmentConfig cfg = fixed(0, 1, 0);
  cfg.crop_h = cfg.crop_w = 4;
  AugmentDraw d;
  d.anchor = CropAnchor::bottom_right;
  const auto out = apply_augment(s, cfg, d);
  EXPECT_EQ(out.image[0], s.image[4 * 8 + 4]);
  d.anchor = CropAnchor::top_right;
  EXPECT_EQ(apply_augment(s, cfg, d).image[0], s.image[4]);
  d.anchor = CropAnchor::center;
  EXPECT_EQ(apply_augment(s, cfg, d).image[0], s.image[2 * 8 + 2]);
}

TEST(Augment, OversizedCropRejected) {
  AugmentConfig cfg;
  cfg.crop_h = 16;
  Rng rng(1);
  EXPECT_THROW(augment(pattern_sample(8, 8), cfg, rng), InvalidArgument);
}

// ----------------------------------------------------------------- batching

TEST(Batches, PartitionSizes) {
  Rng gen(1);
  const auto samples = generate_synthetic(25, 32, 32, gen);
  Rng rng(2);
  const auto batches = make_batches(samples, 10, false, rng);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].images.shape(), (Shape{10, 3, 32, 32}));
  EXPECT_EQ(batches[2].masks.shape(), (Shape{5, 32, 32}));
  std::size_t k = 0;
  for (const auto& b : batches)
    for (auto i : b.indices) EXPECT_EQ(i, k++);
  EXPECT_EQ(batches[1].masks.vec()[0], samples[10].mask.vec()[0]);
}

TEST(Batches, ShuffleIsSeedDeterministic) {
  Rng a(7), b(7), c(8);
  const auto x = batch_order(100, 10, true, a);
  EXPECT_EQ(x, batch_order(100, 10, true, b));
  EXPECT_NE(x, batch_order(100, 10, true, c));
  std::vector<std::size_t> all;
  for (const auto& v : x) all.insert(all.end(), v.begin(), v.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
}

TEST(Batches, MixedSizesRejected) {
  std::vector<Sample> v{pattern_sample(8, 8), pattern_sample(4, 4)};
  Rng rng(1);
  EXPECT_THROW(make_batches(v, 2, false, rng), ShapeError);
  EXPECT_THROW(make_batches(v, 0, false, rng), InvalidArgument);
}

// ---------------------------------------------------------------- synthetic

TEST(Synthetic, GeneratorContract) {
  Rng rng(11);
  const auto samples = generate_synthetic(100, 64, 64, rng);
  ASSERT_EQ(samples.size(), 100u);
  for (const auto& s : samples) {
    check_sample(s);
    for (auto v : s.mask.vec()) ASSERT_TRUE(v == 0 || v == 1);
    for (auto v : s.image.vec()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  EXPECT_THROW(generate_synthetic(10, 48, 64, rng), InvalidArgument);
  EXPECT_THROW(generate_synthetic(0, 64, 64, rng), InvalidArgument);
}

TEST(Synthetic, EveryPlacedBlobHasArea) {
  // Radius floor, evaluated at the generator's smallest setting.
  SyntheticConfig cfg;
  cfg.blob_count_p = {0.0, 1.0, 0.0};
  cfg.radius_max = cfg.radius_min;
  Rng rng(12);
  for (const auto& s : generate_synthetic(50, 64, 64, rng, cfg)) {
    std::size_t area = 0;
    for (auto v : s.mask.vec()) area += v;
    EXPECT_GT(area, 0u);
  }
}

TEST(Synthetic, SeedDeterminism) {
  Rng a(5), b(5);
  const auto x = generate_synthetic(10, 32, 32, a), y = generate_synthetic(10, 32, 32, b);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_TRUE(bit_identical(x[i].image, y[i].image));
    EXPECT_EQ(x[i].mask, y[i].mask);
  }
}

TEST(Synthetic, PolypPrevalence) {
  Rng rng(13);
  const auto samples = generate_synthetic(1000, 64, 64, rng);
  double frac = 0;
  for (const auto& s : samples) {
    std::size_t area = 0;
    for (auto v : s.mask.vec()) area += v;
    frac += static_cast<double>(area) / s.mask.size();
  }
  frac /= samples.size();
  EXPECT_GE(frac, 0.02);
  EXPECT_LE(frac, 0.25);
  RecordProperty("prevalence", std::to_string(frac));
  std::cout << "mean polyp fraction " << frac << "\n";
}
