#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "focalmix/error.hpp"
#include "focalmix/generator.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/scan_io.hpp"
#include "focalmix/volume.hpp"

namespace fs = std::filesystem;
using namespace focalmix;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("focalmix_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GenConfig small_cfg() {
  GenConfig g;
  g.volume_shape = {32, 32, 32};
  return g;
}

}  // namespace

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformMomentsAndRange) {
  Rng r(7);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_NEAR(sq / n - (sum / n) * (sum / n), 1.0 / 12.0, 0.002);
}

TEST(Rng, IntegerIsInclusiveAndCoversRange) {
  Rng r(3);
  std::array<int, 3> seen{};
  for (int i = 0; i < 3000; ++i) {
    const auto v = r.integer(1, 3);
    ASSERT_GE(v, 1);
    ASSERT_LE(v, 3);
    ++seen[static_cast<std::size_t>(v - 1)];
  }
  for (int c : seen) EXPECT_GT(c, 900);
}

TEST(Rng, NormalMoments) {
  Rng r(11);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.015);
}

TEST(Rng, DeriveSeedSeparatesIndices) {
  EXPECT_NE(derive_seed(0, 0), derive_seed(0, 1));
  EXPECT_NE(derive_seed(0, 1), derive_seed(1, 0));
  EXPECT_EQ(derive_seed(5, 9), derive_seed(5, 9));
}

TEST(Generator, Deterministic) {
  const auto cfg = small_cfg();
  const auto a = generate_scan(cfg, 17);
  const auto b = generate_scan(cfg, 17);
  EXPECT_EQ(a.volume.voxels, b.volume.voxels);
  EXPECT_EQ(a.boxes, b.boxes);
  EXPECT_EQ(a.id, b.id);
  EXPECT_NE(generate_scan(cfg, 18).volume.voxels, a.volume.voxels);
}

TEST(Generator, BoxCountWithinRange) {
  auto cfg = small_cfg();
  cfg.nodule_count_range = {1, 3};
  cfg.nodule_diameter_range = {4.0, 6.0};
  for (std::uint64_t i = 0; i < 40; ++i) {
    const auto s = generate_scan(cfg, i);
    EXPECT_GE(s.boxes.size(), 1u);
    EXPECT_LE(s.boxes.size(), 3u);
  }
}

TEST(Generator, BoxesInsideBoundsOverHundredScans) {
  GenConfig cfg;
  cfg.nodule_diameter_range = {4.0, 10.0};
  cfg.distractor_count_range = {0, 0};
  for (std::uint64_t i = 0; i < 100; ++i) {
    const auto s = generate_scan(cfg, i);
    for (const auto& b : s.boxes) {
      EXPECT_GE(b.edge, 4.0);
      EXPECT_LE(b.edge, 10.0);
      for (int a = 0; a < 3; ++a) {
        EXPECT_GE(b.center[a], b.edge / 2.0);
        EXPECT_LE(b.center[a], 64.0 - b.edge / 2.0);
      }
    }
    EXPECT_NO_THROW(validate_scan(s));
  }
}

TEST(Generator, NodulesBrighterThanSurroundings) {
  auto cfg = small_cfg();
  cfg.volume_shape = {48, 48, 48};
  cfg.distractor_count_range = {0, 0};
  cfg.nodule_count_range = {1, 1};
  cfg.noise_sigma = 0.3;
  cfg.bias_amplitude = 0.0;
  for (std::uint64_t i = 0; i < 30; ++i) {
    const auto s = generate_scan(cfg, i);
    const auto& v = s.volume;
    for (const auto& b : s.boxes) {
      const double r = b.edge / 2.0;
      double in = 0.0, out = 0.0;
      int n_in = 0, n_out = 0;
      for (int z = 0; z < v.shape[0]; ++z)
        for (int y = 0; y < v.shape[1]; ++y)
          for (int x = 0; x < v.shape[2]; ++x) {
            const double dz = z + 0.5 - b.center[0], dy = y + 0.5 - b.center[1], dx = x + 0.5 - b.center[2];
            const double d = std::sqrt(dz * dz + dy * dy + dx * dx);
            if (d < r) {
              in += v.at(z, y, x);
              ++n_in;
            } else if (d > r + 0.45 * b.edge && d < r + 0.45 * b.edge + 3.0) {
              out += v.at(z, y, x);
              ++n_out;
            }
          }
      ASSERT_GT(n_in, 0);
      ASSERT_GT(n_out, 0);
      EXPECT_GT(in / n_in, out / n_out) << s.id;
    }
  }
}

TEST(Generator, RejectsShapesTooSmallForNodules) {
  GenConfig cfg;
  cfg.volume_shape = {8, 64, 64};
  cfg.nodule_diameter_range = {4.0, 10.0};
  EXPECT_THROW(generate_scan(cfg, 0), ConfigError);
  cfg = GenConfig{};
  cfg.nodule_diameter_range = {2.0, 4.0};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(CropPatch, IdentityCrop) {
  const auto s = generate_scan(small_cfg(), 1);
  const auto c = crop_patch(s, {16, 16, 16}, {32, 32, 32}, 4);
  EXPECT_EQ(c.volume.voxels, s.volume.voxels);
  EXPECT_EQ(c.boxes, s.boxes);
}

TEST(CropPatch, DropsBoxWithCenterOutsideWindow) {
  LabeledScan s;
  s.volume = Volume3D({32, 32, 32});
  s.boxes = {Box3D{{8.0, 16.0, 16.0}, 4.0}, Box3D{{7.9, 16.0, 16.0}, 4.0}};
  // window covers z in [8, 24)
  const auto c = crop_patch(s, {16, 16, 16}, {16, 32, 32});
  ASSERT_EQ(c.boxes.size(), 1u);
  EXPECT_DOUBLE_EQ(c.boxes[0].center[0], 0.0);
}

TEST(CropPatch, PadsWithZeros) {
  LabeledScan s;
  s.volume = Volume3D({16, 16, 16}, {1, 1, 1}, 5.0f);
  // origin = (-4, 0, 0): the first four z-slices lie outside the source
  const auto c = crop_patch(s, {4, 8, 8}, {16, 16, 16});
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) ASSERT_EQ(c.volume.at(z, y, x), z < 4 ? 0.0f : 5.0f);
}

TEST(CropPatch, RejectsSizeNotDivisibleByStride) {
  LabeledScan s;
  s.volume = Volume3D({16, 16, 16});
  EXPECT_THROW(crop_patch(s, {8, 8, 8}, {12, 12, 10}, 4), ConfigError);
}

TEST(ScanIo, RoundTrip) {
  const auto dir = temp_dir("roundtrip");
  auto s = generate_scan(small_cfg(), 3);
  s.volume.spacing = {0.7, 0.8, 1.25};
  write_scan(s, dir);
  const auto r = read_scan(dir / (s.id + ".json"));
  EXPECT_EQ(r, s);
  EXPECT_EQ(read_scan(dir / s.id), s);
  EXPECT_EQ(read_scan(dir / (s.id + ".vol")), s);
}

TEST(ScanIo, TruncatedPayloadIsRejected) {
  const auto dir = temp_dir("truncated");
  LabeledScan s;
  s.id = "short";
  s.volume = Volume3D({64, 64, 64});
  write_scan(s, dir);
  fs::resize_file(dir / "short.vol", 64u * 64u * 63u * 4u);
  EXPECT_THROW(read_scan(dir / "short.json"), DataError);
}

TEST(ScanIo, NonFiniteVoxelIsRejected) {
  const auto dir = temp_dir("nonfinite");
  LabeledScan s;
  s.id = "nan";
  s.volume = Volume3D({4, 4, 4});
  write_scan(s, dir);
  std::fstream f(dir / "nan.vol", std::ios::in | std::ios::out | std::ios::binary);
  const float nan = std::nanf("");
  f.seekp(8);
  f.write(reinterpret_cast<const char*>(&nan), 4);
  f.close();
  EXPECT_THROW(read_scan(dir / "nan.json"), DataError);
}

TEST(ScanIo, MalformedSidecarIsRejected) {
  const auto dir = temp_dir("malformed");
  LabeledScan s;
  s.id = "bad";
  s.volume = Volume3D({4, 4, 4});
  write_scan(s, dir);
  std::ofstream(dir / "bad.json") << "{\"shape\": [4, 4]}";
  EXPECT_THROW(read_scan(dir / "bad.json"), DataError);
}

TEST(ScanIo, EmptyBoxListIsValid) {
  const auto dir = temp_dir("empty_boxes");
  auto s = generate_scan(small_cfg(), 4);
  s.boxes.clear();
  write_scan(s, dir);
  const auto r = read_scan(dir / (s.id + ".json"));
  EXPECT_TRUE(r.boxes.empty());
  EXPECT_EQ(r, s);
}

TEST(ScanIo, DirectoryListingIsSorted) {
  const auto dir = temp_dir("listing");
  const auto cfg = small_cfg();
  for (std::uint64_t i : {5u, 2u, 9u}) write_scan(generate_scan(cfg, i), dir);
  const auto all = read_scan_dir(dir);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0].id, scan_id(2));
  EXPECT_EQ(all[1].id, scan_id(5));
  EXPECT_EQ(all[2].id, scan_id(9));
}

TEST(Normalize, ZeroMeanUnitVariance) {
  auto v = generate_scan(small_cfg(), 0).volume;
  normalize(v);
  double sum = 0.0, sq = 0.0;
  for (float f : v.voxels) {
    sum += f;
    sq += static_cast<double>(f) * f;
  }
  const double n = static_cast<double>(v.size());
  EXPECT_NEAR(sum / n, 0.0, 1e-5);
  EXPECT_NEAR(sq / n, 1.0, 1e-4);
  Volume3D flat({4, 4, 4}, {1, 1, 1}, 3.0f);
  normalize(flat);
  for (float f : flat.voxels) EXPECT_EQ(f, 0.0f);
}
