#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "affirm/evaluation.hpp"
#include "affirm/volume.hpp"
#include "affirm/volume_io.hpp"

using namespace affirm;
namespace fs = std::filesystem;

namespace {

Volume3D random_volume(const Grid& g, std::uint64_t seed) {
  Volume3D v(g);
  CounterRng rng(seed);
  for (double& x : v.data) x = rng.uniform();
  return v;
}

// Brute-force trilinear oracle: sums all eight corners with their product
// weights, skipping corners outside the grid.
double oracle_trilinear(const Volume3D& v, const Vec3& p) {
  const Vec3 c = (p - v.grid.origin).cwiseQuotient(v.grid.spacing);
  double acc = 0.0;
  for (int k = 0; k < 8; ++k) {
    int idx[3];
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
      const int lo = static_cast<int>(std::floor(c[a]));
      const int bit = (k >> a) & 1;
      idx[a] = lo + bit;
      const double t = c[a] - lo;
      w *= bit ? t : 1.0 - t;
    }
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && idx[a] >= 0 && idx[a] < v.grid.dims[a];
    if (inside) acc += w * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

fs::path temp_dir(const char* name) {
  const fs::path p = fs::temp_directory_path() / ("affirm_test_volume_" + std::string(name));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume3D crop(const Volume3D& v, int band) {
  Grid g = v.grid;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] -= 2 * band;
    g.origin[a] += band * g.spacing[a];
  }
  Volume3D out(g);
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) out.at(x, y, z) = v.at(x + band, y + band, z + band);
  return out;
}

}  // namespace

TEST(Grid, RejectsBadShapes) {
  Grid g;
  g.dims = {0, 2, 2};
  EXPECT_THROW(g.validate(), InvalidInput);
  g.dims = {2, 2, 2};
  g.spacing = Vec3(1, 0, 1);
  EXPECT_THROW(g.validate(), InvalidInput);
}

TEST(Volume, NormalizeScalesToUnitMax) {
  Volume3D v(Grid::centered({4, 4, 4}, Vec3::Ones()));
  CounterRng rng(1);
  for (double& x : v.data) x = rng.uniform(-0.5, 3.0);
  v.normalize();
  EXPECT_DOUBLE_EQ(v.max(), 1.0);
  EXPECT_GE(v.min(), 0.0);
}

TEST(Trilinear, GridPointIsExact) {
  const Volume3D v = random_volume(Grid::centered({5, 6, 7}, Vec3(1.0, 1.5, 2.0)), 2);
  for (int z = 0; z < 7; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 5; ++x) EXPECT_EQ(trilinear_sample(v, v.grid.world(x, y, z)), v.at(x, y, z));
}

TEST(Trilinear, MidpointAverages) {
  Volume3D v(Grid::centered({3, 3, 3}, Vec3::Ones()));
  v.at(1, 1, 1) = 2.0;
  v.at(2, 1, 1) = 3.0;
  EXPECT_DOUBLE_EQ(trilinear_sample(v, v.grid.world(1.5, 1, 1)), 2.5);
}

TEST(Trilinear, MatchesCornerSumOracle) {
  const Volume3D v = random_volume(Grid::centered({8, 9, 10}, Vec3(1.0, 2.0, 0.5)), 3);
  CounterRng rng(4);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p = v.grid.world(rng.uniform(-1.5, 8.5), rng.uniform(-1.5, 9.5), rng.uniform(-1.5, 10.5));
    EXPECT_NEAR(trilinear_sample(v, p), oracle_trilinear(v, p), 1e-12);
  }
}

TEST(Resample, IdentityOnSameGrid) {
  const Volume3D v = random_volume(Grid::centered({6, 6, 6}, Vec3::Constant(2.0)), 5);
  const Volume3D r = resample(v, RigidTransform::identity());
  for (std::size_t i = 0; i < v.data.size(); ++i) EXPECT_NEAR(r.data[i], v.data[i], 1e-12);
}

TEST(Resample, OneVoxelTranslationShifts) {
  const Volume3D v = random_volume(Grid::centered({6, 6, 6}, Vec3::Constant(2.0)), 6);
  const RigidTransform t{Vec3::Zero(), Vec3(2.0, 0, 0), Vec3::Zero()};
  const Volume3D r = resample(v, t);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y) {
      EXPECT_EQ(r.at(0, y, z), 0.0);
      for (int x = 1; x < 6; ++x) EXPECT_NEAR(r.at(x, y, z), v.at(x - 1, y, z), 1e-12);
    }
}

TEST(Resample, RoundTripPreservesInterior) {
  const Volume3D v = make_phantom({});
  const RigidTransform t{Vec3(0.2, -0.1, 0.15), Vec3(2.0, -1.0, 1.5), v.grid.center()};
  const Volume3D back = resample(resample(v, t), invert(t));
  EXPECT_GT(ssim(crop(back, 6), crop(v, 6)), 0.98);
}

TEST(Phantom, Deterministic) {
  const Volume3D a = make_phantom({}), b = make_phantom({});
  EXPECT_EQ(a.data, b.data);
}

TEST(Phantom, SingleShellIsEllipsoid) {
  PhantomSpec spec;
  spec.n_shells = 1;
  spec.texture_amplitude = 0.0;
  spec.edge_width_mm = 0.0;
  const Volume3D v = make_phantom(spec);
  const Vec3 semi = phantom_semi_axes(spec), c = v.grid.center();
  const auto& d = v.grid.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const Vec3 q = (v.grid.world(x, y, z) - c).cwiseQuotient(semi);
        const double e = q.x() * q.x() + q.y() * q.y() + q.z() * q.z();
        EXPECT_EQ(v.at(x, y, z) > 0.0, e <= 1.0) << x << "," << y << "," << z;
      }
  EXPECT_DOUBLE_EQ(v.max(), 1.0);
}

TEST(Phantom, FlipIsDetectable) {
  const Volume3D v = make_phantom({});
  for (int axis = 0; axis < 3; ++axis) EXPECT_LT(ssim(flip(v, axis), v), 0.9) << "axis " << axis;
}

TEST(VolumeIo, RoundTrip) {
  const fs::path dir = temp_dir("roundtrip");
  Volume3D v = random_volume(Grid::centered({5, 4, 3}, Vec3(1.0, 1.25, 3.0), Vec3(1, 2, 3)), 7);
  for (double& x : v.data) x = static_cast<float>(x);
  v.intensity_max = 1.0;
  save_volume(v, dir / "v.raw");
  const Volume3D r = load_volume(dir / "v.raw");
  EXPECT_TRUE(r.grid.same_as(v.grid, 0.0));
  EXPECT_EQ(r.data, v.data);
}

TEST(VolumeIo, TruncatedPayloadIsRejected) {
  const fs::path dir = temp_dir("truncated");
  save_volume(random_volume(Grid::centered({3, 3, 3}, Vec3::Ones()), 8), dir / "v.raw");
  fs::resize_file(dir / "v.raw", 4 * 26);
  try {
    load_volume(dir / "v.raw");
    FAIL() << "expected InvalidInput";
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
}

TEST(VolumeIo, HandWrittenPayloadIsXFastest) {
  const fs::path dir = temp_dir("hand");
  io::write_file(dir / "v.json",
                 R"({"format":"affirm-volume","version":1,"datatype":"float32","byte_order":"little",)"
                 R"("dims":[2,2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0]})");
  // 1..8 as little-endian float32.
  std::string payload;
  for (int i = 1; i <= 8; ++i) {
    const float f = static_cast<float>(i);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  ASSERT_EQ(payload.size(), 32u);
  io::write_file(dir / "v.raw", payload);
  const Volume3D v = load_volume(dir / "v.raw");
  EXPECT_EQ(v.at(0, 0, 0), 1.0);
  EXPECT_EQ(v.at(1, 0, 0), 2.0);
  EXPECT_EQ(v.at(0, 1, 0), 3.0);
  EXPECT_EQ(v.at(0, 0, 1), 5.0);
  EXPECT_EQ(v.at(1, 1, 1), 8.0);
}

TEST(VolumeIo, MalformedHeaderIsRejected) {
  const fs::path dir = temp_dir("malformed");
  io::write_file(dir / "v.json", R"({"dims":[2,2],"spacing_mm":[1,1,1],"origin_mm":[0,0,0]})");
  io::write_file(dir / "v.raw", std::string(32, '\0'));
  EXPECT_THROW(load_volume(dir / "v.raw"), InvalidInput);
}

TEST(Smoothing, BlurPreservesConstants) {
  Volume3D v(Grid::centered({9, 9, 9}, Vec3::Ones()), 0.0);
  v.at(4, 4, 4) = 1.0;
  const Volume3D b = gaussian_blur(v, 1.0);
  double sum = 0.0;
  for (double x : b.data) sum += x;
  EXPECT_NEAR(sum, 1.0, 1e-12);
}
