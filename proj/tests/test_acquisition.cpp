#include <gtest/gtest.h>

#include <filesystem>

#include "affirm/acquisition.hpp"
#include "affirm/motionsim.hpp"
#include "affirm/stack_io.hpp"

using namespace affirm;

namespace {

AcquisitionConfig small_config(int n = 6) {
  AcquisitionConfig c;
  c.n_slices = n;
  c.width = 16;
  c.height = 12;
  return c;
}

Volume3D small_phantom() {
  PhantomSpec s;
  s.size_mm = 28.0;
  s.grid = Grid::centered({16, 16, 16}, Vec3::Constant(2.0));
  return make_phantom(s);
}

double hat(double x) { return std::max(0.0, 1.0 - std::abs(x)); }

}  // namespace

TEST(Psf, WeightsAreNormalizedAndSymmetric) {
  const PsfQuadrature q = psf_quadrature(1.7);
  double sum = 0.0;
  for (double w : q.weights) sum += w;
  EXPECT_NEAR(sum, 1.0, 1e-15);
  for (std::size_t i = 0; i < q.offsets.size(); ++i) EXPECT_NEAR(q.offsets[i], -q.offsets[q.offsets.size() - 1 - i], 1e-15);
}

TEST(Acquisition, DegeneratePsfIsCentralPlaneResample) {
  const Volume3D v = small_phantom();
  AcquisitionConfig c = small_config();
  c.psf_sigma_mm = 0.0;
  const StackGeometry g = c.geometry(Orientation::coronal);
  for (std::size_t k = 0; k < g.n_slices(); ++k) {
    const Image2D img = acquire_slice_clean(v, RigidTransform::identity(), g, k);
    for (int j = 0; j < g.height; ++j)
      for (int i = 0; i < g.width; ++i) EXPECT_NEAR(img.at(i, j), trilinear_sample(v, g.pixel_world(k, i, j)), 1e-12);
  }
}

TEST(Acquisition, UniformVolumeGivesUniformSlice) {
  Volume3D v(Grid::centered({40, 40, 40}, Vec3::Constant(2.0)), 0.7);
  const AcquisitionConfig c = small_config();
  const RigidTransform t{Vec3(0.2, 0.1, -0.3), Vec3(1, 2, -1), Vec3::Zero()};
  for (Orientation o : kAllOrientations) {
    const Image2D img = acquire_slice(v, t, o, 2, c);
    for (double x : img.data) EXPECT_NEAR(x, 0.7, 1e-12);
  }
}

// The slice model is a Gaussian-weighted sum of trilinear samples at the PSF
// nodes. For a unit impulse the trilinear sample is a product of hat
// functions, so the oracle evaluates that product directly.
TEST(Acquisition, ImpulseMatchesHatFunctionOracle) {
  Volume3D v(Grid::centered({11, 11, 11}, Vec3::Constant(2.0)), 0.0);
  const int ix = 5, iy = 6, iz = 4;
  v.at(ix, iy, iz) = 1.0;
  AcquisitionConfig c = small_config(5);
  c.width = 11;
  c.height = 11;
  c.thickness_mm = 3.0;
  c.psf_sigma_mm = 3.0 / 2.355;
  const RigidTransform t{Vec3(0.3, -0.2, 0.1), Vec3(0.7, -0.4, 0.9), Vec3(0.5, 0, 0)};
  const RigidTransform inv = invert(t);
  for (Orientation o : kAllOrientations) {
    const StackGeometry g = c.geometry(o);
    const PsfQuadrature q = psf_quadrature(g.psf_sigma_mm);
    const PlaneAxes ax = plane_axes(o);
    for (std::size_t k = 0; k < g.n_slices(); ++k) {
      const Image2D img = acquire_slice_clean(v, t, g, k);
      for (int j = 0; j < g.height; ++j)
        for (int i = 0; i < g.width; ++i) {
          double expect = 0.0;
          for (std::size_t s = 0; s < q.offsets.size(); ++s) {
            const Vec3 p = inv.apply(g.pixel_world(k, i, j) + ax.n * q.offsets[s]);
            const Vec3 ci = (p - v.grid.origin) / 2.0;
            expect += q.weights[s] * hat(ci.x() - ix) * hat(ci.y() - iy) * hat(ci.z() - iz);
          }
          EXPECT_NEAR(img.at(i, j), expect, 1e-6);
        }
    }
  }
}

TEST(Acquisition, LinearInVolume) {
  const Volume3D a = small_phantom();
  Volume3D b = a;
  CounterRng rng(3);
  for (double& x : b.data) x = rng.uniform();
  Volume3D sum = a;
  for (std::size_t i = 0; i < sum.data.size(); ++i) sum.data[i] = 2.0 * a.data[i] - 0.5 * b.data[i];
  const RigidTransform t{Vec3(0.1, 0.2, 0.3), Vec3(1, 0, 0), Vec3::Zero()};
  const AcquisitionConfig c = small_config();
  const Image2D ia = acquire_slice(a, t, Orientation::axial, 3, c), ib = acquire_slice(b, t, Orientation::axial, 3, c);
  const Image2D is = acquire_slice(sum, t, Orientation::axial, 3, c);
  for (std::size_t i = 0; i < is.size(); ++i) EXPECT_NEAR(is.data[i], 2.0 * ia.data[i] - 0.5 * ib.data[i], 1e-12);
}

TEST(AcquireStack, StaticTrajectoryEqualsStaticSlicing) {
  const Volume3D v = small_phantom();
  const AcquisitionConfig c = small_config();
  const SliceStack s = acquire_stack(v, static_trajectory(c.n_slices, 1.0, Vec3::Zero()), Orientation::sagittal, c);
  for (std::size_t k = 0; k < s.size(); ++k)
    EXPECT_EQ(s.slices[k].data, acquire_slice(v, RigidTransform::identity(), Orientation::sagittal, k, c).data);
}

TEST(AcquireStack, InterleavedOrderPermutesTimes) {
  const Volume3D v = small_phantom();
  AcquisitionConfig seq = small_config(6), il = seq;
  il.interleaved = true;
  EXPECT_EQ(il.acquisition_order(), (std::vector<int>{0, 2, 4, 1, 3, 5}));
  TrajectoryConfig tc;
  tc.seed = 9;
  const MotionTrajectory traj = simulate_trajectory(tc, 6);
  const SliceStack a = acquire_stack(v, traj, Orientation::axial, seq);
  const SliceStack b = acquire_stack(v, traj, Orientation::axial, il);
  const std::vector<int> order{0, 2, 4, 1, 3, 5};
  for (int t = 0; t < 6; ++t) {
    const int k = order[t];
    EXPECT_EQ(b.time_index[k], t);
    // Slice k of the interleaved stack sees the pose of time step t.
    EXPECT_EQ((*b.true_transforms)[k].theta, traj.samples[t].theta);
    EXPECT_EQ(b.slices[k].data, acquire_slice_clean(v, traj.samples[t], b.geometry, k).data);
  }
  for (int k = 0; k < 6; ++k) EXPECT_EQ((*a.true_transforms)[k].theta, traj.samples[k].theta);
}

TEST(AcquireStack, DefaultStackIsConsistent) {
  const Volume3D v = make_phantom({});
  AcquisitionConfig c;
  TrajectoryConfig tc;
  const SliceStack s = acquire_stack(v, simulate_trajectory(tc, c.n_slices), Orientation::coronal, c);
  EXPECT_EQ(s.size(), 24u);
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.geometry.n_slices(), 24u);
  EXPECT_NEAR(s.geometry.slice_offsets_mm[1] - s.geometry.slice_offsets_mm[0], 4.0, 1e-12);
  EXPECT_NEAR(s.geometry.psf_sigma_mm, 4.0 / 2.355, 1e-12);
  std::size_t brain = 0;
  for (bool b : s.brain_mask) brain += b;
  EXPECT_GT(brain, 10u);
  EXPECT_LT(brain, 24u);
}

TEST(AcquireStack, LengthMismatchIsRejected) {
  const Volume3D v = small_phantom();
  EXPECT_THROW(acquire_stack_from_samples(v, std::vector<RigidTransform>(3), Orientation::axial, small_config(6)),
               InvalidInput);
}

TEST(AcquireStack, NoiseIsSeeded) {
  const Volume3D v = small_phantom();
  AcquisitionConfig c = small_config();
  c.noise_sigma = 0.05;
  c.noise_seed = 4;
  const auto samples = std::vector<RigidTransform>(6);
  const SliceStack a = acquire_stack_from_samples(v, samples, Orientation::axial, c);
  const SliceStack b = acquire_stack_from_samples(v, samples, Orientation::axial, c);
  EXPECT_EQ(a.slices[2].data, b.slices[2].data);
  c.noise_seed = 5;
  const SliceStack d = acquire_stack_from_samples(v, samples, Orientation::axial, c);
  EXPECT_NE(a.slices[2].data, d.slices[2].data);
}

TEST(Deinterleave, SplitsByPosition) {
  const Volume3D v = small_phantom();
  AcquisitionConfig c = small_config(6);
  c.interleaved = true;
  TrajectoryConfig tc;
  const SliceStack s = acquire_stack(v, simulate_trajectory(tc, 6), Orientation::axial, c);
  const auto [odd_positions, even_positions] = deinterleave(s);
  // 1-based slices [1,3,5] are indices 0,2,4.
  ASSERT_EQ(odd_positions.size(), 3u);
  ASSERT_EQ(even_positions.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(odd_positions.slices[i].data, s.slices[2 * i].data);
    EXPECT_EQ(even_positions.slices[i].data, s.slices[2 * i + 1].data);
    EXPECT_EQ((*odd_positions.true_transforms)[i].theta, (*s.true_transforms)[2 * i].theta);
    EXPECT_EQ((*even_positions.true_transforms)[i].d, (*s.true_transforms)[2 * i + 1].d);
  }
  EXPECT_NO_THROW(odd_positions.validate());
}

TEST(Deinterleave, InterleaveRestoresStack) {
  const Volume3D v = small_phantom();
  AcquisitionConfig c = small_config(7);
  c.interleaved = true;
  TrajectoryConfig tc;
  const SliceStack s = acquire_stack(v, simulate_trajectory(tc, 7), Orientation::coronal, c);
  const auto [a, b] = deinterleave(s);
  const SliceStack r = interleave(a, b);
  EXPECT_EQ(r.acquisition_order, s.acquisition_order);
  EXPECT_EQ(r.time_index, s.time_index);
  EXPECT_EQ(r.geometry.slice_offsets_mm, s.geometry.slice_offsets_mm);
  for (std::size_t k = 0; k < s.size(); ++k) {
    EXPECT_EQ(r.slices[k].data, s.slices[k].data);
    EXPECT_EQ((*r.true_transforms)[k].theta, (*s.true_transforms)[k].theta);
  }
}

TEST(StackIo, RoundTripKeepsGeometryAndTransforms) {
  const Volume3D v = small_phantom();
  AcquisitionConfig c = small_config(5);
  c.interleaved = true;
  TrajectoryConfig tc;
  const SliceStack s = acquire_stack(v, simulate_trajectory(tc, 5), Orientation::sagittal, c);
  const auto dir = std::filesystem::temp_directory_path() / "affirm_test_stack_io";
  std::filesystem::remove_all(dir);
  save_stack(s, dir);
  const SliceStack r = load_stack(dir);
  EXPECT_EQ(r.orientation(), s.orientation());
  EXPECT_EQ(r.acquisition_order, s.acquisition_order);
  EXPECT_EQ(r.time_index, s.time_index);
  EXPECT_EQ(r.brain_mask, s.brain_mask);
  EXPECT_EQ(r.geometry.slice_offsets_mm, s.geometry.slice_offsets_mm);
  for (std::size_t k = 0; k < s.size(); ++k) {
    EXPECT_EQ((*r.true_transforms)[k].theta, (*s.true_transforms)[k].theta);
    for (std::size_t i = 0; i < s.slices[k].size(); ++i)
      EXPECT_EQ(r.slices[k].data[i], static_cast<double>(static_cast<float>(s.slices[k].data[i])));
  }
}

TEST(StackIo, MissingDirectoryIsInvalidInput) {
  EXPECT_THROW(load_stack("/nonexistent/affirm/stack"), InvalidInput);
}
