#pragma once

// Scattered data approximation: slice pixels are gridded (by default to their
// nearest voxel) and the intensity and hit-count accumulators are both
// Gaussian blurred; the reconstruction is their ratio (normalized
// convolution).

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/volume.hpp"

namespace affirm {

// nearest: hit counts per voxel. trilinear and cubic spread each sample with
// linear (C0) or cubic B-spline (C2) weights, so the reconstruction is a
// continuous or twice-differentiable function of the slice poses.
enum class SdaDeposit { nearest, trilinear, cubic };

struct SdaConfig {
  double sigma_first_mm = 0.8;
  double sigma_last_mm = 0.52;
  int n_iterations = 4;
  Grid target_grid = Grid::centered({48, 48, 48}, Vec3::Constant(2.0));
  bool normalize = true;
  SdaDeposit deposit = SdaDeposit::nearest;
  double count_epsilon = 1e-6;

  void validate() const {
    if (!(sigma_last_mm > 0.0) || sigma_first_mm < sigma_last_mm)
      throw InvalidInput("SdaConfig: need sigma_first >= sigma_last > 0");
    if (n_iterations < 1) throw InvalidInput("SdaConfig: n_iterations must be >= 1");
    target_grid.validate();
  }
};

// Blur width for 1-based iteration k: linear from sigma_first to sigma_last.
inline double sigma_schedule(int iteration, const SdaConfig& cfg) {
  cfg.validate();
  if (iteration < 1 || iteration > cfg.n_iterations)
    throw InvalidInput("sigma_schedule: iteration " + std::to_string(iteration) + " outside [1, " +
                       std::to_string(cfg.n_iterations) + "]");
  if (cfg.n_iterations == 1) return cfg.sigma_first_mm;
  const double f = static_cast<double>(iteration - 1) / (cfg.n_iterations - 1);
  return cfg.sigma_first_mm + f * (cfg.sigma_last_mm - cfg.sigma_first_mm);
}

// Raw accumulators before blurring; exposed so the estimator can reuse them
// for its consistency-loss gradient.
struct SdaAccumulators {
  Grid grid;
  std::vector<double> intensity;
  std::vector<double> count;
};

// Object-frame position of every pixel of slice k under transform t (the
// transform maps object to scanner coordinates, so pixels go through its
// inverse). Calls fn(pixel_index, point).
template <typename Fn>
void for_each_slice_point(const StackGeometry& g, std::size_t k, const RigidTransform& t, Fn&& fn) {
  const AffineMap inv(invert(t));
  const PlaneAxes ax = plane_axes(g.orientation);
  const Vec3 du = inv.linear * (ax.u * g.in_plane_spacing_mm[0]);
  const Vec3 dv = inv.linear * (ax.v * g.in_plane_spacing_mm[1]);
  const Vec3 p00 = inv(g.pixel_world(k, 0, 0));
  for (int j = 0; j < g.height; ++j)
    for (int i = 0; i < g.width; ++i) fn(static_cast<std::size_t>(j) * g.width + i, p00 + du * i + dv * j);
}

inline long nearest_voxel(const Grid& grid, const Vec3& p) {
  const Vec3 c = grid.continuous_index(p);
  const int x = static_cast<int>(std::floor(c[0] + 0.5));
  const int y = static_cast<int>(std::floor(c[1] + 0.5));
  const int z = static_cast<int>(std::floor(c[2] + 0.5));
  if (x < 0 || y < 0 || z < 0 || x >= grid.dims[0] || y >= grid.dims[1] || z >= grid.dims[2]) return -1;
  return static_cast<long>(grid.index(x, y, z));
}

// Separable deposit weights of one point (up to 4 taps per axis), with their
// derivatives with respect to the world position. Taps outside the grid are
// dropped.
struct DepositStencil {
  int count = 0;
  std::array<long, 64> index{};
  std::array<double, 64> weight{};
  std::array<Vec3, 64> gradient{};
};

inline DepositStencil deposit_stencil(const Grid& grid, const Vec3& p, SdaDeposit mode) {
  DepositStencil st;
  const Vec3 c = grid.continuous_index(p);
  int first[3], taps = 0;
  double w[3][4], dw[3][4];
  for (int a = 0; a < 3; ++a) {
    if (mode == SdaDeposit::nearest) {
      taps = 1;
      first[a] = static_cast<int>(std::floor(c[a] + 0.5));
      w[a][0] = 1.0;
      dw[a][0] = 0.0;
    } else if (mode == SdaDeposit::trilinear) {
      taps = 2;
      const double f = std::floor(c[a]), u = c[a] - f;
      first[a] = static_cast<int>(f);
      w[a][0] = 1.0 - u;
      w[a][1] = u;
      dw[a][0] = -1.0;
      dw[a][1] = 1.0;
    } else {
      taps = 4;
      const double f = std::floor(c[a]), u = c[a] - f, v = 1.0 - u;
      first[a] = static_cast<int>(f) - 1;
      w[a][0] = v * v * v / 6.0;
      w[a][1] = (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0;
      w[a][2] = (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0;
      w[a][3] = u * u * u / 6.0;
      dw[a][0] = -0.5 * v * v;
      dw[a][1] = (3.0 * u * u - 4.0 * u) / 2.0;
      dw[a][2] = (-3.0 * u * u + 2.0 * u + 1.0) / 2.0;
      dw[a][3] = 0.5 * u * u;
    }
    for (int i = 0; i < taps; ++i) dw[a][i] /= grid.spacing[a];
  }
  for (int k = 0; k < taps; ++k) {
    const int z = first[2] + k;
    if (z < 0 || z >= grid.dims[2]) continue;
    for (int j = 0; j < taps; ++j) {
      const int y = first[1] + j;
      if (y < 0 || y >= grid.dims[1]) continue;
      for (int i = 0; i < taps; ++i) {
        const int x = first[0] + i;
        if (x < 0 || x >= grid.dims[0]) continue;
        st.index[st.count] = static_cast<long>(grid.index(x, y, z));
        st.weight[st.count] = w[0][i] * w[1][j] * w[2][k];
        st.gradient[st.count] =
            Vec3(dw[0][i] * w[1][j] * w[2][k], w[0][i] * dw[1][j] * w[2][k], w[0][i] * w[1][j] * dw[2][k]);
        ++st.count;
      }
    }
  }
  return st;
}

inline SdaAccumulators sda_deposit(const std::vector<SliceStack>& stacks,
                                   const std::vector<std::vector<RigidTransform>>& transforms, const Grid& grid,
                                   SdaDeposit mode) {
  SdaAccumulators acc{grid, std::vector<double>(grid.size(), 0.0), std::vector<double>(grid.size(), 0.0)};
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& st = stacks[s];
    if (transforms[s].size() != st.size()) throw InvalidInput("sda: every slice needs a transform");
    for (std::size_t k = 0; k < st.size(); ++k) {
      const auto& img = st.slices[k];
      for_each_slice_point(st.geometry, k, transforms[s][k], [&](std::size_t pix, const Vec3& p) {
        if (mode == SdaDeposit::nearest) {
          const long v = nearest_voxel(grid, p);
          if (v < 0) return;
          acc.intensity[v] += img.data[pix];
          acc.count[v] += 1.0;
          return;
        }
        const DepositStencil sten = deposit_stencil(grid, p, mode);
        for (int c = 0; c < sten.count; ++c) {
          acc.intensity[sten.index[c]] += sten.weight[c] * img.data[pix];
          acc.count[sten.index[c]] += sten.weight[c];
        }
      });
    }
  }
  return acc;
}

inline std::array<std::vector<double>, 3> sda_taps(const Grid& grid, double sigma_mm) {
  std::array<std::vector<double>, 3> taps;
  // The support is rounded up to at least one voxel so that narrow kernels on
  // a coarse grid still reach voxels that received no sample.
  for (int a = 0; a < 3; ++a) {
    const double s = sigma_mm / grid.spacing[a];
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * s)));
    taps[a].resize(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += taps[a][i + radius] = std::exp(-0.5 * i * i / (s * s));
    for (double& w : taps[a]) w /= sum;
  }
  return taps;
}

// a / c with a smooth floor on c: c + eps * exp(-c / eps) equals c wherever
// c >> eps and tends to eps as c -> 0, so the ratio is infinitely
// differentiable in the accumulators and vanishes with them (a <= c * max).
inline double smooth_count(double c, double eps) { return c + eps * std::exp(-c / eps); }
inline double normalized_ratio(double a, double c, double eps) { return a / smooth_count(c, eps); }

inline Volume3D sda_reconstruct(const std::vector<SliceStack>& stacks,
                                const std::vector<std::vector<RigidTransform>>& transforms, double sigma_mm,
                                const SdaConfig& cfg) {
  if (stacks.empty()) throw InvalidInput("sda_reconstruct: no stacks");
  if (transforms.size() != stacks.size()) throw InvalidInput("sda_reconstruct: transform list per stack required");
  if (!(sigma_mm > 0.0)) throw InvalidInput("sda_reconstruct: sigma must be > 0");
  cfg.target_grid.validate();
  SdaAccumulators acc = sda_deposit(stacks, transforms, cfg.target_grid, cfg.deposit);
  const auto taps = sda_taps(cfg.target_grid, sigma_mm);
  Volume3D out(cfg.target_grid);
  if (cfg.normalize) {
    convolve_separable(acc.intensity, cfg.target_grid.dims, taps);
    convolve_separable(acc.count, cfg.target_grid.dims, taps);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = normalized_ratio(acc.intensity[i], acc.count[i], cfg.count_epsilon);
  } else {
    // Per-voxel mean of the deposited samples, then blurred.
    for (std::size_t i = 0; i < out.data.size(); ++i)
      out.data[i] = acc.count[i] > 0.0 ? acc.intensity[i] / acc.count[i] : 0.0;
    convolve_separable(out.data, cfg.target_grid.dims, taps);
  }
  out.intensity_max = out.max();
  return out;
}

// Uses each stack's estimated transforms.
inline Volume3D sda_reconstruct(const std::vector<SliceStack>& stacks, double sigma_mm, const SdaConfig& cfg) {
  std::vector<std::vector<RigidTransform>> t;
  for (const auto& s : stacks) t.push_back(s.est_transforms);
  return sda_reconstruct(stacks, t, sigma_mm, cfg);
}

}  // namespace affirm
