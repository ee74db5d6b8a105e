#pragma once

// Regular-grid scalar volumes: sampling, resampling, smoothing, and the
// synthetic phantom family used as ground truth.

#include <array>
#include <cmath>
#include <vector>

#include "affirm/core.hpp"
#include "affirm/geometry.hpp"

namespace affirm {

// Geometry of a regular grid. origin is the world position (mm) of the center
// of voxel (0,0,0); axes are aligned with world x, y, z.
struct Grid {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 spacing = Vec3::Ones();
  Vec3 origin = Vec3::Zero();

  // Grid of the given size centered on `center`.
  static Grid centered(std::array<int, 3> dims, const Vec3& spacing, const Vec3& center = Vec3::Zero()) {
    Grid g;
    g.dims = dims;
    g.spacing = spacing;
    for (int a = 0; a < 3; ++a) g.origin[a] = center[a] - 0.5 * (dims[a] - 1) * spacing[a];
    return g;
  }

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(dims[0]) *
                                             (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
  }
  Vec3 world(double x, double y, double z) const {
    return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
  }
  Vec3 continuous_index(const Vec3& p) const { return (p - origin).cwiseQuotient(spacing); }
  Vec3 center() const { return world(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1)); }
  Vec3 extent_mm() const {
    return {dims[0] * spacing[0], dims[1] * spacing[1], dims[2] * spacing[2]};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw InvalidInput("Grid: dims must be >= 1");
      if (!(spacing[a] > 0.0)) throw InvalidInput("Grid: spacing must be > 0");
    }
  }

  bool same_as(const Grid& o, double tol = 1e-9) const {
    return dims == o.dims && (spacing - o.spacing).cwiseAbs().maxCoeff() <= tol &&
           (origin - o.origin).cwiseAbs().maxCoeff() <= tol;
  }
};

struct Volume3D {
  Grid grid;
  std::vector<double> data;
  double intensity_max = 0.0;

  Volume3D() = default;
  explicit Volume3D(const Grid& g, double fill = 0.0) : grid(g), data(g.size(), fill) { g.validate(); }

  const std::array<int, 3>& dims() const { return grid.dims; }
  double& at(int x, int y, int z) { return data[grid.index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[grid.index(x, y, z)]; }

  double max() const {
    double m = -INFINITY;
    for (double v : data) m = std::max(m, v);
    return data.empty() ? 0.0 : m;
  }
  double min() const {
    double m = INFINITY;
    for (double v : data) m = std::min(m, v);
    return data.empty() ? 0.0 : m;
  }

  // Scales so the maximum is 1 and clamps negatives to 0.
  void normalize() {
    const double m = max();
    if (!(m > 0.0)) throw InvalidInput("normalize: volume has no positive intensity");
    for (double& v : data) v = std::max(0.0, v / m);
    intensity_max = 1.0;
  }
};

// Trilinear interpolation in world coordinates with zero padding: voxels
// outside the grid read as 0, so samples more than one voxel outside are 0.
inline double trilinear_sample(const Volume3D& v, const Vec3& p_world) {
  const Grid& g = v.grid;
  const Vec3 c = g.continuous_index(p_world);
  const double fx = std::floor(c[0]), fy = std::floor(c[1]), fz = std::floor(c[2]);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= g.dims[0] || y0 >= g.dims[1] || z0 >= g.dims[2]) return 0.0;
  const double tx = c[0] - fx, ty = c[1] - fy, tz = c[2] - fz;
  const bool interior = x0 >= 0 && y0 >= 0 && z0 >= 0 && x0 + 1 < g.dims[0] && y0 + 1 < g.dims[1] &&
                        z0 + 1 < g.dims[2];
  if (interior) {
    const std::size_t sx = 1, sy = static_cast<std::size_t>(g.dims[0]),
                      sz = static_cast<std::size_t>(g.dims[0]) * g.dims[1];
    const double* p = v.data.data() + g.index(x0, y0, z0);
    const double c00 = p[0] * (1 - tx) + p[sx] * tx;
    const double c10 = p[sy] * (1 - tx) + p[sy + sx] * tx;
    const double c01 = p[sz] * (1 - tx) + p[sz + sx] * tx;
    const double c11 = p[sz + sy] * (1 - tx) + p[sz + sy + sx] * tx;
    const double c0 = c00 * (1 - ty) + c10 * ty;
    const double c1 = c01 * (1 - ty) + c11 * ty;
    return c0 * (1 - tz) + c1 * tz;
  }
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const int z = z0 + dz;
    if (z < 0 || z >= g.dims[2]) continue;
    const double wz = dz ? tz : 1 - tz;
    for (int dy = 0; dy < 2; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= g.dims[1]) continue;
      const double wy = dy ? ty : 1 - ty;
      for (int dx = 0; dx < 2; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= g.dims[0]) continue;
        acc += (dx ? tx : 1 - tx) * wy * wz * v.data[g.index(x, y, z)];
      }
    }
  }
  return acc;
}

// Eight corner indices and weights of a trilinear sample; corners outside the
// grid are dropped. Used for adjoint (splatting) operators.
struct TrilinearStencil {
  std::array<std::size_t, 8> index{};
  std::array<double, 8> weight{};
  int count = 0;
};

inline TrilinearStencil trilinear_stencil(const Grid& g, const Vec3& p_world) {
  TrilinearStencil s;
  const Vec3 c = g.continuous_index(p_world);
  const double fx = std::floor(c[0]), fy = std::floor(c[1]), fz = std::floor(c[2]);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
  if (x0 < -1 || y0 < -1 || z0 < -1 || x0 >= g.dims[0] || y0 >= g.dims[1] || z0 >= g.dims[2]) return s;
  const double tx = c[0] - fx, ty = c[1] - fy, tz = c[2] - fz;
  for (int dz = 0; dz < 2; ++dz) {
    const int z = z0 + dz;
    if (z < 0 || z >= g.dims[2]) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= g.dims[1]) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= g.dims[0]) continue;
        s.index[s.count] = g.index(x, y, z);
        s.weight[s.count] = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
        ++s.count;
      }
    }
  }
  return s;
}

// Output voxel at world point p holds v sampled at invert(T)(p): the volume
// moved by T, seen on the target grid.
inline Volume3D resample(const Volume3D& v, const RigidTransform& t, const Grid& target) {
  Volume3D out(target);
  out.intensity_max = v.intensity_max;
  const AffineMap inv(invert(t));
  const int nx = target.dims[0], ny = target.dims[1];
  parallel_for(static_cast<std::size_t>(target.dims[2]), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        out.data[target.index(x, y, z)] = trilinear_sample(v, inv(target.world(x, y, z)));
  });
  return out;
}

inline Volume3D resample(const Volume3D& v, const RigidTransform& t) { return resample(v, t, v.grid); }

// =============================================================================
// Smoothing and pyramids
// =============================================================================

// Normalized 1-D Gaussian taps for std `sigma_vox` (in voxels), truncated at
// `truncate` standard deviations.
inline std::vector<double> gaussian_taps(double sigma_vox, double truncate = 3.0) {
  const int radius = sigma_vox > 0 ? static_cast<int>(std::floor(truncate * sigma_vox)) : 0;
  std::vector<double> taps(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = sigma_vox > 0 ? std::exp(-0.5 * (i * i) / (sigma_vox * sigma_vox)) : 1.0;
    taps[i + radius] = w;
    sum += w;
  }
  for (double& w : taps) w /= sum;
  return taps;
}

// Separable convolution along each axis with the given taps; samples beyond
// the grid are treated as 0.
inline void convolve_separable(std::vector<double>& data, const std::array<int, 3>& dims,
                               const std::array<std::vector<double>, 3>& taps) {
  std::vector<double> tmp(data.size());
  const std::size_t stride[3] = {1, static_cast<std::size_t>(dims[0]),
                                 static_cast<std::size_t>(dims[0]) * dims[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const auto& k = taps[axis];
    const int radius = static_cast<int>(k.size() / 2);
    if (radius == 0 && k[0] == 1.0) continue;
    const int n = dims[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const std::size_t lines = static_cast<std::size_t>(dims[a1]) * dims[a2];
    parallel_for(lines, [&](std::size_t li) {
      const int i1 = static_cast<int>(li % dims[a1]);
      const int i2 = static_cast<int>(li / dims[a1]);
      const std::size_t base = i1 * stride[a1] + i2 * stride[a2];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        const int lo = std::max(-radius, -i), hi = std::min(radius, n - 1 - i);
        for (int t = lo; t <= hi; ++t) acc += k[t + radius] * data[base + (i + t) * stride[axis]];
        tmp[base + i * stride[axis]] = acc;
      }
    });
    data.swap(tmp);
  }
}

// Isotropic Gaussian blur with std in mm, truncated at 3 sigma.
inline Volume3D gaussian_blur(const Volume3D& v, double sigma_mm) {
  Volume3D out = v;
  std::array<std::vector<double>, 3> taps;
  for (int a = 0; a < 3; ++a) taps[a] = gaussian_taps(sigma_mm / v.grid.spacing[a]);
  convolve_separable(out.data, out.grid.dims, taps);
  return out;
}

// Block-average downsampling by an integer factor (trailing partial blocks
// are averaged over their valid voxels).
inline Volume3D downsample(const Volume3D& v, int factor) {
  if (factor <= 1) return v;
  Grid g;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = (v.grid.dims[a] + factor - 1) / factor;
    g.spacing[a] = v.grid.spacing[a] * factor;
  }
  // Block centers in world space.
  for (int a = 0; a < 3; ++a) g.origin[a] = v.grid.origin[a] + 0.5 * (factor - 1) * v.grid.spacing[a];
  Volume3D out(g);
  out.intensity_max = v.intensity_max;
  std::vector<int> count(g.size(), 0);
  for (int z = 0; z < v.grid.dims[2]; ++z)
    for (int y = 0; y < v.grid.dims[1]; ++y)
      for (int x = 0; x < v.grid.dims[0]; ++x) {
        const std::size_t o = g.index(x / factor, y / factor, z / factor);
        out.data[o] += v.at(x, y, z);
        ++count[o];
      }
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= count[i];
  return out;
}

// Mirror along one axis (used to probe phantom asymmetry).
inline Volume3D flip(const Volume3D& v, int axis) {
  Volume3D out = v;
  const auto& d = v.grid.dims;
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        int s[3] = {x, y, z};
        s[axis] = d[axis] - 1 - s[axis];
        out.at(x, y, z) = v.at(s[0], s[1], s[2]);
      }
  return out;
}

// Intensity-weighted centroid and second-moment tensor (world mm).
struct Moments {
  double mass = 0.0;
  Vec3 centroid = Vec3::Zero();
  Mat3 covariance = Mat3::Zero();
};

inline Moments intensity_moments(const Volume3D& v) {
  Moments m;
  const auto& d = v.grid.dims;
  Vec3 s1 = Vec3::Zero();
  Mat3 s2 = Mat3::Zero();
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const double w = std::max(0.0, v.at(x, y, z));
        if (w == 0.0) continue;
        const Vec3 p = v.grid.world(x, y, z);
        m.mass += w;
        s1 += w * p;
        s2 += w * p * p.transpose();
      }
  if (m.mass <= 0.0) return m;
  m.centroid = s1 / m.mass;
  m.covariance = s2 / m.mass - m.centroid * m.centroid.transpose();
  return m;
}

// =============================================================================
// Phantom
// =============================================================================

// Parameters of the synthetic head-like phantom: an outer ellipsoid plus
// (n_shells - 1) seeded internal structures and optional smooth texture.
struct PhantomSpec {
  double size_mm = 72.0;  // outer extent along the longest axis
  std::uint64_t feature_seed = 7;
  int n_shells = 9;
  double texture_amplitude = 0.15;
  double scale = 1.0;           // isotropic size factor (augmentation)
  double edge_width_mm = 3.0;   // soft-edge half width; 0 gives binary edges
  Grid grid = Grid::centered({48, 48, 48}, Vec3::Constant(2.0));

  void validate() const {
    if (n_shells < 1) throw InvalidInput("PhantomSpec: n_shells must be >= 1");
    if (texture_amplitude < 0.0 || texture_amplitude > 1.0)
      throw InvalidInput("PhantomSpec: texture_amplitude must lie in [0,1]");
    if (!(size_mm > 0.0) || !(scale > 0.0)) throw InvalidInput("PhantomSpec: size must be > 0");
    grid.validate();
  }
};

// Outer ellipsoid semi-axes (mm) of a phantom; the three values differ so the
// principal axes are well defined.
inline Vec3 phantom_semi_axes(const PhantomSpec& spec) {
  const double a = 0.5 * spec.size_mm * spec.scale;
  return {a, 0.80 * a, 0.66 * a};
}

namespace detail {

// C1 ramp: 1 inside (s <= -1), 0 outside (s >= 1).
inline double soft_inside(double s) {
  if (s <= -1.0) return 1.0;
  if (s >= 1.0) return 0.0;
  const double u = 0.5 * (s + 1.0);
  return 1.0 - u * u * (3.0 - 2.0 * u);
}

struct Blob {
  Vec3 center;
  Vec3 semi;
  Mat3 rot;  // world -> blob frame
  double amplitude;
};

}  // namespace detail

inline Volume3D make_phantom(const PhantomSpec& spec) {
  spec.validate();
  CounterRng rng(spec.feature_seed, 0x9a11);
  const Vec3 semi = phantom_semi_axes(spec);
  const Vec3 center = spec.grid.center();

  // Internal structures: offset ellipsoids inside the outer one, alternating
  // darker and brighter so the interior has contrast in every direction.
  std::vector<detail::Blob> blobs;
  for (int k = 1; k < spec.n_shells; ++k) {
    detail::Blob b;
    const double frac = 0.55 - 0.04 * (k - 1);
    Vec3 dir(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    dir = dir.cwiseProduct(Vec3(0.45, 0.45, 0.45));
    b.center = center + semi.cwiseProduct(dir);
    b.semi = semi * std::max(0.12, frac * rng.uniform(0.45, 0.75));
    b.semi[0] *= rng.uniform(0.7, 1.3);
    b.semi[2] *= rng.uniform(0.7, 1.3);
    b.rot = euler_to_matrix(Vec3(rng.uniform(-kPi, kPi), rng.uniform(-0.5 * kPi, 0.5 * kPi),
                                 rng.uniform(-kPi, kPi)))
                .transpose();
    b.amplitude = (k % 2 == 1) ? -0.35 : 0.35;
    blobs.push_back(b);
  }

  // Low-frequency texture: a few random plane waves.
  struct Wave {
    Vec3 k;
    double phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    dir.normalize();
    const double wavelength = rng.uniform(10.0, 20.0) * spec.scale;
    waves.push_back({dir * (2.0 * kPi / wavelength), rng.uniform(0, 2 * kPi)});
  }

  Volume3D v(spec.grid);
  const double edge = spec.edge_width_mm;
  const auto& d = spec.grid.dims;
  parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        const Vec3 p = spec.grid.world(x, y, z);
        const Vec3 q = (p - center).cwiseQuotient(semi);
        const double r = q.norm();
        double value;
        if (edge <= 0.0) {
          value = r <= 1.0 ? 1.0 : 0.0;
        } else {
          // Signed distance approximated along the radial direction.
          const double dist = (r - 1.0) * semi.minCoeff();
          value = detail::soft_inside(dist / edge);
        }
        if (value == 0.0) {
          v.at(x, y, z) = 0.0;
          continue;
        }
        double inner = 0.0;
        for (const auto& b : blobs) {
          const Vec3 u = (b.rot * (p - b.center)).cwiseQuotient(b.semi);
          const double rb = u.norm();
          const double dist = (rb - 1.0) * b.semi.minCoeff();
          // Internal boundaries are sharper than the outer one.
          inner += b.amplitude * (edge <= 0.0 ? (rb <= 1.0 ? 1.0 : 0.0) : detail::soft_inside(3.0 * dist / edge));
        }
        double tex = 0.0;
        for (const auto& w : waves) tex += std::sin(w.k.dot(p - center) + w.phase);
        tex *= spec.texture_amplitude / waves.size();
        // Brighter toward +x, dimmer toward -x: breaks the remaining symmetry.
        const double ramp = 0.08 * q.x();
        v.at(x, y, z) = std::max(0.0, value * (0.75 + inner + tex + ramp));
      }
  });
  v.normalize();
  return v;
}

}  // namespace affirm
