#pragma once

// Multi-slice acquisition forward model: thick slices with a Gaussian
// through-plane PSF, sampled from a volume that moves rigidly between slices.

#include <algorithm>
#include <array>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "affirm/core.hpp"
#include "affirm/geometry.hpp"
#include "affirm/volume.hpp"

namespace affirm {

enum class Orientation { axial, coronal, sagittal };

inline const char* to_string(Orientation o) {
  switch (o) {
    case Orientation::axial: return "axial";
    case Orientation::coronal: return "coronal";
    case Orientation::sagittal: return "sagittal";
  }
  return "?";
}

inline Orientation orientation_from_string(const std::string& s) {
  if (s == "axial") return Orientation::axial;
  if (s == "coronal") return Orientation::coronal;
  if (s == "sagittal") return Orientation::sagittal;
  throw InvalidInput("unknown orientation '" + s + "'");
}

inline constexpr std::array<Orientation, 3> kAllOrientations = {Orientation::axial, Orientation::coronal,
                                                                 Orientation::sagittal};

// In-plane axes (u, v) and slice normal n of an orientation in scanner space.
struct PlaneAxes {
  Vec3 u, v, n;
};

inline PlaneAxes plane_axes(Orientation o) {
  switch (o) {
    case Orientation::axial: return {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
    case Orientation::coronal: return {Vec3::UnitX(), Vec3::UnitZ(), Vec3::UnitY()};
    case Orientation::sagittal: return {Vec3::UnitY(), Vec3::UnitZ(), Vec3::UnitX()};
  }
  return {};
}

struct Image2D {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // x fastest

  Image2D() = default;
  Image2D(int w, int h, double fill = 0.0) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}
  double& at(int i, int j) { return data[static_cast<std::size_t>(j) * width + i]; }
  double at(int i, int j) const { return data[static_cast<std::size_t>(j) * width + i]; }
  std::size_t size() const { return data.size(); }
};

// Placement of a stack's slices in scanner space.
struct StackGeometry {
  Orientation orientation = Orientation::axial;
  int width = 48;
  int height = 48;
  std::array<double, 2> in_plane_spacing_mm{2.0, 2.0};
  double slice_thickness_mm = 4.0;
  double psf_sigma_mm = 4.0 / 2.355;
  Vec3 center = Vec3::Zero();
  std::vector<double> slice_offsets_mm;  // signed distance of each slice plane along n

  std::size_t n_slices() const { return slice_offsets_mm.size(); }

  // Scanner-space position of pixel (i, j) on slice k, displaced by t along
  // the slice normal.
  Vec3 pixel_world(std::size_t k, double i, double j, double t = 0.0) const {
    const PlaneAxes ax = plane_axes(orientation);
    return center + ax.u * ((i - 0.5 * (width - 1)) * in_plane_spacing_mm[0]) +
           ax.v * ((j - 0.5 * (height - 1)) * in_plane_spacing_mm[1]) + ax.n * (slice_offsets_mm[k] + t);
  }
};

// Gaussian through-plane quadrature: 7 points over +-2.5 sigma, normalized
// weights. A zero sigma collapses to the central plane.
struct PsfQuadrature {
  std::vector<double> offsets;
  std::vector<double> weights;
};

inline PsfQuadrature psf_quadrature(double sigma_mm, int points = 7, double half_width_sigmas = 2.5) {
  PsfQuadrature q;
  if (!(sigma_mm > 0.0)) {
    q.offsets = {0.0};
    q.weights = {1.0};
    return q;
  }
  double sum = 0.0;
  for (int i = 0; i < points; ++i) {
    const double t = -half_width_sigmas * sigma_mm + (2.0 * half_width_sigmas * sigma_mm) * i / (points - 1);
    const double w = std::exp(-0.5 * t * t / (sigma_mm * sigma_mm));
    q.offsets.push_back(t);
    q.weights.push_back(w);
    sum += w;
  }
  for (double& w : q.weights) w /= sum;
  return q;
}

struct AcquisitionConfig {
  int n_slices = 24;
  double thickness_mm = 4.0;
  double psf_sigma_mm = 4.0 / 2.355;  // FWHM = thickness
  bool interleaved = false;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
  int width = 48;
  int height = 48;
  std::array<double, 2> in_plane_spacing_mm{2.0, 2.0};
  Vec3 center = Vec3::Zero();
  // Object mask: a slice contains the object when at least `mask_fraction`
  // of its pixels exceed `mask_level` times the volume maximum.
  double mask_level = 0.05;
  double mask_fraction = 0.01;

  void validate() const {
    if (n_slices < 1) throw InvalidInput("AcquisitionConfig: n_slices must be >= 1");
    if (!(thickness_mm > 0.0)) throw InvalidInput("AcquisitionConfig: thickness_mm must be > 0");
    if (!(psf_sigma_mm > 0.0)) throw InvalidInput("AcquisitionConfig: psf_sigma_mm must be > 0");
    if (width < 1 || height < 1) throw InvalidInput("AcquisitionConfig: slice size must be >= 1");
  }

  StackGeometry geometry(Orientation o) const {
    StackGeometry g;
    g.orientation = o;
    g.width = width;
    g.height = height;
    g.in_plane_spacing_mm = in_plane_spacing_mm;
    g.slice_thickness_mm = thickness_mm;
    g.psf_sigma_mm = psf_sigma_mm;
    g.center = center;
    for (int k = 0; k < n_slices; ++k) g.slice_offsets_mm.push_back((k - 0.5 * (n_slices - 1)) * thickness_mm);
    return g;
  }

  // acquisition_order[t] = slice index acquired at time step t.
  std::vector<int> acquisition_order() const {
    std::vector<int> order;
    if (!interleaved) {
      order.resize(n_slices);
      std::iota(order.begin(), order.end(), 0);
      return order;
    }
    for (int k = 0; k < n_slices; k += 2) order.push_back(k);
    for (int k = 1; k < n_slices; k += 2) order.push_back(k);
    return order;
  }
};

struct SliceStack {
  StackGeometry geometry;
  std::vector<Image2D> slices;
  std::optional<std::vector<RigidTransform>> true_transforms;
  std::vector<RigidTransform> est_transforms;
  std::vector<bool> brain_mask;
  std::vector<int> acquisition_order;  // acquisition_order[t] = slice index
  std::vector<int> time_index;         // acquisition time step of each slice

  std::size_t size() const { return slices.size(); }
  Orientation orientation() const { return geometry.orientation; }

  void validate() const {
    const std::size_t n = slices.size();
    if (geometry.n_slices() != n || brain_mask.size() != n || est_transforms.size() != n ||
        acquisition_order.size() != n || time_index.size() != n)
      throw InvalidInput("SliceStack: per-slice fields have inconsistent lengths");
    if (true_transforms && true_transforms->size() != n)
      throw InvalidInput("SliceStack: true_transforms length mismatch");
    std::vector<bool> seen(n, false);
    for (int k : acquisition_order) {
      if (k < 0 || static_cast<std::size_t>(k) >= n || seen[k])
        throw InvalidInput("SliceStack: acquisition_order is not a permutation");
      seen[k] = true;
    }
    for (const auto& s : slices)
      if (s.width != geometry.width || s.height != geometry.height)
        throw InvalidInput("SliceStack: slice size disagrees with geometry");
  }
};

// Noise-free thick-slice sample of `v` moved by `t`.
inline Image2D acquire_slice_clean(const Volume3D& v, const RigidTransform& t, const StackGeometry& g,
                                   std::size_t k) {
  const PsfQuadrature q = psf_quadrature(g.psf_sigma_mm);
  const AffineMap inv(invert(t));
  const PlaneAxes ax = plane_axes(g.orientation);
  Image2D img(g.width, g.height);
  const Vec3 du = inv.linear * (ax.u * g.in_plane_spacing_mm[0]);
  const Vec3 dv = inv.linear * (ax.v * g.in_plane_spacing_mm[1]);
  const Vec3 dn = inv.linear * ax.n;
  const Vec3 p00 = inv(g.pixel_world(k, 0, 0));
  for (int j = 0; j < g.height; ++j)
    for (int i = 0; i < g.width; ++i) {
      const Vec3 p = p00 + du * i + dv * j;
      double acc = 0.0;
      for (std::size_t s = 0; s < q.offsets.size(); ++s) acc += q.weights[s] * trilinear_sample(v, p + dn * q.offsets[s]);
      img.at(i, j) = acc;
    }
  return img;
}

inline void add_slice_noise(Image2D& img, double sigma, std::uint64_t seed, std::uint64_t stream) {
  if (!(sigma > 0.0)) return;
  CounterRng rng(seed, stream);
  for (double& x : img.data) x += sigma * rng.normal();
}

// Gaussian-weighted through-plane average of trilinear samples of the volume
// moved by `t`; additive noise is applied last.
inline Image2D acquire_slice(const Volume3D& v, const RigidTransform& t, Orientation o, std::size_t slice_index,
                             const AcquisitionConfig& cfg) {
  cfg.validate();
  const StackGeometry g = cfg.geometry(o);
  if (slice_index >= g.n_slices()) throw InvalidInput("acquire_slice: slice index out of range");
  Image2D img = acquire_slice_clean(v, t, g, slice_index);
  add_slice_noise(img, cfg.noise_sigma, cfg.noise_seed, static_cast<std::uint64_t>(o) * 100003u + slice_index);
  return img;
}

inline bool slice_has_object(const Image2D& img, double volume_max, double level, double fraction) {
  const double thr = level * volume_max;
  std::size_t hits = 0;
  for (double x : img.data)
    if (x > thr) ++hits;
  return static_cast<double>(hits) >= fraction * static_cast<double>(img.size()) && hits > 0;
}

// `samples[t]` is the object pose at acquisition time step t.
inline SliceStack acquire_stack_from_samples(const Volume3D& v, const std::vector<RigidTransform>& samples,
                                             Orientation o, const AcquisitionConfig& cfg) {
  cfg.validate();
  if (samples.size() != static_cast<std::size_t>(cfg.n_slices))
    throw InvalidInput("acquire_stack: trajectory length " + std::to_string(samples.size()) +
                       " != n_slices " + std::to_string(cfg.n_slices));
  SliceStack s;
  s.geometry = cfg.geometry(o);
  s.acquisition_order = cfg.acquisition_order();
  const std::size_t n = static_cast<std::size_t>(cfg.n_slices);
  s.time_index.assign(n, 0);
  for (std::size_t t = 0; t < n; ++t) s.time_index[s.acquisition_order[t]] = static_cast<int>(t);
  std::vector<RigidTransform> truth(n);
  for (std::size_t k = 0; k < n; ++k) truth[k] = samples[s.time_index[k]];
  s.slices.resize(n);
  parallel_for(n, [&](std::size_t k) {
    s.slices[k] = acquire_slice_clean(v, truth[k], s.geometry, k);
    add_slice_noise(s.slices[k], cfg.noise_sigma, cfg.noise_seed, static_cast<std::uint64_t>(o) * 100003u + k);
  });
  const double vmax = v.max();
  s.brain_mask.resize(n);
  for (std::size_t k = 0; k < n; ++k)
    s.brain_mask[k] = slice_has_object(s.slices[k], vmax, cfg.mask_level, cfg.mask_fraction);
  s.true_transforms = truth;
  s.est_transforms.assign(n, RigidTransform::identity(cfg.center));
  return s;
}

// Splits a stack into the slices at even and odd spatial positions. Each
// half keeps its slices' transforms and relative acquisition order.
inline std::pair<SliceStack, SliceStack> deinterleave(const SliceStack& s) {
  if (s.size() < 2) throw InvalidInput("deinterleave: need at least 2 slices");
  auto take = [&](std::size_t parity) {
    SliceStack out;
    out.geometry = s.geometry;
    out.geometry.slice_offsets_mm.clear();
    std::vector<std::size_t> picks;
    for (std::size_t k = parity; k < s.size(); k += 2) picks.push_back(k);
    if (s.true_transforms) out.true_transforms.emplace();
    for (std::size_t k : picks) {
      out.geometry.slice_offsets_mm.push_back(s.geometry.slice_offsets_mm[k]);
      out.slices.push_back(s.slices[k]);
      out.est_transforms.push_back(s.est_transforms[k]);
      out.brain_mask.push_back(s.brain_mask[k]);
      out.time_index.push_back(s.time_index[k]);
      if (s.true_transforms) out.true_transforms->push_back((*s.true_transforms)[k]);
    }
    std::vector<int> order(picks.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return out.time_index[a] < out.time_index[b]; });
    out.acquisition_order = order;
    return out;
  };
  return {take(0), take(1)};
}

// Inverse of deinterleave: merges by spatial position (even half first) and
// restores the global acquisition order from the slices' time steps.
inline SliceStack interleave(const SliceStack& even, const SliceStack& odd) {
  if (even.size() < odd.size() || even.size() > odd.size() + 1)
    throw InvalidInput("interleave: substack sizes are incompatible");
  SliceStack out;
  out.geometry = even.geometry;
  out.geometry.slice_offsets_mm.clear();
  const bool truth = even.true_transforms.has_value() && odd.true_transforms.has_value();
  if (truth) out.true_transforms.emplace();
  const std::size_t n = even.size() + odd.size();
  for (std::size_t k = 0; k < n; ++k) {
    const SliceStack& src = (k % 2 == 0) ? even : odd;
    const std::size_t j = k / 2;
    out.geometry.slice_offsets_mm.push_back(src.geometry.slice_offsets_mm[j]);
    out.slices.push_back(src.slices[j]);
    out.est_transforms.push_back(src.est_transforms[j]);
    out.brain_mask.push_back(src.brain_mask[j]);
    out.time_index.push_back(src.time_index[j]);
    if (truth) out.true_transforms->push_back((*src.true_transforms)[j]);
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return out.time_index[a] < out.time_index[b]; });
  out.acquisition_order = order;
  return out;
}

}  // namespace affirm
