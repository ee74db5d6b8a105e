#pragma once

// Conventional registration and reconstruction: NCC, slice-to-volume and
// volume-to-volume rigid registration by derivative-free coordinate search,
// outlier-slice rejection, and Laplacian-regularized least-squares
// super-resolution reconstruction solved with CGLS.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/core.hpp"
#include "affirm/geometry.hpp"
#include "affirm/sda.hpp"
#include "affirm/volume.hpp"

namespace affirm {

// =============================================================================
// Similarity
// =============================================================================

// Pearson correlation over elements where mask is true (empty mask = all).
inline double ncc(std::span<const double> a, std::span<const double> b,
                  const std::vector<bool>& mask = {}) {
  if (a.size() != b.size()) throw InvalidInput("ncc: shape mismatch");
  if (!mask.empty() && mask.size() != a.size()) throw InvalidInput("ncc: mask shape mismatch");
  double sa = 0, sb = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    sa += a[i];
    sb += b[i];
    ++n;
  }
  if (n < 2) throw InvalidInput("ncc: need at least 2 unmasked elements");
  const double ma = sa / n, mb = sb / n;
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= 1e-300 || sbb <= 1e-300) throw InvalidInput("ncc: zero-variance input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
  return ncc(std::span<const double>(a), std::span<const double>(b));
}

// NCC that treats a degenerate (constant) candidate as the worst score
// instead of an error; used inside optimizers.
inline double ncc_or_floor(std::span<const double> a, std::span<const double> b) {
  try {
    return ncc(a, b);
  } catch (const InvalidInput&) {
    return -1.0;
  }
}

enum class Metric { ncc, mse };

// =============================================================================
// Coordinate search
// =============================================================================

struct RegistrationConfig {
  std::vector<int> pyramid_factors{2, 1};  // coarse to fine
  Metric metric = Metric::ncc;
  int max_evals = 500;  // per level
  double initial_step_rot = deg2rad(3.0);
  double initial_step_trans = 1.5;
  double convergence_tol_rot = deg2rad(0.01);
  double convergence_tol_trans = 0.01;
  // Box around the initial parameters: |delta theta_k| <= search_bounds[k]
  // (rad) for k < 3, |delta d_k| <= search_bounds[k] (mm) otherwise.
  std::array<double, 6> search_bounds{deg2rad(20.0), deg2rad(20.0), deg2rad(20.0), 12.0, 12.0, 12.0};

  void validate() const {
    if (pyramid_factors.empty()) throw InvalidInput("RegistrationConfig: at least one pyramid level");
    for (int f : pyramid_factors)
      if (f < 1) throw InvalidInput("RegistrationConfig: pyramid factors must be >= 1");
    for (double b : search_bounds)
      if (!(b > 0.0)) throw InvalidInput("RegistrationConfig: search bounds must be > 0");
    if (max_evals < 1) throw InvalidInput("RegistrationConfig: max_evals must be >= 1");
  }
};

struct SearchTrace {
  std::vector<double> accepted_scores;  // objective after each accepted step
  int evaluations = 0;
};

// Maximizes `objective` over 6 parameters (3 angles, 3 translations) by
// coordinate search with step halving and pattern moves (Hooke-Jeeves). Accepted steps never decrease the
// objective.
inline std::array<double, 6> coordinate_search(const std::function<double(const std::array<double, 6>&)>& objective,
                                               std::array<double, 6> x, const std::array<double, 6>& lower,
                                               const std::array<double, 6>& upper, double step_rot,
                                               double step_trans, double tol_rot, double tol_trans, int max_evals,
                                               SearchTrace* trace = nullptr) {
  double best = objective(x);
  int evals = 1;
  if (trace) trace->accepted_scores.push_back(best);
  double steps[2] = {step_rot, step_trans};
  const double tols[2] = {tol_rot, tol_trans};
  while (evals < max_evals && (steps[0] >= tols[0] || steps[1] >= tols[1])) {
    bool improved = false;
    const auto sweep_start = x;
    for (int c = 0; c < 6 && evals < max_evals; ++c) {
      const int kind = c < 3 ? 0 : 1;
      if (steps[kind] < tols[kind]) continue;
      for (double sign : {1.0, -1.0}) {
        auto y = x;
        y[c] = std::clamp(x[c] + sign * steps[kind], lower[c], upper[c]);
        if (y[c] == x[c]) continue;
        const double v = objective(y);
        ++evals;
        if (v > best) {
          best = v;
          x = y;
          improved = true;
          if (trace) trace->accepted_scores.push_back(best);
          break;
        }
        if (evals >= max_evals) break;
      }
    }
    if (!improved) {
      steps[0] *= 0.5;
      steps[1] *= 0.5;
    } else if (evals < max_evals) {
      // Pattern move along the net displacement of the sweep.
      auto y = x;
      for (int c = 0; c < 6; ++c) y[c] = std::clamp(2.0 * x[c] - sweep_start[c], lower[c], upper[c]);
      if (y != x) {
        const double v = objective(y);
        ++evals;
        if (v > best) {
          best = v;
          x = y;
          if (trace) trace->accepted_scores.push_back(best);
        }
      }
    }
  }
  if (trace) trace->evaluations += evals;
  return x;
}

inline RigidTransform offset_transform(const RigidTransform& base, const std::array<double, 6>& x) {
  RigidTransform t = base;
  t.theta += Vec3(x[0], x[1], x[2]);
  t.d += Vec3(x[3], x[4], x[5]);
  return t;
}

// base followed by a scanner-frame rigid perturbation about `pivot`; with the
// pivot at the slice center, in-plane and through-plane parameters decouple.
inline RigidTransform pivot_transform(const RigidTransform& base, const std::array<double, 6>& x, const Vec3& pivot) {
  const RigidTransform delta{Vec3(x[0], x[1], x[2]), Vec3(x[3], x[4], x[5]), pivot};
  return compose(delta, base).recentered(base.center);
}

// =============================================================================
// Slice-to-volume
// =============================================================================

// One pyramid level of a slice: block-averaged pixels and matching geometry.
struct SliceLevel {
  StackGeometry geometry;  // single-slice geometry (offset list holds one entry)
  std::vector<double> pixels;
};

inline SliceLevel slice_level(const Image2D& img, const StackGeometry& g, std::size_t k, int factor) {
  SliceLevel lvl;
  lvl.geometry = g;
  lvl.geometry.slice_offsets_mm = {g.slice_offsets_mm[k]};
  if (factor <= 1) {
    lvl.pixels = img.data;
    return lvl;
  }
  const int w = img.width / factor, h = img.height / factor;
  lvl.geometry.width = w;
  lvl.geometry.height = h;
  lvl.geometry.in_plane_spacing_mm = {g.in_plane_spacing_mm[0] * factor, g.in_plane_spacing_mm[1] * factor};
  // Keep the block centers where the original pixels were averaged.
  const PlaneAxes ax = plane_axes(g.orientation);
  const double shift_u = 0.5 * ((img.width - w * factor)) * g.in_plane_spacing_mm[0];
  const double shift_v = 0.5 * ((img.height - h * factor)) * g.in_plane_spacing_mm[1];
  lvl.geometry.center = g.center - ax.u * shift_u - ax.v * shift_v;
  lvl.pixels.assign(static_cast<std::size_t>(w) * h, 0.0);
  for (int j = 0; j < h * factor; ++j)
    for (int i = 0; i < w * factor; ++i)
      lvl.pixels[static_cast<std::size_t>(j / factor) * w + i / factor] += img.at(i, j);
  for (double& p : lvl.pixels) p /= factor * factor;
  return lvl;
}

// Reference volumes prepared once per registration round: one smoothed copy
// per pyramid factor.
struct ReferencePyramid {
  std::vector<int> factors;
  std::vector<Volume3D> levels;

  ReferencePyramid(const Volume3D& reference, const RegistrationConfig& cfg) : factors(cfg.pyramid_factors) {
    for (int f : factors) {
      if (f <= 1) {
        levels.push_back(reference);
      } else {
        // In-plane block averaging of the slice is matched by smoothing the
        // reference with a comparable Gaussian.
        const double sigma = 0.45 * (f - 1) * reference.grid.spacing.maxCoeff();
        levels.push_back(gaussian_blur(reference, sigma));
      }
    }
  }
};

inline double similarity(std::span<const double> observed, std::span<const double> simulated, Metric m) {
  if (m == Metric::ncc) return ncc_or_floor(observed, simulated);
  double s = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) s += (observed[i] - simulated[i]) * (observed[i] - simulated[i]);
  return -s / static_cast<double>(observed.size());
}

struct SliceRegistration {
  RigidTransform transform;
  double metric = 0.0;
  SearchTrace trace;
};

inline SliceRegistration register_slice_to_volume(const Image2D& slice, const StackGeometry& geometry,
                                                  std::size_t k, const ReferencePyramid& pyramid,
                                                  const RigidTransform& init, const RegistrationConfig& cfg) {
  cfg.validate();
  bool any = false;
  for (double v : slice.data)
    if (v != 0.0) any = true;
  if (slice.data.empty() || !any) throw InvalidInput("register_slice_to_volume: empty slice");
  std::array<double, 6> x{}, lower{}, upper{};
  for (int c = 0; c < 6; ++c) {
    lower[c] = -cfg.search_bounds[c];
    upper[c] = cfg.search_bounds[c];
  }
  SliceRegistration out;
  const Vec3 pivot = geometry.pixel_world(k, 0.5 * (geometry.width - 1), 0.5 * (geometry.height - 1));
  double step_rot = cfg.initial_step_rot, step_trans = cfg.initial_step_trans;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const int f = pyramid.factors[l];
    const SliceLevel lvl = slice_level(slice, geometry, k, f);
    const Volume3D& ref = pyramid.levels[l];
    auto objective = [&](const std::array<double, 6>& p) {
      const Image2D sim = acquire_slice_clean(ref, pivot_transform(init, p, pivot), lvl.geometry, 0);
      return similarity(lvl.pixels, sim.data, cfg.metric);
    };
    const bool last = l + 1 == pyramid.levels.size();
    const double tol_r = last ? cfg.convergence_tol_rot : 8.0 * cfg.convergence_tol_rot;
    const double tol_t = last ? cfg.convergence_tol_trans : 8.0 * cfg.convergence_tol_trans;
    x = coordinate_search(objective, x, lower, upper, step_rot, step_trans, tol_r, tol_t, cfg.max_evals, &out.trace);
    out.metric = out.trace.accepted_scores.back();
    step_rot = std::max(0.5 * step_rot, 4.0 * cfg.convergence_tol_rot);
    step_trans = std::max(0.5 * step_trans, 4.0 * cfg.convergence_tol_trans);
  }
  out.transform = pivot_transform(init, x, pivot);
  return out;
}

inline SliceRegistration register_slice_to_volume(const Image2D& slice, const StackGeometry& geometry,
                                                  std::size_t k, const Volume3D& reference,
                                                  const RigidTransform& init, const RegistrationConfig& cfg) {
  return register_slice_to_volume(slice, geometry, k, ReferencePyramid(reference, cfg), init, cfg);
}

// Similarity of a slice against the reference seen through transform t, at
// full resolution.
inline double slice_similarity(const Image2D& slice, const StackGeometry& g, std::size_t k,
                               const Volume3D& reference, const RigidTransform& t, Metric m = Metric::ncc) {
  const Image2D sim = acquire_slice_clean(reference, t, g, k);
  return similarity(slice.data, sim.data, m);
}

// =============================================================================
// Volume-to-volume
// =============================================================================

struct VolumeRegistration {
  RigidTransform transform;
  double metric = 0.0;
  int chosen_candidate = -1;  // -1 identity, 0..3 principal-axes sign choice
};

inline double volume_similarity(const Volume3D& moving, const Volume3D& reference, const RigidTransform& t,
                                Metric m) {
  const Volume3D warped = resample(reference, t, moving.grid);
  return similarity(moving.data, warped.data, m);
}

// Finds T with moving ~ resample(reference, T). Candidates: identity and the
// four proper sign choices of the principal-axes alignment of the intensity
// second moments; the best by NCC seeds a multi-resolution coordinate search.
inline VolumeRegistration register_volume_to_volume(const Volume3D& moving, const Volume3D& reference,
                                                    const RegistrationConfig& cfg) {
  cfg.validate();
  const Moments mm = intensity_moments(moving), mr = intensity_moments(reference);
  if (!(mm.mass > 0.0) || !(mr.mass > 0.0)) throw InvalidInput("register_volume_to_volume: empty image");
  if (moving.max() == moving.min() || reference.max() == reference.min())
    throw InvalidInput("register_volume_to_volume: constant image");
  const Vec3 center = reference.grid.center();

  Eigen::SelfAdjointEigenSolver<Mat3> em(mm.covariance), er(mr.covariance);
  const Mat3 vm = em.eigenvectors(), vr = er.eigenvectors();
  std::vector<RigidTransform> candidates;
  {
    RigidTransform t = RigidTransform::identity(center);
    t.d = mm.centroid - mr.centroid;
    candidates.push_back(t);
  }
  for (int s = 0; s < 4; ++s) {
    Vec3 sign(s & 1 ? -1 : 1, s & 2 ? -1 : 1, 1);
    Mat3 r = vm * sign.asDiagonal() * vr.transpose();
    if (r.determinant() < 0) {
      sign[2] = -1;
      r = vm * sign.asDiagonal() * vr.transpose();
    }
    RigidTransform t;
    t.center = center;
    t.theta = matrix_to_euler(r);
    t.d = mm.centroid - center - r * (mr.centroid - center);
    candidates.push_back(t);
  }

  const int coarse = *std::max_element(cfg.pyramid_factors.begin(), cfg.pyramid_factors.end());
  const Volume3D mov_c = downsample(moving, coarse);
  const Volume3D ref_c = downsample(reference, coarse);
  VolumeRegistration out;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double v = volume_similarity(mov_c, ref_c, candidates[c], Metric::ncc);
    if (v > best) {
      best = v;
      out.transform = candidates[c];
      out.chosen_candidate = static_cast<int>(c) - 1;
    }
  }

  std::array<double, 6> lower{}, upper{};
  for (int c = 0; c < 6; ++c) {
    lower[c] = c < 3 ? -deg2rad(30.0) : -20.0;
    upper[c] = -lower[c];
  }
  RigidTransform base = out.transform;
  std::array<double, 6> x{};
  double step_rot = deg2rad(4.0), step_trans = 2.0;
  for (int f : cfg.pyramid_factors) {
    const Volume3D mov_l = downsample(moving, f);
    const Volume3D ref_l = f > 1 ? downsample(reference, f) : reference;
    auto objective = [&](const std::array<double, 6>& p) {
      return volume_similarity(mov_l, ref_l, offset_transform(base, p), cfg.metric);
    };
    SearchTrace trace;
    x = coordinate_search(objective, x, lower, upper, step_rot, step_trans, cfg.convergence_tol_rot,
                          cfg.convergence_tol_trans, 4 * cfg.max_evals, &trace);
    out.metric = trace.accepted_scores.back();
    step_rot = std::max(0.5 * step_rot, 4 * cfg.convergence_tol_rot);
    step_trans = std::max(0.5 * step_trans, 4 * cfg.convergence_tol_trans);
  }
  out.transform = offset_transform(base, x);
  return out;
}

// =============================================================================
// Outlier rejection
// =============================================================================

struct RejectionConfig {
  double mad_multiplier = 2.0;
  // The spread used is max(1.4826 * MAD, min_spread) so a tight cluster of
  // consistent slices is not split by the rule itself.
  double min_spread = 0.02;
  std::optional<double> fixed_threshold;  // overrides the median rule
};

struct RejectionResult {
  std::vector<std::vector<bool>> keep;
  std::vector<std::vector<double>> scores;  // NaN for slices without object
  double threshold = 0.0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    std::nth_element(v.begin(), v.begin() + mid - 1, v.end());
    m = 0.5 * (m + v[mid - 1]);
  }
  return m;
}

// Drops object-containing slices whose NCC against the reference (seen
// through their transform) falls below median - k * spread over the set.
inline RejectionResult reject_outlier_slices(const std::vector<SliceStack>& stacks,
                                             const std::vector<std::vector<RigidTransform>>& transforms,
                                             const Volume3D& reference, const RejectionConfig& cfg = {}) {
  RejectionResult r;
  std::vector<double> all;
  r.scores.resize(stacks.size());
  r.keep.resize(stacks.size());
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& st = stacks[s];
    r.scores[s].assign(st.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(st.size(), [&](std::size_t k) {
      if (!st.brain_mask[k]) return;
      r.scores[s][k] = slice_similarity(st.slices[k], st.geometry, k, reference, transforms[s][k]);
    });
    for (double v : r.scores[s])
      if (!std::isnan(v)) all.push_back(v);
  }
  if (cfg.fixed_threshold) {
    r.threshold = *cfg.fixed_threshold;
  } else {
    const double med = median_of(all);
    std::vector<double> dev;
    for (double v : all) dev.push_back(std::abs(v - med));
    const double spread = std::max(1.4826 * median_of(dev), cfg.min_spread);
    r.threshold = med - cfg.mad_multiplier * spread;
  }
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    r.keep[s].assign(stacks[s].size(), true);
    for (std::size_t k = 0; k < stacks[s].size(); ++k)
      if (!std::isnan(r.scores[s][k]) && r.scores[s][k] < r.threshold) r.keep[s][k] = false;
  }
  return r;
}

// =============================================================================
// Super-resolution reconstruction
// =============================================================================

struct SrrConfig {
  double regularization_weight = 0.01;
  int max_cg_iterations = 30;
  double target_spacing_mm = 2.0;
  std::array<int, 3> target_dims{48, 48, 48};
  Vec3 target_center = Vec3::Zero();

  Grid grid() const { return Grid::centered(target_dims, Vec3::Constant(target_spacing_mm), target_center); }

  void validate() const {
    if (!(regularization_weight >= 0.0)) throw InvalidInput("SrrConfig: regularization weight must be >= 0");
    if (max_cg_iterations < 1) throw InvalidInput("SrrConfig: max_cg_iterations must be >= 1");
    if (!(target_spacing_mm > 0.0)) throw InvalidInput("SrrConfig: target spacing must be > 0");
  }
};

// The slice acquisition model as a linear operator from volume voxels to the
// pixels of the selected slices: y = A x, with A^T its exact transpose.
class AcquisitionOperator {
 public:
  AcquisitionOperator(const std::vector<SliceStack>& stacks, const std::vector<std::vector<RigidTransform>>& transforms,
                      const std::vector<std::vector<bool>>& keep, const Grid& grid)
      : grid_(grid) {
    for (std::size_t s = 0; s < stacks.size(); ++s)
      for (std::size_t k = 0; k < stacks[s].size(); ++k) {
        if (!keep.empty() && !keep[s][k]) continue;
        Entry e{&stacks[s], k, transforms[s][k], offset_};
        offset_ += stacks[s].slices[k].size();
        entries_.push_back(e);
      }
  }

  std::size_t rows() const { return offset_; }
  std::size_t cols() const { return grid_.size(); }
  const Grid& grid() const { return grid_; }
  bool empty() const { return entries_.empty(); }

  std::vector<double> observed() const {
    std::vector<double> y(rows());
    for (const auto& e : entries_) {
      const auto& img = e.stack->slices[e.slice].data;
      std::copy(img.begin(), img.end(), y.begin() + static_cast<long>(e.row0));
    }
    return y;
  }

  std::vector<double> apply(const std::vector<double>& x) const {
    std::vector<double> y(rows(), 0.0);
    parallel_for(entries_.size(), [&](std::size_t ei) {
      const auto& e = entries_[ei];
      visit(e, [&](std::size_t pix, const TrilinearStencil& st, double w) {
        double acc = 0.0;
        for (int c = 0; c < st.count; ++c) acc += st.weight[c] * x[st.index[c]];
        y[e.row0 + pix] += w * acc;
      });
    });
    return y;
  }

  std::vector<double> apply_transpose(const std::vector<double>& y) const {
    std::vector<double> x(cols(), 0.0);
    for (const auto& e : entries_)
      visit(e, [&](std::size_t pix, const TrilinearStencil& st, double w) {
        const double v = w * y[e.row0 + pix];
        for (int c = 0; c < st.count; ++c) x[st.index[c]] += st.weight[c] * v;
      });
    return x;
  }

 private:
  struct Entry {
    const SliceStack* stack;
    std::size_t slice;
    RigidTransform transform;
    std::size_t row0;
  };

  template <typename Fn>
  void visit(const Entry& e, Fn&& fn) const {
    const StackGeometry& g = e.stack->geometry;
    const PsfQuadrature q = psf_quadrature(g.psf_sigma_mm);
    const AffineMap inv(invert(e.transform));
    const Vec3 dn = inv.linear * plane_axes(g.orientation).n;
    for_each_slice_point(g, e.slice, e.transform, [&](std::size_t pix, const Vec3& p) {
      for (std::size_t s = 0; s < q.offsets.size(); ++s)
        fn(pix, trilinear_stencil(grid_, p + dn * q.offsets[s]), q.weights[s]);
    });
  }

  Grid grid_;
  std::vector<Entry> entries_;
  std::size_t offset_ = 0;
};

// Graph Laplacian of the 6-neighbourhood (symmetric, Neumann boundary).
inline std::vector<double> grid_laplacian(const Grid& g, const std::vector<double>& x) {
  std::vector<double> out(x.size(), 0.0);
  const auto& d = g.dims;
  parallel_for(static_cast<std::size_t>(d[2]), [&](std::size_t zi) {
    const int z = static_cast<int>(zi);
    for (int y = 0; y < d[1]; ++y)
      for (int xx = 0; xx < d[0]; ++xx) {
        const std::size_t i = g.index(xx, y, z);
        double acc = 0.0;
        if (xx > 0) acc += x[i] - x[g.index(xx - 1, y, z)];
        if (xx + 1 < d[0]) acc += x[i] - x[g.index(xx + 1, y, z)];
        if (y > 0) acc += x[i] - x[g.index(xx, y - 1, z)];
        if (y + 1 < d[1]) acc += x[i] - x[g.index(xx, y + 1, z)];
        if (z > 0) acc += x[i] - x[g.index(xx, y, z - 1)];
        if (z + 1 < d[2]) acc += x[i] - x[g.index(xx, y, z + 1)];
        out[i] = acc;
      }
  });
  return out;
}

struct SrrResult {
  Volume3D volume;
  std::vector<double> residual_norms;  // ||b - B x_k|| of the augmented system, per iteration
};

// Minimizes sum ||A_s x - y_s||^2 + w ||L x||^2 by CGLS (conjugate gradients
// on the normal equations), starting from x0 (zero when empty); the result is
// clamped to >= 0.
inline SrrResult srr_least_squares(const std::vector<SliceStack>& stacks,
                                   const std::vector<std::vector<RigidTransform>>& transforms,
                                   const std::vector<std::vector<bool>>& keep, const SrrConfig& cfg,
                                   const std::vector<double>& x0 = {}) {
  cfg.validate();
  const AcquisitionOperator a(stacks, transforms, keep, cfg.grid());
  if (a.empty()) throw InvalidInput("srr_least_squares: no kept slices");
  const double sw = std::sqrt(cfg.regularization_weight);
  const Grid grid = a.grid();
  auto dot = [](const std::vector<double>& u, const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
  };
  // Augmented operator B = [A; sqrt(w) L], right-hand side b = [y; 0].
  const std::vector<double> y = a.observed();
  std::vector<double> x = x0.empty() ? std::vector<double>(a.cols(), 0.0) : x0;
  std::vector<double> r1 = y, r2(a.cols(), 0.0);
  {
    const auto ax = a.apply(x);
    for (std::size_t i = 0; i < r1.size(); ++i) r1[i] -= ax[i];
    if (sw > 0) {
      const auto lx = grid_laplacian(grid, x);
      for (std::size_t i = 0; i < r2.size(); ++i) r2[i] = -sw * lx[i];
    }
  }
  auto normal_residual = [&](const std::vector<double>& u1, const std::vector<double>& u2) {
    auto s = a.apply_transpose(u1);
    if (sw > 0) {
      const auto l = grid_laplacian(grid, u2);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += sw * l[i];
    }
    return s;
  };
  SrrResult out;
  out.residual_norms.push_back(std::sqrt(dot(r1, r1) + dot(r2, r2)));
  std::vector<double> s = normal_residual(r1, r2);
  std::vector<double> p = s;
  double gamma = dot(s, s);
  for (int it = 0; it < cfg.max_cg_iterations && gamma > 1e-30; ++it) {
    const auto q1 = a.apply(p);
    std::vector<double> q2;
    double qq = dot(q1, q1);
    if (sw > 0) {
      q2 = grid_laplacian(grid, p);
      for (double& v : q2) v *= sw;
      qq += dot(q2, q2);
    }
    if (qq <= 0) break;
    const double alpha = gamma / qq;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * p[i];
    for (std::size_t i = 0; i < r1.size(); ++i) r1[i] -= alpha * q1[i];
    if (sw > 0)
      for (std::size_t i = 0; i < r2.size(); ++i) r2[i] -= alpha * q2[i];
    out.residual_norms.push_back(std::sqrt(dot(r1, r1) + dot(r2, r2)));
    s = normal_residual(r1, r2);
    const double gamma_new = dot(s, s);
    const double beta = gamma_new / gamma;
    gamma = gamma_new;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = s[i] + beta * p[i];
  }
  out.volume = Volume3D(grid);
  for (std::size_t i = 0; i < x.size(); ++i) out.volume.data[i] = std::max(0.0, x[i]);
  out.volume.intensity_max = out.volume.max();
  return out;
}

}  // namespace affirm
