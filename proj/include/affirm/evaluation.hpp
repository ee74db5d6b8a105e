#pragma once

// Motion-parameter errors and image-quality metrics.

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>
#include <vector>

#include "affirm/geometry.hpp"
#include "affirm/volume.hpp"

namespace affirm {

// =============================================================================
// Motion errors
// =============================================================================

// Per-axis errors are aggregated over masked slices first (MAE and RMSE per
// axis); the rotation/translation summaries are the means of the three
// per-axis values. Rotation differences are wrapped to (-180, 180] degrees.
struct MotionErrorReport {
  double mae_rot_deg = 0.0;
  double rmse_rot_deg = 0.0;
  double mae_trans_mm = 0.0;
  double rmse_trans_mm = 0.0;
  std::array<double, 3> mae_rot_axis{}, rmse_rot_axis{}, mae_trans_axis{}, rmse_trans_axis{};
  double mean_geodesic_deg = 0.0;  // convention-free rotation error
  std::size_t n_slices = 0;

  struct Row {
    std::size_t slice = 0;
    std::array<double, 3> rot_err_deg{};
    std::array<double, 3> trans_err_mm{};
    double geodesic_deg = 0.0;
  };
  std::vector<Row> per_slice;

  static constexpr const char* kConvention =
      "per-axis MAE/RMSE over masked slices, averaged over the 3 axes; Euler x-y-z extrinsic; degrees and mm";
};

inline double wrap_degrees(double d) {
  double w = std::fmod(d + 180.0, 360.0);
  if (w <= 0.0) w += 360.0;
  return w - 180.0;
}

inline MotionErrorReport motion_errors(const std::vector<RigidTransform>& truth,
                                       const std::vector<RigidTransform>& est, const std::vector<bool>& mask) {
  if (truth.size() != est.size()) throw InvalidInput("motion_errors: length mismatch");
  if (!mask.empty() && mask.size() != truth.size()) throw InvalidInput("motion_errors: mask length mismatch");
  MotionErrorReport r;
  std::array<double, 3> sa{}, ss{}, ta{}, ts{};
  double geo = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    MotionErrorReport::Row row;
    row.slice = i;
    // Compare about a shared center.
    const RigidTransform e = est[i].recentered(truth[i].center);
    for (int a = 0; a < 3; ++a) {
      row.rot_err_deg[a] = wrap_degrees(rad2deg(e.theta[a] - truth[i].theta[a]));
      row.trans_err_mm[a] = e.d[a] - truth[i].d[a];
      sa[a] += std::abs(row.rot_err_deg[a]);
      ss[a] += row.rot_err_deg[a] * row.rot_err_deg[a];
      ta[a] += std::abs(row.trans_err_mm[a]);
      ts[a] += row.trans_err_mm[a] * row.trans_err_mm[a];
    }
    row.geodesic_deg = rad2deg(rotation_angle(e.rotation().transpose() * truth[i].rotation()));
    geo += row.geodesic_deg;
    r.per_slice.push_back(row);
  }
  r.n_slices = r.per_slice.size();
  if (r.n_slices == 0) return r;
  const double n = static_cast<double>(r.n_slices);
  for (int a = 0; a < 3; ++a) {
    r.mae_rot_axis[a] = sa[a] / n;
    r.rmse_rot_axis[a] = std::sqrt(ss[a] / n);
    r.mae_trans_axis[a] = ta[a] / n;
    r.rmse_trans_axis[a] = std::sqrt(ts[a] / n);
    r.mae_rot_deg += r.mae_rot_axis[a] / 3.0;
    r.rmse_rot_deg += r.rmse_rot_axis[a] / 3.0;
    r.mae_trans_mm += r.mae_trans_axis[a] / 3.0;
    r.rmse_trans_mm += r.rmse_trans_axis[a] / 3.0;
  }
  r.mean_geodesic_deg = geo / n;
  return r;
}

inline nlohmann::json to_json(const MotionErrorReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.per_slice)
    rows.push_back({{"slice", row.slice},
                    {"rot_err_deg", row.rot_err_deg},
                    {"trans_err_mm", row.trans_err_mm},
                    {"geodesic_deg", row.geodesic_deg}});
  return {{"convention", MotionErrorReport::kConvention},
          {"n_slices", r.n_slices},
          {"mae_rot_deg", r.mae_rot_deg},
          {"rmse_rot_deg", r.rmse_rot_deg},
          {"mae_trans_mm", r.mae_trans_mm},
          {"rmse_trans_mm", r.rmse_trans_mm},
          {"mae_rot_axis_deg", r.mae_rot_axis},
          {"rmse_rot_axis_deg", r.rmse_rot_axis},
          {"mae_trans_axis_mm", r.mae_trans_axis},
          {"rmse_trans_axis_mm", r.rmse_trans_axis},
          {"mean_geodesic_deg", r.mean_geodesic_deg},
          {"per_slice", rows}};
}

inline std::string to_csv(const MotionErrorReport& r) {
  std::ostringstream os;
  os << "# " << MotionErrorReport::kConvention << "\n";
  os << "slice,rot_err_x_deg,rot_err_y_deg,rot_err_z_deg,trans_err_x_mm,trans_err_y_mm,trans_err_z_mm,geodesic_deg\n";
  os.precision(10);
  for (const auto& row : r.per_slice)
    os << row.slice << ',' << row.rot_err_deg[0] << ',' << row.rot_err_deg[1] << ',' << row.rot_err_deg[2] << ','
       << row.trans_err_mm[0] << ',' << row.trans_err_mm[1] << ',' << row.trans_err_mm[2] << ','
       << row.geodesic_deg << '\n';
  return os.str();
}

// =============================================================================
// SSIM / DSSIM / NRMSE
// =============================================================================

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  // Mean SSIM is taken over voxels where either volume exceeds this fraction
  // of the reference dynamic range; 0 averages over every voxel.
  double foreground_fraction = 0.01;
};

namespace detail {

// Local Gaussian-window statistics with the window truncated at the volume
// boundary and renormalized over its in-bounds weights.
inline std::vector<double> local_ssim(const Volume3D& v, const Volume3D& ref, const SsimConfig& cfg,
                                      double range) {
  const auto& dims = ref.grid.dims;
  const int radius = cfg.window / 2;
  std::vector<double> taps(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) taps[i + radius] = std::exp(-0.5 * i * i / (cfg.sigma * cfg.sigma));
  const std::array<std::vector<double>, 3> k3 = {taps, taps, taps};
  const std::size_t n = ref.data.size();
  std::vector<double> wsum(n, 1.0), mx = v.data, my = ref.data, mxx(n), myy(n), mxy(n);
  for (std::size_t i = 0; i < n; ++i) {
    mxx[i] = v.data[i] * v.data[i];
    myy[i] = ref.data[i] * ref.data[i];
    mxy[i] = v.data[i] * ref.data[i];
  }
  for (auto* f : {&wsum, &mx, &my, &mxx, &myy, &mxy}) convolve_separable(*f, dims, k3);
  const double c1 = (cfg.k1 * range) * (cfg.k1 * range);
  const double c2 = (cfg.k2 * range) * (cfg.k2 * range);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = wsum[i];
    const double ux = mx[i] / w, uy = my[i] / w;
    const double sxx = mxx[i] / w - ux * ux, syy = myy[i] / w - uy * uy, sxy = mxy[i] / w - ux * uy;
    out[i] = ((2 * ux * uy + c1) * (2 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
  }
  return out;
}

inline void require_same_shape(const Volume3D& a, const Volume3D& b, const char* what) {
  if (a.grid.dims != b.grid.dims) throw InvalidInput(std::string(what) + ": shape mismatch");
}

}  // namespace detail

inline double dynamic_range(const Volume3D& ref) {
  const double r = ref.max() - ref.min();
  return r > 0.0 ? r : 1.0;
}

inline double ssim(const Volume3D& v, const Volume3D& ref, const SsimConfig& cfg = {}) {
  detail::require_same_shape(v, ref, "ssim");
  const double range = dynamic_range(ref);
  const auto local = detail::local_ssim(v, ref, cfg, range);
  const double thr = cfg.foreground_fraction * range + ref.min();
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < local.size(); ++i) {
    if (cfg.foreground_fraction > 0.0 && !(ref.data[i] > thr || v.data[i] > thr)) continue;
    sum += local[i];
    ++count;
  }
  return count ? sum / count : 1.0;
}

// Per-voxel structural dissimilarity (1 - local SSIM) / 2.
inline Volume3D dssim_map(const Volume3D& v, const Volume3D& ref, const SsimConfig& cfg = {}) {
  detail::require_same_shape(v, ref, "dssim_map");
  const auto local = detail::local_ssim(v, ref, cfg, dynamic_range(ref));
  Volume3D out(ref.grid);
  for (std::size_t i = 0; i < local.size(); ++i) out.data[i] = 0.5 * (1.0 - local[i]);
  out.intensity_max = out.max();
  return out;
}

// RMSE divided by the reference intensity range, clipped to [0, 1].
inline double nrmse(const Volume3D& v, const Volume3D& ref) {
  detail::require_same_shape(v, ref, "nrmse");
  const double range = ref.max() - ref.min();
  if (!(range > 0.0)) throw InvalidInput("nrmse: reference has zero intensity range");
  double ss = 0.0;
  for (std::size_t i = 0; i < v.data.size(); ++i) ss += (v.data[i] - ref.data[i]) * (v.data[i] - ref.data[i]);
  return std::clamp(std::sqrt(ss / v.data.size()) / range, 0.0, 1.0);
}

// =============================================================================
// Statistics helpers
// =============================================================================

// Asymptotic p-value of the one-sample Kolmogorov-Smirnov test against
// U(lo, hi), with the Stephens small-sample correction.
inline double ks_uniform_pvalue(std::vector<double> xs, double lo, double hi) {
  if (xs.empty()) throw InvalidInput("ks_uniform_pvalue: no samples");
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double dmax = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = std::clamp((xs[i] - lo) / (hi - lo), 0.0, 1.0);
    dmax = std::max({dmax, (i + 1) / n - f, f - i / n});
  }
  const double en = std::sqrt(n);
  const double lambda = (en + 0.12 + 0.11 / en) * dmax;
  double p = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = 2.0 * ((j % 2) ? 1.0 : -1.0) * std::exp(-2.0 * j * j * lambda * lambda);
    p += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

// Paired comparison of two methods over the same cases.
struct PairedComparison {
  double mean_difference = 0.0;  // mean(a - b)
  double t_statistic = 0.0;
  std::size_t wins_a = 0;  // cases where a < b
  std::size_t n = 0;
};

inline PairedComparison paired_compare(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw InvalidInput("paired_compare: need equal, non-empty samples");
  PairedComparison c;
  c.n = a.size();
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d;
    s2 += d * d;
    if (a[i] < b[i]) ++c.wins_a;
  }
  const double n = static_cast<double>(c.n);
  c.mean_difference = s / n;
  if (c.n > 1) {
    const double var = std::max(0.0, (s2 - n * c.mean_difference * c.mean_difference) / (n - 1));
    c.t_statistic = var > 0 ? c.mean_difference / std::sqrt(var / n) : 0.0;
  }
  return c;
}

}  // namespace affirm
