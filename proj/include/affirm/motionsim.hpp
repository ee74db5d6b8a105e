#pragma once

// Control-point random-walk motion trajectories smoothed by cubic smoothing
// splines, with rejection against the velocity and displacement bounds.

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/core.hpp"
#include "affirm/geometry.hpp"

namespace affirm {

// =============================================================================
// Cubic smoothing spline
// =============================================================================

// Natural cubic spline given by knot values and knot second derivatives.
// Evaluation is linear beyond the end knots.
class CubicSpline {
 public:
  CubicSpline() = default;
  CubicSpline(std::vector<double> xs, std::vector<double> values, std::vector<double> second)
      : x_(std::move(xs)), g_(std::move(values)), m_(std::move(second)) {}

  double operator()(double x) const {
    const std::size_t n = x_.size();
    if (n == 0) return 0.0;
    if (n == 1) return g_[0];
    if (x <= x_.front()) return g_[0] + derivative(x_.front()) * (x - x_.front());
    if (x >= x_.back()) return g_[n - 1] + derivative(x_.back()) * (x - x_.back());
    const std::size_t i = segment(x);
    const double h = x_[i + 1] - x_[i];
    const double a = x - x_[i], b = x_[i + 1] - x;
    return (a * g_[i + 1] + b * g_[i]) / h - a * b / 6.0 * ((1.0 + a / h) * m_[i + 1] + (1.0 + b / h) * m_[i]);
  }

  double derivative(double x) const {
    const std::size_t n = x_.size();
    if (n < 2) return 0.0;
    x = std::clamp(x, x_.front(), x_.back());
    const std::size_t i = segment(x);
    const double h = x_[i + 1] - x_[i];
    const double a = x - x_[i], b = x_[i + 1] - x;
    return (g_[i + 1] - g_[i]) / h - m_[i] * (3 * b * b - h * h) / (6 * h) + m_[i + 1] * (3 * a * a - h * h) / (6 * h);
  }

  double second_derivative(double x) const {
    const std::size_t n = x_.size();
    if (n < 2) return 0.0;
    if (x < x_.front() || x > x_.back()) return 0.0;
    const std::size_t i = segment(x);
    const double h = x_[i + 1] - x_[i];
    return (m_[i] * (x_[i + 1] - x) + m_[i + 1] * (x - x_[i])) / h;
  }

  const std::vector<double>& knots() const { return x_; }
  const std::vector<double>& knot_values() const { return g_; }
  const std::vector<double>& knot_second_derivatives() const { return m_; }

 private:
  std::size_t segment(double x) const {
    auto it = std::upper_bound(x_.begin(), x_.end(), x);
    std::size_t i = static_cast<std::size_t>(std::distance(x_.begin(), it));
    i = i == 0 ? 0 : i - 1;
    return std::min(i, x_.size() - 2);
  }

  std::vector<double> x_, g_, m_;
};

namespace detail {

// Reinsch band matrices: Q is n x (n-2), R is (n-2) x (n-2).
inline void reinsch_matrices(const std::vector<double>& xs, Eigen::MatrixXd& q, Eigen::MatrixXd& r) {
  const int n = static_cast<int>(xs.size());
  q = Eigen::MatrixXd::Zero(n, std::max(0, n - 2));
  r = Eigen::MatrixXd::Zero(std::max(0, n - 2), std::max(0, n - 2));
  for (int j = 1; j + 1 < n; ++j) {
    const double h0 = xs[j] - xs[j - 1], h1 = xs[j + 1] - xs[j];
    q(j - 1, j - 1) = 1.0 / h0;
    q(j, j - 1) = -1.0 / h0 - 1.0 / h1;
    q(j + 1, j - 1) = 1.0 / h1;
    r(j - 1, j - 1) = (h0 + h1) / 3.0;
    if (j + 2 < n) {
      r(j - 1, j) = h1 / 6.0;
      r(j, j - 1) = h1 / 6.0;
    }
  }
}

struct SplineSolve {
  Eigen::VectorXd values;
  Eigen::VectorXd second;  // interior knots only
  double rss = 0.0;
  double trace_hat = 0.0;
};

inline SplineSolve solve_smoothing(const Eigen::MatrixXd& q, const Eigen::MatrixXd& r, const Eigen::VectorXd& y,
                                   double alpha, bool want_trace) {
  SplineSolve s;
  const int n = static_cast<int>(y.size());
  if (q.cols() == 0) {
    // Two points: the line through them.
    s.values = y;
    s.second = Eigen::VectorXd();
    s.trace_hat = n;
    return s;
  }
  const Eigen::MatrixXd lhs = r + alpha * q.transpose() * q;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(lhs);
  s.second = ldlt.solve(q.transpose() * y);
  s.values = y - alpha * q * s.second;
  s.rss = (y - s.values).squaredNorm();
  if (want_trace) {
    // A = I - alpha Q (R + alpha Q^T Q)^-1 Q^T
    const Eigen::MatrixXd inner = ldlt.solve(q.transpose());
    s.trace_hat = n - alpha * (q * inner).trace();
  }
  return s;
}

}  // namespace detail

// Minimizes sum_i (y_i - f(x_i))^2 + smoothing * integral f''(x)^2 dx over
// natural cubic splines. smoothing = 0 interpolates; smoothing -> infinity
// tends to the least-squares line.
inline CubicSpline fit_smoothing_spline(const std::vector<double>& xs, const std::vector<double>& ys,
                                        double smoothing) {
  if (xs.size() != ys.size()) throw InvalidInput("fit_smoothing_spline: xs and ys differ in length");
  if (xs.size() < 2) throw InvalidInput("fit_smoothing_spline: need at least 2 points");
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] == xs[i - 1]) throw InvalidInput("fit_smoothing_spline: duplicate abscissae");
    if (xs[i] < xs[i - 1]) throw InvalidInput("fit_smoothing_spline: abscissae must be increasing");
  }
  if (!(smoothing >= 0.0)) throw InvalidInput("fit_smoothing_spline: smoothing must be >= 0");
  Eigen::MatrixXd q, r;
  detail::reinsch_matrices(xs, q, r);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  const auto s = detail::solve_smoothing(q, r, y, smoothing, false);
  std::vector<double> values(s.values.data(), s.values.data() + s.values.size());
  std::vector<double> second(xs.size(), 0.0);
  for (Eigen::Index j = 0; j < s.second.size(); ++j) second[j + 1] = s.second[j];
  return CubicSpline(xs, values, second);
}

// Smoothing weight minimizing the generalized cross-validation score
// n * RSS / (n - tr A)^2 over a log-spaced grid, refined by golden section.
inline double gcv_smoothing(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() < 3) return 0.0;
  Eigen::MatrixXd q, r;
  detail::reinsch_matrices(xs, q, r);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size()));
  const double n = static_cast<double>(xs.size());
  const double span = xs.back() - xs.front();
  const double scale = std::pow(span / (n - 1), 3);
  auto score = [&](double log_alpha) {
    const auto s = detail::solve_smoothing(q, r, y, scale * std::pow(10.0, log_alpha), true);
    const double denom = n - s.trace_hat;
    if (denom <= 1e-12) return std::numeric_limits<double>::infinity();
    return n * s.rss / (denom * denom);
  };
  double best = -6.0, best_score = score(best);
  for (double la = -5.5; la <= 6.0 + 1e-9; la += 0.5) {
    const double sc = score(la);
    if (sc < best_score * (1.0 - 1e-12)) {
      best = la;
      best_score = sc;
    }
  }
  double lo = best - 0.5, hi = best + 0.5;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
  double fa = score(a), fb = score(b);
  for (int it = 0; it < 30; ++it) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - phi * (hi - lo);
      fa = score(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + phi * (hi - lo);
      fb = score(b);
    }
  }
  const double refined = 0.5 * (lo + hi);
  return scale * std::pow(10.0, score(refined) <= best_score ? refined : best);
}

// =============================================================================
// Trajectories
// =============================================================================

struct TrajectoryConfig {
  int n_control = 5;
  double delta_rot_bound = deg2rad(10.0);   // half-width of the uniform step (and start) for angles
  double delta_trans_bound = 3.0;           // same for translations, mm
  double mean_rot_bound = kPi / 4.0;        // offset support for angle means
  double mean_trans_bound = 2.0;            // offset support for displacement means, mm
  double trans_bound = 10.0;                // |d| < trans_bound, mm
  double max_angular_velocity = deg2rad(5.0);           // per-axis mean speed, rad/s
  double max_instant_angular_velocity = deg2rad(15.0);  // per-axis instantaneous cap, rad/s
  double slice_interval_s = 1.0;
  double smoothing = -1.0;  // < 0 selects the smoothing weight by GCV per curve
  int max_attempts = 1000;
  std::uint64_t seed = 1;
  Vec3 center = Vec3::Zero();

  void validate() const {
    if (n_control < 2) throw InvalidInput("TrajectoryConfig: n_control must be >= 2");
    if (delta_rot_bound < 0 || delta_trans_bound < 0 || mean_rot_bound < 0 || mean_trans_bound < 0)
      throw InvalidInput("TrajectoryConfig: bounds must be non-negative");
    if (!(trans_bound > 0) || !(max_angular_velocity > 0) || !(max_instant_angular_velocity > 0))
      throw InvalidInput("TrajectoryConfig: limits must be > 0");
    if (!(slice_interval_s > 0)) throw InvalidInput("TrajectoryConfig: slice_interval_s must be > 0");
    if (max_attempts < 1) throw InvalidInput("TrajectoryConfig: max_attempts must be >= 1");
  }
};

// Parameter order: theta_x, theta_y, theta_z (rad), d_x, d_y, d_z (mm).
struct MotionTrajectory {
  std::array<CubicSpline, 6> curves;
  std::array<double, 6> curve_shift{};  // added to each curve (offset minus demeaning)
  std::vector<double> times_s;
  std::vector<RigidTransform> samples;
  int attempts = 0;

  double parameter(int p, double t) const { return curves[p](t) + curve_shift[p]; }

  RigidTransform at(double t, const Vec3& center = Vec3::Zero()) const {
    RigidTransform r;
    r.theta = {parameter(0, t), parameter(1, t), parameter(2, t)};
    r.d = {parameter(3, t), parameter(4, t), parameter(5, t)};
    r.center = center;
    return r;
  }

  std::size_t size() const { return samples.size(); }
};

inline double sample_param(const RigidTransform& t, int p) { return p < 3 ? t.theta[p] : t.d[p - 3]; }

// Trajectory built directly from per-sample transforms (e.g. hand-made test
// cases); the curves interpolate the samples.
inline MotionTrajectory trajectory_from_samples(const std::vector<RigidTransform>& samples, double interval_s) {
  MotionTrajectory tr;
  tr.samples = samples;
  for (std::size_t i = 0; i < samples.size(); ++i) tr.times_s.push_back(i * interval_s);
  if (samples.size() >= 2)
    for (int p = 0; p < 6; ++p) {
      std::vector<double> ys;
      for (const auto& s : samples) ys.push_back(sample_param(s, p));
      tr.curves[p] = fit_smoothing_spline(tr.times_s, ys, 0.0);
    }
  return tr;
}

struct BoundViolation {
  std::string bound;
  int axis = 0;
  double value = 0.0;
  double limit = 0.0;
};

inline std::vector<BoundViolation> validate_bounds(const MotionTrajectory& traj, const TrajectoryConfig& cfg) {
  std::vector<BoundViolation> out;
  const std::size_t n = traj.samples.size();
  if (n == 0) return out;
  constexpr double slack = 1e-12;
  for (int p = 0; p < 6; ++p) {
    double mean = 0.0;
    for (const auto& s : traj.samples) mean += sample_param(s, p);
    mean /= static_cast<double>(n);
    const int axis = p % 3;
    if (p < 3) {
      if (std::abs(mean) > cfg.mean_rot_bound + slack) out.push_back({"mean_rot_bound", axis, mean, cfg.mean_rot_bound});
      if (n >= 2) {
        double speed = 0.0, peak = 0.0;
        for (std::size_t i = 1; i < n; ++i) {
          const double dt = traj.times_s[i] - traj.times_s[i - 1];
          const double v = std::abs(sample_param(traj.samples[i], p) - sample_param(traj.samples[i - 1], p)) / dt;
          speed += v;
          peak = std::max(peak, v);
        }
        speed /= static_cast<double>(n - 1);
        if (speed > cfg.max_angular_velocity + slack)
          out.push_back({"max_angular_velocity", axis, speed, cfg.max_angular_velocity});
        if (peak > cfg.max_instant_angular_velocity + slack)
          out.push_back({"max_instant_angular_velocity", axis, peak, cfg.max_instant_angular_velocity});
      }
    } else {
      if (std::abs(mean) > cfg.mean_trans_bound + slack)
        out.push_back({"mean_trans_bound", axis, mean, cfg.mean_trans_bound});
      double worst = 0.0;
      for (const auto& s : traj.samples) {
        const double v = sample_param(s, p);
        if (std::abs(v) > std::abs(worst)) worst = v;
      }
      if (std::abs(worst) >= cfg.trans_bound) out.push_back({"trans_bound", axis, worst, cfg.trans_bound});
    }
  }
  return out;
}

// Per parameter: start P1 and N_c - 1 increments drawn uniformly, accumulated
// as a random walk over control times spanning the stack, smoothed by a cubic
// smoothing spline, demeaned over the slice times, shifted by a uniform
// offset, then sampled at the slice times. Draws are repeated until every
// bound holds.
inline MotionTrajectory simulate_trajectory(const TrajectoryConfig& cfg, int n_slices) {
  cfg.validate();
  if (n_slices < 1) throw InvalidInput("simulate_trajectory: n_slices must be >= 1");
  CounterRng rng(cfg.seed, 0x7a11);
  std::vector<double> times(n_slices);
  for (int i = 0; i < n_slices; ++i) times[i] = i * cfg.slice_interval_s;
  const double span = std::max(times.back(), cfg.slice_interval_s);
  std::vector<double> control_t(cfg.n_control);
  for (int k = 0; k < cfg.n_control; ++k) control_t[k] = span * k / (cfg.n_control - 1);

  for (int attempt = 1; attempt <= cfg.max_attempts; ++attempt) {
    MotionTrajectory tr;
    tr.times_s = times;
    tr.attempts = attempt;
    std::array<std::vector<double>, 6> sampled;
    for (int p = 0; p < 6; ++p) {
      const double step = p < 3 ? cfg.delta_rot_bound : cfg.delta_trans_bound;
      const double mean_bound = p < 3 ? cfg.mean_rot_bound : cfg.mean_trans_bound;
      std::vector<double> ctrl(cfg.n_control);
      ctrl[0] = rng.uniform(-step, step);
      for (int k = 1; k < cfg.n_control; ++k) ctrl[k] = ctrl[k - 1] + rng.uniform(-step, step);
      const double offset = rng.uniform(-mean_bound, mean_bound);
      const double alpha = cfg.smoothing >= 0 ? cfg.smoothing : gcv_smoothing(control_t, ctrl);
      tr.curves[p] = fit_smoothing_spline(control_t, ctrl, alpha);
      double mean = 0.0;
      for (double t : times) mean += tr.curves[p](t);
      mean /= n_slices;
      tr.curve_shift[p] = offset - mean;
      sampled[p].resize(n_slices);
      for (int i = 0; i < n_slices; ++i) sampled[p][i] = tr.parameter(p, times[i]);
    }
    tr.samples.resize(n_slices);
    for (int i = 0; i < n_slices; ++i) {
      tr.samples[i].theta = {sampled[0][i], sampled[1][i], sampled[2][i]};
      tr.samples[i].d = {sampled[3][i], sampled[4][i], sampled[5][i]};
      tr.samples[i].center = cfg.center;
    }
    if (validate_bounds(tr, cfg).empty()) return tr;
  }
  throw NumericalFailure("simulate_trajectory: retry budget exhausted; bounds infeasible for this config");
}

// Motion regimes used by the experiments. `standard` is the default config;
// `small` keeps every slice within a few degrees / mm of the reference pose;
// `large` adds a stack-level rotation of about 45 degrees about a random axis
// on top of standard within-stack motion (see large_motion_trajectory).
enum class MotionPreset { none, small, standard, large };

inline const char* to_string(MotionPreset p) {
  switch (p) {
    case MotionPreset::none: return "none";
    case MotionPreset::small: return "small";
    case MotionPreset::standard: return "standard";
    case MotionPreset::large: return "large";
  }
  return "?";
}

inline MotionPreset motion_preset_from_string(const std::string& s) {
  if (s == "none") return MotionPreset::none;
  if (s == "small") return MotionPreset::small;
  if (s == "standard") return MotionPreset::standard;
  if (s == "large") return MotionPreset::large;
  throw InvalidInput("unknown motion preset '" + s + "' (none|small|standard|large)");
}

inline TrajectoryConfig small_motion_config(TrajectoryConfig base) {
  base.mean_rot_bound = deg2rad(2.0);
  base.delta_rot_bound = deg2rad(1.0);
  base.mean_trans_bound = 1.0;
  base.delta_trans_bound = 0.5;
  return base;
}

inline MotionTrajectory static_trajectory(int n_slices, double interval_s, const Vec3& center) {
  return trajectory_from_samples(std::vector<RigidTransform>(n_slices, RigidTransform::identity(center)),
                                 interval_s);
}

// Within-stack motion from `cfg` with zero rotation mean, left-composed with
// a fixed rotation of angle_rad +- jitter_rad about a uniformly random axis.
inline MotionTrajectory large_motion_trajectory(TrajectoryConfig cfg, int n_slices, double angle_rad = kPi / 4.0,
                                                double jitter_rad = deg2rad(5.0)) {
  CounterRng rng(cfg.seed, 0x1a26e);
  cfg.mean_rot_bound = 0.0;
  const MotionTrajectory base = simulate_trajectory(cfg, n_slices);
  Vec3 axis(rng.normal(), rng.normal(), rng.normal());
  if (axis.norm() < 1e-12) axis = Vec3::UnitX();
  axis.normalize();
  const double angle = angle_rad + rng.uniform(-jitter_rad, jitter_rad);
  const Mat3 offset = matrix_exp_skew(skew(axis * angle));
  std::vector<RigidTransform> samples = base.samples;
  for (auto& s : samples) s.theta = matrix_to_euler(offset * s.rotation());
  return trajectory_from_samples(samples, cfg.slice_interval_s);
}

inline MotionTrajectory simulate_preset(MotionPreset p, const TrajectoryConfig& cfg, int n_slices) {
  switch (p) {
    case MotionPreset::none: return static_trajectory(n_slices, cfg.slice_interval_s, cfg.center);
    case MotionPreset::small: return simulate_trajectory(small_motion_config(cfg), n_slices);
    case MotionPreset::standard: return simulate_trajectory(cfg, n_slices);
    case MotionPreset::large: return large_motion_trajectory(cfg, n_slices);
  }
  throw InvalidInput("unknown motion preset");
}

inline SliceStack acquire_stack(const Volume3D& v, const MotionTrajectory& traj, Orientation o,
                                const AcquisitionConfig& cfg) {
  return acquire_stack_from_samples(v, traj.samples, o, cfg);
}

// CSV: time_s,theta_x_deg,theta_y_deg,theta_z_deg,d_x_mm,d_y_mm,d_z_mm
inline std::string trajectory_csv(const MotionTrajectory& traj) {
  std::ostringstream os;
  os << "time_s,theta_x_deg,theta_y_deg,theta_z_deg,d_x_mm,d_y_mm,d_z_mm\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < traj.samples.size(); ++i) {
    const auto& s = traj.samples[i];
    os << traj.times_s[i] << ',' << rad2deg(s.theta.x()) << ',' << rad2deg(s.theta.y()) << ','
       << rad2deg(s.theta.z()) << ',' << s.d.x() << ',' << s.d.y() << ',' << s.d.z() << '\n';
  }
  return os.str();
}

}  // namespace affirm
