#pragma once

// Rigid-body algebra on SE(3) in the Euler-Cartesian parameterization.
//
// Convention: R = Rz(theta_z) * Ry(theta_y) * Rx(theta_x) (extrinsic x-y-z),
// angles in radians, translations in mm. A transform rotates about an explicit
// center: p -> R (p - c) + c + d. Transforms map object (canonical) coordinates
// to scanner coordinates, i.e. they describe how the object has moved.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <nlohmann/json.hpp>

#include "affirm/core.hpp"

namespace affirm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline Mat3 rot_x(double a) {
  Mat3 r;
  const double c = std::cos(a), s = std::sin(a);
  r << 1, 0, 0, 0, c, -s, 0, s, c;
  return r;
}

inline Mat3 rot_y(double a) {
  Mat3 r;
  const double c = std::cos(a), s = std::sin(a);
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

inline Mat3 rot_z(double a) {
  Mat3 r;
  const double c = std::cos(a), s = std::sin(a);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

inline Mat3 euler_to_matrix(const Vec3& theta) {
  return rot_z(theta.z()) * rot_y(theta.y()) * rot_x(theta.x());
}

// Partial derivatives dR/dtheta_k, k = 0..2.
inline std::array<Mat3, 3> euler_jacobian(const Vec3& theta) {
  auto drx = [](double a) {
    Mat3 r;
    const double c = std::cos(a), s = std::sin(a);
    r << 0, 0, 0, 0, -s, -c, 0, c, -s;
    return r;
  };
  auto dry = [](double a) {
    Mat3 r;
    const double c = std::cos(a), s = std::sin(a);
    r << -s, 0, c, 0, 0, 0, -c, 0, -s;
    return r;
  };
  auto drz = [](double a) {
    Mat3 r;
    const double c = std::cos(a), s = std::sin(a);
    r << -s, -c, 0, c, -s, 0, 0, 0, 0;
    return r;
  };
  const Mat3 rx = rot_x(theta.x()), ry = rot_y(theta.y()), rz = rot_z(theta.z());
  return {rz * ry * drx(theta.x()), rz * dry(theta.y()) * rx, drz(theta.z()) * ry * rx};
}

// Inverse of euler_to_matrix for |theta_y| < pi/2. At gimbal lock theta_x is
// set to zero and theta_z absorbs the remaining in-plane angle.
inline Vec3 matrix_to_euler(const Mat3& r) {
  const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
  const double ty = std::asin(sy);
  if (std::abs(std::cos(ty)) < 1e-12) {
    const double tz = std::atan2(-r(0, 1), r(1, 1));
    return {0.0, ty, tz};
  }
  return {std::atan2(r(2, 1), r(2, 2)), ty, std::atan2(r(1, 0), r(0, 0))};
}

inline Mat3 skew(const Vec3& w) {
  Mat3 s;
  s << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return s;
}

inline Vec3 unskew(const Mat3& s) { return {s(2, 1), s(0, 2), s(1, 0)}; }

inline bool is_rotation(const Mat3& r, double tol = 1e-6) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

// Axis-angle vector of a rotation, via a sign-fixed unit quaternion so the
// extraction stays well conditioned all the way to angle pi.
inline Vec3 rotation_log_vector(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  const Vec3 v = q.vec();
  const double s = v.norm();
  if (s < 1e-300) return Vec3::Zero();
  const double angle = 2.0 * std::atan2(s, q.w());
  return v * (angle / s);
}

inline double rotation_angle(const Mat3& r) { return rotation_log_vector(r).norm(); }

// Principal matrix logarithm of a rotation: a skew-symmetric matrix.
inline Mat3 matrix_log_rotation(const Mat3& r) {
  if (!is_rotation(r)) throw InvalidInput("matrix_log_rotation: input is not a proper rotation");
  return skew(rotation_log_vector(r));
}

// Rodrigues' formula.
inline Mat3 matrix_exp_skew(const Mat3& s) {
  const Vec3 w = unskew(s);
  const double a = w.norm();
  if (a < 1e-12) return Mat3::Identity() + s + 0.5 * s * s;
  return Mat3::Identity() + (std::sin(a) / a) * s + ((1.0 - std::cos(a)) / (a * a)) * s * s;
}

struct RigidTransform {
  Vec3 theta = Vec3::Zero();
  Vec3 d = Vec3::Zero();
  Vec3 center = Vec3::Zero();

  static RigidTransform identity(const Vec3& center = Vec3::Zero()) {
    return {Vec3::Zero(), Vec3::Zero(), center};
  }

  Mat3 rotation() const { return euler_to_matrix(theta); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    const Mat3 r = rotation();
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = center + d - r * center;
    return m;
  }

  // Rebuilds (theta, d) from a homogeneous matrix for a chosen rotation center.
  static RigidTransform from_matrix(const Mat4& m, const Vec3& center = Vec3::Zero()) {
    const Mat3 r = m.topLeftCorner<3, 3>();
    const Vec3 t = m.topRightCorner<3, 1>();
    return {matrix_to_euler(r), t - center + r * center, center};
  }

  Vec3 apply(const Vec3& p) const { return rotation() * (p - center) + center + d; }

  // Same transform expressed about another center.
  RigidTransform recentered(const Vec3& new_center) const {
    return from_matrix(matrix(), new_center);
  }
};

inline Vec3 apply_to_point(const RigidTransform& t, const Vec3& p) { return t.apply(p); }

// matrix(result) = matrix(a) * matrix(b); the result keeps a's center.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return RigidTransform::from_matrix(a.matrix() * b.matrix(), a.center);
}

inline RigidTransform invert(const RigidTransform& t) {
  const Mat3 r = t.rotation();
  Mat4 inv = Mat4::Identity();
  inv.topLeftCorner<3, 3>() = r.transpose();
  inv.topRightCorner<3, 1>() = -r.transpose() * t.matrix().topRightCorner<3, 1>();
  return RigidTransform::from_matrix(inv, t.center);
}

// Precomputed affine form of a transform for tight sampling loops.
struct AffineMap {
  Mat3 linear = Mat3::Identity();
  Vec3 offset = Vec3::Zero();

  explicit AffineMap(const RigidTransform& t) {
    const Mat4 m = t.matrix();
    linear = m.topLeftCorner<3, 3>();
    offset = m.topRightCorner<3, 1>();
  }
  Vec3 operator()(const Vec3& p) const { return linear * p + offset; }
};

struct LossConfig {
  double gamma = 1.0;
  double lambda = 0.1;

  void validate() const {
    if (!(gamma > 0.0)) throw InvalidInput("LossConfig: gamma must be > 0");
    if (!(lambda >= 0.0)) throw InvalidInput("LossConfig: lambda must be >= 0");
  }
};

// (||log(R_hat^T R)||_F^2 + gamma ||d_hat - d||^2)^(1/2)
inline double geodesic_slice_loss(const RigidTransform& t, const RigidTransform& t_hat,
                                  const LossConfig& cfg) {
  const Mat3 rel = t_hat.rotation().transpose() * t.rotation();
  const double angle = rotation_angle(rel);
  const double rot_sq = 2.0 * angle * angle;
  const double trans_sq = (t_hat.d - t.d).squaredNorm();
  return std::sqrt(rot_sq + cfg.gamma * trans_sq);
}

// Gradient of geodesic_slice_loss with respect to (theta_hat, d_hat). At the
// minimum (loss 0) the subgradient 0 is returned.
struct GeodesicGrad {
  double loss = 0.0;
  Vec3 d_theta = Vec3::Zero();
  Vec3 d_disp = Vec3::Zero();
};

inline GeodesicGrad geodesic_slice_loss_grad(const RigidTransform& t, const Vec3& theta_hat,
                                             const Vec3& d_hat, const LossConfig& cfg) {
  GeodesicGrad g;
  const Mat3 r = t.rotation();
  const Mat3 r_hat = euler_to_matrix(theta_hat);
  const double angle = rotation_angle(r_hat.transpose() * r);
  const Vec3 dd = d_hat - t.d;
  g.loss = std::sqrt(2.0 * angle * angle + cfg.gamma * dd.squaredNorm());
  if (g.loss < 1e-300) return g;
  // d(angle^2)/d(trace) = -angle / sin(angle), -> -1 at angle 0.
  double ratio = 1.0;
  if (angle > 1e-6) ratio = angle / std::max(std::sin(angle), 1e-12);
  const auto jac = euler_jacobian(theta_hat);
  for (int k = 0; k < 3; ++k) {
    const double dtrace = (jac[k].transpose() * r).trace();
    const double dangle_sq = -ratio * dtrace;
    g.d_theta[k] = 2.0 * dangle_sq / (2.0 * g.loss);
  }
  g.d_disp = cfg.gamma * dd / g.loss;
  return g;
}

// JSON form: {"theta_deg":[..],"theta_rad":[..],"d_mm":[..],"center_mm":[..]}.
// Readers prefer theta_rad (exact round trip) and fall back to theta_deg.
inline nlohmann::json to_json(const RigidTransform& t) {
  return {{"theta_deg", {rad2deg(t.theta.x()), rad2deg(t.theta.y()), rad2deg(t.theta.z())}},
          {"theta_rad", {t.theta.x(), t.theta.y(), t.theta.z()}},
          {"d_mm", {t.d.x(), t.d.y(), t.d.z()}},
          {"center_mm", {t.center.x(), t.center.y(), t.center.z()}}};
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  auto vec = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
      throw InvalidInput(std::string("transform JSON: missing 3-vector '") + key + "'");
    return Vec3(j.at(key)[0].get<double>(), j.at(key)[1].get<double>(), j.at(key)[2].get<double>());
  };
  RigidTransform t;
  if (j.contains("theta_rad")) {
    t.theta = vec("theta_rad");
  } else {
    const Vec3 deg = vec("theta_deg");
    t.theta = Vec3(deg2rad(deg.x()), deg2rad(deg.y()), deg2rad(deg.z()));
  }
  t.d = vec("d_mm");
  t.center = j.contains("center_mm") ? vec("center_mm") : Vec3::Zero();
  return t;
}

}  // namespace affirm
