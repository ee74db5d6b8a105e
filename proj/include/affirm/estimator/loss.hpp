#pragma once

// Training losses on predicted per-slice parameters: normalized parameter
// MSE, the summed geodesic slice loss, and the reconstruction-consistency
// term ||SDA(slices, T_hat) - V||_2 with its gradient through the deposit
// positions.

#include <cmath>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/geometry.hpp"
#include "affirm/sda.hpp"

namespace affirm::nn {

// Per-slice predictions of one stack: theta (rad) and d (mm), N x 3 each.
struct StackPrediction {
  std::vector<Vec3> theta, d;
  std::size_t size() const { return theta.size(); }
};

struct StackPredictionGrad {
  std::vector<Vec3> theta, d;
  explicit StackPredictionGrad(std::size_t n = 0) : theta(n, Vec3::Zero()), d(n, Vec3::Zero()) {}
};

inline std::vector<RigidTransform> to_transforms(const StackPrediction& p, const Vec3& center) {
  std::vector<RigidTransform> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = {p.theta[i], p.d[i], center};
  return out;
}

inline const std::vector<RigidTransform>& require_truth(const SliceStack& s) {
  if (!s.true_transforms) throw InvalidInput("loss: stack has no ground-truth transforms");
  return *s.true_transforms;
}

// Mean over brain-mask slices of the squared parameter error, with angles
// divided by rot_scale and displacements by trans_scale.
inline double parameter_mse(const std::vector<SliceStack>& stacks, const std::vector<StackPrediction>& pred,
                            double rot_scale, double trans_scale, std::vector<StackPredictionGrad>* grad) {
  std::size_t count = 0;
  for (const auto& s : stacks)
    for (bool b : s.brain_mask) count += b;
  if (grad) {
    grad->clear();
    for (const auto& p : pred) grad->emplace_back(p.size());
  }
  if (count == 0) return 0.0;
  const double norm = 1.0 / (6.0 * static_cast<double>(count));
  double loss = 0.0;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& truth = require_truth(stacks[s]);
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      if (!stacks[s].brain_mask[i]) continue;
      const Vec3 et = (pred[s].theta[i] - truth[i].theta) / rot_scale;
      const Vec3 ed = (pred[s].d[i] - truth[i].d) / trans_scale;
      loss += norm * (et.squaredNorm() + ed.squaredNorm());
      if (grad) {
        (*grad)[s].theta[i] += 2.0 * norm * et / rot_scale;
        (*grad)[s].d[i] += 2.0 * norm * ed / trans_scale;
      }
    }
  }
  return loss;
}

// Sum of geodesic slice losses over brain-mask slices.
inline double geodesic_sum(const std::vector<SliceStack>& stacks, const std::vector<StackPrediction>& pred,
                           const LossConfig& cfg, std::vector<StackPredictionGrad>* grad) {
  if (grad) {
    grad->clear();
    for (const auto& p : pred) grad->emplace_back(p.size());
  }
  double loss = 0.0;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& truth = require_truth(stacks[s]);
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      if (!stacks[s].brain_mask[i]) continue;
      const GeodesicGrad g = geodesic_slice_loss_grad(truth[i], pred[s].theta[i], pred[s].d[i], cfg);
      loss += g.loss;
      if (grad) {
        (*grad)[s].theta[i] += g.d_theta;
        (*grad)[s].d[i] += g.d_disp;
      }
    }
  }
  return loss;
}

struct ConsistencyResult {
  double value = 0.0;
  Volume3D reconstruction;
};

// lambda * ||SDA(stacks, T_hat; sigma) - V||_2. The value uses cfg.deposit.
// The gradient differentiates the same reconstruction for the trilinear and
// cubic deposits (exact; cubic is C2, trilinear only piecewise smooth). The
// nearest-voxel deposit is piecewise constant in T_hat, so there the cubic
// reconstruction's gradient stands in as a straight-through surrogate.
inline ConsistencyResult consistency_loss(const std::vector<SliceStack>& stacks,
                                          const std::vector<StackPrediction>& pred, const Volume3D& truth,
                                          double sigma_mm, const SdaConfig& sda, double lambda,
                                          std::vector<StackPredictionGrad>* grad) {
  const Vec3 center = truth.grid.center();
  std::vector<std::vector<RigidTransform>> t;
  for (const auto& p : pred) t.push_back(to_transforms(p, center));
  SdaConfig cfg = sda;
  cfg.target_grid = truth.grid;
  ConsistencyResult r;
  r.reconstruction = sda_reconstruct(stacks, t, sigma_mm, cfg);
  double sq = 0.0;
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const double e = r.reconstruction.data[i] - truth.data[i];
    sq += e * e;
  }
  const double norm = std::sqrt(sq);
  r.value = lambda * norm;
  if (!grad) return r;
  grad->clear();
  for (const auto& p : pred) grad->emplace_back(p.size());
  if (norm < 1e-300 || lambda == 0.0) return r;

  const SdaDeposit mode = cfg.deposit == SdaDeposit::nearest ? SdaDeposit::cubic : cfg.deposit;
  const Grid& grid = truth.grid;
  SdaAccumulators acc = sda_deposit(stacks, t, grid, mode);
  const auto taps = sda_taps(grid, sigma_mm);
  std::vector<double> a = acc.intensity, c = acc.count;
  convolve_separable(a, grid.dims, taps);
  convolve_separable(c, grid.dims, taps);
  std::vector<double> omega(grid.size(), 0.0);
  for (std::size_t i = 0; i < omega.size(); ++i) omega[i] = normalized_ratio(a[i], c[i], cfg.count_epsilon);
  double sq_s = 0.0;
  for (std::size_t i = 0; i < omega.size(); ++i) sq_s += (omega[i] - truth.data[i]) * (omega[i] - truth.data[i]);
  const double norm_s = std::sqrt(sq_s);
  if (norm_s < 1e-300) return r;
  std::vector<double> ga(grid.size(), 0.0), gc(grid.size(), 0.0);
  for (std::size_t i = 0; i < omega.size(); ++i) {
    const double g = lambda * (omega[i] - truth.data[i]) / norm_s;
    const double cc = smooth_count(c[i], cfg.count_epsilon);
    ga[i] = g / cc;
    gc[i] = -g * a[i] / (cc * cc) * (1.0 - std::exp(-c[i] / cfg.count_epsilon));
  }
  // Symmetric taps with zero padding: the blur is self-adjoint.
  convolve_separable(ga, grid.dims, taps);
  convolve_separable(gc, grid.dims, taps);

  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& st = stacks[s];
    parallel_for(st.size(), [&](std::size_t k) {
      const RigidTransform& tk = t[s][k];
      const Mat3 r_mat = tk.rotation();
      const auto jac = euler_jacobian(tk.theta);
      const auto& img = st.slices[k];
      Vec3 g_theta = Vec3::Zero(), g_d = Vec3::Zero();
      // Pixel q in the scanner frame lands at p = R^T (q - c - d) + c.
      for_each_slice_point(st.geometry, k, tk, [&](std::size_t pix, const Vec3& p) {
        const DepositStencil sten = deposit_stencil(grid, p, mode);
        Vec3 dp = Vec3::Zero();
        for (int n = 0; n < sten.count; ++n)
          dp += (ga[sten.index[n]] * img.data[pix] + gc[sten.index[n]]) * sten.gradient[n];
        if (dp.squaredNorm() == 0.0) return;
        const Vec3 q_rel = r_mat * (p - tk.center);  // = q - c - d
        g_d += -(r_mat * dp);
        for (int j = 0; j < 3; ++j) g_theta[j] += dp.dot(jac[j].transpose() * q_rel);
      });
      (*grad)[s].theta[k] = g_theta;
      (*grad)[s].d[k] = g_d;
    });
  }
  return r;
}

}  // namespace affirm::nn
