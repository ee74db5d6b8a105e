#pragma once

// Affinity fusion of 2D slice features with 3D reference features:
//   y = softmax((x_s W_s^T)(x_v W_v^T)^T / sqrt(C)) (x_v W_g^T)
// with the softmax taken over the 3D positions. Keys and values depend only
// on the volume, so they are computed once and shared by every slice.

#include <cmath>

#include "affirm/estimator/gru.hpp"

namespace affirm::nn {

struct FusionParams {
  Tensor w_s, w_v, w_g;  // (embedding, channels)
  int channels() const { return w_s.dim(1); }
  int embedding() const { return w_s.dim(0); }
};

inline FusionParams make_fusion(int channels, int embedding) {
  return {Tensor({embedding, channels}), Tensor({embedding, channels}), Tensor({embedding, channels})};
}

struct FusionKeys {
  RowMat k, g;  // (positions, embedding)
};

// x_v: (positions, channels)
inline FusionKeys fusion_keys(const RowMat& x_v, const FusionParams& p) {
  if (x_v.cols() != p.channels()) throw InvalidInput("affinity_fusion: volume channel count mismatch");
  return {x_v * as_mat(p.w_v).transpose(), x_v * as_mat(p.w_g).transpose()};
}

struct FusionQueryCache {
  RowMat x_s, q, attn;
};

// x_s: (slice positions, channels) -> (slice positions, embedding)
inline RowMat fusion_query_forward(const RowMat& x_s, const FusionKeys& keys, const FusionParams& p,
                                   FusionQueryCache* cache) {
  if (x_s.cols() != p.channels()) throw InvalidInput("affinity_fusion: slice channel count mismatch");
  const RowMat q = x_s * as_mat(p.w_s).transpose();
  RowMat s = (q * keys.k.transpose()) / std::sqrt(static_cast<double>(p.channels()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
  RowMat y = s * keys.g;
  if (cache) *cache = {x_s, q, std::move(s)};
  return y;
}

// Accumulates dK, dG (shared) and dW_s; returns dx_s.
inline RowMat fusion_query_backward(const RowMat& dy, const FusionQueryCache& c, const FusionKeys& keys,
                                    const FusionParams& p, RowMat& dk, RowMat& dg, FusionParams& dp) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.channels()));
  const RowMat da = dy * keys.g.transpose();
  dg += c.attn.transpose() * dy;
  RowMat ds = c.attn.cwiseProduct(da);
  for (Eigen::Index i = 0; i < ds.rows(); ++i) ds.row(i) -= c.attn.row(i) * ds.row(i).sum();
  const RowMat dq = ds * keys.k * scale;
  dk += ds.transpose() * c.q * scale;
  as_mat(dp.w_s) += dq.transpose() * c.x_s;
  return dq * as_mat(p.w_s);
}

inline RowMat fusion_keys_backward(const RowMat& x_v, const RowMat& dk, const RowMat& dg, const FusionParams& p,
                                   FusionParams& dp) {
  as_mat(dp.w_v) += dk.transpose() * x_v;
  as_mat(dp.w_g) += dg.transpose() * x_v;
  return dk * as_mat(p.w_v) + dg * as_mat(p.w_g);
}

// Single-slice convenience form.
inline RowMat affinity_fusion(const RowMat& x_s, const RowMat& x_v, const FusionParams& p) {
  return fusion_query_forward(x_s, fusion_keys(x_v, p), p, nullptr);
}

}  // namespace affirm::nn
