#pragma once

// Fully gated GRU cell and a bidirectional wrapper with analytic backward.
//
// Update rule (as used here):
//   z = sigmoid(W_zx x + W_zh h + b_z)
//   r = sigmoid(W_rx x + W_rh h + b_r)
//   c = tanh(W_hx x + W_hr (r * h) + b_h)
//   h' = (1 - z) * h + z * c
// The conventional cell swaps the roles of z and 1 - z; `standard` selects it.

#include <Eigen/Dense>
#include <vector>

#include "affirm/estimator/layers.hpp"

namespace affirm::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

inline CMapMat as_mat(const Tensor& t) { return CMapMat(t.data.data(), t.dim(0), t.dim(1)); }
inline MapMat as_mat(Tensor& t) { return MapMat(t.data.data(), t.dim(0), t.dim(1)); }
inline CMapVec as_vec(const Tensor& t) { return CMapVec(t.data.data(), static_cast<Eigen::Index>(t.numel())); }
inline MapVec as_vec(Tensor& t) { return MapVec(t.data.data(), static_cast<Eigen::Index>(t.numel())); }

struct GruParams {
  Tensor w_zx, w_zh, w_rx, w_rh, w_hx, w_hr;  // (hidden, input) / (hidden, hidden)
  Tensor b_z, b_r, b_h;                       // (hidden)
  int input_size() const { return w_zx.dim(1); }
  int hidden_size() const { return w_zx.dim(0); }
};

inline GruParams make_gru(int input, int hidden) {
  return {Tensor({hidden, input}), Tensor({hidden, hidden}), Tensor({hidden, input}), Tensor({hidden, hidden}),
          Tensor({hidden, input}), Tensor({hidden, hidden}), Tensor({hidden}),         Tensor({hidden}),
          Tensor({hidden})};
}

struct GruStep {
  Eigen::VectorXd x, h_prev, z, r, c, h;
};

inline GruStep gru_cell_forward(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const GruParams& p,
                                bool standard = false) {
  if (x.size() != p.input_size() || h_prev.size() != p.hidden_size())
    throw InvalidInput("gru_cell_forward: input " + std::to_string(x.size()) + "/hidden " +
                       std::to_string(h_prev.size()) + " do not match parameters " + std::to_string(p.input_size()) +
                       "/" + std::to_string(p.hidden_size()));
  GruStep s;
  s.x = x;
  s.h_prev = h_prev;
  const Eigen::VectorXd az = as_mat(p.w_zx) * x + as_mat(p.w_zh) * h_prev + as_vec(p.b_z);
  const Eigen::VectorXd ar = as_mat(p.w_rx) * x + as_mat(p.w_rh) * h_prev + as_vec(p.b_r);
  s.z = az.unaryExpr([](double v) { return sigmoid(v); });
  s.r = ar.unaryExpr([](double v) { return sigmoid(v); });
  const Eigen::VectorXd ah = as_mat(p.w_hx) * x + as_mat(p.w_hr) * s.r.cwiseProduct(h_prev) + as_vec(p.b_h);
  s.c = ah.array().tanh().matrix();
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(h_prev.size());
  if (standard)
    s.h = s.z.cwiseProduct(h_prev) + (one - s.z).cwiseProduct(s.c);
  else
    s.h = (one - s.z).cwiseProduct(h_prev) + s.z.cwiseProduct(s.c);
  return s;
}

// Returns (dx, dh_prev); parameter gradients accumulate into dp.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> gru_cell_backward(const GruStep& s, const Eigen::VectorXd& dh,
                                                                      const GruParams& p, GruParams& dp,
                                                                      bool standard = false) {
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(dh.size());
  Eigen::VectorXd dz, dc, dh_prev;
  if (standard) {
    dz = dh.cwiseProduct(s.h_prev - s.c);
    dc = dh.cwiseProduct(one - s.z);
    dh_prev = dh.cwiseProduct(s.z);
  } else {
    dz = dh.cwiseProduct(s.c - s.h_prev);
    dc = dh.cwiseProduct(s.z);
    dh_prev = dh.cwiseProduct(one - s.z);
  }
  const Eigen::VectorXd dah = dc.cwiseProduct(one - s.c.cwiseProduct(s.c));
  const Eigen::VectorXd rh = s.r.cwiseProduct(s.h_prev);
  as_mat(dp.w_hx) += dah * s.x.transpose();
  as_mat(dp.w_hr) += dah * rh.transpose();
  as_vec(dp.b_h) += dah;
  const Eigen::VectorXd drh = as_mat(p.w_hr).transpose() * dah;
  const Eigen::VectorXd dr = drh.cwiseProduct(s.h_prev);
  dh_prev += drh.cwiseProduct(s.r);
  const Eigen::VectorXd dar = dr.cwiseProduct(s.r.cwiseProduct(one - s.r));
  const Eigen::VectorXd daz = dz.cwiseProduct(s.z.cwiseProduct(one - s.z));
  as_mat(dp.w_rx) += dar * s.x.transpose();
  as_mat(dp.w_rh) += dar * s.h_prev.transpose();
  as_vec(dp.b_r) += dar;
  as_mat(dp.w_zx) += daz * s.x.transpose();
  as_mat(dp.w_zh) += daz * s.h_prev.transpose();
  as_vec(dp.b_z) += daz;
  dh_prev += as_mat(p.w_rh).transpose() * dar + as_mat(p.w_zh).transpose() * daz;
  Eigen::VectorXd dx = as_mat(p.w_hx).transpose() * dah + as_mat(p.w_rx).transpose() * dar +
                       as_mat(p.w_zx).transpose() * daz;
  return {dx, dh_prev};
}

struct BiGruCache {
  std::vector<GruStep> fwd, bwd;  // bwd[i] is the step that consumed input i
};

// seq: (N, input) -> (N, 2 * hidden), forward states then backward states.
inline Tensor bigru_forward(const Tensor& seq, const GruParams& pf, const GruParams& pb, BiGruCache* cache,
                            bool standard = false) {
  if (seq.shape.size() != 2 || seq.dim(0) < 1) throw InvalidInput("bigru_forward: empty sequence");
  const int n = seq.dim(0), hid = pf.hidden_size();
  if (pb.hidden_size() != hid) throw InvalidInput("bigru_forward: hidden sizes differ");
  const CMapMat x = as_mat(seq);
  BiGruCache c;
  c.fwd.resize(n);
  c.bwd.resize(n);
  Eigen::VectorXd h = Eigen::VectorXd::Zero(hid);
  for (int i = 0; i < n; ++i) {
    c.fwd[i] = gru_cell_forward(x.row(i).transpose(), h, pf, standard);
    h = c.fwd[i].h;
  }
  h.setZero();
  for (int i = n - 1; i >= 0; --i) {
    c.bwd[i] = gru_cell_forward(x.row(i).transpose(), h, pb, standard);
    h = c.bwd[i].h;
  }
  Tensor out({n, 2 * hid});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < hid; ++j) {
      out.data[static_cast<std::size_t>(i) * 2 * hid + j] = c.fwd[i].h[j];
      out.data[static_cast<std::size_t>(i) * 2 * hid + hid + j] = c.bwd[i].h[j];
    }
  if (cache) *cache = std::move(c);
  return out;
}

inline Tensor bigru_backward(const Tensor& dout, const BiGruCache& c, const GruParams& pf, const GruParams& pb,
                             GruParams& dpf, GruParams& dpb, bool standard = false) {
  const int n = static_cast<int>(c.fwd.size()), hid = pf.hidden_size(), in = pf.input_size();
  Tensor dseq({n, in});
  MapMat dx = as_mat(dseq);
  Eigen::VectorXd carry = Eigen::VectorXd::Zero(hid);
  for (int i = n - 1; i >= 0; --i) {
    Eigen::VectorXd dh = carry;
    for (int j = 0; j < hid; ++j) dh[j] += dout.data[static_cast<std::size_t>(i) * 2 * hid + j];
    auto [gx, gh] = gru_cell_backward(c.fwd[i], dh, pf, dpf, standard);
    dx.row(i) += gx.transpose();
    carry = gh;
  }
  carry.setZero();
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd dh = carry;
    for (int j = 0; j < hid; ++j) dh[j] += dout.data[static_cast<std::size_t>(i) * 2 * hid + hid + j];
    auto [gx, gh] = gru_cell_backward(c.bwd[i], dh, pb, dpb, standard);
    dx.row(i) += gx.transpose();
    carry = gh;
  }
  return dseq;
}

}  // namespace affirm::nn
