#pragma once

// Small estimator configurations and finite-difference helpers shared by the
// estimator unit tests and the acceptance runner.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "affirm/estimator/train.hpp"

namespace affirm::testing {

inline nn::ModelConfig tiny_model() {
  nn::ModelConfig m;
  m.slice_size = 16;
  m.volume_size = 16;
  m.channels = {2, 3, 3};
  m.hidden = 4;
  m.embedding = 2;
  m.fc_hidden = 4;
  return m;
}

inline nn::ToyDataConfig tiny_data() {
  nn::ToyDataConfig d;
  d.phantom.grid = Grid::centered({16, 16, 16}, Vec3::Constant(5.0));
  d.acquisition.width = d.acquisition.height = 16;
  d.acquisition.in_plane_spacing_mm = {5.0, 5.0};
  d.acquisition.n_slices = 8;
  d.acquisition.thickness_mm = 10.0;
  d.acquisition.psf_sigma_mm = 10.0 / 2.355;
  return d;
}

inline nn::ToySample tiny_sample(std::uint64_t seed) {
  return nn::make_toy_sample(tiny_data(), SdaConfig{}, seed, 0);
}

inline nn::TrainConfig tiny_train_config() {
  nn::TrainConfig c;
  c.model = tiny_model();
  c.data = tiny_data();
  c.sets_per_epoch = 2;
  c.validation_sets = 1;
  c.n_epochs = 2;
  c.n_recurrences = 2;
  c.lr_initial = 1e-3;
  return c;
}

// Everything that fixes the loss as a smooth function of the parameters:
// training-mode forward with frozen running statistics, a pinned dropout
// mask, and references held at the values of a first pass.
struct LossSetup {
  nn::LossKind kind = nn::LossKind::parameter_mse;
  LossConfig loss;
  SdaConfig sda;
  int n_recurrences = 2;
  std::uint64_t dropout_seed = 3;
  std::vector<Volume3D> references;
};

inline LossSetup make_loss_setup(nn::EstimatorParams& p, const nn::ToySample& s, nn::LossKind kind,
                                 SdaDeposit deposit = SdaDeposit::cubic) {
  LossSetup ls;
  ls.kind = kind;
  ls.sda.deposit = deposit;
  nn::ForwardOptions fo;
  fo.n_recurrences = ls.n_recurrences;
  fo.update_running_stats = false;
  fo.sda = ls.sda;
  ls.references = nn::affirm_forward(s.stacks, s.reference, p, fo).references;
  return ls;
}

inline double model_loss(nn::EstimatorParams& p, const nn::ToySample& s, const LossSetup& ls,
                         nn::EstimatorParams* grad = nullptr) {
  nn::ForwardOptions fo;
  fo.n_recurrences = ls.n_recurrences;
  fo.training = true;
  fo.update_running_stats = false;
  fo.dropout_seed = ls.dropout_seed;
  fo.sda = ls.sda;
  fo.fixed_references = &ls.references;
  const nn::AffirmState st = nn::affirm_forward(s.stacks, s.reference, p, fo);
  const nn::ObjectiveResult r =
      nn::evaluate_objective(st, s.stacks, &s.truth, p.config, ls.kind, ls.loss, ls.sda, grad != nullptr);
  if (grad) {
    *grad = nn::zero_grads_like(p);
    nn::affirm_backward(st, r.dpred, p, *grad);
  }
  return r.loss;
}

inline std::vector<double*> trainable_coords(nn::EstimatorParams& p) {
  std::vector<double*> out;
  nn::visit_tensors(p, [&](const std::string&, nn::Tensor& t, bool trainable) {
    if (trainable)
      for (double& v : t.data) out.push_back(&v);
  });
  return out;
}

inline std::vector<double> trainable_values(const nn::EstimatorParams& p) {
  std::vector<double> out;
  nn::visit_tensors(p, [&](const std::string&, const nn::Tensor& t, bool trainable) {
    if (trainable) out.insert(out.end(), t.data.begin(), t.data.end());
  });
  return out;
}

// |fd - an| / max(|fd|, |an|, floor)
inline double relative_error(double fd, double an, double floor = 1e-8) {
  return std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
}

// Directional derivative along a random unit direction over all trainable
// parameters: central difference vs the analytic gradient projected on it.
// The loss is only piecewise smooth (ReLU, max pooling), so h is kept small
// enough that a step rarely straddles a kink; at 1e-5 one of 100 seeds does.
inline double directional_fd_error(nn::EstimatorParams& p, const nn::ToySample& s, const LossSetup& ls,
                                   std::uint64_t seed, double h = 1e-6) {
  nn::EstimatorParams grad;
  model_loss(p, s, ls, &grad);
  const std::vector<double> g = trainable_values(grad);
  std::vector<double*> x = trainable_coords(p);
  CounterRng rng(seed, 0xfd);
  std::vector<double> dir(x.size());
  double norm = 0.0;
  for (double& v : dir) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  double an = 0.0;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    dir[i] /= norm;
    an += dir[i] * g[i];
  }
  const std::vector<double> x0 = trainable_values(p);
  auto shift = [&](double t) {
    for (std::size_t i = 0; i < x.size(); ++i) *x[i] = x0[i] + t * dir[i];
  };
  shift(h);
  const double lp = model_loss(p, s, ls);
  shift(-h);
  const double lm = model_loss(p, s, ls);
  shift(0.0);
  return relative_error((lp - lm) / (2.0 * h), an);
}

// Coordinate-wise five-point central differences of f over `x` (truncation
// O(h^4), so h can stay large enough that round-off in f does not swamp small
// gradient components), compared with `grad`; returns the largest relative
// error.
inline double max_coordinate_error(const std::vector<double*>& x, const std::vector<double>& grad,
                                   const std::function<double()>& f, double h = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = *x[i];
    auto at = [&](double t) {
      *x[i] = v + t;
      return f();
    };
    const double fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
    *x[i] = v;
    worst = std::max(worst, relative_error(fd, grad[i], floor));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Per-primitive gradient checks. Each builds a random instance from `seed`,
// contracts the output with a random weight tensor and returns the worst
// coordinate-wise relative error of the analytic gradient.
// ---------------------------------------------------------------------------

inline void fill(nn::Tensor& t, CounterRng& rng, double scale = 1.0) {
  for (double& v : t.data) v = scale * rng.uniform(-1.0, 1.0);
}

inline void fill(nn::GruParams& p, CounterRng& rng, double scale = 0.7) {
  for (nn::Tensor* t : {&p.w_zx, &p.w_zh, &p.w_rx, &p.w_rh, &p.w_hx, &p.w_hr, &p.b_z, &p.b_r, &p.b_h})
    fill(*t, rng, scale);
}

inline std::vector<double*> coords(std::initializer_list<nn::Tensor*> ts) {
  std::vector<double*> out;
  for (nn::Tensor* t : ts)
    for (double& v : t->data) out.push_back(&v);
  return out;
}

inline std::vector<double> values(std::initializer_list<const nn::Tensor*> ts) {
  std::vector<double> out;
  for (const nn::Tensor* t : ts) out.insert(out.end(), t->data.begin(), t->data.end());
  return out;
}

inline double dot(const nn::Tensor& a, const nn::Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline nn::Tensor from_vec(const Eigen::VectorXd& v) {
  nn::Tensor t({static_cast<int>(v.size())});
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = v[i];
  return t;
}

inline double conv_fd(std::uint64_t seed, int kd) {
  using namespace nn;
  CounterRng rng(seed, 1);
  ConvParams p = make_conv(2, 3, kd, 3, 3);
  fill(p.w, rng);
  fill(p.b, rng);
  Tensor x({1, 2, 3, 4, 5}), w({1, 3, 3, 4, 5});
  fill(x, rng);
  fill(w, rng);
  ConvParams dp = make_conv(2, 3, kd, 3, 3);
  Tensor dx;
  conv_backward(x, p, w, &dx, dp);
  return max_coordinate_error(coords({&x, &p.w, &p.b}), values({&dx, &dp.w, &dp.b}),
                              [&] { return dot(conv_forward(x, p), w); });
}

inline double bn_fd(std::uint64_t seed, bool training) {
  using namespace nn;
  CounterRng rng(seed, 2);
  BnParams p = make_bn(3);
  fill(p.gamma, rng);
  fill(p.beta, rng);
  fill(p.running_mean, rng);
  for (double& v : p.running_var.data) v = rng.uniform(0.5, 2.0);
  Tensor x({2, 3, 1, 3, 3}), w({2, 3, 1, 3, 3});
  fill(x, rng);
  fill(w, rng);
  BnCache cache;
  bn_forward(x, p, training, &cache, false);
  BnParams dp = make_bn(3);
  dp.gamma.zero();
  const Tensor dx = bn_backward(w, p, cache, dp);
  return max_coordinate_error(coords({&x, &p.gamma, &p.beta}), values({&dx, &dp.gamma, &dp.beta}),
                              [&] { return dot(bn_forward(x, p, training, nullptr, false), w); });
}

inline double relu_fd(std::uint64_t seed) {
  using namespace nn;
  CounterRng rng(seed, 3);
  Tensor x({1, 2, 2, 4, 6}), w({1, 2, 2, 4, 6});
  fill(x, rng);
  fill(w, rng);
  const Tensor dx = relu_backward(x, w);
  // Small step: a wider stencil could straddle the kink at 0.
  return max_coordinate_error(coords({&x}), values({&dx}), [&] { return dot(relu_forward(x), w); }, 1e-6);
}

inline double pool_fd(std::uint64_t seed, bool max) {
  using namespace nn;
  CounterRng rng(seed, 4);
  Tensor x({1, 2, 2, 4, 6}), w({1, 2, 1, 2, 3});
  fill(x, rng);
  fill(w, rng);
  if (max) {
    PoolCache pc;
    maxpool_forward(x, 2, 2, 2, &pc);
    const Tensor dx = maxpool_backward(w, pc);
    return max_coordinate_error(coords({&x}), values({&dx}),
                                [&] { return dot(maxpool_forward(x, 2, 2, 2, nullptr), w); }, 1e-6);
  }
  const Tensor dx = avgpool_backward(w, x.shape, 2, 2, 2);
  return max_coordinate_error(coords({&x}), values({&dx}), [&] { return dot(avgpool_forward(x, 2, 2, 2), w); });
}

inline double linear_fd(std::uint64_t seed) {
  using namespace nn;
  CounterRng rng(seed, 5);
  LinearParams p = make_linear(5, 3);
  fill(p.w, rng);
  fill(p.b, rng);
  Tensor x({4, 5}), w({4, 3});
  fill(x, rng);
  fill(w, rng);
  LinearParams dp = make_linear(5, 3);
  const Tensor dx = linear_backward(x, p, w, dp);
  return max_coordinate_error(coords({&x, &p.w, &p.b}), values({&dx, &dp.w, &dp.b}),
                              [&] { return dot(linear_forward(x, p), w); });
}

inline double gru_cell_fd(std::uint64_t seed, bool standard) {
  using namespace nn;
  CounterRng rng(seed, 6);
  GruParams p = make_gru(2, 3);
  fill(p, rng);
  Tensor x({2}), h({3}), w({3});
  fill(x, rng);
  fill(h, rng);
  fill(w, rng);
  GruParams dp = make_gru(2, 3);
  const auto [dx, dh] =
      gru_cell_backward(gru_cell_forward(as_vec(x), as_vec(h), p, standard), as_vec(w), p, dp, standard);
  const Tensor tdx = from_vec(dx), tdh = from_vec(dh);
  return max_coordinate_error(
      coords({&x, &h, &p.w_zx, &p.w_zh, &p.w_rx, &p.w_rh, &p.w_hx, &p.w_hr, &p.b_z, &p.b_r, &p.b_h}),
      values({&tdx, &tdh, &dp.w_zx, &dp.w_zh, &dp.w_rx, &dp.w_rh, &dp.w_hx, &dp.w_hr, &dp.b_z, &dp.b_r, &dp.b_h}),
      [&] { return dot(from_vec(gru_cell_forward(as_vec(x), as_vec(h), p, standard).h), w); });
}

inline double bigru_fd(std::uint64_t seed) {
  using namespace nn;
  CounterRng rng(seed, 7);
  GruParams pf = make_gru(2, 3), pb = make_gru(2, 3);
  fill(pf, rng);
  fill(pb, rng);
  Tensor seq({5, 2}), w({5, 6});
  fill(seq, rng);
  fill(w, rng);
  BiGruCache cache;
  bigru_forward(seq, pf, pb, &cache);
  GruParams df = make_gru(2, 3), db = make_gru(2, 3);
  const Tensor dseq = bigru_backward(w, cache, pf, pb, df, db);
  return max_coordinate_error(
      coords({&seq, &pf.w_zx, &pf.w_zh, &pf.w_rx, &pf.w_rh, &pf.w_hx, &pf.w_hr, &pf.b_z, &pf.b_r, &pf.b_h,
              &pb.w_zx, &pb.w_zh, &pb.w_rx, &pb.w_rh, &pb.w_hx, &pb.w_hr, &pb.b_z, &pb.b_r, &pb.b_h}),
      values({&dseq, &df.w_zx, &df.w_zh, &df.w_rx, &df.w_rh, &df.w_hx, &df.w_hr, &df.b_z, &df.b_r, &df.b_h,
              &db.w_zx, &db.w_zh, &db.w_rx, &db.w_rh, &db.w_hx, &db.w_hr, &db.b_z, &db.b_r, &db.b_h}),
      [&] { return dot(bigru_forward(seq, pf, pb, nullptr), w); });
}

inline double fusion_fd(std::uint64_t seed) {
  using namespace nn;
  CounterRng rng(seed, 8);
  FusionParams p = make_fusion(3, 2);
  fill(p.w_s, rng);
  fill(p.w_v, rng);
  fill(p.w_g, rng);
  Tensor xs({4, 3}), xv({5, 3}), w({4, 2});
  fill(xs, rng);
  fill(xv, rng);
  fill(w, rng);
  FusionParams dp = make_fusion(3, 2);
  const FusionKeys keys = fusion_keys(as_mat(xv), p);
  FusionQueryCache cache;
  fusion_query_forward(as_mat(xs), keys, p, &cache);
  RowMat dk = RowMat::Zero(5, 2), dg = RowMat::Zero(5, 2);
  Tensor dxs({4, 3}), dxv({5, 3});
  as_mat(dxs) = fusion_query_backward(as_mat(w), cache, keys, p, dk, dg, dp);
  as_mat(dxv) = fusion_keys_backward(as_mat(xv), dk, dg, p, dp);
  return max_coordinate_error(coords({&xs, &xv, &p.w_s, &p.w_v, &p.w_g}),
                              values({&dxs, &dxv, &dp.w_s, &dp.w_v, &dp.w_g}), [&] {
                                Tensor y({4, 2});
                                as_mat(y) = affinity_fusion(as_mat(xs), as_mat(xv), p);
                                return dot(y, w);
                              });
}

inline double head_fd(std::uint64_t seed) {
  using namespace nn;
  CounterRng rng(seed, 9);
  HeadParams h{make_linear(5, 4), make_linear(4, 3)};
  for (Tensor* t : {&h.fc1.w, &h.fc1.b, &h.fc2.w, &h.fc2.b}) fill(*t, rng);
  Tensor x({2, 5}), w({2, 3});
  fill(x, rng);
  fill(w, rng);
  const double scale = 2.0;
  HeadCache cache;
  head_forward(x, h, scale, 0.3, true, seed, 1, &cache);
  HeadParams dh{make_linear(5, 4), make_linear(4, 3)};
  const Tensor dx = head_backward(w, h, scale, cache, dh);
  return max_coordinate_error(coords({&x, &h.fc1.w, &h.fc1.b, &h.fc2.w, &h.fc2.b}),
                              values({&dx, &dh.fc1.w, &dh.fc1.b, &dh.fc2.w, &dh.fc2.b}),
                              [&] { return dot(head_forward(x, h, scale, 0.3, true, seed, 1, nullptr), w); });
}

inline double geodesic_fd(std::uint64_t seed) {
  CounterRng rng(seed, 10);
  auto v3 = [&](double a) { return Vec3(rng.uniform(-a, a), rng.uniform(-a, a), rng.uniform(-a, a)); };
  const RigidTransform t{v3(1.0), v3(5.0), Vec3::Zero()};
  nn::Tensor th({3}), dd({3});
  const Vec3 theta = t.theta + v3(0.5), d = t.d + v3(3.0);
  for (int k = 0; k < 3; ++k) th.data[k] = theta[k], dd.data[k] = d[k];
  const LossConfig cfg{rng.uniform(0.5, 2.0), 0.1};
  auto vec = [](const nn::Tensor& x) { return Vec3(x.data[0], x.data[1], x.data[2]); };
  const GeodesicGrad g = geodesic_slice_loss_grad(t, vec(th), vec(dd), cfg);
  const std::vector<double> an{g.d_theta[0], g.d_theta[1], g.d_theta[2], g.d_disp[0], g.d_disp[1], g.d_disp[2]};
  return max_coordinate_error(coords({&th, &dd}), an, [&] {
    return geodesic_slice_loss(t, RigidTransform{vec(th), vec(dd), Vec3::Zero()}, cfg);
  });
}

// Consistency term with the cubic deposit, over a subset of slices.
inline double consistency_fd(std::uint64_t seed) {
  const nn::ToySample s = tiny_sample(seed);
  CounterRng rng(seed, 11);
  std::vector<nn::StackPrediction> pred;
  for (const auto& st : s.stacks) {
    nn::StackPrediction p;
    for (const auto& x : *st.true_transforms) {
      p.theta.push_back(x.theta + Vec3(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)));
      p.d.push_back(x.d + Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
    }
    pred.push_back(p);
  }
  SdaConfig sda;
  sda.deposit = SdaDeposit::cubic;
  std::vector<nn::StackPredictionGrad> g;
  nn::consistency_loss(s.stacks, pred, s.truth, 0.8, sda, 0.1, &g);
  std::vector<double*> c;
  std::vector<double> an;
  const std::size_t st = seed % pred.size();
  for (std::size_t i = 0; i < pred[st].size(); i += 3)
    for (int a = 0; a < 3; ++a) {
      c.push_back(&pred[st].theta[i][a]);
      an.push_back(g[st].theta[i][a]);
      c.push_back(&pred[st].d[i][a]);
      an.push_back(g[st].d[i][a]);
    }
  // Wider step: the loss sums many deposits, so round-off is larger, and the
  // cubic deposit is smooth enough not to need a narrow one.
  return max_coordinate_error(c, an, [&] {
    return nn::consistency_loss(s.stacks, pred, s.truth, 0.8, sda, 0.1, nullptr).value;
  }, 1e-4);
}

struct PrimitiveCheck {
  std::string name;
  std::function<double(std::uint64_t)> error;
};

inline std::vector<PrimitiveCheck> primitive_checks() {
  return {{"conv3d", [](std::uint64_t s) { return conv_fd(s, 3); }},
          {"conv2d", [](std::uint64_t s) { return conv_fd(s, 1); }},
          {"batchnorm_train", [](std::uint64_t s) { return bn_fd(s, true); }},
          {"batchnorm_eval", [](std::uint64_t s) { return bn_fd(s, false); }},
          {"relu", relu_fd},
          {"maxpool", [](std::uint64_t s) { return pool_fd(s, true); }},
          {"avgpool", [](std::uint64_t s) { return pool_fd(s, false); }},
          {"linear", linear_fd},
          {"gru_cell", [](std::uint64_t s) { return gru_cell_fd(s, false); }},
          {"gru_cell_standard", [](std::uint64_t s) { return gru_cell_fd(s, true); }},
          {"bigru", bigru_fd},
          {"affinity_fusion", fusion_fd},
          {"head", head_fd},
          {"geodesic_loss", geodesic_fd},
          {"consistency_loss", consistency_fd}};
}

}  // namespace affirm::testing
