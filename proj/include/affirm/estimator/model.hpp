#pragma once

// The toy recursive estimator: a 2D CNN and bidirectional GRU over each
// stack's slices, a 3D CNN over the current reference volume, affinity
// fusion of the two, and range-limited rotation/translation heads. Each
// recurrence predicts every slice's transform and rebuilds the reference by
// SDA from the predictions; parameters are shared across recurrences.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/estimator/fusion.hpp"
#include "affirm/estimator/gru.hpp"
#include "affirm/estimator/layers.hpp"
#include "affirm/estimator/loss.hpp"
#include "affirm/sda.hpp"

namespace affirm::nn {

struct ModelConfig {
  int slice_size = 48;   // slices are slice_size x slice_size pixels
  int volume_size = 48;  // reference is volume_size^3 voxels
  int stem_pool = 2;     // fixed average pooling before the first conv
  std::array<int, 3> channels{8, 16, 16};
  int hidden = 32;
  int embedding = 16;
  int fc_hidden = 32;
  double dropout = 0.2;
  double rot_scale = kPi / 2.0;
  double trans_scale = 10.0;
  bool use_fusion = true;
  bool standard_gru = false;

  // Spatial size of the last feature map of each branch (two 2x poolings).
  int slice_feature_side() const { return slice_size / stem_pool / 4; }
  int volume_feature_side() const { return volume_size / stem_pool / 4; }
  int slice_positions() const { return slice_feature_side() * slice_feature_side(); }
  int volume_positions() const {
    const int s = volume_feature_side();
    return s * s * s;
  }
  int gru_input() const {
    const int s = slice_feature_side() / 2;
    return channels[2] * s * s + 3;  // pooled features + orientation one-hot
  }
  int head_input() const { return 2 * hidden + (use_fusion ? slice_positions() * embedding : 0); }

  void validate() const {
    if (slice_feature_side() < 2 || volume_feature_side() < 1)
      throw InvalidInput("ModelConfig: images too small for the pooling stack");
    if (slice_size % (stem_pool * 4) != 0 || volume_size % (stem_pool * 4) != 0)
      throw InvalidInput("ModelConfig: slice and volume sizes must be multiples of " + std::to_string(stem_pool * 4));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidInput("ModelConfig: dropout must lie in [0,1)");
    if (!(rot_scale > 0.0 && trans_scale > 0.0)) throw InvalidInput("ModelConfig: output scales must be > 0");
  }
};

struct Branch {
  std::array<ConvParams, 3> conv;
  std::array<BnParams, 3> bn;
};

struct HeadParams {
  LinearParams fc1, fc2;
};

struct EstimatorParams {
  ModelConfig config;
  Branch cnn2d, cnn3d;
  GruParams gru_forward, gru_backward;
  FusionParams fusion;
  HeadParams head_rot, head_trans;
};

// Visits every tensor in a fixed order. Buffers (batch-norm running
// statistics) are reported with trainable = false.
template <typename P, typename Fn>
void visit_tensors(P& p, Fn&& fn) {
  auto branch = [&](auto& b, const std::string& name) {
    for (int l = 0; l < 3; ++l) {
      const std::string pre = name + ".conv" + std::to_string(l + 1);
      fn(pre + ".w", b.conv[l].w, true);
      fn(pre + ".b", b.conv[l].b, true);
      const std::string bn = name + ".bn" + std::to_string(l + 1);
      fn(bn + ".gamma", b.bn[l].gamma, true);
      fn(bn + ".beta", b.bn[l].beta, true);
      fn(bn + ".running_mean", b.bn[l].running_mean, false);
      fn(bn + ".running_var", b.bn[l].running_var, false);
    }
  };
  auto gru = [&](auto& g, const std::string& name) {
    fn(name + ".w_zx", g.w_zx, true);
    fn(name + ".w_zh", g.w_zh, true);
    fn(name + ".w_rx", g.w_rx, true);
    fn(name + ".w_rh", g.w_rh, true);
    fn(name + ".w_hx", g.w_hx, true);
    fn(name + ".w_hr", g.w_hr, true);
    fn(name + ".b_z", g.b_z, true);
    fn(name + ".b_r", g.b_r, true);
    fn(name + ".b_h", g.b_h, true);
  };
  auto head = [&](auto& h, const std::string& name) {
    fn(name + ".fc1.w", h.fc1.w, true);
    fn(name + ".fc1.b", h.fc1.b, true);
    fn(name + ".fc2.w", h.fc2.w, true);
    fn(name + ".fc2.b", h.fc2.b, true);
  };
  branch(p.cnn2d, "cnn2d");
  branch(p.cnn3d, "cnn3d");
  gru(p.gru_forward, "gru_forward");
  gru(p.gru_backward, "gru_backward");
  fn(std::string("fusion.w_s"), p.fusion.w_s, true);
  fn(std::string("fusion.w_v"), p.fusion.w_v, true);
  fn(std::string("fusion.w_g"), p.fusion.w_g, true);
  head(p.head_rot, "head_rot");
  head(p.head_trans, "head_trans");
}

inline std::size_t parameter_count(const EstimatorParams& p) {
  std::size_t n = 0;
  visit_tensors(p, [&](const std::string&, const Tensor& t, bool trainable) {
    if (trainable) n += t.numel();
  });
  return n;
}

// All-zero parameters with the right shapes (also used as gradient storage).
inline EstimatorParams zero_params(const ModelConfig& cfg) {
  cfg.validate();
  EstimatorParams p;
  p.config = cfg;
  const auto& ch = cfg.channels;
  int cin = 1;
  for (int l = 0; l < 3; ++l) {
    p.cnn2d.conv[l] = make_conv(cin, ch[l], 1, 3, 3);
    p.cnn3d.conv[l] = make_conv(cin, ch[l], 3, 3, 3);
    p.cnn2d.bn[l] = make_bn(ch[l]);
    p.cnn3d.bn[l] = make_bn(ch[l]);
    cin = ch[l];
  }
  p.gru_forward = make_gru(cfg.gru_input(), cfg.hidden);
  p.gru_backward = make_gru(cfg.gru_input(), cfg.hidden);
  p.fusion = make_fusion(ch[2], cfg.embedding);
  p.head_rot = {make_linear(cfg.head_input(), cfg.fc_hidden), make_linear(cfg.fc_hidden, 3)};
  p.head_trans = {make_linear(cfg.head_input(), cfg.fc_hidden), make_linear(cfg.fc_hidden, 3)};
  return p;
}

inline EstimatorParams zero_grads_like(const EstimatorParams& p) {
  EstimatorParams g = p;
  visit_tensors(g, [](const std::string&, Tensor& t, bool) { t.zero(); });
  return g;
}

// He-normal convolutions and FC layers, uniform(+-1/sqrt(hidden)) GRU
// weights, normal(0, 1/sqrt(C)) fusion embeddings; the last FC layer of each
// head is scaled by 0.1 so initial predictions sit near zero motion.
inline EstimatorParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  EstimatorParams p = zero_params(cfg);
  CounterRng rng(seed, 0xe571);
  auto he = [&](Tensor& w, int fan_in, double gain = 1.0) {
    const double s = gain * std::sqrt(2.0 / fan_in);
    for (double& v : w.data) v = s * rng.normal();
  };
  for (Branch* b : {&p.cnn2d, &p.cnn3d})
    for (auto& c : b->conv) he(c.w, c.w.dim(1) * c.w.dim(2) * c.w.dim(3) * c.w.dim(4));
  for (GruParams* g : {&p.gru_forward, &p.gru_backward}) {
    const double a = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (Tensor* t : {&g->w_zx, &g->w_zh, &g->w_rx, &g->w_rh, &g->w_hx, &g->w_hr})
      for (double& v : t->data) v = rng.uniform(-a, a);
  }
  for (Tensor* t : {&p.fusion.w_s, &p.fusion.w_v, &p.fusion.w_g})
    for (double& v : t->data) v = rng.normal() / std::sqrt(static_cast<double>(cfg.channels[2]));
  for (HeadParams* h : {&p.head_rot, &p.head_trans}) {
    he(h->fc1.w, h->fc1.in());
    he(h->fc2.w, h->fc2.in(), 0.1);
  }
  return p;
}

// =============================================================================
// Branches
// =============================================================================

struct BranchCache {
  std::array<Tensor, 3> conv_in, bn_in, relu_in;
  std::array<BnCache, 3> bn;
  std::array<PoolCache, 2> pool;
};

struct BranchMode {
  bool training = false;
  bool update_running = true;
};

// Three conv-BN-ReLU blocks, the first two followed by 2x max pooling.
inline Tensor branch_forward(const Tensor& x, Branch& b, bool volumetric, BranchMode mode, BranchCache* c) {
  Tensor h = x;
  const int pd = volumetric ? 2 : 1;
  for (int l = 0; l < 3; ++l) {
    Tensor a = conv_forward(h, b.conv[l]);
    BnCache bc;
    Tensor n = bn_forward(a, b.bn[l], mode.training, c ? &bc : nullptr, mode.update_running);
    Tensor r = relu_forward(n);
    if (c) {
      c->conv_in[l] = std::move(h);
      c->bn_in[l] = std::move(a);
      c->bn[l] = std::move(bc);
      c->relu_in[l] = n;
    }
    if (l < 2) {
      PoolCache pc;
      h = maxpool_forward(r, pd, 2, 2, c ? &pc : nullptr);
      if (c) c->pool[l] = std::move(pc);
    } else {
      h = std::move(r);
    }
  }
  return h;
}

inline void branch_backward(const Tensor& d_out, const Branch& b, const BranchCache& c, Branch& db) {
  Tensor g = d_out;
  for (int l = 2; l >= 0; --l) {
    if (l < 2) g = maxpool_backward(g, c.pool[l]);
    g = relu_backward(c.relu_in[l], g);
    g = bn_backward(g, b.bn[l], c.bn[l], db.bn[l]);
    Tensor dx;
    conv_backward(c.conv_in[l], b.conv[l], g, l > 0 ? &dx : nullptr, db.conv[l]);
    g = std::move(dx);
  }
}

// =============================================================================
// Heads
// =============================================================================

struct HeadCache {
  Tensor x, a1, mask, a2;
};

inline Tensor head_forward(const Tensor& x, const HeadParams& h, double scale, double dropout, bool training,
                           std::uint64_t seed, std::uint64_t stream, HeadCache* c) {
  Tensor a1 = linear_forward(x, h.fc1);
  Tensor r = relu_forward(a1);
  Tensor mask = training ? dropout_mask(r.shape, dropout, seed, stream) : Tensor(r.shape, 1.0);
  Tensor a2 = linear_forward(multiply(r, mask), h.fc2);
  Tensor y = a2;
  for (double& v : y.data) v = scale * std::tanh(v);
  if (c) *c = {x, std::move(a1), std::move(mask), std::move(a2)};
  return y;
}

inline Tensor head_backward(const Tensor& dy, const HeadParams& h, double scale, const HeadCache& c, HeadParams& dh) {
  Tensor da2 = dy;
  for (std::size_t i = 0; i < da2.numel(); ++i) {
    const double t = std::tanh(c.a2.data[i]);
    da2.data[i] *= scale * (1.0 - t * t);
  }
  const Tensor r = multiply(relu_forward(c.a1), c.mask);
  Tensor dr = linear_backward(r, h.fc2, da2, dh.fc2);
  dr = multiply(dr, c.mask);
  const Tensor da1 = relu_backward(c.a1, dr);
  return linear_backward(c.x, h.fc1, da1, dh.fc1);
}

// =============================================================================
// Recursive forward pass
// =============================================================================

struct ForwardOptions {
  int n_recurrences = 4;
  bool training = false;
  bool update_running_stats = true;
  std::uint64_t dropout_seed = 0;
  SdaConfig sda;  // sigma endpoints and deposit mode for the rebuilds
  // When set, recurrence k > 0 uses fixed_references[k] instead of the SDA
  // rebuild from recurrence k - 1 (gradient checks hold references fixed).
  const std::vector<Volume3D>* fixed_references = nullptr;
};

struct StackCache {
  Tensor slices_pooled;  // (N,1,1,S,S) after the stem
  BranchCache cnn;
  Tensor features;       // (N,C,1,s,s) last 2D feature map
  PoolCache feature_pool;
  Tensor gru_in;         // (N, gru_input)
  BiGruCache gru;
  Tensor gru_out;        // (N, 2*hidden)
  std::vector<RowMat> x_s;  // per slice (positions, C)
};

struct RecurrenceCache {
  Tensor volume_pooled;
  BranchCache cnn;
  RowMat x_v;
  FusionKeys keys;
  std::vector<std::vector<FusionQueryCache>> fusion;  // [stack][slice]
  std::vector<HeadCache> head_rot, head_trans;        // per stack
};

struct AffirmState {
  std::vector<StackCache> stacks;
  std::vector<RecurrenceCache> recurrences;
  std::vector<std::vector<StackPrediction>> predictions;  // [rec][stack]
  std::vector<Volume3D> references;                       // reference seen by each recurrence
  std::vector<Volume3D> rebuilds;                         // SDA after each recurrence
  std::vector<double> rebuild_sigmas;
  Vec3 center = Vec3::Zero();

  std::vector<std::vector<RigidTransform>> transforms(std::size_t rec) const {
    std::vector<std::vector<RigidTransform>> out;
    for (const auto& p : predictions.at(rec)) out.push_back(to_transforms(p, center));
    return out;
  }
  std::vector<std::vector<RigidTransform>> final_transforms() const { return transforms(predictions.size() - 1); }
};

inline void check_inputs(const std::vector<SliceStack>& stacks, const Volume3D& reference, const ModelConfig& cfg) {
  if (stacks.empty()) throw InvalidInput("affirm_forward: no stacks");
  std::array<bool, 3> seen{false, false, false};
  for (const auto& s : stacks) {
    seen[static_cast<int>(s.geometry.orientation)] = true;
    if (s.size() == 0) throw InvalidInput("affirm_forward: empty stack");
    if (s.geometry.width != cfg.slice_size || s.geometry.height != cfg.slice_size)
      throw InvalidInput("affirm_forward: slices must be " + std::to_string(cfg.slice_size) + "x" +
                         std::to_string(cfg.slice_size));
  }
  for (int o = 0; o < 3; ++o)
    if (!seen[o])
      throw InvalidInput(std::string("affirm_forward: missing orientation group '") +
                         to_string(static_cast<Orientation>(o)) + "'");
  for (int a = 0; a < 3; ++a)
    if (reference.grid.dims[a] != cfg.volume_size)
      throw InvalidInput("affirm_forward: reference must be " + std::to_string(cfg.volume_size) + "^3");
}

inline RowMat feature_rows(const Tensor& f, int item) {
  // (N,C,D,H,W) item -> (positions, C)
  const Dims5 d = dims5(f, "feature_rows");
  const std::size_t sp = d.spatial();
  RowMat m(static_cast<Eigen::Index>(sp), d.c);
  for (int c = 0; c < d.c; ++c)
    for (std::size_t i = 0; i < sp; ++i)
      m(static_cast<Eigen::Index>(i), c) = f.data[(static_cast<std::size_t>(item) * d.c + c) * sp + i];
  return m;
}

inline void add_feature_rows(Tensor& f, int item, const RowMat& m) {
  const Dims5 d = dims5(f, "add_feature_rows");
  const std::size_t sp = d.spatial();
  for (int c = 0; c < d.c; ++c)
    for (std::size_t i = 0; i < sp; ++i)
      f.data[(static_cast<std::size_t>(item) * d.c + c) * sp + i] += m(static_cast<Eigen::Index>(i), c);
}

inline Tensor volume_tensor(const Volume3D& v) {
  Tensor t({1, 1, v.grid.dims[2], v.grid.dims[1], v.grid.dims[0]});
  t.data = v.data;
  return t;
}

inline Tensor stack_tensor(const SliceStack& s) {
  const int n = static_cast<int>(s.size()), h = s.geometry.height, w = s.geometry.width;
  Tensor t({n, 1, 1, h, w});
  for (int i = 0; i < n; ++i)
    std::copy(s.slices[i].data.begin(), s.slices[i].data.end(),
              t.data.begin() + static_cast<long>(i) * h * w);
  return t;
}

inline AffirmState affirm_forward(const std::vector<SliceStack>& stacks, const Volume3D& reference,
                                  EstimatorParams& p, const ForwardOptions& opt) {
  const ModelConfig& cfg = p.config;
  check_inputs(stacks, reference, cfg);
  if (opt.n_recurrences < 1) throw InvalidInput("affirm_forward: n_recurrences must be >= 1");
  const BranchMode mode{opt.training, opt.update_running_stats};
  AffirmState st;
  st.center = reference.grid.center();
  const int f = cfg.stem_pool;

  // Slice path: independent of the reference, computed once.
  st.stacks.resize(stacks.size());
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    StackCache& c = st.stacks[s];
    const int n = static_cast<int>(stacks[s].size());
    c.slices_pooled = avgpool_forward(stack_tensor(stacks[s]), 1, f, f);
    c.features = branch_forward(c.slices_pooled, p.cnn2d, false, mode, &c.cnn);
    const Tensor pooled = maxpool_forward(c.features, 1, 2, 2, &c.feature_pool);
    const int per = static_cast<int>(pooled.numel() / n);
    c.gru_in = Tensor({n, per + 3});
    const int o = static_cast<int>(stacks[s].geometry.orientation);
    for (int i = 0; i < n; ++i) {
      std::copy(pooled.data.begin() + static_cast<long>(i) * per, pooled.data.begin() + static_cast<long>(i + 1) * per,
                c.gru_in.data.begin() + static_cast<long>(i) * (per + 3));
      c.gru_in.data[static_cast<std::size_t>(i) * (per + 3) + per + o] = 1.0;
    }
    c.gru_out = bigru_forward(c.gru_in, p.gru_forward, p.gru_backward, &c.gru, cfg.standard_gru);
    if (cfg.use_fusion) {
      c.x_s.resize(n);
      for (int i = 0; i < n; ++i) c.x_s[i] = feature_rows(c.features, i);
    }
  }

  SdaConfig sda = opt.sda;
  sda.n_iterations = opt.n_recurrences;
  sda.target_grid = reference.grid;
  Volume3D current = reference;
  for (int k = 0; k < opt.n_recurrences; ++k) {
    if (k > 0 && opt.fixed_references) current = opt.fixed_references->at(k);
    st.references.push_back(current);
    RecurrenceCache rc;
    if (cfg.use_fusion) {
      rc.volume_pooled = avgpool_forward(volume_tensor(current), f, f, f);
      const Tensor fv = branch_forward(rc.volume_pooled, p.cnn3d, true, mode, &rc.cnn);
      rc.x_v = feature_rows(fv, 0);
      rc.keys = fusion_keys(rc.x_v, p.fusion);
    }
    std::vector<StackPrediction> preds(stacks.size());
    rc.fusion.resize(stacks.size());
    rc.head_rot.resize(stacks.size());
    rc.head_trans.resize(stacks.size());
    for (std::size_t s = 0; s < stacks.size(); ++s) {
      const StackCache& c = st.stacks[s];
      const int n = static_cast<int>(stacks[s].size());
      Tensor x({n, cfg.head_input()});
      const int hw = 2 * cfg.hidden;
      for (int i = 0; i < n; ++i)
        std::copy(c.gru_out.data.begin() + static_cast<long>(i) * hw, c.gru_out.data.begin() + static_cast<long>(i + 1) * hw,
                  x.data.begin() + static_cast<long>(i) * cfg.head_input());
      if (cfg.use_fusion) {
        rc.fusion[s].resize(n);
        parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
          const RowMat y = fusion_query_forward(c.x_s[i], rc.keys, p.fusion, &rc.fusion[s][i]);
          double* dst = &x.data[i * cfg.head_input() + hw];
          for (Eigen::Index r = 0; r < y.rows(); ++r)
            for (Eigen::Index e = 0; e < y.cols(); ++e) dst[r * y.cols() + e] = y(r, e);
        });
      }
      const std::uint64_t stream = (static_cast<std::uint64_t>(k) << 8) | (s << 1);
      const Tensor rot = head_forward(x, p.head_rot, cfg.rot_scale, cfg.dropout, opt.training, opt.dropout_seed,
                                      stream, &rc.head_rot[s]);
      const Tensor tr = head_forward(x, p.head_trans, cfg.trans_scale, cfg.dropout, opt.training, opt.dropout_seed,
                                     stream | 1, &rc.head_trans[s]);
      preds[s].theta.resize(n);
      preds[s].d.resize(n);
      for (int i = 0; i < n; ++i) {
        preds[s].theta[i] = Vec3(rot.data[3 * i], rot.data[3 * i + 1], rot.data[3 * i + 2]);
        preds[s].d[i] = Vec3(tr.data[3 * i], tr.data[3 * i + 1], tr.data[3 * i + 2]);
      }
    }
    st.predictions.push_back(preds);
    st.recurrences.push_back(std::move(rc));
    const double sigma = sigma_schedule(k + 1, sda);
    st.rebuild_sigmas.push_back(sigma);
    st.rebuilds.push_back(sda_reconstruct(stacks, st.transforms(k), sigma, sda));
    current = st.rebuilds.back();
  }
  return st;
}

// Reverse pass. dpred[k][s] is the loss gradient with respect to the
// predictions of recurrence k; references are treated as constants.
inline void affirm_backward(const AffirmState& st, const std::vector<std::vector<StackPredictionGrad>>& dpred,
                            const EstimatorParams& p, EstimatorParams& g) {
  const ModelConfig& cfg = p.config;
  const int hw = 2 * cfg.hidden;
  std::vector<Tensor> d_gru_out(st.stacks.size());
  std::vector<Tensor> d_features(st.stacks.size());
  for (std::size_t s = 0; s < st.stacks.size(); ++s) {
    d_gru_out[s] = st.stacks[s].gru_out.zeros_like();
    d_features[s] = st.stacks[s].features.zeros_like();
  }
  for (std::size_t k = 0; k < st.recurrences.size(); ++k) {
    const RecurrenceCache& rc = st.recurrences[k];
    RowMat dk, dg;
    if (cfg.use_fusion) {
      dk = RowMat::Zero(rc.keys.k.rows(), rc.keys.k.cols());
      dg = RowMat::Zero(rc.keys.g.rows(), rc.keys.g.cols());
    }
    for (std::size_t s = 0; s < st.stacks.size(); ++s) {
      const auto& dp = dpred[k][s];
      const int n = static_cast<int>(dp.theta.size());
      Tensor drot({n, 3}), dtr({n, 3});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) {
          drot.data[3 * i + j] = dp.theta[i][j];
          dtr.data[3 * i + j] = dp.d[i][j];
        }
      Tensor dx = head_backward(drot, p.head_rot, cfg.rot_scale, rc.head_rot[s], g.head_rot);
      const Tensor dx2 = head_backward(dtr, p.head_trans, cfg.trans_scale, rc.head_trans[s], g.head_trans);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dx2.data[i];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < hw; ++j)
          d_gru_out[s].data[static_cast<std::size_t>(i) * hw + j] += dx.data[static_cast<std::size_t>(i) * cfg.head_input() + j];
      if (!cfg.use_fusion) continue;
      const int e = cfg.embedding, np = cfg.slice_positions();
      for (int i = 0; i < n; ++i) {
        RowMat dy(np, e);
        const double* src = &dx.data[static_cast<std::size_t>(i) * cfg.head_input() + hw];
        for (int r = 0; r < np; ++r)
          for (int c = 0; c < e; ++c) dy(r, c) = src[r * e + c];
        const RowMat dxs = fusion_query_backward(dy, rc.fusion[s][i], rc.keys, p.fusion, dk, dg, g.fusion);
        add_feature_rows(d_features[s], i, dxs);
      }
    }
    if (cfg.use_fusion) {
      const RowMat dxv = fusion_keys_backward(rc.x_v, dk, dg, p.fusion, g.fusion);
      const int side = cfg.volume_feature_side();
      Tensor dfv({1, cfg.channels[2], side, side, side});
      add_feature_rows(dfv, 0, dxv);
      branch_backward(dfv, p.cnn3d, rc.cnn, g.cnn3d);
    }
  }
  for (std::size_t s = 0; s < st.stacks.size(); ++s) {
    const StackCache& c = st.stacks[s];
    const Tensor dgru_in = bigru_backward(d_gru_out[s], c.gru, p.gru_forward, p.gru_backward, g.gru_forward,
                                          g.gru_backward, cfg.standard_gru);
    const int n = c.gru_in.dim(0), per = c.gru_in.dim(1) - 3;
    const int side = cfg.slice_feature_side() / 2;
    Tensor dpooled({n, cfg.channels[2], 1, side, side});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < per; ++j)
        dpooled.data[static_cast<std::size_t>(i) * per + j] = dgru_in.data[static_cast<std::size_t>(i) * (per + 3) + j];
    const Tensor df = maxpool_backward(dpooled, c.feature_pool);
    Tensor total = d_features[s];
    for (std::size_t i = 0; i < total.numel(); ++i) total.data[i] += df.data[i];
    branch_backward(total, p.cnn2d, c.cnn, g.cnn2d);
  }
}

// =============================================================================
// Objective
// =============================================================================

enum class LossKind { parameter_mse, composite };

struct ObjectiveResult {
  double loss = 0.0;                    // mean over recurrences
  std::vector<double> per_recurrence;
  double final_geodesic = 0.0;          // mean geodesic slice loss, last recurrence, brain slices
  std::vector<std::vector<StackPredictionGrad>> dpred;
};

inline double mean_geodesic(const std::vector<SliceStack>& stacks, const std::vector<StackPrediction>& pred,
                            const LossConfig& cfg) {
  std::size_t count = 0;
  for (const auto& s : stacks)
    for (bool b : s.brain_mask) count += b;
  return count ? geodesic_sum(stacks, pred, cfg, nullptr) / static_cast<double>(count) : 0.0;
}

// Deep supervision: the loss is averaged over all recurrences. The
// composite loss is sum_s geodesic + lambda * ||SDA(T_hat) - V||_2, the
// consistency term evaluated against `truth` with the recurrence's sigma.
inline ObjectiveResult evaluate_objective(const AffirmState& st, const std::vector<SliceStack>& stacks,
                                          const Volume3D* truth, const ModelConfig& cfg, LossKind kind,
                                          const LossConfig& loss_cfg, const SdaConfig& sda, bool want_grad) {
  ObjectiveResult r;
  const std::size_t nrec = st.predictions.size();
  const double w = 1.0 / static_cast<double>(nrec);
  for (std::size_t k = 0; k < nrec; ++k) {
    std::vector<StackPredictionGrad> g;
    double v;
    if (kind == LossKind::parameter_mse) {
      v = parameter_mse(stacks, st.predictions[k], cfg.rot_scale, cfg.trans_scale, want_grad ? &g : nullptr);
    } else {
      v = geodesic_sum(stacks, st.predictions[k], loss_cfg, want_grad ? &g : nullptr);
      if (loss_cfg.lambda > 0.0) {
        if (!truth) throw InvalidInput("composite loss needs the ground-truth volume");
        std::vector<StackPredictionGrad> gc;
        const ConsistencyResult c = consistency_loss(stacks, st.predictions[k], *truth, st.rebuild_sigmas[k], sda,
                                                     loss_cfg.lambda, want_grad ? &gc : nullptr);
        v += c.value;
        if (want_grad)
          for (std::size_t s = 0; s < g.size(); ++s)
            for (std::size_t i = 0; i < g[s].theta.size(); ++i) {
              g[s].theta[i] += gc[s].theta[i];
              g[s].d[i] += gc[s].d[i];
            }
      }
    }
    r.per_recurrence.push_back(v);
    r.loss += w * v;
    if (want_grad) {
      for (auto& sg : g)
        for (std::size_t i = 0; i < sg.theta.size(); ++i) {
          sg.theta[i] *= w;
          sg.d[i] *= w;
        }
      r.dpred.push_back(std::move(g));
    }
  }
  r.final_geodesic = mean_geodesic(stacks, st.predictions.back(), loss_cfg);
  return r;
}

}  // namespace affirm::nn
