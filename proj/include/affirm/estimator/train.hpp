#pragma once

// Toy training: simulated phantom datasets, RMSprop updates, plateau-based
// learning-rate halving, the switch from parameter MSE to the composite loss
// at low learning rates, history CSV and a binary checkpoint format.

#include <cstring>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "affirm/estimator/model.hpp"
#include "affirm/motionsim.hpp"
#include "affirm/volume_io.hpp"

namespace affirm::nn {

// =============================================================================
// Data
// =============================================================================

struct ToyDataConfig {
  PhantomSpec phantom;
  bool vary_features = true;  // draw a fresh feature seed per sample
  std::vector<double> scales = even_scales();
  TrajectoryConfig trajectory;
  AcquisitionConfig acquisition = default_acquisition();

  static std::vector<double> even_scales() {
    std::vector<double> s;
    for (int i = 0; i < 10; ++i) s.push_back(0.875 + 0.25 * i / 9.0);
    return s;
  }
  static AcquisitionConfig default_acquisition() {
    AcquisitionConfig a;
    a.noise_sigma = 0.01;
    return a;
  }
};

struct ToySample {
  std::vector<SliceStack> stacks;
  Volume3D truth;
  Volume3D reference;  // initial reference volume
  std::size_t reference_stack = 0;
};

// Spread of a stack's true poses: mean rotation angle between each slice and
// the stack's mean pose, plus the mean displacement deviation in mm.
inline double stack_motion_spread(const SliceStack& s, RigidTransform* mean_pose = nullptr) {
  const auto& t = require_truth(s);
  RigidTransform m = RigidTransform::identity(t.front().center);
  for (const auto& x : t) {
    m.theta += x.theta / static_cast<double>(t.size());
    m.d += x.d / static_cast<double>(t.size());
  }
  double spread = 0.0;
  for (const auto& x : t)
    spread += rad2deg(rotation_angle(m.rotation().transpose() * x.rotation())) + (x.d - m.d).norm();
  if (mean_pose) *mean_pose = m;
  return spread / static_cast<double>(t.size());
}

// Single-stack SDA of the least-moving stack with every slice placed at that
// stack's mean true pose: the training stand-in for a manually chosen,
// atlas-aligned low-motion reference.
inline Volume3D least_motion_reference(const std::vector<SliceStack>& stacks, const SdaConfig& sda,
                                       std::size_t* chosen = nullptr) {
  std::size_t best = 0;
  double best_spread = std::numeric_limits<double>::infinity();
  RigidTransform pose;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    RigidTransform m;
    const double v = stack_motion_spread(stacks[s], &m);
    if (v < best_spread) {
      best_spread = v;
      best = s;
      pose = m;
    }
  }
  if (chosen) *chosen = best;
  std::vector<SliceStack> one{stacks[best]};
  std::vector<std::vector<RigidTransform>> t{std::vector<RigidTransform>(stacks[best].size(), pose)};
  return sda_reconstruct(one, t, sda.sigma_first_mm, sda);
}

inline ToySample make_toy_sample(const ToyDataConfig& cfg, const SdaConfig& sda, std::uint64_t seed,
                                 std::uint64_t index) {
  CounterRng rng(seed, 0x5a4d0000ull + index);
  PhantomSpec ps = cfg.phantom;
  if (cfg.vary_features) ps.feature_seed = rng.next_u64();
  if (!cfg.scales.empty()) ps.scale = cfg.scales[rng.below(cfg.scales.size())];
  ToySample s;
  s.truth = make_phantom(ps);
  for (Orientation o : kAllOrientations) {
    TrajectoryConfig tc = cfg.trajectory;
    tc.seed = rng.next_u64();
    tc.center = s.truth.grid.center();
    AcquisitionConfig ac = cfg.acquisition;
    ac.noise_seed = rng.next_u64();
    ac.center = s.truth.grid.center();
    const MotionTrajectory traj = simulate_trajectory(tc, ac.n_slices);
    s.stacks.push_back(acquire_stack(s.truth, traj, o, ac));
  }
  SdaConfig c = sda;
  c.target_grid = s.truth.grid;
  s.reference = least_motion_reference(s.stacks, c, &s.reference_stack);
  return s;
}

// =============================================================================
// Optimizer
// =============================================================================

struct RmsProp {
  double decay = 0.9;
  double eps = 1e-8;
  std::vector<std::vector<double>> mean_square;

  void step(EstimatorParams& p, const EstimatorParams& g, double lr) {
    std::vector<const Tensor*> grads;
    visit_tensors(g, [&](const std::string&, const Tensor& t, bool trainable) {
      if (trainable) grads.push_back(&t);
    });
    std::size_t idx = 0;
    const bool init = mean_square.empty();
    visit_tensors(p, [&](const std::string&, Tensor& t, bool trainable) {
      if (!trainable) return;
      if (init) mean_square.emplace_back(t.numel(), 0.0);
      auto& ms = mean_square[idx];
      const Tensor& gt = *grads[idx];
      for (std::size_t i = 0; i < t.numel(); ++i) {
        ms[i] = decay * ms[i] + (1.0 - decay) * gt.data[i] * gt.data[i];
        t.data[i] -= lr * gt.data[i] / (std::sqrt(ms[i]) + eps);
      }
      ++idx;
    });
  }
};

// =============================================================================
// Training loop
// =============================================================================

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"slice_size", c.slice_size},   {"volume_size", c.volume_size}, {"stem_pool", c.stem_pool},
          {"channels", c.channels},       {"hidden", c.hidden},           {"embedding", c.embedding},
          {"fc_hidden", c.fc_hidden},     {"dropout", c.dropout},         {"rot_scale", c.rot_scale},
          {"trans_scale", c.trans_scale}, {"use_fusion", c.use_fusion},   {"standard_gru", c.standard_gru}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.slice_size = j.at("slice_size");
    c.volume_size = j.at("volume_size");
    c.stem_pool = j.at("stem_pool");
    c.channels = j.at("channels").get<std::array<int, 3>>();
    c.hidden = j.at("hidden");
    c.embedding = j.at("embedding");
    c.fc_hidden = j.at("fc_hidden");
    c.dropout = j.at("dropout");
    c.rot_scale = j.at("rot_scale");
    c.trans_scale = j.at("trans_scale");
    c.use_fusion = j.at("use_fusion");
    c.standard_gru = j.at("standard_gru");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: malformed model config: ") + e.what());
  }
}

struct TrainConfig {
  ModelConfig model;
  ToyDataConfig data;
  SdaConfig sda;
  LossConfig loss;
  int n_recurrences = 4;
  double lr_initial = 1e-4;
  double lr_decay_factor = 2.0;
  int patience_epochs = 4;
  double loss_switch_lr = 1e-5;
  int sets_per_epoch = 16;
  int validation_sets = 4;
  int n_epochs = 50;
  std::uint64_t seed = 1;
  double rms_decay = 0.9;
  double rms_eps = 1e-8;

  void validate() const {
    model.validate();
    loss.validate();
    if (n_recurrences < 1) throw InvalidInput("TrainConfig: n_recurrences must be >= 1");
    if (lr_initial < 0 || !(lr_decay_factor > 1.0) || !(loss_switch_lr >= 0))
      throw InvalidInput("TrainConfig: invalid learning-rate schedule");
    if (patience_epochs < 1 || sets_per_epoch < 1 || validation_sets < 1 || n_epochs < 0)
      throw InvalidInput("TrainConfig: counts must be positive");
  }
};

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  std::string stage;
  double train_loss = 0.0;
  double val_loss = 0.0;      // current-stage objective on the validation sets
  double val_mse = 0.0;       // parameter MSE (mean over recurrences)
  double val_geodesic = 0.0;  // mean geodesic slice loss at the last recurrence
  double val_rot_deg = 0.0;   // mean rotation error at the last recurrence
  double val_trans_mm = 0.0;  // mean displacement error at the last recurrence
};

// Full training state; a run resumed from a saved state reproduces the
// uninterrupted run exactly.
struct TrainResult {
  EstimatorParams params;
  std::vector<HistoryRow> history;  // row 0 is the untrained model
  RmsProp optimizer;
  int epoch = 0;
  double lr = 0.0;
  LossKind kind = LossKind::parameter_mse;
  double best = 0.0;
  int since_best = 0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,lr,stage,train_loss,val_loss,val_mse,val_geodesic,val_rot_deg,val_trans_mm\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.lr << ',' << r.stage << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_mse
       << ',' << r.val_geodesic << ',' << r.val_rot_deg << ',' << r.val_trans_mm << '\n';
  return os.str();
}

struct ValidationScores {
  double objective = 0.0, mse = 0.0, geodesic = 0.0, rot_deg = 0.0, trans_mm = 0.0;
};

// Mean rotation (deg) and displacement (mm) error over brain-mask slices.
inline std::pair<double, double> pose_errors(const std::vector<SliceStack>& stacks,
                                             const std::vector<StackPrediction>& pred) {
  double rot = 0.0, trans = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const auto& truth = require_truth(stacks[s]);
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      if (!stacks[s].brain_mask[i]) continue;
      rot += rad2deg(rotation_angle(euler_to_matrix(pred[s].theta[i]).transpose() * truth[i].rotation()));
      trans += (pred[s].d[i] - truth[i].d).norm();
      ++n;
    }
  }
  return n ? std::make_pair(rot / n, trans / n) : std::make_pair(0.0, 0.0);
}

inline ValidationScores validate_model(EstimatorParams& p, const std::vector<ToySample>& set, const TrainConfig& cfg,
                                       LossKind kind) {
  ValidationScores v;
  ForwardOptions fo;
  fo.n_recurrences = cfg.n_recurrences;
  fo.sda = cfg.sda;
  for (const auto& s : set) {
    const AffirmState st = affirm_forward(s.stacks, s.reference, p, fo);
    const ObjectiveResult mse =
        evaluate_objective(st, s.stacks, &s.truth, p.config, LossKind::parameter_mse, cfg.loss, cfg.sda, false);
    v.mse += mse.loss / set.size();
    v.geodesic += mse.final_geodesic / set.size();
    const auto [r, t] = pose_errors(s.stacks, st.predictions.back());
    v.rot_deg += r / set.size();
    v.trans_mm += t / set.size();
    if (kind == LossKind::parameter_mse) {
      v.objective += mse.loss / set.size();
    } else {
      v.objective +=
          evaluate_objective(st, s.stacks, &s.truth, p.config, kind, cfg.loss, cfg.sda, false).loss / set.size();
    }
  }
  return v;
}

inline void check_finite(double v, const char* what, int epoch) {
  if (!std::isfinite(v))
    throw NumericalFailure(std::string("training diverged: ") + what + " is not finite at epoch " +
                           std::to_string(epoch));
}

// One gradient step on one sample; returns the loss before the step.
inline double train_step(EstimatorParams& p, RmsProp& opt, const ToySample& s, const TrainConfig& cfg, LossKind kind,
                         double lr, std::uint64_t dropout_seed) {
  ForwardOptions fo;
  fo.n_recurrences = cfg.n_recurrences;
  fo.training = true;
  fo.dropout_seed = dropout_seed;
  fo.sda = cfg.sda;
  const AffirmState st = affirm_forward(s.stacks, s.reference, p, fo);
  const ObjectiveResult r = evaluate_objective(st, s.stacks, &s.truth, p.config, kind, cfg.loss, cfg.sda, true);
  EstimatorParams g = zero_grads_like(p);
  affirm_backward(st, r.dpred, p, g);
  opt.step(p, g, lr);
  return r.loss;
}

using EpochCallback = std::function<void(const HistoryRow&)>;

inline TrainResult train_toy(const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                             const TrainResult* resume = nullptr) {
  cfg.validate();
  std::vector<ToySample> val;
  for (int i = 0; i < cfg.validation_sets; ++i)
    val.push_back(make_toy_sample(cfg.data, cfg.sda, cfg.seed ^ 0x76a1, static_cast<std::uint64_t>(i)));

  TrainResult res;
  if (resume) {
    res = *resume;
    if (model_config_json(res.params.config) != model_config_json(cfg.model))
      throw InvalidInput("train_toy: resumed checkpoint has a different model configuration");
    if (res.optimizer.mean_square.empty()) res.optimizer = RmsProp{cfg.rms_decay, cfg.rms_eps, {}};
  } else {
    res.params = init_params(cfg.model, cfg.seed);
    res.optimizer = RmsProp{cfg.rms_decay, cfg.rms_eps, {}};
    res.lr = cfg.lr_initial;
    const ValidationScores v = validate_model(res.params, val, cfg, res.kind);
    res.history.push_back({0, res.lr, "mse", std::nan(""), v.objective, v.mse, v.geodesic, v.rot_deg, v.trans_mm});
    res.best = v.objective;
    if (on_epoch) on_epoch(res.history.back());
  }
  for (int epoch = res.epoch + 1; epoch <= cfg.n_epochs; ++epoch) {
    double train = 0.0;
    for (int i = 0; i < cfg.sets_per_epoch; ++i) {
      const std::uint64_t idx = static_cast<std::uint64_t>(epoch) * 100000u + static_cast<std::uint64_t>(i);
      const ToySample s = make_toy_sample(cfg.data, cfg.sda, cfg.seed, idx);
      const double l = train_step(res.params, res.optimizer, s, cfg, res.kind, res.lr, cfg.seed * 31 + idx);
      check_finite(l, "training loss", epoch);
      train += l / cfg.sets_per_epoch;
    }
    const ValidationScores v = validate_model(res.params, val, cfg, res.kind);
    check_finite(v.objective, "validation loss", epoch);
    res.history.push_back({epoch, res.lr, res.kind == LossKind::parameter_mse ? "mse" : "composite", train,
                           v.objective, v.mse, v.geodesic, v.rot_deg, v.trans_mm});
    res.epoch = epoch;
    if (v.objective < res.best) {
      res.best = v.objective;
      res.since_best = 0;
    } else if (++res.since_best >= cfg.patience_epochs) {
      res.lr /= cfg.lr_decay_factor;
      res.since_best = 0;
      if (res.kind == LossKind::parameter_mse && res.lr < cfg.loss_switch_lr) {
        res.kind = LossKind::composite;
        res.best = validate_model(res.params, val, cfg, res.kind).objective;
      }
    }
    if (on_epoch) on_epoch(res.history.back());
  }
  return res;
}

// =============================================================================
// Checkpoint: "AFFIRMCK" magic, uint64 LE manifest length, JSON manifest,
// then every tensor as little-endian float64 in manifest order.
// =============================================================================

inline constexpr char kCheckpointMagic[8] = {'A', 'F', 'F', 'I', 'R', 'M', 'C', 'K'};

inline void append_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  bits = io::to_little64(bits);
  out.append(reinterpret_cast<const char*>(&bits), 8);
}

// Optional optimizer moments follow the parameters in the payload, one block
// per trainable tensor in manifest order.
inline std::string encode_checkpoint(const EstimatorParams& p, const nlohmann::json& extra = {},
                                     const RmsProp* opt = nullptr) {
  nlohmann::json manifest;
  manifest["format"] = "affirm-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64";
  manifest["byte_order"] = "little";
  manifest["model"] = model_config_json(p.config);
  manifest["parameter_count"] = parameter_count(p);
  if (!extra.is_null()) manifest["extra"] = extra;
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  visit_tensors(p, [&](const std::string& name, const Tensor& t, bool trainable) {
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"trainable", trainable}});
    for (double v : t.data) append_f64(payload, v);
  });
  manifest["tensors"] = tensors;
  if (opt && !opt->mean_square.empty()) {
    manifest["optimizer"] = {{"kind", "rmsprop"}, {"decay", opt->decay}, {"eps", opt->eps}};
    for (const auto& m : opt->mean_square)
      for (double v : m) append_f64(payload, v);
  }
  const std::string m = manifest.dump();
  std::uint64_t len = io::to_little64(m.size());
  std::string out(kCheckpointMagic, 8);
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += m;
  out += payload;
  return out;
}

inline EstimatorParams decode_checkpoint(const std::string& bytes, nlohmann::json* manifest_out = nullptr,
                                         RmsProp* opt = nullptr) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw InvalidInput("checkpoint: bad magic");
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 8, 8);
  len = io::to_little64(len);
  if (len > bytes.size() - 16) throw InvalidInput("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (manifest.value("dtype", "") != "float64") throw InvalidInput("checkpoint: unsupported dtype");
  EstimatorParams p = zero_params(model_config_from_json(manifest.at("model")));
  std::size_t offset = 16 + len, idx = 0;
  auto read = [&](std::vector<double>& dst) {
    if (offset + 8 * dst.size() > bytes.size()) throw InvalidInput("checkpoint: truncated payload");
    for (double& v : dst) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + offset, 8);
      bits = io::to_little64(bits);
      std::memcpy(&v, &bits, 8);
      offset += 8;
    }
  };
  try {
    const auto& tensors = manifest.at("tensors");
    std::vector<std::size_t> trainable_sizes;
    visit_tensors(p, [&](const std::string& name, Tensor& t, bool trainable) {
      if (idx >= tensors.size() || tensors[idx].at("name") != name ||
          tensors[idx].at("shape").get<std::vector<int>>() != t.shape)
        throw InvalidInput("checkpoint: tensor manifest does not match model at '" + name + "'");
      ++idx;
      read(t.data);
      if (trainable) trainable_sizes.push_back(t.numel());
    });
    if (manifest.contains("optimizer")) {
      RmsProp o{manifest.at("optimizer").at("decay"), manifest.at("optimizer").at("eps"), {}};
      for (std::size_t n : trainable_sizes) {
        o.mean_square.emplace_back(n, 0.0);
        read(o.mean_square.back());
      }
      if (opt) *opt = std::move(o);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (offset != bytes.size()) throw InvalidInput("checkpoint: trailing bytes");
  if (manifest_out) *manifest_out = manifest;
  return p;
}

inline void save_checkpoint(const EstimatorParams& p, const std::filesystem::path& path,
                            const nlohmann::json& extra = {}) {
  io::write_file(path, encode_checkpoint(p, extra));
}

inline EstimatorParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* manifest = nullptr) {
  return decode_checkpoint(io::read_file(path), manifest);
}

// Training checkpoints add the optimizer moments and the schedule state under
// manifest.extra.training, so train_toy can resume from them.
inline nlohmann::json history_json(const std::vector<HistoryRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  for (const auto& r : rows)
    out.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"stage", r.stage}, {"train_loss", num(r.train_loss)},
                   {"val_loss", r.val_loss}, {"val_mse", r.val_mse}, {"val_geodesic", r.val_geodesic},
                   {"val_rot_deg", r.val_rot_deg}, {"val_trans_mm", r.val_trans_mm}});
  return out;
}

inline std::vector<HistoryRow> history_from_json(const nlohmann::json& j) {
  std::vector<HistoryRow> rows;
  for (const auto& e : j) {
    HistoryRow r;
    r.epoch = e.at("epoch");
    r.lr = e.at("lr");
    r.stage = e.at("stage");
    r.train_loss = e.at("train_loss").is_null() ? std::nan("") : e.at("train_loss").get<double>();
    r.val_loss = e.at("val_loss");
    r.val_mse = e.at("val_mse");
    r.val_geodesic = e.at("val_geodesic");
    r.val_rot_deg = e.at("val_rot_deg");
    r.val_trans_mm = e.at("val_trans_mm");
    rows.push_back(r);
  }
  return rows;
}

inline void save_training_checkpoint(const TrainResult& r, const std::filesystem::path& path,
                                     nlohmann::json extra = nlohmann::json::object()) {
  extra["training"] = {{"epoch", r.epoch},
                       {"lr", r.lr},
                       {"stage", r.kind == LossKind::parameter_mse ? "mse" : "composite"},
                       {"best", r.best},
                       {"since_best", r.since_best},
                       {"history", history_json(r.history)}};
  io::write_file(path, encode_checkpoint(r.params, extra, &r.optimizer));
}

inline TrainResult load_training_checkpoint(const std::filesystem::path& path, nlohmann::json* manifest = nullptr) {
  nlohmann::json m;
  TrainResult r;
  r.params = decode_checkpoint(io::read_file(path), &m, &r.optimizer);
  try {
    const auto& t = m.at("extra").at("training");
    r.epoch = t.at("epoch");
    r.lr = t.at("lr");
    r.kind = t.at("stage") == "mse" ? LossKind::parameter_mse : LossKind::composite;
    r.best = t.at("best");
    r.since_best = t.at("since_best");
    r.history = history_from_json(t.at("history"));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("checkpoint: no resumable training state: ") + e.what());
  }
  if (manifest) *manifest = m;
  return r;
}

}  // namespace affirm::nn
