#pragma once

// Experiment manifests and the command implementations behind tools/affirm.
//
// A manifest is a JSON object; every key is optional and missing keys take
// the defaults of ExperimentManifest. Angles are in degrees, lengths in mm.
// Each command writes the fully resolved manifest to <out>/manifest.json, so
// `--manifest <out>/manifest.json` reproduces the run. The worker count is not
// part of the manifest: outputs do not depend on it.

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "affirm/estimator/train.hpp"
#include "affirm/pipeline.hpp"
#include "affirm/stack_io.hpp"

namespace affirm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct ExperimentManifest {
  std::string command;
  std::uint64_t seed = 1;

  PhantomSpec phantom;
  std::string motion = "standard";  // none | small | standard | large
  TrajectoryConfig trajectory;
  AcquisitionConfig acquisition;

  std::string method = "srr";     // reconstruct: sda | srr
  std::string transforms = "est";  // reconstruct: est | true
  double sda_sigma_mm = 0.8;
  SrrConfig srr;

  std::string coarse = "none";  // register / pipeline: affirm | none
  std::string init = "identity";  // without the estimator: identity | volume
  int n_outer = 3;
  bool stack_registration = true;
  bool reject_outliers = true;
  bool align_to_truth = true;
  int estimator_recurrences = 4;

  nn::TrainConfig train;

  // Inputs ("" = not given).
  std::string stacks_dir, truth_path, checkpoint_path, atlas_path, resume_path, volume_path, reference_path;

  Grid grid() const { return phantom.grid; }
};

// Visits every manifest field with its JSON pointer. Degree-valued fields go
// through the `deg` wrapper so the struct stays in radians.
struct Deg {
  double& rad;
};

template <typename V>
void visit_manifest(ExperimentManifest& m, V&& v) {
  v("/command", m.command);
  v("/seed", m.seed);

  v("/phantom/size_mm", m.phantom.size_mm);
  v("/phantom/feature_seed", m.phantom.feature_seed);
  v("/phantom/n_shells", m.phantom.n_shells);
  v("/phantom/texture_amplitude", m.phantom.texture_amplitude);
  v("/phantom/scale", m.phantom.scale);
  v("/phantom/edge_width_mm", m.phantom.edge_width_mm);
  v("/phantom/grid_dims", m.phantom.grid.dims);
  v("/phantom/spacing_mm", m.phantom.grid.spacing[0]);

  v("/motion", m.motion);
  v("/trajectory/n_control", m.trajectory.n_control);
  v("/trajectory/delta_rot_bound_deg", Deg{m.trajectory.delta_rot_bound});
  v("/trajectory/delta_trans_bound_mm", m.trajectory.delta_trans_bound);
  v("/trajectory/mean_rot_bound_deg", Deg{m.trajectory.mean_rot_bound});
  v("/trajectory/mean_trans_bound_mm", m.trajectory.mean_trans_bound);
  v("/trajectory/trans_bound_mm", m.trajectory.trans_bound);
  v("/trajectory/max_angular_velocity_deg_s", Deg{m.trajectory.max_angular_velocity});
  v("/trajectory/max_instant_angular_velocity_deg_s", Deg{m.trajectory.max_instant_angular_velocity});
  v("/trajectory/slice_interval_s", m.trajectory.slice_interval_s);
  v("/trajectory/smoothing", m.trajectory.smoothing);
  v("/trajectory/max_attempts", m.trajectory.max_attempts);

  v("/acquisition/n_slices", m.acquisition.n_slices);
  v("/acquisition/thickness_mm", m.acquisition.thickness_mm);
  v("/acquisition/psf_sigma_mm", m.acquisition.psf_sigma_mm);
  v("/acquisition/interleaved", m.acquisition.interleaved);
  v("/acquisition/noise_sigma", m.acquisition.noise_sigma);
  v("/acquisition/width", m.acquisition.width);
  v("/acquisition/height", m.acquisition.height);
  v("/acquisition/in_plane_spacing_mm", m.acquisition.in_plane_spacing_mm);

  v("/reconstruction/method", m.method);
  v("/reconstruction/transforms", m.transforms);
  v("/reconstruction/sda_sigma_mm", m.sda_sigma_mm);
  v("/reconstruction/regularization_weight", m.srr.regularization_weight);
  v("/reconstruction/max_cg_iterations", m.srr.max_cg_iterations);

  v("/pipeline/coarse", m.coarse);
  v("/pipeline/init", m.init);
  v("/pipeline/n_outer", m.n_outer);
  v("/pipeline/stack_registration", m.stack_registration);
  v("/pipeline/reject_outliers", m.reject_outliers);
  v("/pipeline/align_to_truth", m.align_to_truth);
  v("/pipeline/estimator_recurrences", m.estimator_recurrences);

  v("/training/epochs", m.train.n_epochs);
  v("/training/sets_per_epoch", m.train.sets_per_epoch);
  v("/training/validation_sets", m.train.validation_sets);
  v("/training/lr", m.train.lr_initial);
  v("/training/lr_decay_factor", m.train.lr_decay_factor);
  v("/training/patience_epochs", m.train.patience_epochs);
  v("/training/loss_switch_lr", m.train.loss_switch_lr);
  v("/training/recurrences", m.train.n_recurrences);
  v("/training/use_fusion", m.train.model.use_fusion);
  v("/training/vary_features", m.train.data.vary_features);
  v("/training/noise_sigma", m.train.data.acquisition.noise_sigma);
  v("/training/gamma", m.train.loss.gamma);
  v("/training/lambda", m.train.loss.lambda);

  v("/inputs/stacks", m.stacks_dir);
  v("/inputs/truth", m.truth_path);
  v("/inputs/checkpoint", m.checkpoint_path);
  v("/inputs/atlas", m.atlas_path);
  v("/inputs/resume", m.resume_path);
  v("/inputs/volume", m.volume_path);
  v("/inputs/reference", m.reference_path);
}

inline json to_json(const ExperimentManifest& in) {
  ExperimentManifest m = in;
  json j = json::object();
  j["format"] = "affirm-experiment";
  j["version"] = 1;
  visit_manifest(m, [&](const char* ptr, auto&& field) {
    using F = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<F, Deg>) {
      j[json::json_pointer(ptr)] = rad2deg(field.rad);
    } else {
      j[json::json_pointer(ptr)] = field;
    }
  });
  return j;
}

// Finishes derived fields after loading: the grid is always centered and
// isotropic, and the training/acquisition settings follow the manifest.
inline void finalize(ExperimentManifest& m) {
  m.phantom.grid = Grid::centered(m.phantom.grid.dims, Vec3::Constant(m.phantom.grid.spacing[0]));
  m.phantom.validate();
  m.trajectory.validate();
  m.acquisition.validate();
  motion_preset_from_string(m.motion);
  if (m.method != "sda" && m.method != "srr") throw InvalidInput("unknown reconstruction method '" + m.method + "'");
  if (m.transforms != "est" && m.transforms != "true")
    throw InvalidInput("unknown transform source '" + m.transforms + "' (est|true)");
  if (m.coarse != "affirm" && m.coarse != "none") throw InvalidInput("unknown coarse stage '" + m.coarse + "'");
  if (m.init != "identity" && m.init != "volume") throw InvalidInput("unknown init '" + m.init + "'");
  if (!(m.sda_sigma_mm > 0)) throw InvalidInput("sda_sigma_mm must be > 0");
  m.srr.target_dims = m.phantom.grid.dims;
  m.srr.target_spacing_mm = m.phantom.grid.spacing[0];
  m.srr.target_center = m.phantom.grid.center();
  m.srr.validate();
  m.train.data.acquisition.n_slices = m.acquisition.n_slices;
  m.train.data.acquisition.thickness_mm = m.acquisition.thickness_mm;
  m.train.data.acquisition.psf_sigma_mm = m.acquisition.psf_sigma_mm;
  m.train.data.acquisition.width = m.acquisition.width;
  m.train.data.acquisition.height = m.acquisition.height;
  m.train.data.acquisition.in_plane_spacing_mm = m.acquisition.in_plane_spacing_mm;
  m.train.data.trajectory = m.trajectory;
  m.train.data.phantom = m.phantom;
  m.train.seed = m.seed;
  // The network input follows the simulated geometry.
  m.train.model.slice_size = m.acquisition.width;
  m.train.model.volume_size = m.phantom.grid.dims[0];
  if (m.command == "train-toy") {
    const auto& d = m.phantom.grid.dims;
    if (m.acquisition.width != m.acquisition.height || d[0] != d[1] || d[0] != d[2])
      throw InvalidInput("train-toy needs square slices and a cubic grid");
    m.train.validate();
  }
}

// Applies `patch` (a JSON object) on top of `m`. Unknown keys are rejected so
// typos do not silently fall back to defaults.
inline void apply_json(ExperimentManifest& m, const json& patch) {
  if (!patch.is_object()) throw InvalidInput("manifest must be a JSON object");
  if (patch.empty()) return;  // flatten() of {} is {"": null}
  const json flat = patch.flatten();
  std::map<std::string, bool> known;
  visit_manifest(m, [&](const char* ptr, auto&&) { known[ptr] = false; });
  known["/format"] = known["/version"] = false;
  for (const auto& [key, value] : flat.items()) {
    // Arrays flatten to element pointers; match on their parent.
    std::string k = key;
    if (!known.count(k)) {
      const auto slash = k.find_last_of('/');
      if (slash != std::string::npos && slash > 0) k = k.substr(0, slash);
    }
    if (!known.count(k)) throw InvalidInput("unknown manifest key '" + key + "'");
  }
  try {
    visit_manifest(m, [&](const char* ptr, auto&& field) {
      const json::json_pointer p(ptr);
      if (!patch.contains(p)) return;
      using F = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<F, Deg>) {
        field.rad = deg2rad(patch.at(p).get<double>());
      } else {
        field = patch.at(p).get<F>();
      }
    });
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed manifest value: ") + e.what());
  }
  if (patch.contains("format") && patch.at("format") != "affirm-experiment")
    throw InvalidInput("not an affirm-experiment manifest");
}

// Parses a command-line string for the field at `ptr`, using the type of
// its default value.
inline json parse_override(const json& defaults, const std::string& ptr, const std::string& text) {
  const json& d = defaults.at(json::json_pointer(ptr));
  try {
    if (d.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw InvalidInput("expected true/false for " + ptr + ", got '" + text + "'");
    }
    if (d.is_number_unsigned()) return static_cast<std::uint64_t>(std::stoull(text));
    if (d.is_number_integer()) return std::stoll(text);
    if (d.is_number()) return std::stod(text);
    if (d.is_string()) return text;
    return json::parse(text);
  } catch (const std::invalid_argument&) {
    throw InvalidInput("cannot parse '" + text + "' for " + ptr);
  } catch (const std::out_of_range&) {
    throw InvalidInput("value out of range for " + ptr + ": '" + text + "'");
  } catch (const json::exception&) {
    throw InvalidInput("cannot parse '" + text + "' for " + ptr);
  }
}

// Defaults <- manifest file <- command-line overrides (pointer -> text).
inline ExperimentManifest resolve_manifest(const std::string& command, const std::string& manifest_path,
                                           const std::map<std::string, std::string>& overrides) {
  ExperimentManifest m;
  const json defaults = to_json(m);
  if (!manifest_path.empty()) apply_json(m, io::read_json(manifest_path));
  json patch = json::object();
  for (const auto& [ptr, text] : overrides) patch[json::json_pointer(ptr)] = parse_override(defaults, ptr, text);
  apply_json(m, patch);
  m.command = command;
  finalize(m);
  return m;
}

inline void archive_manifest(const ExperimentManifest& m, const fs::path& out) {
  io::write_json(out / "manifest.json", to_json(m));
}

// =============================================================================
// Shared helpers
// =============================================================================

inline std::vector<SliceStack> load_stacks(const std::string& dir) {
  if (dir.empty()) throw InvalidInput("no stack directory given (--stacks)");
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw InvalidInput("stack directory not found: " + dir);
  if (fs::exists(root / "manifest.json")) return {load_stack(root)};
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw InvalidInput("no stacks found under " + dir);
  std::vector<SliceStack> out;
  for (const auto& p : subdirs) out.push_back(load_stack(p));
  return out;
}

inline std::vector<std::vector<RigidTransform>> stack_transforms(const std::vector<SliceStack>& stacks,
                                                                 bool use_truth) {
  std::vector<std::vector<RigidTransform>> t;
  for (const auto& s : stacks) {
    if (use_truth && !s.true_transforms) throw InvalidInput("stacks carry no ground-truth transforms");
    t.push_back(use_truth ? *s.true_transforms : s.est_transforms);
  }
  return t;
}

inline nlohmann::json transform_dump(const SliceStack& s, const std::vector<RigidTransform>& t,
                                     const std::vector<bool>& keep) {
  json rows = json::array();
  for (std::size_t k = 0; k < s.size(); ++k)
    rows.push_back({{"slice", k},
                    {"time_index", s.time_index[k]},
                    {"brain", static_cast<bool>(s.brain_mask[k])},
                    {"kept", keep.empty() ? true : static_cast<bool>(keep[k])},
                    {"transform", affirm::to_json(t[k])}});
  return {{"orientation", to_string(s.orientation())}, {"slices", rows}};
}

inline MotionErrorReport stacks_motion_errors(const std::vector<SliceStack>& stacks,
                                              const std::vector<std::vector<RigidTransform>>& est) {
  std::vector<RigidTransform> truth, all;
  std::vector<bool> mask;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    if (!stacks[s].true_transforms) throw InvalidInput("stacks carry no ground-truth transforms");
    truth.insert(truth.end(), stacks[s].true_transforms->begin(), stacks[s].true_transforms->end());
    all.insert(all.end(), est[s].begin(), est[s].end());
    mask.insert(mask.end(), stacks[s].brain_mask.begin(), stacks[s].brain_mask.end());
  }
  return motion_errors(truth, all, mask);
}

inline SdaConfig sda_config(const ExperimentManifest& m) {
  SdaConfig c;
  c.target_grid = m.grid();
  return c;
}

// =============================================================================
// Commands
// =============================================================================

// Phantom, three orthogonal stacks with ground truth, trajectory CSVs and a
// bounds report.
inline void cmd_simulate(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  const Volume3D truth = make_phantom(m.phantom);
  save_volume(truth, out / "volume.raw");
  const MotionPreset preset = motion_preset_from_string(m.motion);
  CounterRng rng(m.seed, 0x51a7);
  json bounds = json::object();
  for (Orientation o : kAllOrientations) {
    TrajectoryConfig tc = m.trajectory;
    tc.seed = rng.next_u64();
    tc.center = truth.grid.center();
    AcquisitionConfig ac = m.acquisition;
    ac.noise_seed = rng.next_u64();
    ac.center = truth.grid.center();
    const MotionTrajectory traj = simulate_preset(preset, tc, ac.n_slices);
    const SliceStack s = acquire_stack(truth, traj, o, ac);
    save_stack(s, out / "stacks" / to_string(o));
    io::write_file(out / "trajectories" / (std::string(to_string(o)) + ".csv"), trajectory_csv(traj));
    const TrajectoryConfig checked = preset == MotionPreset::small ? small_motion_config(tc) : tc;
    json v = json::array();
    for (const auto& b : validate_bounds(traj, checked))
      v.push_back({{"bound", b.bound}, {"axis", b.axis}, {"value", b.value}, {"limit", b.limit}});
    bounds[to_string(o)] = {{"attempts", traj.attempts}, {"violations", v}};
    log << "simulate: " << to_string(o) << " stack, " << s.size() << " slices, " << v.size()
        << " bound violations\n";
  }
  bounds["checked_preset"] = m.motion;
  io::write_json(out / "bounds.json", bounds);
}

inline void cmd_reconstruct(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  const auto stacks = load_stacks(m.stacks_dir);
  const auto t = stack_transforms(stacks, m.transforms == "true");
  const SdaConfig sda = sda_config(m);
  Volume3D v = sda_reconstruct(stacks, t, m.sda_sigma_mm, sda);
  if (m.method == "srr") {
    std::vector<std::vector<bool>> keep;
    for (const auto& s : stacks) keep.emplace_back(s.size(), true);
    const SrrResult r = srr_least_squares(stacks, t, keep, m.srr, v.data);
    v = r.volume;
    log << "reconstruct: srr, " << r.residual_norms.size() << " residual norms recorded\n";
  } else {
    log << "reconstruct: sda, sigma " << m.sda_sigma_mm << " mm\n";
  }
  save_volume(v, out / "volume.raw");
}

inline PipelineConfig pipeline_config(const ExperimentManifest& m) {
  PipelineConfig c;
  c.init = m.init == "volume" ? InitMode::volume : InitMode::identity;
  c.n_outer = m.n_outer;
  c.stack_registration = m.stack_registration;
  c.sda = sda_config(m);
  c.reference_sigma_mm = m.sda_sigma_mm;
  c.reject_outliers = m.reject_outliers;
  c.srr = m.srr;
  c.estimator_recurrences = m.estimator_recurrences;
  return c;
}

struct CorrectionOutput {
  std::vector<SliceStack> stacks;
  PipelineResult result;
};

// Shared by register and pipeline: runs the correction and writes transform
// dumps plus the stacks with their estimated transforms.
inline CorrectionOutput run_correction(const ExperimentManifest& m, const fs::path& out, bool super_resolve,
                                       std::ostream& log) {
  CorrectionOutput c;
  c.stacks = load_stacks(m.stacks_dir);
  PipelineConfig pc = pipeline_config(m);
  pc.super_resolve = super_resolve;
  std::optional<nn::EstimatorParams> params;
  if (m.coarse == "affirm") {
    if (m.checkpoint_path.empty()) throw InvalidInput("--coarse affirm needs --checkpoint");
    params = nn::load_checkpoint(m.checkpoint_path);
  }
  const Volume3D atlas = m.atlas_path.empty() ? make_phantom(m.phantom) : load_volume(m.atlas_path);
  const bool use_atlas = params.has_value() || pc.init == InitMode::volume || !m.atlas_path.empty();
  c.result = run_coarse_to_fine(c.stacks, params ? &*params : nullptr, use_atlas ? &atlas : nullptr, pc);
  for (std::size_t s = 0; s < c.stacks.size(); ++s) {
    auto& st = c.stacks[s];
    st.est_transforms = c.result.transforms[s];
    const std::string name = to_string(st.orientation());
    io::write_json(out / "transforms" / (name + ".json"), transform_dump(st, st.est_transforms, c.result.keep[s]));
    save_stack(st, out / "stacks" / name);
  }
  std::size_t kept = 0, total = 0;
  for (const auto& k : c.result.keep)
    for (bool b : k) kept += b, ++total;
  log << "correction: coarse " << m.coarse << ", " << m.n_outer << " outer iterations, " << kept << "/" << total
      << " slices kept\n";
  return c;
}

inline void cmd_register(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  const CorrectionOutput c = run_correction(m, out, false, log);
  save_volume(c.result.volume, out / "reference.raw");
}

inline json quality_json(const QualityReport& q) {
  return {{"ssim", q.ssim}, {"nrmse", q.nrmse}, {"alignment", affirm::to_json(q.alignment)}};
}

inline void cmd_pipeline(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  const CorrectionOutput c = run_correction(m, out, true, log);
  save_volume(c.result.volume, out / "volume.raw");
  json metrics = json::object();
  bool has_truth = true;
  for (const auto& s : c.stacks) has_truth = has_truth && s.true_transforms.has_value();
  if (has_truth) {
    const MotionErrorReport r = stacks_motion_errors(c.stacks, c.result.transforms);
    metrics["motion"] = to_json(r);
    io::write_file(out / "motion_errors.csv", to_csv(r));
  }
  if (!m.truth_path.empty()) {
    const QualityReport q = aligned_quality(c.result.volume, load_volume(m.truth_path), m.align_to_truth);
    metrics["quality"] = quality_json(q);
    log << "pipeline: SSIM " << q.ssim << ", NRMSE " << q.nrmse << "\n";
  }
  io::write_json(out / "metrics.json", metrics);
}

inline void cmd_evaluate(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  json metrics = json::object();
  if (m.volume_path.empty() && m.stacks_dir.empty())
    throw InvalidInput("evaluate needs --volume/--reference and/or --stacks");
  if (!m.volume_path.empty()) {
    if (m.reference_path.empty()) throw InvalidInput("evaluate: --volume needs --reference");
    const Volume3D ref = load_volume(m.reference_path);
    const QualityReport q = aligned_quality(load_volume(m.volume_path), ref, m.align_to_truth);
    metrics["quality"] = quality_json(q);
    save_volume(dssim_map(q.aligned, ref), out / "dssim.raw");
    log << "evaluate: SSIM " << q.ssim << ", NRMSE " << q.nrmse << "\n";
  }
  if (!m.stacks_dir.empty()) {
    const auto stacks = load_stacks(m.stacks_dir);
    const MotionErrorReport r = stacks_motion_errors(stacks, stack_transforms(stacks, false));
    metrics["motion"] = to_json(r);
    io::write_file(out / "motion_errors.csv", to_csv(r));
    log << "evaluate: rotation MAE " << r.mae_rot_deg << " deg, translation MAE " << r.mae_trans_mm << " mm\n";
  }
  io::write_json(out / "metrics.json", metrics);
}

// Writes checkpoint.bin (resumable) and history.csv.
inline void cmd_train(const ExperimentManifest& m, const fs::path& out, std::ostream& log) {
  std::optional<nn::TrainResult> resume;
  if (!m.resume_path.empty()) resume = nn::load_training_checkpoint(m.resume_path);
  const nn::TrainResult r = nn::train_toy(
      m.train,
      [&](const nn::HistoryRow& h) {
        log << "epoch " << h.epoch << " lr " << h.lr << " " << h.stage << " val " << h.val_loss << " rot "
            << h.val_rot_deg << " deg" << std::endl;
      },
      resume ? &*resume : nullptr);
  nn::save_training_checkpoint(r, out / "checkpoint.bin");
  io::write_file(out / "history.csv", nn::history_csv(r.history));
}

using Command = std::function<void(const ExperimentManifest&, const fs::path&, std::ostream&)>;

inline const std::map<std::string, Command>& commands() {
  static const std::map<std::string, Command> table{
      {"simulate", cmd_simulate}, {"reconstruct", cmd_reconstruct}, {"register", cmd_register},
      {"train-toy", cmd_train},   {"evaluate", cmd_evaluate},       {"pipeline", cmd_pipeline}};
  return table;
}

// Resolves, archives and runs; returns the process exit code.
inline int run_command(const ExperimentManifest& m, const fs::path& out, std::ostream& log, std::ostream& err) {
  try {
    fs::create_directories(out);
    archive_manifest(m, out);
    commands().at(m.command)(m, out, log);
    return 0;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "error: malformed JSON: " << e.what() << "\n";
    return 2;
  } catch (const NumericalFailure& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace affirm::cli
