#pragma once

// Coarse-to-fine motion correction: an optional estimator pass (or
// identity / volume-to-volume initialization), then alternating
// slice-to-volume registration and reference refresh, outlier rejection and
// a final super-resolution reconstruction.

#include <vector>

#include "affirm/estimator/model.hpp"
#include "affirm/evaluation.hpp"
#include "affirm/sda.hpp"
#include "affirm/svr.hpp"

namespace affirm {

enum class InitMode { identity, volume };

struct PipelineConfig {
  InitMode init = InitMode::identity;  // used when no estimator is given
  int n_outer = 3;
  bool stack_registration = true;  // rigid per-stack alignment before slice SVR
  RegistrationConfig registration;
  SdaConfig sda;
  double reference_sigma_mm = 0.8;
  bool reject_outliers = true;
  RejectionConfig rejection;
  SrrConfig srr;
  int estimator_recurrences = 4;
  bool super_resolve = true;  // false returns the SDA reference instead of SRR

  void validate() const {
    if (n_outer < 0) throw InvalidInput("PipelineConfig: n_outer must be >= 0");
    if (!(reference_sigma_mm > 0.0)) throw InvalidInput("PipelineConfig: reference sigma must be > 0");
    registration.validate();
    srr.validate();
  }
};

struct PipelineResult {
  std::vector<std::vector<RigidTransform>> initial_transforms;
  std::vector<std::vector<RigidTransform>> transforms;
  std::vector<std::vector<bool>> keep;
  Volume3D volume;
  Volume3D initial_reference;
  int initial_reference_stack = -1;
};

// Object-free slices take the transform of the nearest object slice in time.
inline void fill_unregistered(const SliceStack& s, std::vector<RigidTransform>& t) {
  std::vector<int> with;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (s.brain_mask[k]) with.push_back(static_cast<int>(k));
  if (with.empty()) return;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.brain_mask[k]) continue;
    int best = with.front();
    for (int w : with)
      if (std::abs(s.time_index[w] - s.time_index[k]) < std::abs(s.time_index[best] - s.time_index[k])) best = w;
    t[k] = t[best];
  }
}

inline Volume3D single_stack_sda(const SliceStack& s, const std::vector<RigidTransform>& t, double sigma,
                                 const SdaConfig& sda) {
  return sda_reconstruct(std::vector<SliceStack>{s}, std::vector<std::vector<RigidTransform>>{t}, sigma, sda);
}

// Aligns each stack as a rigid body to `target` and returns the pose every
// slice of that stack receives, plus the alignment NCC.
struct StackAlignment {
  RigidTransform transform;
  double ncc = -1.0;
};

inline StackAlignment align_stack_to_volume(const SliceStack& s, const Volume3D& target, const SdaConfig& sda,
                                            double sigma, const RegistrationConfig& reg) {
  const Vec3 c = target.grid.center();
  const Volume3D v = single_stack_sda(s, std::vector<RigidTransform>(s.size(), RigidTransform::identity(c)), sigma,
                                      sda);
  const VolumeRegistration r = register_volume_to_volume(v, target, reg);
  return {r.transform, r.metric};
}

// One rigid perturbation shared by all slices of a stack, about the stack
// center, maximizing the mean slice NCC against the reference.
inline std::vector<RigidTransform> register_stack_rigid(const SliceStack& s, const std::vector<RigidTransform>& init,
                                                        const ReferencePyramid& pyramid,
                                                        const RegistrationConfig& cfg) {
  std::vector<std::size_t> used;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (s.brain_mask[k]) used.push_back(k);
  if (used.empty()) return init;
  std::array<double, 6> x{}, lower{}, upper{};
  for (int c = 0; c < 6; ++c) {
    lower[c] = -cfg.search_bounds[c];
    upper[c] = cfg.search_bounds[c];
  }
  const Vec3 pivot = s.geometry.center;
  double step_rot = cfg.initial_step_rot, step_trans = cfg.initial_step_trans;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const int f = pyramid.factors[l];
    std::vector<SliceLevel> levels;
    for (std::size_t k : used) levels.push_back(slice_level(s.slices[k], s.geometry, k, f));
    auto objective = [&](const std::array<double, 6>& p) {
      std::vector<double> scores(used.size());
      parallel_for(used.size(), [&](std::size_t i) {
        const RigidTransform t = pivot_transform(init[used[i]], p, pivot);
        const Image2D sim = acquire_slice_clean(pyramid.levels[l], t, levels[i].geometry, 0);
        scores[i] = ncc_or_floor(levels[i].pixels, sim.data);
      });
      double m = 0.0;
      for (double v : scores) m += v;
      return m / static_cast<double>(scores.size());
    };
    const bool last = l + 1 == pyramid.levels.size();
    x = coordinate_search(objective, x, lower, upper, step_rot, step_trans,
                          (last ? 1.0 : 8.0) * cfg.convergence_tol_rot, (last ? 1.0 : 8.0) * cfg.convergence_tol_trans,
                          cfg.max_evals / 2);
    step_rot = std::max(0.5 * step_rot, 4.0 * cfg.convergence_tol_rot);
    step_trans = std::max(0.5 * step_trans, 4.0 * cfg.convergence_tol_trans);
  }
  std::vector<RigidTransform> out(init.size());
  for (std::size_t k = 0; k < init.size(); ++k) out[k] = pivot_transform(init[k], x, pivot);
  return out;
}

// Estimator initialization: the stack whose single-stack SDA aligns best to
// the atlas provides the initial reference; the estimator then predicts all
// slice transforms in the atlas frame.
inline std::vector<std::vector<RigidTransform>> estimator_initialization(const std::vector<SliceStack>& stacks,
                                                                         nn::EstimatorParams& params,
                                                                         const Volume3D& atlas,
                                                                         const PipelineConfig& cfg,
                                                                         PipelineResult& res) {
  SdaConfig sda = cfg.sda;
  sda.target_grid = atlas.grid;
  StackAlignment best;
  for (std::size_t s = 0; s < stacks.size(); ++s) {
    const StackAlignment a = align_stack_to_volume(stacks[s], atlas, sda, sda.sigma_first_mm, cfg.registration);
    if (a.ncc > best.ncc) {
      best = a;
      res.initial_reference_stack = static_cast<int>(s);
    }
  }
  const auto& ref_stack = stacks[static_cast<std::size_t>(res.initial_reference_stack)];
  res.initial_reference =
      single_stack_sda(ref_stack, std::vector<RigidTransform>(ref_stack.size(), best.transform), sda.sigma_first_mm, sda);
  nn::ForwardOptions fo;
  fo.n_recurrences = cfg.estimator_recurrences;
  fo.sda = sda;
  const nn::AffirmState st = nn::affirm_forward(stacks, res.initial_reference, params, fo);
  return st.final_transforms();
}

inline PipelineResult run_coarse_to_fine(const std::vector<SliceStack>& stacks, nn::EstimatorParams* estimator,
                                         const Volume3D* atlas, const PipelineConfig& cfg) {
  cfg.validate();
  if (stacks.empty()) throw InvalidInput("run_coarse_to_fine: no stacks");
  PipelineResult res;
  const Grid grid = atlas ? atlas->grid : cfg.srr.grid();
  SdaConfig sda = cfg.sda;
  sda.target_grid = grid;
  const Vec3 center = grid.center();

  std::vector<std::vector<RigidTransform>> t;
  if (estimator) {
    if (!atlas) throw InvalidInput("run_coarse_to_fine: the estimator pass needs an atlas volume");
    t = estimator_initialization(stacks, *estimator, *atlas, cfg, res);
  } else if (cfg.init == InitMode::volume) {
    const Volume3D target =
        atlas ? *atlas
              : single_stack_sda(stacks[0], std::vector<RigidTransform>(stacks[0].size(), RigidTransform::identity(center)),
                                 sda.sigma_first_mm, sda);
    for (const auto& s : stacks) {
      const StackAlignment a = align_stack_to_volume(s, target, sda, sda.sigma_first_mm, cfg.registration);
      t.emplace_back(s.size(), a.transform);
    }
  } else {
    for (const auto& s : stacks) t.emplace_back(s.size(), RigidTransform::identity(center));
  }
  for (std::size_t s = 0; s < stacks.size(); ++s) fill_unregistered(stacks[s], t[s]);
  res.initial_transforms = t;

  for (int outer = 0; outer < cfg.n_outer; ++outer) {
    const Volume3D reference = sda_reconstruct(stacks, t, cfg.reference_sigma_mm, sda);
    const ReferencePyramid pyramid(reference, cfg.registration);
    if (cfg.stack_registration && outer == 0)
      for (std::size_t s = 0; s < stacks.size(); ++s) t[s] = register_stack_rigid(stacks[s], t[s], pyramid, cfg.registration);
    // Slices are registered against the same reference, so the outer
    // iteration is order independent.
    for (std::size_t s = 0; s < stacks.size(); ++s) {
      const auto& st = stacks[s];
      std::vector<RigidTransform> next = t[s];
      parallel_for(st.size(), [&](std::size_t k) {
        if (!st.brain_mask[k]) return;
        next[k] = register_slice_to_volume(st.slices[k], st.geometry, k, pyramid, t[s][k], cfg.registration).transform;
      });
      fill_unregistered(st, next);
      t[s] = std::move(next);
    }
  }

  const Volume3D reference = sda_reconstruct(stacks, t, cfg.reference_sigma_mm, sda);
  if (cfg.reject_outliers) {
    res.keep = reject_outlier_slices(stacks, t, reference, cfg.rejection).keep;
  } else {
    for (const auto& s : stacks) res.keep.emplace_back(s.size(), true);
  }
  if (!cfg.super_resolve) {
    res.volume = reference;
    res.transforms = std::move(t);
    return res;
  }
  SrrConfig srr = cfg.srr;
  srr.target_dims = grid.dims;
  srr.target_spacing_mm = grid.spacing[0];
  srr.target_center = center;
  res.volume = srr_least_squares(stacks, t, res.keep, srr, reference.data).volume;
  res.transforms = std::move(t);
  return res;
}

// Image quality of a reconstruction against ground truth. With `align`, the
// reconstruction is first rigidly registered to the truth: the pipeline
// output lives in whatever frame its initialization chose.
struct QualityReport {
  double ssim = 0.0;
  double nrmse = 0.0;
  RigidTransform alignment;
  Volume3D aligned;
};

inline QualityReport aligned_quality(const Volume3D& recon, const Volume3D& truth, bool align,
                                     const RegistrationConfig& reg = {}) {
  QualityReport q;
  q.alignment = RigidTransform::identity(truth.grid.center());
  if (align) q.alignment = register_volume_to_volume(truth, recon, reg).transform;
  q.aligned = resample(recon, q.alignment, truth.grid);
  q.ssim = ssim(q.aligned, truth);
  q.nrmse = nrmse(q.aligned, truth);
  return q;
}

}  // namespace affirm
