// affirm: command-line front end. Flags override manifest values, which
// override built-in defaults; see README.md for the manifest keys.

#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <string>

#include "affirm/cli.hpp"

namespace {

using affirm::cli::json;

struct Flag {
  const char* name;
  const char* pointer;
  const char* help;
};

const Flag kGrid[] = {
    {"--grid-dims", "/phantom/grid_dims", "reconstruction/phantom grid size, JSON array"},
    {"--spacing", "/phantom/spacing_mm", "isotropic voxel spacing in mm"},
    {"--feature-seed", "/phantom/feature_seed", "phantom feature seed"},
};

const Flag kSimulate[] = {
    {"--motion", "/motion", "motion preset: none|small|standard|large"},
    {"--n-slices", "/acquisition/n_slices", "slices per stack"},
    {"--thickness", "/acquisition/thickness_mm", "slice thickness in mm"},
    {"--psf-sigma", "/acquisition/psf_sigma_mm", "through-plane PSF sigma in mm"},
    {"--interleaved", "/acquisition/interleaved", "interleaved slice order (true|false)"},
    {"--noise", "/acquisition/noise_sigma", "Gaussian noise sigma (fraction of the intensity range)"},
    {"--phantom-scale", "/phantom/scale", "isotropic phantom scale"},
    {"--slice-interval", "/trajectory/slice_interval_s", "seconds between slice acquisitions"},
};

const Flag kReconstruct[] = {
    {"--stacks", "/inputs/stacks", "stack directory (one stack, or a parent of stack directories)"},
    {"--method", "/reconstruction/method", "sda|srr"},
    {"--transforms", "/reconstruction/transforms", "slice transforms to use: est|true"},
    {"--sigma", "/reconstruction/sda_sigma_mm", "SDA Gaussian sigma in mm"},
    {"--weight", "/reconstruction/regularization_weight", "SRR Laplacian weight"},
    {"--cg-iterations", "/reconstruction/max_cg_iterations", "SRR conjugate-gradient iterations"},
};

const Flag kRegister[] = {
    {"--stacks", "/inputs/stacks", "stack directory"},
    {"--coarse", "/pipeline/coarse", "coarse stage: affirm|none"},
    {"--init", "/pipeline/init", "initialization without the estimator: identity|volume"},
    {"--checkpoint", "/inputs/checkpoint", "estimator checkpoint (needed by --coarse affirm)"},
    {"--atlas", "/inputs/atlas", "atlas volume (.raw); default: the manifest phantom"},
    {"--n-outer", "/pipeline/n_outer", "outer registration/refresh iterations"},
    {"--stack-registration", "/pipeline/stack_registration", "rigid per-stack step (true|false)"},
    {"--reject-outliers", "/pipeline/reject_outliers", "slice outlier rejection (true|false)"},
    {"--recurrences", "/pipeline/estimator_recurrences", "estimator recurrences at inference"},
    {"--sigma", "/reconstruction/sda_sigma_mm", "reference SDA sigma in mm"},
};

const Flag kPipelineExtra[] = {
    {"--truth", "/inputs/truth", "ground-truth volume (.raw) for SSIM/NRMSE"},
    {"--align", "/pipeline/align_to_truth", "rigidly align the result to the truth first (true|false)"},
    {"--weight", "/reconstruction/regularization_weight", "SRR Laplacian weight"},
    {"--cg-iterations", "/reconstruction/max_cg_iterations", "SRR conjugate-gradient iterations"},
};

const Flag kEvaluate[] = {
    {"--volume", "/inputs/volume", "volume to score (.raw)"},
    {"--reference", "/inputs/reference", "ground-truth volume (.raw)"},
    {"--stacks", "/inputs/stacks", "stacks with estimated and true transforms"},
    {"--align", "/pipeline/align_to_truth", "rigidly align the volume first (true|false)"},
};

const Flag kTrain[] = {
    {"--epochs", "/training/epochs", "training epochs"},
    {"--sets", "/training/sets_per_epoch", "simulated training sets per epoch"},
    {"--val-sets", "/training/validation_sets", "validation sets"},
    {"--lr", "/training/lr", "initial learning rate"},
    {"--recurrences", "/training/recurrences", "recurrences"},
    {"--fusion", "/training/use_fusion", "affinity fusion (true|false)"},
    {"--vary-features", "/training/vary_features", "fresh phantom features per set (true|false)"},
    {"--resume", "/inputs/resume", "resume from a checkpoint written by train-toy"},
};

struct Sub {
  CLI::App* app = nullptr;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
};

template <std::size_t N>
void add_flags(Sub& s, const Flag (&flags)[N], const json& defaults) {
  for (const Flag& f : flags) {
    if (s.options.count(f.pointer)) continue;
    const std::string help =
        std::string(f.help) + " [default: " + defaults.at(json::json_pointer(f.pointer)).dump() + "]";
    s.options[f.pointer] = s.app->add_option(f.name, s.values[f.pointer], help);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"affirm: motion-corrected volume reconstruction from simulated thick-slice stacks"};
  app.require_subcommand(1);
  const json defaults = affirm::cli::to_json(affirm::cli::ExperimentManifest{});

  std::string out, manifest;
  int threads = 1;
  std::string seed;

  std::map<std::string, Sub> subs;
  const std::map<std::string, std::string> about{
      {"simulate", "simulate a phantom and three orthogonal moving stacks"},
      {"reconstruct", "reconstruct a volume from stacks (SDA or SRR)"},
      {"register", "estimate slice transforms (optional estimator pass, then SVR)"},
      {"train-toy", "train the toy estimator"},
      {"evaluate", "score a volume and/or estimated slice transforms"},
      {"pipeline", "full correction: estimator (optional), SVR, rejection, SRR, metrics"}};
  for (const auto& [name, help] : about) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.app->add_option("--out", out, "output directory")->required();
    s.app->add_option("--manifest", manifest, "experiment manifest (JSON)");
    s.app->add_option("--threads", threads, "worker threads [default: 1]")->check(CLI::PositiveNumber);
    s.options["/seed"] = s.app->add_option("--seed", s.values["/seed"], "RNG seed [default: 1]");
  }
  add_flags(subs["simulate"], kSimulate, defaults);
  add_flags(subs["reconstruct"], kReconstruct, defaults);
  add_flags(subs["register"], kRegister, defaults);
  add_flags(subs["pipeline"], kRegister, defaults);
  add_flags(subs["pipeline"], kPipelineExtra, defaults);
  add_flags(subs["evaluate"], kEvaluate, defaults);
  add_flags(subs["train-toy"], kTrain, defaults);
  for (auto& [name, s] : subs) add_flags(s, kGrid, defaults);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& [name, s] : subs) {
    if (!s.app->parsed()) continue;
    std::map<std::string, std::string> overrides;
    for (const auto& [ptr, opt] : s.options)
      if (opt->count() > 0) overrides[ptr] = s.values[ptr];
    affirm::set_num_threads(threads);
    affirm::cli::ExperimentManifest m;
    try {
      m = affirm::cli::resolve_manifest(name, manifest, overrides);
    } catch (const affirm::InvalidInput& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
    return affirm::cli::run_command(m, out, std::cout, std::cerr);
  }
  return 2;
}
