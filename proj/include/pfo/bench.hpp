#pragma once

#include "pfo/certificates.hpp"
#include "pfo/inference.hpp"
#include "pfo/io.hpp"
#include "pfo/recovery.hpp"
#include "pfo/spacecraft.hpp"

#include <string>
#include <vector>

namespace pfo::bench {

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int horizon_steps = 500;  // 10 s at dt = 0.02
  double dt = 0.02;
  int n_particles = 256;

  // operator training (desk scale)
  std::vector<int> hidden = {64, 64, 64};
  int train_steps = 2500;
  int batch_size = 32;
  double learning_rate = 3e-3;
  int ctr_samples = 8;
  int trajectories_per_fault = 24;
  int steps_per_trajectory = 100;
  std::vector<int> gaps = {1, 5, 25};
  int pairs_per_trajectory = 16;
  double gamma0_scale = 0.05;  // interpolant noise relative to state scale
  double lambda_ep = 1.0, lambda_sg = 0.1, lambda_ctr = 0.1, lambda_cert = 0.01;

  // measurement / inference
  double meas_noise = 1e-2;
  int mle_starts = 8;
  int mle_iterations = 60;

  // recovery episode
  int recovery_start_step = 50;
  int replan_every = 5;
  int recovery_horizon = 25;
  int gmm_components = 3;
  OcpWeights ocp_weights;

  // OOD protocol
  Vec alpha_star = (Vec(4) << 0.15, 0.4, 0.2, 0.25).finished();
  int ood_sweep_count = 25;

  std::string out_dir = ".";
  std::string checkpoint_path;  // required by checkpoint-dependent experiments

  std::string canonical_json() const;
  static ExperimentConfig from_json_string(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);
};

// Nominal profile + single-wheel and combined loss-of-effectiveness faults.
std::vector<FaultProfile> default_library();

// Initial density rho_0 = N(x_nominal(0), 1e-4 I), declared in configs.
ParticleEnsemble sample_initial_density(const SpacecraftParams& params, int n_particles, Rng& rng,
                                        double cov_scale = 1e-4);

std::vector<TrajectoryPair> spacecraft_dataset(const ExperimentConfig& cfg,
                                               const std::vector<FaultProfile>& library);

// Trains the spacecraft checkpoint and writes it to cfg.checkpoint_path.
Checkpoint train_spacecraft(const ExperimentConfig& cfg);

struct ExperimentReport {
  std::string name;
  std::string summary_json;
  bool passed = true;
};

// Named experiments: ood_single | ood_sweep | separation | operator_gap.
// Each writes <name>_summary.json plus CSV plot data under cfg.out_dir and
// evaluates its acceptance thresholds.
ExperimentReport reproduce(const std::string& name, const ExperimentConfig& cfg);

double improvement_factor(double fault_error, double recovered_error);

const char* code_version();

}  // namespace pfo::bench
