#pragma once

#include "pfo/certificates.hpp"
#include "pfo/density.hpp"
#include "pfo/dynamics.hpp"
#include "pfo/flowmap.hpp"
#include "pfo/inference.hpp"

#include <optional>
#include <vector>

namespace pfo {

// Discrete local model x_{l+1} = A x_l + B du_l + c.
struct LocalModel {
  Mat A, B;
  Vec c;
};

// Central finite-difference linearization of the one-step integrator of the
// given closed-loop field with an additive correction input.
LocalModel linearize_step(const ClosedLoopField& field, const Vec& x_bar, const Vec& u_bar,
                          double t, double dt, int rk4_steps = 1);

struct ContractionMetricSequence {
  std::vector<Mat> P;  // P_0 .. P_{N_r}
  std::vector<Mat> S;  // S_0 .. S_{N_r-1}
};

// Backward Riccati recursion from P_{N_r} = lambda_T Q_{N_r-1}.
ContractionMetricSequence riccati_backward(const std::vector<Mat>& A_nom,
                                           const std::vector<Mat>& B_nom,
                                           const std::vector<Mat>& Q, const std::vector<Mat>& R,
                                           double lambda_T);

struct ComponentPolicy {
  std::vector<Vec> nu;    // feedforward, length N_r
  std::vector<Mat> K;     // gains, length N_r
  std::vector<Vec> mu;    // predicted means, length N_r + 1
  std::vector<Mat> Sigma; // predicted covariances, length N_r + 1
  double cost = 0.0;
  bool line_search_failed = false;
};

// mu+ = A mu + B nu + c ; Sigma+ = (A + BK) Sigma (A + BK)^T + W.
void moment_rollout(ComponentPolicy& policy, const std::vector<LocalModel>& models,
                    const std::vector<Mat>& W, const Vec& mu0, const Mat& Sigma0);

struct OcpWeights {
  double q_m = 1.0;
  double q_sigma = 0.1;
  double lambda_m = 0.1;
  double lambda_sigma = 0.01;
  double rho_nu = 1e-3;
  double rho_K = 1e-3;
  double lambda_T = 1.0;
};

struct ComponentOcp {
  std::vector<LocalModel> models;  // length N_r
  std::vector<Mat> W;              // residual covariances, length N_r
  Vec mu0;
  Mat Sigma0;
  std::vector<Vec> mean_target;    // per stage l = 1..N_r (index 0 unused)
  std::vector<Mat> cov_target;
  std::vector<Vec> x_nom;          // nominal reference, stages 0..N_r
  std::vector<Mat> P;              // contraction metric, stages 0..N_r
  Vec omega;                       // stage weights, length N_r
  OcpWeights weights;
  int max_iterations = 60;
  double rel_tol = 1e-8;
};

double ocp_cost(const ComponentOcp& ocp, const std::vector<Vec>& nu, const std::vector<Mat>& K);

// Block-coordinate descent: exact linear-quadratic solve in nu given K,
// projected gradient with backtracking in K. Cost never increases across
// accepted iterations.
ComponentPolicy solve_component_ocp(const ComponentOcp& ocp,
                                    std::vector<double>* cost_history = nullptr);

// Blended first-step correction du = sum gamma_i (nu_0 + K_0 (x - m_i^f)) over
// the retained components gamma_i >= gamma_min (renormalized).
Vec blend_first_step(const std::vector<ComponentPolicy>& policies, const GaussianMixture& fault_mix,
                     const Vec& x_k, double gamma_min = 1e-3,
                     std::vector<int>* retained = nullptr);

// Push the filtered ensemble over the recovery horizon under the inferred
// fault and the nominal parameter; index l = 0 is the input itself.
std::pair<std::vector<ParticleEnsemble>, std::vector<ParticleEnsemble>>
propagate_recovery_densities(const ParticleEnsemble& filtered, const FlowMapModel& model,
                             const Vec& w_hat, double t_k, int horizon, double dt);

// Lemma-style surrogate bound kappa e^{alpha} W2(filter gap) + delta_1 + eps_f.
double surrogate_bound(const ContractionCertificate& cert, double w2_filter_gap, double eps_f);

// Matched-component GMM approximation error bound:
// sqrt(sum_i beta_i W2^2(component_i, empirical component_i)) via Gaussian W2
// against the responsibility-weighted moments of the ensemble.
double gmm_surrogate_eps(const GaussianMixture& mix, const ParticleEnsemble& ensemble);

// ---------------------------------------------------------------------------
// Full FDIR episode: matched-noise faulted baseline vs recovered run.
// ---------------------------------------------------------------------------
struct EpisodeConfig {
  int horizon_steps = 500;
  double dt = 0.02;
  Vec x0;
  Vec w_true;
  Mat R;                       // measurement noise covariance (h = model.observation)
  int n_particles = 128;
  int recovery_start_step = 50;
  int replan_every = 5;
  int recovery_horizon = 25;   // N_r
  int gmm_components = 3;
  OcpWeights weights;
  double gamma_min = 1e-3;
  double control_limit = 0.0;  // 0 = unsaturated corrections
  int rk4_steps = 1;
  MleConfig mle;               // continuous fault fit settings
  std::uint64_t seed = 0;
  Vec w_hat_override;          // nonempty: skip the online fit and use this estimate
};

struct EpisodeLog {
  std::vector<double> times;
  Mat x_nominal;   // noise-free nominal trajectory
  Mat x_fault;     // faulted, no recovery
  Mat x_recovered; // faulted, with recovery
  Mat u_rec;       // applied corrections (recovered run)
  Vec w_hat;
  double fault_terminal_error = 0.0;
  double fault_mean_error = 0.0;
  double recovered_terminal_error = 0.0;
  double recovered_mean_error = 0.0;
  double terminal_improvement = 0.0;
  double mean_improvement = 0.0;
};

EpisodeLog run_recovery(const SystemModel& model, const FlowMapModel& flow,
                        const EpisodeConfig& config);

}  // namespace pfo
