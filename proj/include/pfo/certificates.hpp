#pragma once

#include "pfo/density.hpp"
#include "pfo/flowmap.hpp"

#include <optional>
#include <vector>

namespace pfo {

// Empirical contraction certificate. All suprema are sampled extrema over
// rollout-restricted sets; sample_count records how many points backed them.
struct ContractionCertificate {
  double alpha = 0.0;    // contraction rate (per unit of the flow's time)
  double m_lower = 1.0;  // metric lower bound
  double m_upper = 1.0;  // metric upper bound
  double kappa = 1.0;    // sqrt(m_upper / m_lower)
  double d_bar = 0.0;    // sampled sup of the perturbation norm
  double eps_ctr = 0.0;  // sampled sup of ||[R_ctr]_+||_F
  int sample_count = 0;

  double alpha_tilde() const { return alpha + eps_ctr / (2.0 * m_lower); }
  void validate() const;
};

// kappa * d_bar * integral_0^t exp(rate (t - r)) dr in closed form.
double accumulated_bias(double kappa, double d_bar, double rate, double t);

// Theorem-style bound kappa e^{alpha t} W2(mu0, nu0) + delta_t.
double contraction_bound(const ContractionCertificate& cert, double w2_initial, double t);

// Same bound with the residual-adjusted rate alpha_tilde; tau in [0,1].
double approx_ctr_bound(const ContractionCertificate& cert, double w2_initial, double tau);

// Terminal bias delta^w = kappa d_bar int_0^1 exp(alpha_tilde (1-r)) dr.
double terminal_bias(const ContractionCertificate& cert);

struct DetectabilityInputs {
  double psi_bar = 0.0;    // sup ||psi||_F
  double sigma_bar = 0.0;  // sup ||Sigma||_F
  double s_bar = 0.0;      // sup score difference
  double delta_w = 0.0;    // sup fault parameter gap
  ContractionCertificate cert;  // provides (alpha, kappa) for the pair
};

struct DetectabilityResult {
  double d_bar = 0.0;   // psi_bar * delta_w + sigma_bar * s_bar / 2
  double upper_bound = 0.0;
  bool identifiable_possible = false;  // eps <= upper_bound (necessary condition)
};

DetectabilityResult detectability_certificate(const DetectabilityInputs& inputs, double T,
                                              double eps);

// Gaussian-approximation score gap: fit a Gaussian per ensemble and time step,
// score s(x) = -Sigma^{-1}(x - mu), return the max over the grid of the
// sampled sup of ||s_j - s_i|| over the pooled particles.
double estimate_score_gap(const std::vector<ParticleEnsemble>& ensembles_i,
                          const std::vector<ParticleEnsemble>& ensembles_j,
                          double floor_scale = 1e-8, bool* regularized = nullptr);

// omega_lower^{-1/2} sqrt(E_ep).
double fmm_residual_bound(double endpoint_residual_integral, double omega_lower);

// Held-out comparison point for the d_bar gap: the true (or surrogate)
// auxiliary field value at (x, tau).
struct FieldGapSample {
  Vec x;
  double tau = 0.0;
  Vec b_true;
};

// Sampled extrema over the batch: eps_ctr and the metric eigenvalue range,
// plus the field gap sup over the supplied held-out samples.
ContractionCertificate measure_certificate(const MetricModel& metric, const FlowMapModel& model,
                                           const std::vector<Vec>& sample_points,
                                           const Vec& sample_taus, const OperatorCond& cond,
                                           const std::vector<FieldGapSample>& field_gap_samples);

// Declared surrogate for the true auxiliary field on systems without an
// analytic flow: k-NN regression of the one-step empirical transport velocity
// (x_t - x_s)/(t - s) against interpolant positions on a held-out set.
std::vector<FieldGapSample> surrogate_field_gap_samples(
    const std::vector<TrajectoryPair>& heldout, const std::vector<double>& tau_grid,
    int k_neighbors);

}  // namespace pfo
