#pragma once

#include "pfo/autodiff.hpp"
#include "pfo/density.hpp"
#include "pfo/dynamics.hpp"

#include <array>
#include <functional>
#include <vector>

namespace pfo {

// Interpolant schedule with the standard endpoint conditions
// alpha_0 = 1, alpha_1 = 0, beta_0 = 0, beta_1 = 1, gamma_0 = gamma_1 = 0.
struct InterpolantSchedule {
  std::function<double(double)> alpha, dalpha;
  std::function<double(double)> beta, dbeta;
  std::function<double(double)> gamma, dgamma;

  static InterpolantSchedule linear(double gamma0);
  void validate() const;
};

// I_tau = alpha x_s + beta x_t + gamma z and its pathwise velocity.
std::pair<Vec, Vec> sample_interpolant(const TrajectoryPair& pair, double tau, const Vec& z,
                                       const InterpolantSchedule& schedule);

// Conditioning of the two-time map on the physical window and fault parameter.
struct OperatorCond {
  double s = 0.0;
  double t = 0.0;
  Vec w;
};

// Learned fault-conditioned two-time flow map
//   Phi_{tau0,tau1}(x) = x + (tau1 - tau0) * scale .* Delta(x, tau0, tau1, s, t, w),
// so Phi_{tau,tau} = id holds exactly for all parameters.
struct FlowMapModel {
  int n = 0;  // state dim
  int p = 0;  // fault dim
  ad::MlpParams net;
  Vec x_shift, x_scale;  // input normalization; scale also multiplies the output
  double t_ref = 1.0, gap_ref = 1.0;

  static FlowMapModel create(int n, int p, const std::vector<int>& hidden, Rng& rng);

  Mat features(const Mat& X, const Vec& tau0, const Vec& tau1, const Mat& conds) const;
  // conds: B x (p+2) rows of (s, t, w...)
  Mat phi_batch(const Mat& X, const Vec& tau0, const Vec& tau1, const Mat& conds,
                Mat* dphi_dtau1 = nullptr) const;

  Vec phi(const Vec& x, double tau0, double tau1, const OperatorCond& c) const;
  Vec dphi_dtau1(const Vec& x, double tau0, double tau1, const OperatorCond& c) const;
  // Induced velocity b_tau(x) = dPhi_{tau0,tau1}/dtau1 at tau1 = tau0 = tau.
  Vec induced_velocity(const Vec& x, double tau, const OperatorCond& c) const;
  // State Jacobian of the induced velocity (via forward-mode passes).
  Mat induced_velocity_jacobian(const Vec& x, double tau, const OperatorCond& c) const;

  static Mat cond_rows(const OperatorCond& c, int count);
};

// Contraction-metric network: M = Theta^T Theta with Theta lower-triangular,
// softplus-plus-floor diagonal; rate alpha(w) affine in the fault parameter.
struct MetricModel {
  int n = 0;
  int p = 0;
  ad::MlpParams theta_net;  // in = n + 1 + p, out = n(n+1)/2
  Mat alpha_coef;           // 1 x (p+1): alpha(w) = a0 + a . w
  double diag_floor = 0.05;
  Vec x_shift, x_scale;  // shares the flow model normalization

  static MetricModel create(int n, int p, const std::vector<int>& hidden, Rng& rng);

  Mat theta_factor(const Vec& x, double tau, const Vec& w) const;
  Mat metric(const Vec& x, double tau, const Vec& w) const;  // M(x, tau, w)
  double alpha(const Vec& w) const;
};

// Contraction residual Mdot + (Db)^T M + M Db - 2 alpha M along the learned flow,
// with Mdot = dM/dtau + directional derivative of M along b.
Mat contraction_residual(const MetricModel& metric, const FlowMapModel& model, const Vec& x,
                         double tau, const OperatorCond& cond);
// Same formula from explicitly supplied pieces; doubles as the test oracle hook.
Mat contraction_residual_terms(const Mat& M_dot, const Mat& M, const Mat& Db, double alpha);

struct TrainConfig {
  double lambda_ep = 1.0;
  double lambda_sg = 0.1;
  double lambda_ctr = 0.1;
  double lambda_cert = 0.01;
  double c_alpha = 1.0;
  double c_kappa = 0.1;
  double omega0_lower = 1.0;  // uniform omega_0 on [0,1]
  int batch_size = 32;
  int steps = 2000;
  int ctr_samples = 8;  // contraction-loss subsample per step
  double learning_rate = 3e-3;
  std::uint64_t seed = 0;
  int log_every = 50;

  void validate() const;
};

// One pre-sampled batch: pairs plus all randomness the losses consume, so a
// loss value is a pure function of (parameters, batch).
struct SampledBatch {
  std::vector<TrajectoryPair> pairs;
  Vec tau0, tau1;   // FMM triangle samples
  Mat z_fmm;
  Vec r_ep;
  Mat z_ep;
  Vec sg0, sg1, sg2;  // ordered triples
  Mat z_sg;
  std::vector<int> ctr_index;  // indices into pairs
  Vec ctr_tau;
  Mat z_ctr;

  int size() const { return static_cast<int>(pairs.size()); }
};

SampledBatch sample_batch(const std::vector<TrajectoryPair>& data, const std::vector<int>& indices,
                          int ctr_samples, Rng& rng, int state_dim);

// Value-only flow interface used by the loss formulas; lets tests plug in
// analytic maps beside the learned model.
struct FlowMapLike {
  std::function<Vec(const Vec&, double, double, const OperatorCond&)> phi;
  std::function<Vec(const Vec&, double, double, const OperatorCond&)> dphi_dtau1;
};
FlowMapLike as_flow_like(const FlowMapModel& model);

double loss_fmm(const FlowMapLike& flow, const SampledBatch& batch,
                const InterpolantSchedule& schedule);
double loss_endpoint(const FlowMapLike& flow, const SampledBatch& batch,
                     const InterpolantSchedule& schedule, double omega0_lower = 1.0,
                     double* unweighted_residual_integral = nullptr);
double loss_semigroup(const FlowMapLike& flow, const SampledBatch& batch,
                      const InterpolantSchedule& schedule);
double loss_contraction(const MetricModel& metric, const FlowMapModel& model,
                        const SampledBatch& batch, const InterpolantSchedule& schedule);
double loss_certificate(const MetricModel& metric, const FlowMapModel& model,
                        const SampledBatch& batch, const InterpolantSchedule& schedule,
                        double c_alpha, double c_kappa);

struct LossValues {
  double fmm = 0.0, ep = 0.0, sg = 0.0, ctr = 0.0, cert = 0.0;
  double ep_unweighted = 0.0;
  double weighted_total(const TrainConfig& c) const {
    return fmm + c.lambda_ep * ep + c.lambda_sg * sg + c.lambda_ctr * ctr + c.lambda_cert * cert;
  }
};

// Tape-backed evaluation of all five losses; term_weights scales each term in
// the total whose gradient is returned (FD checks use unit vectors here).
LossValues eval_losses(const FlowMapModel& model, const MetricModel& metric,
                       const SampledBatch& batch, const InterpolantSchedule& schedule,
                       const TrainConfig& config,
                       const std::array<double, 5>& term_weights = {1, 1, 1, 1, 1},
                       Vec* grad = nullptr);

Vec flatten_joint(const FlowMapModel& model, const MetricModel& metric);
void unflatten_joint(FlowMapModel& model, MetricModel& metric, const Vec& theta);

struct TrainHistoryEntry {
  int step = 0;
  LossValues losses;
};

struct TrainResult {
  FlowMapModel model;
  MetricModel metric;
  std::vector<TrainHistoryEntry> history;
  bool aborted_on_nan = false;
};

TrainResult train(FlowMapModel model, MetricModel metric,
                  const std::vector<TrajectoryPair>& dataset, const InterpolantSchedule& schedule,
                  const TrainConfig& config);

// Pushforward of an ensemble through the learned terminal map Phi_{0,1}.
ParticleEnsemble apply_operator(const FlowMapModel& model, const ParticleEnsemble& ensemble,
                                double s, double t, const Vec& w);

}  // namespace pfo
