#pragma once

#include "pfo/density.hpp"
#include "pfo/dynamics.hpp"
#include "pfo/flowmap.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace pfo {

struct Hypothesis {
  FaultProfile fault;
  ParticleEnsemble ensemble;  // filtered particles under this fault
  double log_weight = 0.0;
};

struct HypothesisBank {
  std::vector<Hypothesis> hypotheses;
  Mat R;  // measurement noise covariance, SPD
  bool uniform_fallback_triggered = false;

  Vec posterior() const;  // normalized weights (simplex)
  void validate() const;
};

enum class PredictMode { true_flow, learned_operator };

struct PredictConfig {
  PredictMode mode = PredictMode::true_flow;
  int rk4_steps = 1;                      // per prediction interval (true-flow mode)
  const FlowMapModel* model = nullptr;    // required in learned-operator mode
};

// Push every hypothesis ensemble from t_k to t_{k+1} under its own fault.
void predict_bank(HypothesisBank& bank, const SystemModel& model, double t_k, double t_k1,
                  const PredictConfig& config);

// log of (sum_i w_i exp(-1/2 ||h(x_i) - y||^2_{R^{-1}})), max-subtracted.
double predictive_log_likelihood(const ParticleEnsemble& ensemble, const Vec& y,
                                 const std::function<Vec(const Vec&)>& h, const Mat& R);
inline double predictive_likelihood(const ParticleEnsemble& ensemble, const Vec& y,
                                    const std::function<Vec(const Vec&)>& h, const Mat& R) {
  return std::exp(predictive_log_likelihood(ensemble, y, h, R));
}

struct UpdateConfig {
  bool resample = true;
  double ess_fraction = 0.5;  // systematic resampling below N_p * fraction
  double jitter = 0.0;        // optional post-resample jitter scale
};

// Bayes update of bank weights and per-hypothesis particle weights from one
// measurement; returns the per-hypothesis log-likelihoods.
Vec update_posterior(HypothesisBank& bank, const Vec& y,
                     const std::function<Vec(const Vec&)>& h, Rng& rng,
                     const UpdateConfig& config = {});

struct ContinuousFaultEstimate {
  Vec w_mle;
  double objective = 0.0;
  std::vector<std::pair<Vec, double>> trace;  // per-start (argmin, value)
};

struct MleConfig {
  int starts = 8;            // Latin-hypercube multistart
  int iterations = 200;      // quasi-Newton iterations per start
  double fd_step = 1e-4;     // central-difference step
  int rk4_steps = 1;         // per measurement interval
  int window = 0;            // 0 = full history, else sliding window length
  std::uint64_t seed = 0;
};

// Projected quasi-Newton MLE of the fault parameter over the box [lo, hi]^p:
// minimizes the rollout residual sum_l 1/2 ||h(x_l(w)) - y_l||^2_{R^{-1}}
// subject to x_{l+1}(w) = Phi^{F_w}(x_l(w)).
ContinuousFaultEstimate fit_continuous_fault(const std::vector<std::pair<double, Vec>>& history,
                                             const SystemModel& model, const Vec& x0,
                                             const Vec& box_lo, const Vec& box_hi, const Mat& R,
                                             const MleConfig& config);

// Objective of the MLE at a given parameter (exposed for diagnostics/tests).
double continuous_fault_objective(const std::vector<std::pair<double, Vec>>& history,
                                  const SystemModel& model, const Vec& x0, const Vec& w,
                                  const Mat& R, int rk4_steps, int window = 0);

// One predicted ensemble per queried fault parameter via the learned operator.
std::vector<ParticleEnsemble> reachable_family(const ParticleEnsemble& ensemble,
                                               const std::vector<Vec>& fault_parameters, double s,
                                               double t, const FlowMapModel& model);

// Systematic resampling; preserves the weighted mean in expectation.
ParticleEnsemble systematic_resample(const ParticleEnsemble& ensemble, Rng& rng,
                                     double jitter = 0.0);
double effective_sample_size(const Vec& weights);

}  // namespace pfo
