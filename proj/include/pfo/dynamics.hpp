#pragma once

#include "pfo/common.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace pfo {

// Closed-loop control-affine fault system
//   xdot = f(x,t) + g(x,t) (u_cl(x,t) + u_rec(x,t)) + psi(x,t) w.
struct SystemModel {
  int state_dim = 0;    // n
  int control_dim = 0;  // m
  int fault_dim = 0;    // p
  int noise_dim = 0;    // q
  int obs_dim = 0;      // n_y

  std::function<Vec(const Vec&, double)> drift;             // f : R^n x t -> R^n
  std::function<Mat(const Vec&, double)> control_gain;      // g : -> n x m
  std::function<Mat(const Vec&, double)> fault_channel;     // psi : -> n x p
  std::function<Mat(const Vec&, double)> diffusion;         // sigma : -> n x q
  std::function<Vec(const Vec&, double)> nominal_feedback;  // u_cl : -> R^m
  std::function<Vec(const Vec&)> observation;               // h : R^n -> R^{n_y}

  void check_dims() const;
};

struct FaultProfile {
  Vec w;                      // fault parameters, benchmark: componentwise in [0,1]
  std::optional<int> label;   // library index, if any

  static FaultProfile nominal(int p) { return {Vec::Zero(p), 0}; }
  bool is_nominal(double tol = 0.0) const { return w.lpNorm<Eigen::Infinity>() <= tol; }
};

struct ClosedLoopField {
  SystemModel base;
  FaultProfile fault;
  std::function<Vec(const Vec&, double)> recovery_correction;  // optional, R^m

  std::function<Vec(const Vec&, double)> as_field() const;
};

Vec eval_closed_loop(const ClosedLoopField& field, const Vec& x, double t);

// One Euler-Maruyama step x + F_w dt + sigma(x,t) sqrt(dt) z, z ~ N(0, I_q).
Vec step_sde(const ClosedLoopField& field, const Vec& x, double t, double dt, Rng& rng);

// RK4 integration of a deterministic field from s to t.
Vec flow_map(const std::function<Vec(const Vec&, double)>& field, const Vec& x, double s,
             double t, int steps);

// Probability-flow field v_w = F_w - (1/2)[(div Sigma) + Sigma s(x,t)].
struct ProbabilityFlowField {
  ClosedLoopField closed_loop;
  std::function<Vec(const Vec&, double)> score_estimator;  // s(x,t) = grad log rho
  std::function<Vec(const Vec&, double)> divergence_of_sigma;  // row-wise div of Sigma; empty => 0
};

Vec probability_flow_field(const ProbabilityFlowField& pf, const Vec& x, double t);

struct TrajectoryPair {
  Vec x_s, x_t;
  double s = 0.0, t = 0.0;
  Vec w;
  std::uint64_t seed = 0;
};

struct DatasetConfig {
  std::function<Vec(Rng&)> initial_sampler;
  int trajectories_per_fault = 64;
  int steps_per_trajectory = 100;
  double dt = 0.02;
  int substeps = 1;                  // EM substeps per dt
  std::vector<int> gaps = {1};      // pair gaps, in steps
  int pairs_per_trajectory = 8;
  std::uint64_t seed = 0;
};

// Seeded SDE rollouts under every library fault; pairs (x_s, x_t, s, t, w).
// Stream index = (fault, trajectory) so results are worker-count independent.
std::vector<TrajectoryPair> generate_dataset(const SystemModel& model,
                                             const std::vector<FaultProfile>& library,
                                             const DatasetConfig& config);

// Linear test system xdot = A x + I u + I w + sigma dW with u_cl = 0.
// Shared by unit tests and the affine certification testbeds.
SystemModel make_linear_system(const Mat& A, const Mat& sigma_const);

}  // namespace pfo
