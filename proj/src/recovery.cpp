#include "pfo/recovery.hpp"

#include "pfo/inference.hpp"
#include "pfo/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pfo {

LocalModel linearize_step(const ClosedLoopField& field, const Vec& x_bar, const Vec& u_bar,
                          double t, double dt, int rk4_steps) {
  const int n = field.base.state_dim;
  const int m = field.base.control_dim;
  auto step = [&](const Vec& x, const Vec& du) {
    ClosedLoopField f = field;
    f.recovery_correction = [du](const Vec&, double) { return du; };
    return flow_map(f.as_field(), x, t, t + dt, rk4_steps);
  };
  const double hx = 1e-5 * std::max(1.0, x_bar.cwiseAbs().maxCoeff());
  const double hu = 1e-5 * std::max(1.0, u_bar.cwiseAbs().maxCoeff());
  LocalModel lm;
  lm.A.resize(n, n);
  lm.B.resize(n, m);
  for (int k = 0; k < n; ++k) {
    Vec xp = x_bar, xm = x_bar;
    xp[k] += hx;
    xm[k] -= hx;
    lm.A.col(k) = (step(xp, u_bar) - step(xm, u_bar)) / (2.0 * hx);
  }
  for (int k = 0; k < m; ++k) {
    Vec up = u_bar, um = u_bar;
    up[k] += hu;
    um[k] -= hu;
    lm.B.col(k) = (step(x_bar, up) - step(x_bar, um)) / (2.0 * hu);
  }
  lm.c = step(x_bar, u_bar) - lm.A * x_bar - lm.B * u_bar;
  return lm;
}

ContractionMetricSequence riccati_backward(const std::vector<Mat>& A_nom,
                                           const std::vector<Mat>& B_nom,
                                           const std::vector<Mat>& Q, const std::vector<Mat>& R,
                                           double lambda_T) {
  const size_t N = A_nom.size();
  if (N == 0 || B_nom.size() != N || Q.size() != N || R.size() != N)
    throw ArgumentError("riccati_backward: sequence length mismatch");
  ContractionMetricSequence seq;
  seq.P.resize(N + 1);
  seq.S.resize(N);
  seq.P[N] = lambda_T * Q[N - 1];
  for (size_t l = N; l-- > 0;) {
    const Mat& A = A_nom[l];
    const Mat& B = B_nom[l];
    Mat S = R[l] + B.transpose() * seq.P[l + 1] * B;
    S = sym(S);
    Eigen::LLT<Mat> llt(S);
    if (llt.info() != Eigen::Success)
      throw NumericError("riccati_backward: S_l not SPD (check R_l)");
    seq.S[l] = S;
    Mat PA = seq.P[l + 1] * A;
    Mat BtPA = B.transpose() * PA;
    Mat P = Q[l] + A.transpose() * PA - BtPA.transpose() * llt.solve(BtPA);
    P = sym(P);
    if (min_eigenvalue(P) < -1e-10)
      throw NumericError("riccati_backward: P_l lost positive semidefiniteness");
    seq.P[l] = clip_psd(P);
  }
  return seq;
}

void moment_rollout(ComponentPolicy& policy, const std::vector<LocalModel>& models,
                    const std::vector<Mat>& W, const Vec& mu0, const Mat& Sigma0) {
  const size_t N = models.size();
  if (policy.nu.size() != N || policy.K.size() != N)
    throw ArgumentError("moment_rollout: policy length mismatch");
  policy.mu.assign(N + 1, Vec());
  policy.Sigma.assign(N + 1, Mat());
  policy.mu[0] = mu0;
  policy.Sigma[0] = clip_psd(Sigma0);
  for (size_t l = 0; l < N; ++l) {
    const auto& md = models[l];
    policy.mu[l + 1] = md.A * policy.mu[l] + md.B * policy.nu[l] + md.c;
    Mat C = md.A + md.B * policy.K[l];
    policy.Sigma[l + 1] = sym(C * policy.Sigma[l] * C.transpose() + W[l]);
  }
}

namespace {

int horizon_of(const ComponentOcp& ocp) { return static_cast<int>(ocp.models.size()); }

void check_ocp(const ComponentOcp& ocp) {
  const size_t N = ocp.models.size();
  if (N == 0) throw ArgumentError("ComponentOcp: empty horizon");
  if (ocp.W.size() != N || ocp.mean_target.size() != N + 1 || ocp.cov_target.size() != N + 1 ||
      ocp.x_nom.size() != N + 1 || ocp.P.size() != N + 1 ||
      ocp.omega.size() != static_cast<Eigen::Index>(N))
    throw ArgumentError("ComponentOcp: sequence length mismatch");
}

struct Moments {
  std::vector<Vec> mu;
  std::vector<Mat> Sigma;
};

Moments roll_moments(const ComponentOcp& ocp, const std::vector<Vec>& nu,
                     const std::vector<Mat>& K) {
  const size_t N = ocp.models.size();
  Moments m;
  m.mu.assign(N + 1, Vec());
  m.Sigma.assign(N + 1, Mat());
  m.mu[0] = ocp.mu0;
  m.Sigma[0] = sym(ocp.Sigma0);
  for (size_t l = 0; l < N; ++l) {
    const auto& md = ocp.models[l];
    m.mu[l + 1] = md.A * m.mu[l] + md.B * nu[l] + md.c;
    Mat C = md.A + md.B * K[l];
    m.Sigma[l + 1] = sym(C * m.Sigma[l] * C.transpose() + ocp.W[l]);
  }
  return m;
}

}  // namespace

double ocp_cost(const ComponentOcp& ocp, const std::vector<Vec>& nu, const std::vector<Mat>& K) {
  check_ocp(ocp);
  const size_t N = ocp.models.size();
  Moments m = roll_moments(ocp, nu, K);
  const auto& w = ocp.weights;
  double J = 0.0;
  for (size_t l = 0; l < N; ++l) {
    const Vec& mu1 = m.mu[l + 1];
    const Mat& S1 = m.Sigma[l + 1];
    Vec dm = mu1 - ocp.mean_target[l + 1];
    Vec dn = mu1 - ocp.x_nom[l + 1];
    Mat dS = S1 - ocp.cov_target[l + 1];
    double trk = w.q_m * dm.squaredNorm() + w.q_sigma * dS.squaredNorm() +
                 w.lambda_m * dn.dot(ocp.P[l + 1] * dn) +
                 w.lambda_sigma * (ocp.P[l + 1] * S1).trace();
    J += ocp.omega[static_cast<Eigen::Index>(l)] * trk + w.rho_nu * nu[l].squaredNorm() +
         w.rho_K * K[l].squaredNorm();
  }
  return J;
}

namespace {

// Exact nu-block solve: the mean path is affine in nu, so the nu subproblem is
// a linear-quadratic tracking problem solved by its normal equations.
void solve_nu_block(const ComponentOcp& ocp, const std::vector<Mat>& K, std::vector<Vec>& nu) {
  const int N = horizon_of(ocp);
  const int n = static_cast<int>(ocp.mu0.size());
  const int mdim = static_cast<int>(ocp.models[0].B.cols());
  const auto& w = ocp.weights;

  // base path with nu = 0 and per-stage sensitivities S_j(l+1) = dmu_{l+1}/dnu_j
  std::vector<Vec> base(static_cast<size_t>(N) + 1);
  base[0] = ocp.mu0;
  for (int l = 0; l < N; ++l)
    base[static_cast<size_t>(l) + 1] =
        ocp.models[static_cast<size_t>(l)].A * base[static_cast<size_t>(l)] +
        ocp.models[static_cast<size_t>(l)].c;

  Mat G = Mat::Zero(N * mdim, N * mdim);
  Vec rhs = Vec::Zero(N * mdim);
  for (int j = 0; j < N; ++j)
    G.block(j * mdim, j * mdim, mdim, mdim) += w.rho_nu * Mat::Identity(mdim, mdim);

  // sens[j] holds dmu_{l+1}/dnu_j as we advance l
  std::vector<Mat> sens(static_cast<size_t>(N));
  for (int l = 0; l < N; ++l) {
    const auto& md = ocp.models[static_cast<size_t>(l)];
    for (int j = 0; j < l; ++j) sens[static_cast<size_t>(j)] = md.A * sens[static_cast<size_t>(j)];
    sens[static_cast<size_t>(l)] = md.B;

    double om = ocp.omega[l];
    Mat Qstage = om * (w.q_m * Mat::Identity(n, n) + w.lambda_m * ocp.P[static_cast<size_t>(l) + 1]);
    Vec target_term = om * (w.q_m * ocp.mean_target[static_cast<size_t>(l) + 1] +
                            w.lambda_m * ocp.P[static_cast<size_t>(l) + 1] * ocp.x_nom[static_cast<size_t>(l) + 1]);
    Vec resid = Qstage * base[static_cast<size_t>(l) + 1] - target_term;
    for (int j = 0; j <= l; ++j) {
      const Mat& Sj = sens[static_cast<size_t>(j)];
      rhs.segment(j * mdim, mdim) -= Sj.transpose() * resid;
      for (int k2 = 0; k2 <= l; ++k2)
        G.block(j * mdim, k2 * mdim, mdim, mdim) +=
            Sj.transpose() * Qstage * sens[static_cast<size_t>(k2)];
    }
  }
  Vec sol = G.ldlt().solve(rhs);
  nu.assign(static_cast<size_t>(N), Vec::Zero(mdim));
  for (int j = 0; j < N; ++j) nu[static_cast<size_t>(j)] = sol.segment(j * mdim, mdim);
}

// Adjoint gradient of the covariance-dependent part of J w.r.t. the gains.
std::vector<Mat> gain_gradient(const ComponentOcp& ocp, const std::vector<Vec>& nu,
                               const std::vector<Mat>& K) {
  const int N = horizon_of(ocp);
  const auto& w = ocp.weights;
  Moments m = roll_moments(ocp, nu, K);
  std::vector<Mat> grad(static_cast<size_t>(N));
  std::vector<Mat> C(static_cast<size_t>(N));
  for (int l = 0; l < N; ++l)
    C[static_cast<size_t>(l)] = ocp.models[static_cast<size_t>(l)].A +
                                ocp.models[static_cast<size_t>(l)].B * K[static_cast<size_t>(l)];

  // G_l = dJ/dSigma_l accumulated from stage costs and downstream recursion
  Mat G = Mat::Zero(ocp.mu0.size(), ocp.mu0.size());
  for (int l = N; l-- > 0;) {
    double om = ocp.omega[l];
    Mat stage = om * (2.0 * w.q_sigma * (m.Sigma[static_cast<size_t>(l) + 1] -
                                         ocp.cov_target[static_cast<size_t>(l) + 1]) +
                      w.lambda_sigma * ocp.P[static_cast<size_t>(l) + 1]);
    Mat Gl1 = (l + 1 < N) ? Mat(sym(stage + G)) : Mat(sym(stage));
    grad[static_cast<size_t>(l)] =
        2.0 * ocp.models[static_cast<size_t>(l)].B.transpose() * Gl1 * C[static_cast<size_t>(l)] *
            m.Sigma[static_cast<size_t>(l)] +
        2.0 * w.rho_K * K[static_cast<size_t>(l)];
    G = C[static_cast<size_t>(l)].transpose() * Gl1 * C[static_cast<size_t>(l)];
  }
  return grad;
}

}  // namespace

ComponentPolicy solve_component_ocp(const ComponentOcp& ocp, std::vector<double>* cost_history) {
  check_ocp(ocp);
  const int N = horizon_of(ocp);
  const int mdim = static_cast<int>(ocp.models[0].B.cols());
  const int n = static_cast<int>(ocp.mu0.size());

  ComponentPolicy pol;
  pol.nu.assign(static_cast<size_t>(N), Vec::Zero(mdim));
  pol.K.assign(static_cast<size_t>(N), Mat::Zero(mdim, n));

  double J = ocp_cost(ocp, pol.nu, pol.K);
  if (cost_history) cost_history->push_back(J);

  for (int it = 0; it < ocp.max_iterations; ++it) {
    // exact nu block
    std::vector<Vec> nu_new;
    solve_nu_block(ocp, pol.K, nu_new);
    double J_nu = ocp_cost(ocp, nu_new, pol.K);
    if (J_nu <= J) {
      pol.nu = std::move(nu_new);
      J = J_nu;
    }

    // gain block: one backtracking gradient step
    std::vector<Mat> g = gain_gradient(ocp, pol.nu, pol.K);
    double gnorm2 = 0.0;
    for (const auto& gi : g) gnorm2 += gi.squaredNorm();
    double step = 1.0;
    bool accepted = false;
    if (gnorm2 > 0.0) {
      for (int ls = 0; ls < 40; ++ls) {
        std::vector<Mat> K_new(pol.K.size());
        for (size_t l = 0; l < pol.K.size(); ++l) K_new[l] = pol.K[l] - step * g[l];
        double J_new = ocp_cost(ocp, pol.nu, K_new);
        if (J_new < J) {
          pol.K = std::move(K_new);
          J = J_new;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted && gnorm2 > 1e-16) pol.line_search_failed = true;
    }
    if (cost_history) cost_history->push_back(J);

    double prev = cost_history && cost_history->size() >= 3
                      ? (*cost_history)[cost_history->size() - 3]
                      : std::numeric_limits<double>::infinity();
    if (std::isfinite(prev) && prev - J <= ocp.rel_tol * (1.0 + std::abs(J))) break;
  }

  moment_rollout(pol, ocp.models, ocp.W, ocp.mu0, ocp.Sigma0);
  pol.cost = J;
  return pol;
}

Vec blend_first_step(const std::vector<ComponentPolicy>& policies, const GaussianMixture& fault_mix,
                     const Vec& x_k, double gamma_min, std::vector<int>* retained_out) {
  if (policies.size() != static_cast<size_t>(fault_mix.components()))
    throw ArgumentError("blend_first_step: one policy per mixture component required");
  Vec gamma = fault_mix.responsibilities(x_k);
  std::vector<int> retained;
  for (int i = 0; i < fault_mix.components(); ++i)
    if (gamma[i] >= gamma_min && !policies[static_cast<size_t>(i)].nu.empty()) retained.push_back(i);
  if (retained.empty()) {
    int best = 0;
    gamma.maxCoeff(&best);
    if (policies[static_cast<size_t>(best)].nu.empty())
      throw ArgumentError("blend_first_step: no usable policy");
    retained.push_back(best);
  }
  double mass = 0.0;
  for (int i : retained) mass += gamma[i];
  Vec du = Vec::Zero(policies[static_cast<size_t>(retained[0])].nu[0].size());
  for (int i : retained) {
    const auto& pol = policies[static_cast<size_t>(i)];
    double gbar = gamma[i] / mass;
    du += gbar * (pol.nu[0] + pol.K[0] * (x_k - fault_mix.means[static_cast<size_t>(i)]));
  }
  if (retained_out) *retained_out = retained;
  return du;
}

std::pair<std::vector<ParticleEnsemble>, std::vector<ParticleEnsemble>>
propagate_recovery_densities(const ParticleEnsemble& filtered, const FlowMapModel& model,
                             const Vec& w_hat, double t_k, int horizon, double dt) {
  if (horizon < 1) throw ArgumentError("propagate_recovery_densities: horizon must be >= 1");
  Vec w0 = Vec::Zero(w_hat.size());
  std::vector<ParticleEnsemble> fault_seq{filtered}, nom_seq{filtered};
  for (int l = 0; l < horizon; ++l) {
    double s = t_k + l * dt;
    fault_seq.push_back(apply_operator(model, fault_seq.back(), s, s + dt, w_hat));
    nom_seq.push_back(apply_operator(model, nom_seq.back(), s, s + dt, w0));
  }
  return {std::move(fault_seq), std::move(nom_seq)};
}

double surrogate_bound(const ContractionCertificate& cert, double w2_filter_gap, double eps_f) {
  if (w2_filter_gap < 0.0 || eps_f < 0.0) throw ArgumentError("surrogate_bound: negative input");
  return cert.kappa * std::exp(cert.alpha_tilde()) * w2_filter_gap + terminal_bias(cert) + eps_f;
}

double gmm_surrogate_eps(const GaussianMixture& mix, const ParticleEnsemble& ensemble) {
  // Sampled W2 between each fitted component and the responsibility-weighted
  // empirical component, combined as sqrt(sum_i beta_i W2_i^2).
  const int M = mix.components();
  const int N = ensemble.size();
  Mat resp(N, M);
  for (int k = 0; k < N; ++k)
    resp.row(k) = mix.responsibilities(ensemble.points.row(k).transpose()).transpose();
  Rng rng(0x65f5u);
  double acc = 0.0;
  for (int i = 0; i < M; ++i) {
    Vec rw = (resp.col(i).array() * ensemble.weights.array()).matrix();
    double mass = rw.sum();
    if (mass <= 1e-12) continue;
    rw /= mass;
    ParticleEnsemble comp;
    comp.points = ensemble.points;
    comp.weights = rw;
    comp = systematic_resample(comp, rng);
    // matched-size Gaussian sample from the fitted component
    Mat L = sqrt_psd(mix.covs[static_cast<size_t>(i)]);
    Mat draws(N, ensemble.dim());
    for (int k = 0; k < N; ++k)
      draws.row(k) =
          (mix.means[static_cast<size_t>(i)] + L * rng.normal_vec(ensemble.dim())).transpose();
    double d = wasserstein2_distance(comp, ParticleEnsemble::uniform(draws));
    acc += mix.weights[i] * d * d;
  }
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Matched-noise FDIR episode
// ---------------------------------------------------------------------------
namespace {

struct NoiseBank {
  std::vector<Vec> process;  // one q-vector per step
  std::vector<Vec> measurement;
};

NoiseBank draw_noise(const SystemModel& model, const EpisodeConfig& cfg) {
  NoiseBank bank;
  Rng proc = Rng::stream(cfg.seed, 1);
  Rng meas = Rng::stream(cfg.seed, 2);
  Eigen::LLT<Mat> llt(cfg.R);
  for (int k = 0; k < cfg.horizon_steps; ++k) {
    bank.process.push_back(proc.normal_vec(model.noise_dim));
    bank.measurement.push_back(Mat(llt.matrixL()) * meas.normal_vec(cfg.R.rows()));
  }
  return bank;
}

Vec sde_step_with_noise(const ClosedLoopField& field, const Vec& x, double t, double dt,
                        const Vec& z) {
  Vec drift = eval_closed_loop(field, x, t);
  Mat sigma = field.base.diffusion(x, t);
  return x + drift * dt + sigma * (std::sqrt(dt) * z);
}

}  // namespace

EpisodeLog run_recovery(const SystemModel& model, const FlowMapModel& flow,
                        const EpisodeConfig& cfg) {
  const int n = model.state_dim;
  const int m = model.control_dim;
  const int N = cfg.horizon_steps;
  EpisodeLog log;
  log.times.resize(static_cast<size_t>(N) + 1);
  log.x_nominal.resize(N + 1, n);
  log.x_fault.resize(N + 1, n);
  log.x_recovered.resize(N + 1, n);
  log.u_rec = Mat::Zero(N, m);

  NoiseBank noise = draw_noise(model, cfg);
  FaultProfile nominal_profile = FaultProfile::nominal(model.fault_dim);
  FaultProfile true_fault{cfg.w_true, std::nullopt};

  ClosedLoopField nominal_field{model, nominal_profile, nullptr};
  auto nominal_fn = nominal_field.as_field();

  // noise-free nominal reference
  Vec xn = cfg.x0;
  log.x_nominal.row(0) = xn.transpose();
  for (int k = 0; k < N; ++k) {
    xn = flow_map(nominal_fn, xn, k * cfg.dt, (k + 1) * cfg.dt, cfg.rk4_steps);
    log.x_nominal.row(k + 1) = xn.transpose();
  }

  // faulted baseline, no recovery, noise stream shared with the recovered run
  ClosedLoopField fault_field{model, true_fault, nullptr};
  Vec xf = cfg.x0;
  log.x_fault.row(0) = xf.transpose();
  for (int k = 0; k < N; ++k) {
    xf = sde_step_with_noise(fault_field, xf, k * cfg.dt, cfg.dt, noise.process[static_cast<size_t>(k)]);
    log.x_fault.row(k + 1) = xf.transpose();
  }

  // recovered run
  Vec xr = cfg.x0;
  log.x_recovered.row(0) = xr.transpose();
  std::vector<std::pair<double, Vec>> history;
  history.emplace_back(0.0, model.observation(xr) + noise.measurement[0]);

  Vec w_hat = Vec::Zero(model.fault_dim);
  bool w_hat_ready = false;
  Rng filter_rng = Rng::stream(cfg.seed, 3);
  Rng sampler_rng = Rng::stream(cfg.seed, 4);
  ParticleEnsemble filter;
  std::vector<ComponentPolicy> policies;
  GaussianMixture fault_mix;
  int plan_age = 0;

  Vec lo = Vec::Zero(model.fault_dim), hi = Vec::Ones(model.fault_dim);

  for (int k = 0; k < N; ++k) {
    double t = k * cfg.dt;
    Vec du = Vec::Zero(m);

    if (k == cfg.recovery_start_step) {
      // freeze the continuous fault estimate from the pre-recovery window
      if (cfg.w_hat_override.size() == model.fault_dim) {
        w_hat = cfg.w_hat_override;
      } else {
        ContinuousFaultEstimate est =
            fit_continuous_fault(history, model, cfg.x0, lo, hi, cfg.R, cfg.mle);
        w_hat = est.w_mle;
      }
      log.w_hat = w_hat;
      w_hat_ready = true;
      // initialize the filter about the latest measurement
      Mat L = sqrt_psd(cfg.R);
      Mat pts(cfg.n_particles, n);
      Vec y_now = history.back().second;
      for (int i = 0; i < cfg.n_particles; ++i)
        pts.row(i) = (y_now + L * filter_rng.normal_vec(n)).transpose();
      filter = ParticleEnsemble::uniform(pts, t);
      plan_age = cfg.replan_every;  // force an immediate plan
    }

    if (w_hat_ready) {
      if (plan_age >= cfg.replan_every) {
        plan_age = 0;
        policies.assign(static_cast<size_t>(cfg.gmm_components), ComponentPolicy{});
        const int Nr = cfg.recovery_horizon;
        auto [fault_tubes, nom_tubes] =
            propagate_recovery_densities(filter, flow, w_hat, t, Nr, cfg.dt);
        GmmConfig gcfg;
        gcfg.seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(k));
        auto [fmix, nmix] =
            matched_gmm_pair(fault_tubes.back(), nom_tubes.back(), cfg.gmm_components, gcfg);
        fault_mix = fmix;

        // responsibilities of terminal fault particles drive per-component stats
        Mat resp(filter.size(), cfg.gmm_components);
        for (int i = 0; i < filter.size(); ++i)
          resp.row(i) =
              fmix.responsibilities(fault_tubes.back().points.row(i).transpose()).transpose();

        // nominal linearization for the contraction metric
        std::vector<Mat> An, Bn, Qs, Rs;
        ClosedLoopField nom_f{model, nominal_profile, nullptr};
        for (int l = 0; l < Nr; ++l) {
          int idx = std::min(k + l, N - 1);
          LocalModel lm = linearize_step(nom_f, log.x_nominal.row(idx).transpose(), Vec::Zero(m),
                                         idx * cfg.dt, cfg.dt, cfg.rk4_steps);
          An.push_back(lm.A);
          Bn.push_back(lm.B);
          Qs.push_back(Mat::Identity(n, n));
          Rs.push_back(Mat::Identity(m, m));
        }
        ContractionMetricSequence metric_seq =
            riccati_backward(An, Bn, Qs, Rs, cfg.weights.lambda_T);

        Vec gamma_now = fmix.responsibilities(filter.mean());
        ClosedLoopField fhat_field{model, FaultProfile{w_hat, std::nullopt}, nullptr};
        for (int i = 0; i < cfg.gmm_components; ++i) {
          if (gamma_now[i] < cfg.gamma_min) continue;
          Vec rw = (resp.col(i).array() * filter.weights.array()).matrix();
          double mass = rw.sum();
          if (mass <= 1e-12) continue;
          rw /= mass;

          ComponentOcp ocp;
          ocp.weights = cfg.weights;
          ocp.omega = Vec::Ones(Nr);
          ocp.mu0 = fmix.means[static_cast<size_t>(i)];
          ocp.Sigma0 = fmix.covs[static_cast<size_t>(i)];
          for (int l = 0; l <= Nr; ++l) {
            ocp.mean_target.push_back(nmix.means[static_cast<size_t>(i)]);
            ocp.cov_target.push_back(nmix.covs[static_cast<size_t>(i)]);
            int idx = std::min(k + l, N);
            ocp.x_nom.push_back(log.x_nominal.row(idx).transpose());
            ocp.P.push_back(metric_seq.P[static_cast<size_t>(l)]);
          }
          for (int l = 0; l < Nr; ++l) {
            // linearize about the propagated component mean path
            Vec mean_l = fault_tubes[static_cast<size_t>(l)].points.transpose() * rw;
            LocalModel lm =
                linearize_step(fhat_field, mean_l, Vec::Zero(m), t + l * cfg.dt, cfg.dt,
                               cfg.rk4_steps);
            // residual covariance of the propagated tube vs its linear prediction
            Mat pred = (fault_tubes[static_cast<size_t>(l)].points * lm.A.transpose()).rowwise() +
                       lm.c.transpose();
            Mat res = fault_tubes[static_cast<size_t>(l) + 1].points - pred;
            Vec rmean = res.transpose() * rw;
            Mat rc = res.rowwise() - rmean.transpose();
            Mat Wl = rc.transpose() * rw.asDiagonal() * rc;
            ocp.models.push_back(lm);
            ocp.W.push_back(clip_psd(Wl));
          }
          policies[static_cast<size_t>(i)] = solve_component_ocp(ocp);
        }
      }

      // stage within the current plan; blend with stage-l policies
      int stage = std::min(plan_age, cfg.recovery_horizon - 1);
      Vec gamma = fault_mix.responsibilities(filter.mean());
      double mass = 0.0;
      Vec du_acc = Vec::Zero(m);
      for (int i = 0; i < cfg.gmm_components; ++i) {
        const auto& pol = policies[static_cast<size_t>(i)];
        if (pol.nu.empty() || gamma[i] < cfg.gamma_min) continue;
        mass += gamma[i];
        du_acc += gamma[i] * (pol.nu[static_cast<size_t>(stage)] +
                              pol.K[static_cast<size_t>(stage)] *
                                  (filter.mean() - pol.mu[static_cast<size_t>(stage)]));
      }
      if (mass > 0.0) du = du_acc / mass;
      ++plan_age;
    }

    // saturate the combined control at the plant limit
    Vec du_applied = du;
    if (cfg.control_limit > 0.0) {
      Vec ucl = model.nominal_feedback(xr, t);
      Vec total = (ucl + du).cwiseMax(-cfg.control_limit).cwiseMin(cfg.control_limit);
      du_applied = total - ucl;
    }
    log.u_rec.row(k) = du_applied.transpose();

    ClosedLoopField rec_field{model, true_fault,
                              [du_applied](const Vec&, double) { return du_applied; }};
    xr = sde_step_with_noise(rec_field, xr, t, cfg.dt, noise.process[static_cast<size_t>(k)]);
    log.x_recovered.row(k + 1) = xr.transpose();

    Vec y = model.observation(xr) + noise.measurement[static_cast<size_t>(k)];
    history.emplace_back((k + 1) * cfg.dt, y);

    if (w_hat_ready) {
      // single-hypothesis particle filter under w_hat with the applied control
      ClosedLoopField pred_field{model, FaultProfile{w_hat, std::nullopt},
                                 [du_applied](const Vec&, double) { return du_applied; }};
      ParticleEnsemble predicted;
      predicted.points.resize(filter.size(), n);
      for (int i = 0; i < filter.size(); ++i) {
        Vec xi = step_sde(pred_field, filter.points.row(i).transpose(), t, cfg.dt, filter_rng);
        predicted.points.row(i) = xi.transpose();
      }
      predicted.weights = filter.weights;
      predicted.timestamp = (k + 1) * cfg.dt;
      // measurement reweight
      Eigen::LLT<Mat> llt(cfg.R);
      Vec lw(predicted.size());
      for (int i = 0; i < predicted.size(); ++i) {
        Vec r = model.observation(predicted.points.row(i).transpose()) - y;
        Vec half = llt.matrixL().solve(r);
        lw[i] = std::log(std::max(predicted.weights[i], 1e-300)) - 0.5 * half.squaredNorm();
      }
      double mx = lw.maxCoeff();
      Vec wts = (lw.array() - mx).exp();
      predicted.weights = wts / wts.sum();
      if (effective_sample_size(predicted.weights) < 0.5 * predicted.size())
        predicted = systematic_resample(predicted, sampler_rng);
      filter = predicted;
    }
  }

  for (int k = 0; k <= N; ++k) log.times[static_cast<size_t>(k)] = k * cfg.dt;
  auto err = [&](const Mat& x, int k) {
    return (x.row(k) - log.x_nominal.row(k)).norm();
  };
  double fsum = 0.0, rsum = 0.0;
  for (int k = 0; k <= N; ++k) {
    fsum += err(log.x_fault, k);
    rsum += err(log.x_recovered, k);
  }
  log.fault_terminal_error = err(log.x_fault, N);
  log.recovered_terminal_error = err(log.x_recovered, N);
  log.fault_mean_error = fsum / (N + 1);
  log.recovered_mean_error = rsum / (N + 1);
  log.terminal_improvement = log.fault_terminal_error / std::max(log.recovered_terminal_error, 1e-300);
  log.mean_improvement = log.fault_mean_error / std::max(log.recovered_mean_error, 1e-300);
  if (!w_hat_ready) log.w_hat = Vec::Zero(model.fault_dim);
  return log;
}

}  // namespace pfo
