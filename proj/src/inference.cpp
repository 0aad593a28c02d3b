#include "pfo/inference.hpp"

#include "pfo/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pfo {

Vec HypothesisBank::posterior() const {
  Vec lw(hypotheses.size());
  for (size_t j = 0; j < hypotheses.size(); ++j) lw[static_cast<Eigen::Index>(j)] = hypotheses[j].log_weight;
  double m = lw.maxCoeff();
  Vec w = (lw.array() - m).exp();
  return w / w.sum();
}

void HypothesisBank::validate() const {
  if (hypotheses.empty()) throw ArgumentError("HypothesisBank: no hypotheses");
  const int np = hypotheses.front().ensemble.size();
  for (const auto& h : hypotheses) {
    h.ensemble.validate();
    if (h.ensemble.size() != np)
      throw ArgumentError("HypothesisBank: ensembles must share N_p");
  }
  if (R.rows() != R.cols() || min_eigenvalue(R) <= 0.0)
    throw ArgumentError("HypothesisBank: R must be SPD");
}

void predict_bank(HypothesisBank& bank, const SystemModel& model, double t_k, double t_k1,
                  const PredictConfig& config) {
  if (config.mode == PredictMode::learned_operator && config.model == nullptr)
    throw ConfigError("predict_bank: learned-operator mode requires a trained checkpoint");
  for (auto& hyp : bank.hypotheses) {
    if (config.mode == PredictMode::true_flow) {
      ClosedLoopField field{model, hyp.fault, nullptr};
      auto f = field.as_field();
      hyp.ensemble = pushforward(hyp.ensemble, [&](const Vec& x) {
        return flow_map(f, x, t_k, t_k1, config.rk4_steps);
      });
    } else {
      hyp.ensemble = apply_operator(*config.model, hyp.ensemble, t_k, t_k1, hyp.fault.w);
    }
    hyp.ensemble.timestamp = t_k1;
  }
}

double predictive_log_likelihood(const ParticleEnsemble& ensemble, const Vec& y,
                                 const std::function<Vec(const Vec&)>& h, const Mat& R) {
  ensemble.validate();
  if (R.rows() != y.size() || R.cols() != y.size() || min_eigenvalue(R) <= 0.0)
    throw ArgumentError("predictive_likelihood: R must be SPD and match y");
  Eigen::LLT<Mat> llt(R);
  Vec terms(ensemble.size());
  for (int i = 0; i < ensemble.size(); ++i) {
    Vec r = h(ensemble.points.row(i).transpose()) - y;
    Vec half = llt.matrixL().solve(r);
    terms[i] = std::log(std::max(ensemble.weights[i], 1e-300)) - 0.5 * half.squaredNorm();
  }
  double m = terms.maxCoeff();
  return m + std::log((terms.array() - m).exp().sum());
}

double effective_sample_size(const Vec& weights) {
  return 1.0 / weights.squaredNorm();
}

ParticleEnsemble systematic_resample(const ParticleEnsemble& ensemble, Rng& rng, double jitter) {
  const int N = ensemble.size();
  Vec cdf(N);
  double acc = 0.0;
  for (int i = 0; i < N; ++i) {
    acc += ensemble.weights[i];
    cdf[i] = acc;
  }
  ParticleEnsemble out;
  out.points.resize(N, ensemble.dim());
  out.weights = Vec::Constant(N, 1.0 / N);
  out.timestamp = ensemble.timestamp;
  double u0 = rng.uniform() / N;
  int j = 0;
  for (int i = 0; i < N; ++i) {
    double u = u0 + static_cast<double>(i) / N;
    while (j < N - 1 && cdf[j] < u) ++j;
    out.points.row(i) = ensemble.points.row(j);
    if (jitter > 0.0)
      out.points.row(i) += jitter * rng.normal_vec(ensemble.dim()).transpose();
  }
  return out;
}

Vec update_posterior(HypothesisBank& bank, const Vec& y, const std::function<Vec(const Vec&)>& h,
                     Rng& rng, const UpdateConfig& config) {
  bank.validate();
  const int J = static_cast<int>(bank.hypotheses.size());
  Vec loglik(J);
  for (int j = 0; j < J; ++j)
    loglik[j] = predictive_log_likelihood(bank.hypotheses[static_cast<size_t>(j)].ensemble, y, h,
                                          bank.R);

  if (!loglik.allFinite()) {
    // all likelihoods vanished in finite precision: fall back to uniform
    bool any_finite = false;
    for (int j = 0; j < J; ++j) any_finite = any_finite || std::isfinite(loglik[j]);
    if (!any_finite) {
      for (auto& hyp : bank.hypotheses) hyp.log_weight = 0.0;
      bank.uniform_fallback_triggered = true;
      return loglik;
    }
  }
  for (int j = 0; j < J; ++j) {
    double l = std::isfinite(loglik[j]) ? loglik[j] : -1e300;
    bank.hypotheses[static_cast<size_t>(j)].log_weight += l;
  }
  // renormalize in log domain
  Vec lw(J);
  for (int j = 0; j < J; ++j) lw[j] = bank.hypotheses[static_cast<size_t>(j)].log_weight;
  double m = lw.maxCoeff();
  double lse = m + std::log((lw.array() - m).exp().sum());
  for (int j = 0; j < J; ++j) bank.hypotheses[static_cast<size_t>(j)].log_weight -= lse;

  // per-hypothesis particle reweight + optional resampling
  Eigen::LLT<Mat> llt(bank.R);
  for (auto& hyp : bank.hypotheses) {
    ParticleEnsemble& e = hyp.ensemble;
    Vec lw_particles(e.size());
    for (int i = 0; i < e.size(); ++i) {
      Vec r = h(e.points.row(i).transpose()) - y;
      Vec half = llt.matrixL().solve(r);
      lw_particles[i] = std::log(std::max(e.weights[i], 1e-300)) - 0.5 * half.squaredNorm();
    }
    double mm = lw_particles.maxCoeff();
    Vec wts = (lw_particles.array() - mm).exp();
    double s = wts.sum();
    if (s <= 0.0 || !std::isfinite(s)) continue;  // keep previous weights
    e.weights = wts / s;
    if (config.resample && effective_sample_size(e.weights) < config.ess_fraction * e.size())
      e = systematic_resample(e, rng, config.jitter);
  }
  return loglik;
}

double continuous_fault_objective(const std::vector<std::pair<double, Vec>>& history,
                                  const SystemModel& model, const Vec& x0, const Vec& w,
                                  const Mat& R, int rk4_steps, int window) {
  if (history.empty()) throw ArgumentError("continuous_fault_objective: empty history");
  Eigen::LLT<Mat> llt(R);
  ClosedLoopField field{model, FaultProfile{w, std::nullopt}, nullptr};
  auto f = field.as_field();

  size_t start = 0;
  if (window > 0 && history.size() > static_cast<size_t>(window))
    start = history.size() - static_cast<size_t>(window);

  double obj = 0.0;
  Vec x = x0;
  double t_prev = history.front().first;
  for (size_t l = 0; l < history.size(); ++l) {
    const auto& [tl, yl] = history[l];
    if (l > 0) {
      try {
        x = flow_map(f, x, t_prev, tl, rk4_steps);
      } catch (const NumericError&) {
        return std::numeric_limits<double>::infinity();
      }
      t_prev = tl;
    }
    if (!x.allFinite() || x.norm() > 1e9) return std::numeric_limits<double>::infinity();
    if (l < start) continue;
    Vec r = model.observation(x) - yl;
    Vec half = llt.matrixL().solve(r);
    obj += 0.5 * half.squaredNorm();
  }
  return obj;
}

namespace {

Vec project_box(const Vec& w, const Vec& lo, const Vec& hi) {
  return w.cwiseMax(lo).cwiseMin(hi);
}

}  // namespace

ContinuousFaultEstimate fit_continuous_fault(const std::vector<std::pair<double, Vec>>& history,
                                             const SystemModel& model, const Vec& x0,
                                             const Vec& box_lo, const Vec& box_hi, const Mat& R,
                                             const MleConfig& config) {
  if (history.empty()) throw ArgumentError("fit_continuous_fault: empty history");
  const int p = static_cast<int>(box_lo.size());
  if (box_hi.size() != p) throw ArgumentError("fit_continuous_fault: box bounds mismatch");

  auto objective = [&](const Vec& w) {
    return continuous_fault_objective(history, model, x0, w, R, config.rk4_steps, config.window);
  };
  auto gradient = [&](const Vec& w, double& f0) {
    f0 = objective(w);
    Vec g(p);
    for (int i = 0; i < p; ++i) {
      Vec wp = w, wm = w;
      wp[i] += config.fd_step;
      wm[i] -= config.fd_step;
      double fp = objective(project_box(wp, box_lo, box_hi));
      double fm = objective(project_box(wm, box_lo, box_hi));
      g[i] = (fp - fm) / (2.0 * config.fd_step);
      if (!std::isfinite(g[i])) g[i] = 0.0;
    }
    return g;
  };

  // Latin-hypercube starts over the box (deterministic given seed)
  std::vector<Vec> starts;
  {
    Rng rng(derive_seed(config.seed, 0x4c48));
    const int S = std::max(config.starts, 1);
    Mat lhs(S, p);
    for (int d = 0; d < p; ++d) {
      std::vector<int> perm(static_cast<size_t>(S));
      for (int i = 0; i < S; ++i) perm[static_cast<size_t>(i)] = i;
      for (int i = S - 1; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(0, i))]);
      for (int i = 0; i < S; ++i)
        lhs(i, d) = (perm[static_cast<size_t>(i)] + rng.uniform()) / S;
    }
    for (int i = 0; i < S; ++i) {
      Vec w(p);
      for (int d = 0; d < p; ++d) w[d] = box_lo[d] + (box_hi[d] - box_lo[d]) * lhs(i, d);
      starts.push_back(std::move(w));
    }
  }

  std::vector<std::pair<Vec, double>> results(starts.size());
  parallel_for(static_cast<int>(starts.size()), [&](int si) {
    Vec w = starts[static_cast<size_t>(si)];
    Mat H = Mat::Identity(p, p);  // inverse-Hessian approximation
    double f0;
    Vec g = gradient(w, f0);
    for (int it = 0; it < config.iterations; ++it) {
      Vec dir = -(H * g);
      if (dir.dot(g) > 0.0) dir = -g;  // fall back on steepest descent
      double step = 1.0;
      Vec w_new;
      double f_new = std::numeric_limits<double>::infinity();
      for (int ls = 0; ls < 30; ++ls) {
        w_new = project_box(w + step * dir, box_lo, box_hi);
        f_new = objective(w_new);
        if (f_new <= f0 - 1e-4 * step * std::abs(dir.dot(g)) || f_new < f0) break;
        step *= 0.5;
      }
      if (!(f_new < f0)) break;  // no descent available
      double f1;
      Vec g_new = gradient(w_new, f1);
      Vec s = w_new - w;
      Vec yv = g_new - g;
      double sy = s.dot(yv);
      if (sy > 1e-12) {  // BFGS inverse update
        Mat I = Mat::Identity(p, p);
        Mat V = I - (s * yv.transpose()) / sy;
        H = V * H * V.transpose() + (s * s.transpose()) / sy;
      }
      w = w_new;
      g = g_new;
      f0 = f1;
      if (g.norm() < 1e-12) break;
    }
    results[static_cast<size_t>(si)] = {w, f0};
  });

  ContinuousFaultEstimate est;
  est.trace = results;
  size_t best = 0;
  for (size_t i = 1; i < results.size(); ++i)
    if (results[i].second < results[best].second) best = i;
  est.w_mle = project_box(results[best].first, box_lo, box_hi);
  est.objective = results[best].second;
  return est;
}

std::vector<ParticleEnsemble> reachable_family(const ParticleEnsemble& ensemble,
                                               const std::vector<Vec>& fault_parameters, double s,
                                               double t, const FlowMapModel& model) {
  std::vector<ParticleEnsemble> family;
  family.reserve(fault_parameters.size());
  for (const auto& w : fault_parameters) family.push_back(apply_operator(model, ensemble, s, t, w));
  return family;
}

}  // namespace pfo
