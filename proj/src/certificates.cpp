#include "pfo/certificates.hpp"

#include "pfo/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace pfo {

void ContractionCertificate::validate() const {
  if (!(m_lower > 0.0) || m_upper < m_lower) throw ArgumentError("certificate: bad metric bounds");
  if (kappa < 1.0 - 1e-12) throw ArgumentError("certificate: kappa must be >= 1");
  if (d_bar < 0.0 || eps_ctr < 0.0) throw ArgumentError("certificate: negative sup estimate");
  if (!std::isfinite(alpha) || !std::isfinite(kappa) || !std::isfinite(d_bar) ||
      !std::isfinite(eps_ctr) || !std::isfinite(alpha_tilde()))
    throw ArgumentError("certificate: non-finite field");
}

double accumulated_bias(double kappa, double d_bar, double rate, double t) {
  if (t < 0.0) throw ArgumentError("accumulated_bias: negative horizon");
  double integral = (rate == 0.0) ? t : (std::exp(rate * t) - 1.0) / rate;
  return kappa * d_bar * integral;
}

double contraction_bound(const ContractionCertificate& cert, double w2_initial, double t) {
  return cert.kappa * std::exp(cert.alpha * t) * w2_initial +
         accumulated_bias(cert.kappa, cert.d_bar, cert.alpha, t);
}

double approx_ctr_bound(const ContractionCertificate& cert, double w2_initial, double tau) {
  const double at = cert.alpha_tilde();
  return cert.kappa * std::exp(at * tau) * w2_initial +
         accumulated_bias(cert.kappa, cert.d_bar, at, tau);
}

double terminal_bias(const ContractionCertificate& cert) {
  return accumulated_bias(cert.kappa, cert.d_bar, cert.alpha_tilde(), 1.0);
}

DetectabilityResult detectability_certificate(const DetectabilityInputs& inputs, double T,
                                              double eps) {
  if (inputs.psi_bar < 0.0 || inputs.sigma_bar < 0.0 || inputs.s_bar < 0.0 ||
      inputs.delta_w < 0.0 || T < 0.0 || eps < 0.0)
    throw ArgumentError("detectability_certificate: negative input");
  DetectabilityResult out;
  out.d_bar = inputs.psi_bar * inputs.delta_w + 0.5 * inputs.sigma_bar * inputs.s_bar;
  out.upper_bound = accumulated_bias(inputs.cert.kappa, out.d_bar, inputs.cert.alpha, T);
  out.identifiable_possible = (eps <= out.upper_bound);
  return out;
}

namespace {

struct GaussianScore {
  Vec mean;
  Mat precision;
  Vec score(const Vec& x) const { return -(precision * (x - mean)); }
};

GaussianScore fit_gaussian_score(const ParticleEnsemble& e, double floor_scale, bool* regularized) {
  GaussianScore g;
  g.mean = e.mean();
  Mat cov = e.covariance();
  const int n = e.dim();
  double trace_scale = std::max(cov.trace() / std::max(n, 1), 1e-12);
  double floor_eig = floor_scale * trace_scale;
  if (min_eigenvalue(cov) < floor_eig) {
    cov = clip_psd(cov, floor_eig);
    if (regularized) *regularized = true;
  }
  g.precision = cov.llt().solve(Mat::Identity(n, n));
  return g;
}

}  // namespace

double estimate_score_gap(const std::vector<ParticleEnsemble>& ensembles_i,
                          const std::vector<ParticleEnsemble>& ensembles_j, double floor_scale,
                          bool* regularized) {
  if (ensembles_i.size() != ensembles_j.size() || ensembles_i.empty())
    throw ArgumentError("estimate_score_gap: time grids must match and be nonempty");
  if (regularized) *regularized = false;
  double overall = 0.0;
  for (size_t k = 0; k < ensembles_i.size(); ++k) {
    GaussianScore gi = fit_gaussian_score(ensembles_i[k], floor_scale, regularized);
    GaussianScore gj = fit_gaussian_score(ensembles_j[k], floor_scale, regularized);
    auto sup_over = [&](const ParticleEnsemble& e) {
      double s = 0.0;
      for (int r = 0; r < e.size(); ++r) {
        Vec x = e.points.row(r).transpose();
        s = std::max(s, (gj.score(x) - gi.score(x)).norm());
      }
      return s;
    };
    overall = std::max(overall, std::max(sup_over(ensembles_i[k]), sup_over(ensembles_j[k])));
  }
  return overall;
}

double fmm_residual_bound(double endpoint_residual_integral, double omega_lower) {
  if (omega_lower <= 0.0) throw ArgumentError("fmm_residual_bound: omega lower bound must be > 0");
  if (endpoint_residual_integral < 0.0)
    throw ArgumentError("fmm_residual_bound: negative residual integral");
  return std::sqrt(endpoint_residual_integral / omega_lower);
}

ContractionCertificate measure_certificate(const MetricModel& metric, const FlowMapModel& model,
                                           const std::vector<Vec>& sample_points,
                                           const Vec& sample_taus, const OperatorCond& cond,
                                           const std::vector<FieldGapSample>& field_gap_samples) {
  if (sample_points.empty()) throw ArgumentError("measure_certificate: empty sample batch");
  if (static_cast<Eigen::Index>(sample_points.size()) != sample_taus.size())
    throw ArgumentError("measure_certificate: points/taus size mismatch");

  ContractionCertificate cert;
  cert.alpha = metric.alpha(cond.w);
  double m_lo = std::numeric_limits<double>::infinity();
  double m_hi = 0.0;
  double eps = 0.0;
  for (size_t k = 0; k < sample_points.size(); ++k) {
    double tau = sample_taus[static_cast<Eigen::Index>(k)];
    Mat M = metric.metric(sample_points[k], tau, cond.w);
    m_lo = std::min(m_lo, min_eigenvalue(M));
    m_hi = std::max(m_hi, max_eigenvalue(M));
    Mat R = contraction_residual(metric, model, sample_points[k], tau, cond);
    eps = std::max(eps, psd_project(R).norm());
  }
  cert.m_lower = m_lo;
  cert.m_upper = m_hi;
  cert.kappa = std::sqrt(m_hi / m_lo);
  cert.eps_ctr = eps;
  double gap = 0.0;
  for (const auto& s : field_gap_samples)
    gap = std::max(gap, (s.b_true - model.induced_velocity(s.x, s.tau, cond)).norm());
  cert.d_bar = gap;
  cert.sample_count = static_cast<int>(sample_points.size() + field_gap_samples.size());
  cert.validate();
  return cert;
}

std::vector<FieldGapSample> surrogate_field_gap_samples(
    const std::vector<TrajectoryPair>& heldout, const std::vector<double>& tau_grid,
    int k_neighbors) {
  if (heldout.size() < 2) throw ArgumentError("surrogate_field_gap_samples: too few pairs");
  const int N = static_cast<int>(heldout.size());
  const int k_use = std::min(k_neighbors, N - 1);
  std::vector<FieldGapSample> out;
  for (double tau : tau_grid) {
    std::vector<Vec> pos(static_cast<size_t>(N));
    std::vector<Vec> vel(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
      const auto& pr = heldout[static_cast<size_t>(i)];
      pos[static_cast<size_t>(i)] = (1.0 - tau) * pr.x_s + tau * pr.x_t;
      vel[static_cast<size_t>(i)] = (pr.x_t - pr.x_s) / (pr.t - pr.s);
    }
    for (int i = 0; i < N; ++i) {
      // k-NN average of the one-step transport velocity, excluding self
      std::vector<std::pair<double, int>> dist;
      dist.reserve(static_cast<size_t>(N) - 1);
      for (int j = 0; j < N; ++j) {
        if (j == i) continue;
        dist.emplace_back((pos[static_cast<size_t>(j)] - pos[static_cast<size_t>(i)]).squaredNorm(), j);
      }
      std::partial_sort(dist.begin(), dist.begin() + k_use, dist.end());
      Vec avg = Vec::Zero(vel[0].size());
      for (int q = 0; q < k_use; ++q) avg += vel[static_cast<size_t>(dist[static_cast<size_t>(q)].second)];
      avg /= k_use;
      out.push_back({pos[static_cast<size_t>(i)], tau, avg});
    }
  }
  return out;
}

}  // namespace pfo
