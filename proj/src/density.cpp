#include "pfo/density.hpp"

#include "pfo/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace pfo {

void ParticleEnsemble::validate() const {
  if (points.rows() < 1) throw ArgumentError("ParticleEnsemble: N_p must be >= 1");
  if (weights.size() != points.rows())
    throw ArgumentError("ParticleEnsemble: weights/points size mismatch");
  if (!points.allFinite()) throw NumericError("ParticleEnsemble: non-finite point");
  if (weights.minCoeff() < 0.0) throw ArgumentError("ParticleEnsemble: negative weight");
  if (std::abs(weights.sum() - 1.0) > 1e-12)
    throw ArgumentError("ParticleEnsemble: weights must sum to 1");
}

Vec ParticleEnsemble::mean() const { return points.transpose() * weights; }

Mat ParticleEnsemble::covariance() const {
  Vec mu = mean();
  Mat centered = points.rowwise() - mu.transpose();
  return centered.transpose() * weights.asDiagonal() * centered;
}

ParticleEnsemble ParticleEnsemble::uniform(Mat pts, double t) {
  ParticleEnsemble e;
  const int n = static_cast<int>(pts.rows());
  e.points = std::move(pts);
  e.weights = Vec::Constant(n, 1.0 / n);
  e.timestamp = t;
  return e;
}

ParticleEnsemble ParticleEnsemble::dirac(const Vec& x, double t) {
  ParticleEnsemble e;
  e.points = x.transpose();
  e.weights = Vec::Ones(1);
  e.timestamp = t;
  return e;
}

ParticleEnsemble pushforward(const ParticleEnsemble& ensemble,
                             const std::function<Vec(const Vec&)>& map) {
  ParticleEnsemble out;
  out.points.resize(ensemble.points.rows(), ensemble.points.cols());
  for (int i = 0; i < ensemble.size(); ++i) {
    Vec y = map(ensemble.points.row(i).transpose());
    if (!y.allFinite())
      throw NumericError("pushforward: non-finite image at particle " + std::to_string(i));
    out.points.row(i) = y.transpose();
  }
  out.weights = ensemble.weights;
  out.timestamp = ensemble.timestamp;
  return out;
}

// --------------------------------------------------------------------------
// Exact transport: shortest-augmenting-path assignment with potentials.
// --------------------------------------------------------------------------
double solve_assignment(const Mat& cost, std::vector<int>& row_of_col) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw ArgumentError("solve_assignment: cost matrix must be square");
  const double INF = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, INF);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = INF;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  row_of_col.assign(static_cast<size_t>(n), -1);
  double total = 0.0;
  for (int j = 1; j <= n; ++j) {
    row_of_col[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
    total += cost(p[static_cast<size_t>(j)] - 1, j - 1);
  }
  return total;
}

namespace {

Mat pairwise_sq_dist(const Mat& a, const Mat& b) {
  Vec an = a.rowwise().squaredNorm();
  Vec bn = b.rowwise().squaredNorm();
  Mat c = -2.0 * a * b.transpose();
  c.colwise() += an;
  c.rowwise() += bn.transpose();
  return c.cwiseMax(0.0);
}

double median_of(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty set");
  size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid) - 1, v.end());
  return 0.5 * (hi + v[mid - 1]);
}

bool uniform_weights(const Vec& w) {
  const double ref = 1.0 / static_cast<double>(w.size());
  return ((w.array() - ref).abs() < 1e-12).all();
}

double logsumexp(const Vec& v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

W2Result sinkhorn_w2(const ParticleEnsemble& a, const ParticleEnsemble& b,
                     const SinkhornConfig& cfg) {
  const Mat C = pairwise_sq_dist(a.points, b.points);
  const int na = a.size(), nb = b.size();

  double eps_target = cfg.epsilon;
  if (eps_target <= 0.0) {
    std::vector<double> flat(C.data(), C.data() + C.size());
    eps_target = 0.01 * median_of(std::move(flat));
    if (eps_target <= 0.0) eps_target = 1e-12;
  }

  const Vec log_a = a.weights.array().max(1e-300).log();
  const Vec log_b = b.weights.array().max(1e-300).log();
  Vec f = Vec::Zero(na), g = Vec::Zero(nb);

  const int stages = std::max(cfg.annealing_stages, 1);
  const int warm_iters = std::max(cfg.max_iterations / (4 * stages), 4);
  double marginal_err = std::numeric_limits<double>::infinity();
  int iterations_left = cfg.max_iterations;
  for (int stage = 0; stage < stages; ++stage) {
    // geometric ladder from 10x target down to target; the final stage
    // consumes whatever iteration budget the warm starts left over
    double frac = (stages == 1) ? 1.0 : static_cast<double>(stage) / (stages - 1);
    double eps = eps_target * std::pow(10.0, 1.0 - frac);
    const bool final_stage = (stage + 1 == stages);
    const int budget = final_stage ? std::max(iterations_left, 1) : warm_iters;

    auto marginal_violation = [&]() {
      Mat logP(na, nb);
      for (int i = 0; i < na; ++i)
        logP.row(i) = ((f[i] + g.array() - C.row(i).transpose().array()) / eps).transpose();
      Mat P = logP.array().exp();
      return (P.rowwise().sum() - a.weights).lpNorm<1>() +
             (P.colwise().sum().transpose() - b.weights).lpNorm<1>();
    };

    for (int it = 0; it < budget; ++it) {
      for (int i = 0; i < na; ++i) {
        Vec row = (g.array() - C.row(i).transpose().array()) / eps;
        f[i] = eps * (log_a[i] - logsumexp(row));
      }
      for (int j = 0; j < nb; ++j) {
        Vec col = (f.array() - C.col(j).array()) / eps;
        g[j] = eps * (log_b[j] - logsumexp(col));
      }
      --iterations_left;
      if (final_stage && (it % 10 == 9 || it + 1 == budget)) {
        marginal_err = marginal_violation();
        if (marginal_err < cfg.marginal_tol) break;
      }
    }
    if (final_stage) {
      if (marginal_err > 1e-4)
        throw NumericError("wasserstein2: Sinkhorn did not converge, marginal violation " +
                           std::to_string(marginal_err));
      Mat logP(na, nb);
      for (int i = 0; i < na; ++i)
        logP.row(i) = ((f[i] + g.array() - C.row(i).transpose().array()) / eps).transpose();
      Mat P = logP.array().exp();
      // Round to exact marginals (scale rows/cols, then rank-one residual fix)
      for (int i = 0; i < na; ++i) {
        double rs = P.row(i).sum();
        if (rs > a.weights[i] && rs > 0.0) P.row(i) *= a.weights[i] / rs;
      }
      for (int j = 0; j < nb; ++j) {
        double csum = P.col(j).sum();
        if (csum > b.weights[j] && csum > 0.0) P.col(j) *= b.weights[j] / csum;
      }
      Vec ra = a.weights - P.rowwise().sum();
      Vec rb = b.weights - P.colwise().sum().transpose();
      double rsum = ra.sum();
      if (rsum > 1e-300) P += (ra * rb.transpose()) / rsum;

      W2Result out;
      out.plan.coupling = P;
      out.plan.method = TransportMethod::entropic;
      out.plan.cost = (P.array() * C.array()).sum();
      out.distance = std::sqrt(std::max(out.plan.cost, 0.0));
      return out;
    }
  }
  throw NumericError("wasserstein2: Sinkhorn annealing exhausted");  // unreachable
}

}  // namespace

W2Result wasserstein2(const ParticleEnsemble& a, const ParticleEnsemble& b,
                      const W2Options& opts) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw ArgumentError("wasserstein2: state dimension mismatch");

  if (opts.method == TransportMethod::exact) {
    if (a.size() != b.size() || !uniform_weights(a.weights) || !uniform_weights(b.weights))
      throw ArgumentError(
          "wasserstein2: exact mode requires equal-size uniform ensembles (use entropic)");
    const int n = a.size();
    Mat C = pairwise_sq_dist(a.points, b.points);
    std::vector<int> row_of_col;
    double total = solve_assignment(C, row_of_col);
    W2Result out;
    out.plan.method = TransportMethod::exact;
    out.plan.coupling = Mat::Zero(n, n);
    for (int j = 0; j < n; ++j) out.plan.coupling(row_of_col[static_cast<size_t>(j)], j) = 1.0 / n;
    out.plan.cost = total / n;
    out.distance = std::sqrt(std::max(out.plan.cost, 0.0));
    return out;
  }
  return sinkhorn_w2(a, b, opts.sinkhorn);
}

double gaussian_w2(const Vec& m1, const Mat& S1, const Vec& m2, const Mat& S2) {
  if (m1.size() != m2.size() || S1.rows() != m1.size() || S2.rows() != m2.size())
    throw ArgumentError("gaussian_w2: dimension mismatch");
  const double tol = 1e-8 * (1.0 + std::max(S1.cwiseAbs().maxCoeff(), S2.cwiseAbs().maxCoeff()));
  if (min_eigenvalue(S1) < -tol || min_eigenvalue(S2) < -tol)
    throw ArgumentError("gaussian_w2: covariance not PSD");
  Mat s2half = sqrt_psd(S2);
  Mat inner = sqrt_psd(s2half * S1 * s2half);
  double bures = (S1 + S2 - 2.0 * inner).trace();
  double d2 = (m1 - m2).squaredNorm() + std::max(bures, 0.0);
  return std::sqrt(std::max(d2, 0.0));
}

double median_heuristic_bandwidth(const ParticleEnsemble& a, const ParticleEnsemble& b) {
  Mat pooled(a.size() + b.size(), a.dim());
  pooled.topRows(a.size()) = a.points;
  pooled.bottomRows(b.size()) = b.points;
  Mat d2 = pairwise_sq_dist(pooled, pooled);
  std::vector<double> dists;
  dists.reserve(static_cast<size_t>(d2.rows()) * (static_cast<size_t>(d2.rows()) - 1) / 2);
  for (int i = 0; i < d2.rows(); ++i)
    for (int j = i + 1; j < d2.cols(); ++j) dists.push_back(std::sqrt(d2(i, j)));
  double med = median_of(std::move(dists));
  return med > 0.0 ? med : 1.0;
}

double mmd2(const ParticleEnsemble& a, const ParticleEnsemble& b, double kernel_bandwidth,
            bool unbiased) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw ArgumentError("mmd2: dimension mismatch");
  if (kernel_bandwidth <= 0.0) throw ArgumentError("mmd2: bandwidth must be positive");
  if (unbiased && (a.size() < 2 || b.size() < 2))
    throw ArgumentError("mmd2: unbiased estimate requires N_p >= 2");

  const double inv = -0.5 / (kernel_bandwidth * kernel_bandwidth);
  Mat kaa = (pairwise_sq_dist(a.points, a.points) * inv).array().exp();
  Mat kbb = (pairwise_sq_dist(b.points, b.points) * inv).array().exp();
  Mat kab = (pairwise_sq_dist(a.points, b.points) * inv).array().exp();

  const Vec& wa = a.weights;
  const Vec& wb = b.weights;
  double cross = wa.transpose() * kab * wb;
  double taa, tbb;
  if (unbiased) {
    double full_a = wa.transpose() * kaa * wa;
    double diag_a = (wa.array().square() * kaa.diagonal().array()).sum();
    taa = (full_a - diag_a) / std::max(1.0 - wa.squaredNorm(), 1e-300);
    double full_b = wb.transpose() * kbb * wb;
    double diag_b = (wb.array().square() * kbb.diagonal().array()).sum();
    tbb = (full_b - diag_b) / std::max(1.0 - wb.squaredNorm(), 1e-300);
  } else {
    taa = wa.transpose() * kaa * wa;
    tbb = wb.transpose() * kbb * wb;
  }
  return taa + tbb - 2.0 * cross;
}

// --------------------------------------------------------------------------
// Weighted Gaussian mixtures.
// --------------------------------------------------------------------------
namespace {

double log_gaussian(const Vec& x, const Vec& mu, const Eigen::LLT<Mat>& llt, double logdet) {
  const int n = static_cast<int>(x.size());
  Vec d = x - mu;
  Vec half = llt.matrixL().solve(d);
  return -0.5 * (n * std::log(2.0 * M_PI) + logdet + half.squaredNorm());
}

struct CompCache {
  Eigen::LLT<Mat> llt;
  double logdet = 0.0;
};

CompCache cache_component(const Mat& cov) {
  CompCache c;
  c.llt.compute(cov);
  if (c.llt.info() != Eigen::Success) throw NumericError("GMM component covariance not PD");
  c.logdet = 2.0 * Mat(c.llt.matrixL()).diagonal().array().log().sum();
  return c;
}

}  // namespace

double GaussianMixture::log_pdf(const Vec& x) const {
  Vec terms(components());
  for (int i = 0; i < components(); ++i) {
    auto c = cache_component(covs[static_cast<size_t>(i)]);
    terms[i] = std::log(std::max(weights[i], 1e-300)) +
               log_gaussian(x, means[static_cast<size_t>(i)], c.llt, c.logdet);
  }
  return logsumexp(terms);
}

Vec GaussianMixture::responsibilities(const Vec& x) const {
  Vec terms(components());
  for (int i = 0; i < components(); ++i) {
    auto c = cache_component(covs[static_cast<size_t>(i)]);
    terms[i] = std::log(std::max(weights[i], 1e-300)) +
               log_gaussian(x, means[static_cast<size_t>(i)], c.llt, c.logdet);
  }
  double lse = logsumexp(terms);
  return (terms.array() - lse).exp();
}

void GaussianMixture::validate() const {
  if (components() < 1) throw ArgumentError("GaussianMixture: needs >= 1 component");
  if (std::abs(weights.sum() - 1.0) > 1e-10) throw ArgumentError("GaussianMixture: beta off simplex");
  for (const auto& S : covs) {
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw ArgumentError("GaussianMixture: covariance not symmetric");
    if (min_eigenvalue(S) < -1e-10) throw ArgumentError("GaussianMixture: covariance not PSD");
  }
}

namespace {

std::vector<int> kmeanspp_init(const Mat& pts, const Vec& w, int M, Rng& rng) {
  const int N = static_cast<int>(pts.rows());
  std::vector<int> centers;
  // first center: weighted draw
  double u = rng.uniform();
  double acc = 0.0;
  int first = N - 1;
  for (int i = 0; i < N; ++i) {
    acc += w[i];
    if (u <= acc) {
      first = i;
      break;
    }
  }
  centers.push_back(first);
  Vec d2 = (pts.rowwise() - pts.row(first)).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < M) {
    Vec probs = d2.cwiseProduct(w);
    double total = probs.sum();
    int pick;
    if (total <= 0.0) {
      pick = rng.uniform_int(0, N - 1);
    } else {
      double r = rng.uniform() * total;
      double a2 = 0.0;
      pick = N - 1;
      for (int i = 0; i < N; ++i) {
        a2 += probs[i];
        if (r <= a2) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pick);
    Vec nd = (pts.rowwise() - pts.row(pick)).rowwise().squaredNorm();
    d2 = d2.cwiseMin(nd);
  }
  return centers;
}

}  // namespace

GaussianMixture fit_gmm(const ParticleEnsemble& ensemble, int M, const GmmConfig& config,
                        std::vector<double>* loglik_history) {
  ensemble.validate();
  const int N = ensemble.size();
  const int n = ensemble.dim();
  if (N < M) throw ArgumentError("fit_gmm: needs N_p >= M");
  const Mat& X = ensemble.points;
  const Vec& w = ensemble.weights;

  Mat global_cov = ensemble.covariance();
  double trace_scale = global_cov.trace() / std::max(n, 1);
  double lam = config.floor_scale * std::max(trace_scale, 1e-12);
  const Mat floor_mat = lam * Mat::Identity(n, n);

  GaussianMixture gm;
  gm.weights = Vec::Constant(M, 1.0 / M);
  gm.means.resize(static_cast<size_t>(M));
  gm.covs.assign(static_cast<size_t>(M), clip_psd(global_cov) + floor_mat);

  Rng rng(derive_seed(config.seed, 0x6d7d));
  std::vector<int> centers = kmeanspp_init(X, w, M, rng);
  for (int i = 0; i < M; ++i) gm.means[static_cast<size_t>(i)] = X.row(centers[static_cast<size_t>(i)]).transpose();

  // a few Lloyd iterations to settle the initialization
  for (int it = 0; it < config.kmeans_iterations; ++it) {
    std::vector<int> assign(static_cast<size_t>(N));
    for (int k = 0; k < N; ++k) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int i = 0; i < M; ++i) {
        double d = (X.row(k).transpose() - gm.means[static_cast<size_t>(i)]).squaredNorm();
        if (d < bd) {
          bd = d;
          best = i;
        }
      }
      assign[static_cast<size_t>(k)] = best;
    }
    for (int i = 0; i < M; ++i) {
      Vec mu = Vec::Zero(n);
      double mass = 0.0;
      for (int k = 0; k < N; ++k)
        if (assign[static_cast<size_t>(k)] == i) {
          mu += w[k] * X.row(k).transpose();
          mass += w[k];
        }
      if (mass > 0.0) gm.means[static_cast<size_t>(i)] = mu / mass;
    }
  }

  // EM
  Mat log_resp(N, M);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < config.max_iterations; ++it) {
    // E-step
    std::vector<CompCache> caches;
    caches.reserve(static_cast<size_t>(M));
    for (int i = 0; i < M; ++i) caches.push_back(cache_component(gm.covs[static_cast<size_t>(i)]));
    double ll = 0.0;
    for (int k = 0; k < N; ++k) {
      Vec terms(M);
      for (int i = 0; i < M; ++i)
        terms[i] = std::log(std::max(gm.weights[i], 1e-300)) +
                   log_gaussian(X.row(k).transpose(), gm.means[static_cast<size_t>(i)],
                                caches[static_cast<size_t>(i)].llt,
                                caches[static_cast<size_t>(i)].logdet);
      double lse = logsumexp(terms);
      log_resp.row(k) = (terms.array() - lse).transpose();
      ll += w[k] * lse;
    }
    if (loglik_history) loglik_history->push_back(ll);

    // M-step (weighted)
    for (int i = 0; i < M; ++i) {
      Vec r = (log_resp.col(i).array().exp() * w.array()).matrix();  // w_k * resp_ki
      double mass = r.sum();
      if (mass < 1e-12 * static_cast<double>(M)) {
        gm.degenerate = true;
        gm.weights[i] = std::max(mass, 1e-300);
        gm.covs[static_cast<size_t>(i)] = clip_psd(global_cov) + floor_mat;
        continue;
      }
      Vec mu = X.transpose() * r / mass;
      Mat centered = X.rowwise() - mu.transpose();
      Mat cov = centered.transpose() * r.asDiagonal() * centered / mass;
      cov = sym(cov) + floor_mat;
      if (min_eigenvalue(cov) < lam * 0.5) {
        gm.degenerate = true;
        cov = clip_psd(cov) + floor_mat;
      }
      gm.weights[i] = mass;
      gm.means[static_cast<size_t>(i)] = mu;
      gm.covs[static_cast<size_t>(i)] = cov;
    }
    gm.weights /= gm.weights.sum();

    if (it > 0 && std::abs(ll - prev_ll) <= config.tol * (1.0 + std::abs(ll))) break;
    prev_ll = ll;
  }
  return gm;
}

std::pair<GaussianMixture, GaussianMixture> matched_gmm_pair(const ParticleEnsemble& fault,
                                                             const ParticleEnsemble& nominal,
                                                             int M, const GmmConfig& config) {
  fault.validate();
  nominal.validate();
  if (fault.size() != nominal.size())
    throw ArgumentError("matched_gmm_pair: ensembles must share N_p for index matching");

  GaussianMixture fault_gm = fit_gmm(fault, M, config);

  const int N = fault.size();
  const int n = nominal.dim();
  Mat resp(N, M);
  for (int k = 0; k < N; ++k)
    resp.row(k) = fault_gm.responsibilities(fault.points.row(k).transpose()).transpose();

  Mat global_cov = nominal.covariance();
  double trace_scale = global_cov.trace() / std::max(n, 1);
  double lam = config.floor_scale * std::max(trace_scale, 1e-12);
  const Mat floor_mat = lam * Mat::Identity(n, n);

  GaussianMixture nom_gm;
  nom_gm.weights = fault_gm.weights;  // matched weights by construction
  nom_gm.means.resize(static_cast<size_t>(M));
  nom_gm.covs.resize(static_cast<size_t>(M));
  for (int i = 0; i < M; ++i) {
    Vec r = (resp.col(i).array() * nominal.weights.array()).matrix();
    double mass = r.sum();
    if (mass < 1e-300) {
      nom_gm.degenerate = true;
      nom_gm.means[static_cast<size_t>(i)] = nominal.mean();
      nom_gm.covs[static_cast<size_t>(i)] = clip_psd(global_cov) + floor_mat;
      continue;
    }
    Vec mu = nominal.points.transpose() * r / mass;
    Mat centered = nominal.points.rowwise() - mu.transpose();
    Mat cov = sym(centered.transpose() * r.asDiagonal() * centered / mass) + floor_mat;
    nom_gm.means[static_cast<size_t>(i)] = mu;
    nom_gm.covs[static_cast<size_t>(i)] = cov;
  }
  return {std::move(fault_gm), std::move(nom_gm)};
}

}  // namespace pfo
