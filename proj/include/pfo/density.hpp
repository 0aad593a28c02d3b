#pragma once

#include "pfo/common.hpp"

#include <functional>
#include <vector>

namespace pfo {

// Weighted empirical density: the computational stand-in for rho in D(X).
struct ParticleEnsemble {
  Mat points;   // N_p x n
  Vec weights;  // nonnegative, sums to 1
  double timestamp = 0.0;

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
  void validate() const;

  Vec mean() const;
  Mat covariance() const;

  static ParticleEnsemble uniform(Mat pts, double t = 0.0);
  static ParticleEnsemble dirac(const Vec& x, double t = 0.0);
};

// Pushforward along a point map; weights preserved bit-for-bit.
ParticleEnsemble pushforward(const ParticleEnsemble& ensemble,
                             const std::function<Vec(const Vec&)>& map);

enum class TransportMethod { exact, entropic };

struct TransportPlan {
  Mat coupling;  // N x N', row sums = source weights, col sums = target weights
  double cost = 0.0;  // squared-distance transport cost <pi, C>
  TransportMethod method = TransportMethod::exact;
};

struct SinkhornConfig {
  double epsilon = -1.0;        // <=0: 0.01 * median pairwise squared distance
  int annealing_stages = 10;    // geometric ladder from 10x epsilon down to epsilon
  int max_iterations = 2000;    // total across stages
  double marginal_tol = 1e-9;
};

struct W2Options {
  TransportMethod method = TransportMethod::exact;
  SinkhornConfig sinkhorn;
};

struct W2Result {
  double distance = 0.0;
  TransportPlan plan;
};

// Exact mode solves the assignment problem (equal-size uniform ensembles);
// entropic mode runs log-domain Sinkhorn with epsilon annealing and rounds the
// plan to exact marginals, so its cost upper-bounds the exact one.
W2Result wasserstein2(const ParticleEnsemble& a, const ParticleEnsemble& b,
                      const W2Options& opts = {});

inline double wasserstein2_distance(const ParticleEnsemble& a, const ParticleEnsemble& b,
                                    const W2Options& opts = {}) {
  return wasserstein2(a, b, opts).distance;
}

// Minimum-cost assignment of a square cost matrix (shortest augmenting paths).
// Returns total cost; row_of_col[j] = source row assigned to target column j.
double solve_assignment(const Mat& cost, std::vector<int>& row_of_col);

// Closed-form Gaussian (Bures) 2-Wasserstein distance.
double gaussian_w2(const Vec& m1, const Mat& S1, const Vec& m2, const Mat& S2);

// Squared maximum mean discrepancy with a Gaussian kernel.
// unbiased=true removes the diagonal terms (requires N_p >= 2 on both sides).
double mmd2(const ParticleEnsemble& a, const ParticleEnsemble& b, double kernel_bandwidth,
            bool unbiased = true);
double median_heuristic_bandwidth(const ParticleEnsemble& a, const ParticleEnsemble& b);

struct GaussianMixture {
  Vec weights;             // simplex, length M
  std::vector<Vec> means;  // M x n
  std::vector<Mat> covs;   // M symmetric PSD n x n
  bool degenerate = false; // a component needed covariance flooring

  int components() const { return static_cast<int>(weights.size()); }
  double log_pdf(const Vec& x) const;
  Vec responsibilities(const Vec& x) const;
  void validate() const;
};

struct GmmConfig {
  int max_iterations = 200;
  double tol = 1e-9;            // relative log-likelihood improvement stop
  std::uint64_t seed = 0;
  double floor_scale = 1e-8;    // covariance floor = floor_scale * trace scale
  int kmeans_iterations = 10;
};

// Weighted EM with seeded k-means++ initialization. Log-likelihood history is
// optional and is non-decreasing per iteration.
GaussianMixture fit_gmm(const ParticleEnsemble& ensemble, int M, const GmmConfig& config = {},
                        std::vector<double>* loglik_history = nullptr);

// Fit the fault mixture, then transfer its responsibilities to the
// index-matched nominal particles so both mixtures share weights beta.
std::pair<GaussianMixture, GaussianMixture> matched_gmm_pair(const ParticleEnsemble& fault,
                                                             const ParticleEnsemble& nominal,
                                                             int M,
                                                             const GmmConfig& config = {});

}  // namespace pfo
