#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pfo/density.hpp"
#include "pfo/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace pfo;

namespace {

ParticleEnsemble random_ensemble(Rng& rng, int n_pts, int dim, double shift = 0.0) {
  Mat pts = rng.normal_mat(n_pts, dim);
  pts.array() += shift;
  return ParticleEnsemble::uniform(pts);
}

// permutation brute force over all assignments (oracle for the exact solver)
double brute_force_w2(const ParticleEnsemble& a, const ParticleEnsemble& b) {
  const int n = a.size();
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (int i = 0; i < n; ++i)
      cost += (a.points.row(i) - b.points.row(perm[static_cast<size_t>(i)])).squaredNorm();
    best = std::min(best, cost);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / n);
}

}  // namespace

TEST_CASE("pushforward: identity, Dirac recovery, affine map, mass conservation") {
  Rng rng(1);
  ParticleEnsemble e = random_ensemble(rng, 20, 3);
  ParticleEnsemble id = pushforward(e, [](const Vec& x) { return x; });
  CHECK((id.points - e.points).norm() == 0.0);
  for (int i = 0; i < e.size(); ++i) CHECK(id.weights[i] == e.weights[i]);  // bit-for-bit

  // Dirac ensemble through a map equals the Dirac at the mapped point, exactly
  Vec x0(2);
  x0 << 0.3, -1.2;
  auto phi = [](const Vec& x) { return Vec(2.0 * x + Vec::Ones(x.size())); };
  ParticleEnsemble dirac = pushforward(ParticleEnsemble::dirac(x0), phi);
  CHECK(dirac.size() == 1);
  CHECK((dirac.points.row(0).transpose() - phi(x0)).norm() == 0.0);

  Mat pts(2, 1);
  pts << 0.0, 1.0;
  ParticleEnsemble half = ParticleEnsemble::uniform(pts);
  ParticleEnsemble mapped = pushforward(half, phi);
  CHECK(mapped.points(0, 0) == doctest::Approx(1.0));
  CHECK(mapped.points(1, 0) == doctest::Approx(3.0));
}

TEST_CASE("Dirac embedding of a flowed set is recovered pointwise") {
  Rng rng(7);
  auto phi = [](const Vec& x) { return Vec((1.7 * x.array() - 0.4).matrix()); };
  for (int i = 0; i < 25; ++i) {
    Vec x = rng.normal_vec(3);
    ParticleEnsemble through = pushforward(ParticleEnsemble::dirac(x), phi);
    CHECK((through.points.row(0).transpose() - phi(x)).norm() == 0.0);
  }
}

TEST_CASE("exact W2: two Diracs and the permutation oracle") {
  Vec x(3), y(3);
  x << 1, 2, 3;
  y << 0, 0, 0;
  Mat px = x.transpose(), py = y.transpose();
  double d = wasserstein2_distance(ParticleEnsemble::uniform(px), ParticleEnsemble::uniform(py));
  CHECK(d == doctest::Approx((x - y).norm()).epsilon(1e-12));

  Rng rng(3);
  for (int rep = 0; rep < 40; ++rep) {
    int n = rng.uniform_int(2, 7);
    int dim = rng.uniform_int(1, 3);
    ParticleEnsemble a = random_ensemble(rng, n, dim);
    ParticleEnsemble b = random_ensemble(rng, n, dim, 0.5);
    auto res = wasserstein2(a, b);
    CHECK(res.distance == doctest::Approx(brute_force_w2(a, b)).epsilon(1e-12));
    // plan marginals
    CHECK((res.plan.coupling.rowwise().sum() - a.weights).lpNorm<1>() <= 1e-12);
    CHECK((res.plan.coupling.colwise().sum().transpose() - b.weights).lpNorm<1>() <= 1e-12);
  }
}

TEST_CASE("1D Gaussian W2 at N=1000 matches the mean shift") {
  Rng rng(11);
  Mat a(1000, 1), b(1000, 1);
  for (int i = 0; i < 1000; ++i) {
    a(i, 0) = rng.normal();
    b(i, 0) = 2.0 + rng.normal();
  }
  double d = wasserstein2_distance(ParticleEnsemble::uniform(a), ParticleEnsemble::uniform(b));
  CHECK(std::abs(d - 2.0) <= 0.1);
}

TEST_CASE("W2 metric axioms on random ensembles") {
  Rng rng(23);
  for (int rep = 0; rep < 20; ++rep) {
    ParticleEnsemble a = random_ensemble(rng, 12, 2);
    ParticleEnsemble b = random_ensemble(rng, 12, 2, 0.3);
    ParticleEnsemble c = random_ensemble(rng, 12, 2, -0.4);
    double ab = wasserstein2_distance(a, b);
    double ba = wasserstein2_distance(b, a);
    double ac = wasserstein2_distance(a, c);
    double cb = wasserstein2_distance(c, b);
    CHECK(std::abs(ab - ba) <= 1e-10);
    CHECK(wasserstein2_distance(a, a) == doctest::Approx(0.0));
    CHECK(ab <= ac + cb + 1e-8);
  }
}

TEST_CASE("Sinkhorn cost upper-bounds the exact cost and satisfies marginals") {
  Rng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    ParticleEnsemble a = random_ensemble(rng, 24, 2);
    ParticleEnsemble b = random_ensemble(rng, 24, 2, 0.8);
    W2Options exact_opts;
    auto exact = wasserstein2(a, b, exact_opts);
    W2Options ent;
    ent.method = TransportMethod::entropic;
    auto approx = wasserstein2(a, b, ent);
    CHECK(approx.plan.cost >= exact.plan.cost - 1e-8);
    CHECK((approx.plan.coupling.rowwise().sum() - a.weights).lpNorm<1>() <= 1e-8);
    CHECK((approx.plan.coupling.colwise().sum().transpose() - b.weights).lpNorm<1>() <= 1e-8);
  }

  // weighted ensembles route through Sinkhorn
  Rng rng2(5);
  ParticleEnsemble wa = random_ensemble(rng2, 10, 2);
  Vec w(10);
  for (int i = 0; i < 10; ++i) w[i] = i + 1.0;
  wa.weights = w / w.sum();
  ParticleEnsemble ub = random_ensemble(rng2, 14, 2, 0.2);
  W2Options ent;
  ent.method = TransportMethod::entropic;
  auto res = wasserstein2(wa, ub, ent);
  CHECK(res.distance >= 0.0);
  CHECK((res.plan.coupling.rowwise().sum() - wa.weights).lpNorm<1>() <= 1e-8);
  CHECK_THROWS_AS(wasserstein2(wa, ub), ArgumentError);  // exact mode needs uniform equal-size
}

TEST_CASE("Gaussian Bures distance") {
  Vec m0 = Vec::Zero(2);
  Mat I2 = Mat::Identity(2, 2);
  CHECK(gaussian_w2(m0, I2, m0, I2) == doctest::Approx(0.0));

  Vec m1(2);
  m1 << 3.0, 4.0;
  CHECK(gaussian_w2(m0, I2, m1, I2) == doctest::Approx(5.0));
  CHECK(gaussian_w2(m0, I2, m0, 4.0 * I2) == doctest::Approx(std::sqrt(2.0)));

  Mat bad(2, 2);
  bad << 1.0, 0.0, 0.0, -1.0;
  CHECK_THROWS_AS(gaussian_w2(m0, bad, m0, I2), ArgumentError);
}

TEST_CASE("MMD^2: zero on identical clouds, symmetry, separated-cluster limit") {
  Rng rng(13);
  ParticleEnsemble a = random_ensemble(rng, 30, 2);
  CHECK(mmd2(a, a, 1.0, false) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(mmd2(a, a, 1.0, true) <= 1e-9);

  ParticleEnsemble b = random_ensemble(rng, 25, 2, 0.7);
  double ab = mmd2(a, b, 1.3, true);
  double ba = mmd2(b, a, 1.3, true);
  CHECK(std::abs(ab - ba) <= 1e-12);

  // two tight clusters far apart approach 2 for the normalized kernel
  Mat ca = 1e-9 * rng.normal_mat(40, 2);
  Mat cb = 1e-9 * rng.normal_mat(40, 2);
  cb.array() += 1000.0;
  double far = mmd2(ParticleEnsemble::uniform(ca), ParticleEnsemble::uniform(cb), 1.0, true);
  CHECK(far == doctest::Approx(2.0).epsilon(1e-6));

  CHECK_THROWS_AS(mmd2(a, b, 0.0, true), ArgumentError);
  CHECK(median_heuristic_bandwidth(a, b) > 0.0);
}

TEST_CASE("GMM: single component recovers weighted moments") {
  Rng rng(17);
  Mat pts = rng.normal_mat(200, 2);
  pts.col(1) *= 3.0;
  ParticleEnsemble e = ParticleEnsemble::uniform(pts);
  GaussianMixture gm = fit_gmm(e, 1);
  CHECK((gm.means[0] - e.mean()).norm() <= 1e-10);
  CHECK((gm.covs[0] - e.covariance()).norm() <= 1e-6 * e.covariance().norm());
  CHECK(gm.weights[0] == doctest::Approx(1.0));
}

TEST_CASE("GMM: two separated Diracs") {
  Mat pts(40, 1);
  for (int i = 0; i < 20; ++i) pts(i, 0) = 0.0;
  for (int i = 20; i < 40; ++i) pts(i, 0) = 10.0;
  GaussianMixture gm = fit_gmm(ParticleEnsemble::uniform(pts), 2);
  std::vector<double> means{gm.means[0][0], gm.means[1][0]};
  std::sort(means.begin(), means.end());
  CHECK(means[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(means[1] == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(gm.weights[0] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("GMM log-likelihood is non-decreasing per EM iteration") {
  Rng rng(29);
  for (int rep = 0; rep < 8; ++rep) {
    Mat pts(120, 2);
    for (int i = 0; i < 120; ++i) {
      double shift = (i % 3) * 2.5;
      pts.row(i) = (rng.normal_vec(2) + Vec::Constant(2, shift)).transpose();
    }
    std::vector<double> history;
    GmmConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(rep);
    fit_gmm(ParticleEnsemble::uniform(pts), 3, cfg, &history);
    for (size_t k = 1; k < history.size(); ++k) CHECK(history[k] >= history[k - 1] - 1e-9);
  }
}

TEST_CASE("matched GMM pair shares weights and degenerates to the same mixture") {
  Rng rng(37);
  Mat pts(150, 2);
  for (int i = 0; i < 150; ++i) {
    double shift = (i % 2) * 4.0;
    pts.row(i) = (rng.normal_vec(2) + Vec::Constant(2, shift)).transpose();
  }
  ParticleEnsemble e = ParticleEnsemble::uniform(pts);
  GmmConfig cfg;
  cfg.tol = 1e-14;
  cfg.max_iterations = 500;
  auto [fault_gm, nom_gm] = matched_gmm_pair(e, e, 2, cfg);
  CHECK((fault_gm.weights - nom_gm.weights).lpNorm<Eigen::Infinity>() <= 1e-12);
  for (int i = 0; i < 2; ++i) {
    CHECK((fault_gm.means[static_cast<size_t>(i)] - nom_gm.means[static_cast<size_t>(i)]).norm() <=
          1e-5);
  }

  // M = 1: both sides single Gaussians with beta = 1
  auto [f1, n1] = matched_gmm_pair(e, e, 1, cfg);
  CHECK(f1.weights[0] == doctest::Approx(1.0));
  CHECK(n1.weights[0] == doctest::Approx(1.0));

  ParticleEnsemble other = random_ensemble(rng, 149, 2);
  CHECK_THROWS_AS(matched_gmm_pair(e, other, 2, cfg), ArgumentError);
}

TEST_CASE("ensemble validation contracts") {
  Mat pts(2, 1);
  pts << 0.0, 1.0;
  ParticleEnsemble e = ParticleEnsemble::uniform(pts);
  e.weights[0] = 0.7;  // breaks the simplex
  CHECK_THROWS_AS(e.validate(), ArgumentError);
  CHECK_THROWS_AS(fit_gmm(ParticleEnsemble::uniform(pts), 3), ArgumentError);  // N_p < M
}
