#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pfo/inference.hpp"
#include "pfo/linalg.hpp"

#include <cmath>

using namespace pfo;

namespace {

auto identity_obs = [](const Vec& x) { return x; };

// 1D testbed: xdot = -x + w with additive fault channel
SystemModel scalar_system(double sigma = 0.0) {
  return make_linear_system(-Mat::Identity(1, 1), sigma * Mat::Identity(1, 1));
}

}  // namespace

TEST_CASE("predictive likelihood hand values") {
  Mat R = Mat::Identity(1, 1);
  Vec y = Vec::Zero(1);

  ParticleEnsemble single = ParticleEnsemble::dirac(Vec::Zero(1));
  CHECK(predictive_likelihood(single, y, identity_obs, R) == doctest::Approx(1.0));

  Mat pts(2, 1);
  pts << 1.0, -1.0;
  ParticleEnsemble two = ParticleEnsemble::uniform(pts);
  CHECK(predictive_likelihood(two, y, identity_obs, R) ==
        doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

  // particle reordering leaves the value unchanged
  Mat swapped(2, 1);
  swapped << -1.0, 1.0;
  CHECK(predictive_likelihood(ParticleEnsemble::uniform(swapped), y, identity_obs, R) ==
        doctest::Approx(predictive_likelihood(two, y, identity_obs, R)).epsilon(1e-14));

  Mat bad = -Mat::Identity(1, 1);
  CHECK_THROWS_AS(predictive_likelihood(two, y, identity_obs, bad), ArgumentError);
}

TEST_CASE("posterior update: invariance, simplex, argmax stability under R scaling") {
  SystemModel sm = scalar_system();
  Mat R = 0.01 * Mat::Identity(1, 1);
  Rng rng(3);

  auto make_bank = [&](double offset) {
    HypothesisBank bank;
    bank.R = R;
    for (int j = 0; j < 3; ++j) {
      Hypothesis h;
      h.fault = FaultProfile{Vec::Constant(1, 0.1 * j), j};
      Mat pts(8, 1);
      for (int i = 0; i < 8; ++i) pts(i, 0) = offset + 0.01 * i;
      h.ensemble = ParticleEnsemble::uniform(pts);
      h.log_weight = 0.0;
      bank.hypotheses.push_back(std::move(h));
    }
    return bank;
  };

  // identical predicted ensembles: weights stay uniform
  HypothesisBank bank = make_bank(0.0);
  UpdateConfig ucfg;
  ucfg.resample = false;
  update_posterior(bank, Vec::Zero(1), identity_obs, rng, ucfg);
  Vec post = bank.posterior();
  CHECK(post.sum() == doctest::Approx(1.0).epsilon(1e-12));
  for (int j = 0; j < 3; ++j) CHECK(post[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // argmax invariant when R is scaled by c > 0 (single-particle hypotheses)
  HypothesisBank b1, b2;
  b1.R = R;
  b2.R = 10.0 * R;
  for (int j = 0; j < 3; ++j) {
    Hypothesis h;
    h.fault = FaultProfile{Vec::Constant(1, 0.1 * j), j};
    h.ensemble = ParticleEnsemble::dirac(Vec::Constant(1, static_cast<double>(j)));
    h.log_weight = 0.0;
    b1.hypotheses.push_back(h);
    b2.hypotheses.push_back(h);
  }
  Vec y = Vec::Constant(1, 1.9);
  update_posterior(b1, y, identity_obs, rng, ucfg);
  update_posterior(b2, y, identity_obs, rng, ucfg);
  int arg1 = 0, arg2 = 0;
  b1.posterior().maxCoeff(&arg1);
  b2.posterior().maxCoeff(&arg2);
  CHECK(arg1 == 2);
  CHECK(arg2 == 2);
}

TEST_CASE("posterior concentrates on the true fault within 100 steps (1D testbed)") {
  SystemModel sm = scalar_system(0.02);
  const double dt = 0.05;
  Mat R = 1e-4 * Mat::Identity(1, 1);
  std::vector<FaultProfile> library{FaultProfile::nominal(1),
                                    FaultProfile{Vec::Constant(1, 0.5), 1},
                                    FaultProfile{Vec::Constant(1, 1.0), 2}};
  const int true_idx = 1;

  Rng truth_rng(7), bank_rng(11);
  HypothesisBank bank;
  bank.R = R;
  for (const auto& fp : library) {
    Hypothesis h;
    h.fault = fp;
    Mat pts(32, 1);
    for (int i = 0; i < 32; ++i) pts(i, 0) = 1.0 + 0.01 * truth_rng.normal();
    h.ensemble = ParticleEnsemble::uniform(pts);
    h.log_weight = 0.0;
    bank.hypotheses.push_back(std::move(h));
  }

  ClosedLoopField truth{sm, library[true_idx], nullptr};
  Vec x = Vec::Constant(1, 1.0);
  bool concentrated = false;
  for (int k = 0; k < 100 && !concentrated; ++k) {
    x = step_sde(truth, x, k * dt, dt, truth_rng);
    Vec y = x + 0.01 * truth_rng.normal_vec(1);
    predict_bank(bank, sm, k * dt, (k + 1) * dt, {});
    update_posterior(bank, y, identity_obs, bank_rng);
    Vec post = bank.posterior();
    CHECK(post.sum() == doctest::Approx(1.0).epsilon(1e-12));
    if (post[true_idx] > 0.95) concentrated = true;
  }
  CHECK(concentrated);
}

TEST_CASE("learned-operator prediction requires a checkpoint") {
  SystemModel sm = scalar_system();
  HypothesisBank bank;
  bank.R = Mat::Identity(1, 1);
  Hypothesis h;
  h.fault = FaultProfile::nominal(1);
  h.ensemble = ParticleEnsemble::dirac(Vec::Zero(1));
  bank.hypotheses.push_back(h);
  PredictConfig pcfg;
  pcfg.mode = PredictMode::learned_operator;
  CHECK_THROWS_AS(predict_bank(bank, sm, 0.0, 0.1, pcfg), ConfigError);

  // particle count preserved in true-flow mode
  predict_bank(bank, sm, 0.0, 0.1, {});
  CHECK(bank.hypotheses[0].ensemble.size() == 1);
}

TEST_CASE("continuous MLE recovers the generating fault on noiseless data") {
  SystemModel sm = scalar_system(0.0);
  const double dt = 0.05;
  const int steps = 60;
  Vec w_true = Vec::Constant(1, 0.37);
  ClosedLoopField truth{sm, FaultProfile{w_true, std::nullopt}, nullptr};
  auto fn = truth.as_field();

  Vec x0 = Vec::Constant(1, 1.0);
  std::vector<std::pair<double, Vec>> history;
  Vec x = x0;
  history.emplace_back(0.0, x);
  for (int k = 0; k < steps; ++k) {
    x = flow_map(fn, x, k * dt, (k + 1) * dt, 1);
    history.emplace_back((k + 1) * dt, x);
  }

  Mat R = Mat::Identity(1, 1);
  MleConfig cfg;
  cfg.starts = 4;
  cfg.iterations = 80;
  cfg.seed = 3;
  ContinuousFaultEstimate est =
      fit_continuous_fault(history, sm, x0, Vec::Zero(1), Vec::Ones(1), R, cfg);
  CHECK(std::abs(est.w_mle[0] - 0.37) <= 1e-6);
  CHECK(est.objective <= 1e-10);

  // local optimality: objective at w_true below random perturbations
  double at_true = continuous_fault_objective(history, sm, x0, w_true, R, 1);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    Vec w = w_true + Vec::Constant(1, 0.2 * rng.normal());
    w = w.cwiseMax(0.0).cwiseMin(1.0);
    CHECK(at_true <= continuous_fault_objective(history, sm, x0, w, R, 1) + 1e-12);
  }

  // diverging candidates score +infinity but do not crash the optimizer
  SystemModel unstable = make_linear_system(50.0 * Mat::Identity(1, 1), Mat(Mat::Zero(1, 1)));
  double bad = continuous_fault_objective(history, unstable, x0, Vec::Constant(1, 1.0), R, 1);
  CHECK(std::isinf(bad));
}

TEST_CASE("reachable family via an exactly constructed conditional operator") {
  // Delta(x, ..., w) = w: family members are shifted copies, so pairwise W2
  // separations reproduce the ordering of parameter distances.
  Rng rng(9);
  FlowMapModel model = FlowMapModel::create(1, 1, {}, rng);
  model.net.W[0].setZero();
  model.net.W[0](0, 1 + 4) = 1.0;  // weight on the fault input
  model.net.b[0].setZero();

  Mat pts = rng.normal_mat(32, 1);
  ParticleEnsemble rho = ParticleEnsemble::uniform(pts);
  std::vector<Vec> faults{Vec::Constant(1, 0.0), Vec::Constant(1, 0.3), Vec::Constant(1, 0.9)};
  auto family = reachable_family(rho, faults, 0.0, 1.0, model);
  REQUIRE(family.size() == 3);

  // nominal member equals the nominal prediction
  ParticleEnsemble nominal = apply_operator(model, rho, 0.0, 1.0, faults[0]);
  CHECK((family[0].points - nominal.points).norm() == 0.0);

  double d01 = wasserstein2_distance(family[0], family[1]);
  double d02 = wasserstein2_distance(family[0], family[2]);
  double d12 = wasserstein2_distance(family[1], family[2]);
  CHECK(d01 == doctest::Approx(0.3).epsilon(1e-9));
  CHECK(d02 == doctest::Approx(0.9).epsilon(1e-9));
  CHECK(d12 == doctest::Approx(0.6).epsilon(1e-9));
  CHECK(d02 > d01);
  CHECK(d02 > d12);

  auto one = reachable_family(rho, {faults[2]}, 0.0, 1.0, model);
  CHECK(one.size() == 1);
}

TEST_CASE("systematic resampling preserves the weighted mean within MC error") {
  Rng rng(13);
  Mat pts = rng.normal_mat(400, 2);
  Vec w(400);
  for (int i = 0; i < 400; ++i) w[i] = rng.uniform(0.1, 1.0);
  ParticleEnsemble e;
  e.points = pts;
  e.weights = w / w.sum();
  Vec mean_before = e.mean();
  Mat cov = e.covariance();

  Vec acc = Vec::Zero(2);
  const int reps = 50;
  for (int r = 0; r < reps; ++r) acc += systematic_resample(e, rng).mean();
  acc /= reps;
  double se = std::sqrt(cov.trace() / (400.0 * reps));
  CHECK((acc - mean_before).norm() <= 3.0 * se * 3.0);
}
