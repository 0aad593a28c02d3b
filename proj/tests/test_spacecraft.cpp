#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pfo/bench.hpp"
#include "pfo/io.hpp"
#include "pfo/spacecraft.hpp"

#include <cmath>
#include <cstdio>

using namespace pfo;

TEST_CASE("benchmark constants are pinned at model build") {
  SpacecraftParams p;
  CHECK(p.inertia[0] == 1.0);
  CHECK(p.inertia[1] == 1.0);
  CHECK(p.inertia[2] == 0.8);
  CHECK(p.wheel_inertia == 0.01);
  CHECK(p.kp[0] == 22.5);
  CHECK(p.kd[2] == 7.5);
  CHECK(p.torque_limit == 0.14);
  CHECK(p.dt == 0.02);

  SystemModel sm = build_spacecraft(p);
  CHECK(sm.state_dim == 10);  // 3 attitude + 3 rates + 4 wheels
  CHECK(sm.control_dim == 4);
  CHECK(sm.fault_dim == 4);
  CHECK(sm.obs_dim == 10);

  Mat A = p.allocation();
  for (int j = 0; j < 4; ++j) CHECK(A.col(j).norm() == doctest::Approx(1.0).epsilon(1e-14));
  // Moore-Penrose identities for the tetrahedral geometry
  CHECK((A * p.allocation_pinv() - Mat::Identity(3, 3)).norm() <= 1e-12);

  SpacecraftParams bad = p;
  bad.kp[1] = -1.0;
  CHECK_THROWS_AS(build_spacecraft(bad), ConfigError);
}

TEST_CASE("closed loop at the origin: hand-derived PD torques") {
  SpacecraftParams p;
  SystemModel sm = build_spacecraft(p);
  Vec x = Vec::Zero(10);

  // independent scalar re-derivation of u_nom = -Kp (theta - theta_d) - Kd w
  Vec theta_d0(3);
  theta_d0 << 0.05 * std::sin(0.0), 0.05 * std::cos(0.0), 0.0;
  Vec u_nom(3);
  for (int i = 0; i < 3; ++i) u_nom[i] = -p.kp[i] * (0.0 - theta_d0[i]) - p.kd[i] * 0.0;
  CHECK(u_nom[0] == doctest::Approx(0.0));
  CHECK(u_nom[1] == doctest::Approx(18.0 * 0.05));
  CHECK(u_nom[2] == doctest::Approx(0.0));

  // wheel torques: A-transpose scaled pseudstart, saturated at 0.14 per wheel
  const double s = 1.0 / std::sqrt(3.0);
  double raw = 0.75 * s * 0.9;  // |(3/4) A^T u_nom| componentwise
  CHECK(raw > 0.14);            // saturation engages
  Vec expected_uw(4);
  expected_uw << 0.14, -0.14, 0.14, -0.14;  // signs follow the tetrahedron columns
  Vec u_w = sm.nominal_feedback(x, 0.0);
  CHECK((u_w - expected_uw).norm() <= 1e-12);

  Vec xdot = eval_closed_loop(ClosedLoopField{sm, FaultProfile::nominal(4), nullptr}, x, 0.0);
  CHECK(xdot.head(3).norm() == 0.0);                          // theta_dot = omega = 0
  CHECK((xdot.tail(4) - expected_uw / p.wheel_inertia).norm() <= 1e-12);  // wheel accelerations
}

TEST_CASE("multiplicative loss of effectiveness through the additive channel") {
  SpacecraftParams p;
  SystemModel sm = build_spacecraft(p);
  Rng rng(3);
  Vec alpha(4);
  alpha << 0.15, 0.4, 0.2, 0.25;
  ClosedLoopField faulted{sm, FaultProfile{alpha, std::nullopt}, nullptr};
  for (int i = 0; i < 20; ++i) {
    Vec x = 0.05 * rng.normal_vec(10);
    double t = rng.uniform(0.0, 10.0);
    Vec via_channel = eval_closed_loop(faulted, x, t);
    // direct evaluation with the degraded wheel command
    Vec u_eff = (Vec::Ones(4) - alpha).cwiseProduct(sm.nominal_feedback(x, t));
    Vec direct = sm.drift(x, t) + sm.control_gain(x, t) * u_eff;
    CHECK((via_channel - direct).norm() <= 1e-12);
  }
}

TEST_CASE("zero-fault closed loop tracks the reference over 10 s") {
  SpacecraftParams p;
  SystemModel sm = build_spacecraft(p);
  ClosedLoopField nominal{sm, FaultProfile::nominal(4), nullptr};
  auto f = nominal.as_field();
  Vec x = spacecraft_initial_state(p);
  for (int k = 0; k < 500; ++k) x = flow_map(f, x, k * p.dt, (k + 1) * p.dt, 1);
  Vec attitude_error = x.head(3) - p.theta_desired(10.0);
  CHECK(attitude_error.norm() < 0.05);
  CHECK(x.allFinite());
}

TEST_CASE("improvement factor metric") {
  CHECK(bench::improvement_factor(10.58, 0.9909) == doctest::Approx(10.68).epsilon(1e-3));
  CHECK(bench::improvement_factor(1.0, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("default library: nominal first, parameters inside the box") {
  auto lib = bench::default_library();
  REQUIRE(lib.size() >= 5);
  CHECK(lib[0].w.norm() == 0.0);
  for (const auto& fp : lib) {
    CHECK(fp.w.minCoeff() >= 0.0);
    CHECK(fp.w.maxCoeff() <= 1.0);
  }
}

TEST_CASE("dataset and ensemble serialization round trips") {
  SpacecraftParams p;
  bench::ExperimentConfig cfg;
  cfg.trajectories_per_fault = 2;
  cfg.steps_per_trajectory = 10;
  cfg.pairs_per_trajectory = 3;
  cfg.gaps = {1, 5};
  cfg.seed = 11;
  auto lib = bench::default_library();
  auto data = bench::spacecraft_dataset(cfg, lib);
  REQUIRE_FALSE(data.empty());

  const std::string path = "/tmp/pfo_test_dataset.jsonl";
  save_dataset(path, data, 10, 4, 4, cfg.seed);
  int n = 0, m = 0, pf = 0;
  std::uint64_t seed = 0;
  auto loaded = load_dataset(path, &n, &m, &pf, &seed);
  CHECK(n == 10);
  CHECK(m == 4);
  CHECK(pf == 4);
  CHECK(seed == 11);
  REQUIRE(loaded.size() == data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK((loaded[i].x_s - data[i].x_s).norm() == 0.0);
    CHECK((loaded[i].x_t - data[i].x_t).norm() == 0.0);
    CHECK(loaded[i].s == data[i].s);
    CHECK(loaded[i].t == data[i].t);
  }
  std::remove(path.c_str());

  Rng rng(5);
  ParticleEnsemble e = ParticleEnsemble::uniform(rng.normal_mat(7, 3), 1.5);
  const std::string epath = "/tmp/pfo_test_ensemble.jsonl";
  save_ensemble(epath, e);
  ParticleEnsemble e2 = load_ensemble(epath);
  CHECK((e.points - e2.points).norm() == 0.0);
  CHECK(e2.timestamp == 1.5);
  std::remove(epath.c_str());
}

TEST_CASE("checkpoint serialization round trips the model") {
  Rng rng(7);
  Checkpoint ckpt;
  ckpt.model = FlowMapModel::create(3, 2, {6, 6}, rng);
  Vec theta = ckpt.model.net.flatten();
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] += 0.1 * rng.normal();
  ckpt.model.net.unflatten(theta);
  ckpt.model.x_shift = rng.normal_vec(3);
  ckpt.model.x_scale = rng.normal_vec(3).cwiseAbs() + Vec::Ones(3);
  ckpt.metric = MetricModel::create(3, 2, {5}, rng);
  ckpt.schedule_gamma0 = 0.04;
  ckpt.config_hash = "abc123";
  ckpt.history.push_back({0, {1.0, 2.0, 3.0, 4.0, 5.0, 2.0}});

  const std::string path = "/tmp/pfo_test_ckpt.json";
  save_checkpoint(path, ckpt);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.model.n == 3);
  CHECK((back.model.net.flatten() - ckpt.model.net.flatten()).norm() == 0.0);
  CHECK((back.model.x_shift - ckpt.model.x_shift).norm() == 0.0);
  CHECK(back.schedule_gamma0 == 0.04);
  CHECK(back.config_hash == "abc123");
  REQUIRE(back.history.size() == 1);
  CHECK(back.history[0].losses.fmm == 1.0);

  // the reloaded model evaluates identically
  OperatorCond cond{0.0, 0.5, (Vec(2) << 0.2, 0.7).finished()};
  for (int i = 0; i < 5; ++i) {
    Vec x = rng.normal_vec(3);
    CHECK((ckpt.model.phi(x, 0.0, 1.0, cond) - back.model.phi(x, 0.0, 1.0, cond)).norm() == 0.0);
  }
  std::remove(path.c_str());
}

TEST_CASE("experiment config: canonical hash is stable and JSON round trips") {
  bench::ExperimentConfig a;
  bench::ExperimentConfig b;
  CHECK(a.canonical_json() == b.canonical_json());
  b.seed = 99;
  CHECK(a.canonical_json() != b.canonical_json());

  bench::ExperimentConfig c = bench::ExperimentConfig::from_json_string(
      R"({"seed": 5, "train_steps": 123, "ocp": {"q_m": 2.5}})");
  CHECK(c.seed == 5);
  CHECK(c.train_steps == 123);
  CHECK(c.ocp_weights.q_m == 2.5);
  CHECK(c.batch_size == a.batch_size);  // defaults preserved
}

TEST_CASE("initial density sampler matches the declared distribution") {
  SpacecraftParams p;
  Rng rng(13);
  ParticleEnsemble rho = bench::sample_initial_density(p, 2000, rng);
  Vec x0 = spacecraft_initial_state(p);
  CHECK((rho.mean() - x0).norm() <= 3.0 * std::sqrt(1e-4 * 10.0 / 2000.0) * 2.0);
  Mat cov = rho.covariance();
  CHECK(std::abs(cov.trace() - 10 * 1e-4) <= 3e-4);
}
