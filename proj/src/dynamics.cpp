#include "pfo/dynamics.hpp"

#include <cmath>
#include <string>

namespace pfo {

void SystemModel::check_dims() const {
  if (state_dim <= 0) throw ConfigError("SystemModel: state_dim must be positive");
  if (!drift || !control_gain || !fault_channel || !diffusion || !nominal_feedback)
    throw ConfigError("SystemModel: missing map");
}

namespace {

void check_vec(const Vec& v, int n, const char* what) {
  if (static_cast<int>(v.size()) != n)
    throw ConfigError(std::string(what) + ": dimension mismatch, got " +
                      std::to_string(v.size()) + " expected " + std::to_string(n));
}

void check_mat(const Mat& m, int r, int c, const char* what) {
  if (m.rows() != r || m.cols() != c)
    throw ConfigError(std::string(what) + ": dimension mismatch, got " +
                      std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + " expected " +
                      std::to_string(r) + "x" + std::to_string(c));
}

}  // namespace

Vec eval_closed_loop(const ClosedLoopField& field, const Vec& x, double t) {
  const SystemModel& sm = field.base;
  check_vec(x, sm.state_dim, "eval_closed_loop/x");
  if (!x.allFinite()) throw NumericError("eval_closed_loop: non-finite state");

  Vec f = sm.drift(x, t);
  check_vec(f, sm.state_dim, "drift");
  if (!f.allFinite()) throw NumericError("eval_closed_loop: non-finite drift f(x,t)");

  Vec u = sm.nominal_feedback(x, t);
  check_vec(u, sm.control_dim, "nominal_feedback");
  if (field.recovery_correction) {
    Vec ur = field.recovery_correction(x, t);
    check_vec(ur, sm.control_dim, "recovery_correction");
    u += ur;
  }
  if (!u.allFinite()) throw NumericError("eval_closed_loop: non-finite control u(x,t)");

  Mat g = sm.control_gain(x, t);
  check_mat(g, sm.state_dim, sm.control_dim, "control_gain");

  Vec out = f + g * u;
  if (field.fault.w.size() > 0 && !field.fault.is_nominal()) {
    check_vec(field.fault.w, sm.fault_dim, "fault.w");
    Mat psi = sm.fault_channel(x, t);
    check_mat(psi, sm.state_dim, sm.fault_dim, "fault_channel");
    if (!psi.allFinite()) throw NumericError("eval_closed_loop: non-finite fault channel psi(x,t)");
    out += psi * field.fault.w;
  }
  if (!out.allFinite()) throw NumericError("eval_closed_loop: non-finite field value");
  return out;
}

std::function<Vec(const Vec&, double)> ClosedLoopField::as_field() const {
  ClosedLoopField copy = *this;
  return [copy](const Vec& x, double t) { return eval_closed_loop(copy, x, t); };
}

Vec step_sde(const ClosedLoopField& field, const Vec& x, double t, double dt, Rng& rng) {
  if (dt <= 0.0) throw ArgumentError("step_sde: dt must be positive");
  const SystemModel& sm = field.base;
  Vec drift = eval_closed_loop(field, x, t);
  Mat sigma = sm.diffusion(x, t);
  check_mat(sigma, sm.state_dim, sm.noise_dim, "diffusion");
  Vec z = rng.normal_vec(sm.noise_dim);
  Vec out = x + drift * dt + sigma * (std::sqrt(dt) * z);
  if (!out.allFinite()) throw NumericError("step_sde: non-finite state after step");
  return out;
}

Vec flow_map(const std::function<Vec(const Vec&, double)>& field, const Vec& x, double s,
             double t, int steps) {
  if (steps < 1) throw ArgumentError("flow_map: steps must be >= 1");
  if (t < s) throw ArgumentError("flow_map: requires s <= t");
  if (t == s) return x;
  const double h = (t - s) / steps;
  Vec y = x;
  double tau = s;
  for (int k = 0; k < steps; ++k) {
    Vec k1 = field(y, tau);
    Vec k2 = field(y + 0.5 * h * k1, tau + 0.5 * h);
    Vec k3 = field(y + 0.5 * h * k2, tau + 0.5 * h);
    Vec k4 = field(y + h * k3, tau + h);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    tau += h;
    if (!y.allFinite())
      throw NumericError("flow_map: non-finite intermediate at step " + std::to_string(k));
  }
  return y;
}

Vec probability_flow_field(const ProbabilityFlowField& pf, const Vec& x, double t) {
  if (!pf.score_estimator) throw ConfigError("probability_flow_field: score estimator missing");
  const SystemModel& sm = pf.closed_loop.base;
  Vec fw = eval_closed_loop(pf.closed_loop, x, t);
  Mat sigma = sm.diffusion(x, t);
  Mat Sigma = sigma * sigma.transpose();
  Vec div = pf.divergence_of_sigma ? pf.divergence_of_sigma(x, t) : Vec(Vec::Zero(sm.state_dim));
  check_vec(div, sm.state_dim, "divergence_of_sigma");
  Vec score = pf.score_estimator(x, t);
  check_vec(score, sm.state_dim, "score_estimator");
  return fw - 0.5 * (div + Sigma * score);
}

std::vector<TrajectoryPair> generate_dataset(const SystemModel& model,
                                             const std::vector<FaultProfile>& library,
                                             const DatasetConfig& config) {
  if (library.empty()) throw ArgumentError("generate_dataset: empty fault library");
  if (!config.initial_sampler) throw ArgumentError("generate_dataset: missing initial sampler");
  if (config.gaps.empty()) throw ArgumentError("generate_dataset: no pair gaps configured");
  model.check_dims();

  const int n_fault = static_cast<int>(library.size());
  const int n_traj = config.trajectories_per_fault;
  const int total = n_fault * n_traj;
  std::vector<std::vector<TrajectoryPair>> per_traj(static_cast<size_t>(total));

  parallel_for(total, [&](int idx) {
    const int j = idx / std::max(n_traj, 1);
    Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(idx));
    const std::uint64_t traj_seed = derive_seed(config.seed, static_cast<std::uint64_t>(idx));

    ClosedLoopField field{model, library[static_cast<size_t>(j)], nullptr};
    Vec x = config.initial_sampler(rng);

    std::vector<Vec> states;
    states.reserve(static_cast<size_t>(config.steps_per_trajectory) + 1);
    states.push_back(x);
    const double h = config.dt / std::max(config.substeps, 1);
    for (int k = 0; k < config.steps_per_trajectory; ++k) {
      for (int sub = 0; sub < std::max(config.substeps, 1); ++sub)
        x = step_sde(field, x, k * config.dt + sub * h, h, rng);
      states.push_back(x);
    }

    std::vector<TrajectoryPair>& out = per_traj[static_cast<size_t>(idx)];
    for (int q = 0; q < config.pairs_per_trajectory; ++q) {
      int gap = config.gaps[static_cast<size_t>(rng.uniform_int(
          0, static_cast<int>(config.gaps.size()) - 1))];
      gap = std::min(gap, config.steps_per_trajectory);
      if (gap < 1) continue;
      int s_idx = rng.uniform_int(0, config.steps_per_trajectory - gap);
      TrajectoryPair pair;
      pair.x_s = states[static_cast<size_t>(s_idx)];
      pair.x_t = states[static_cast<size_t>(s_idx + gap)];
      pair.s = s_idx * config.dt;
      pair.t = (s_idx + gap) * config.dt;
      pair.w = library[static_cast<size_t>(j)].w;
      pair.seed = traj_seed;
      out.push_back(std::move(pair));
    }
  });

  std::vector<TrajectoryPair> dataset;
  for (auto& block : per_traj)
    for (auto& p : block) dataset.push_back(std::move(p));
  return dataset;
}

SystemModel make_linear_system(const Mat& A, const Mat& sigma_const) {
  const int n = static_cast<int>(A.rows());
  SystemModel sm;
  sm.state_dim = n;
  sm.control_dim = n;
  sm.fault_dim = n;
  sm.noise_dim = static_cast<int>(sigma_const.cols());
  sm.obs_dim = n;
  sm.drift = [A](const Vec& x, double) { return Vec(A * x); };
  sm.control_gain = [n](const Vec&, double) { return Mat(Mat::Identity(n, n)); };
  sm.fault_channel = [n](const Vec&, double) { return Mat(Mat::Identity(n, n)); };
  sm.diffusion = [sigma_const](const Vec&, double) { return sigma_const; };
  sm.nominal_feedback = [n](const Vec&, double) { return Vec(Vec::Zero(n)); };
  sm.observation = [](const Vec& x) { return x; };
  return sm;
}

}  // namespace pfo
