#include "pfo/spacecraft.hpp"

#include "pfo/common.hpp"

#include <cmath>

namespace pfo {

Mat SpacecraftParams::allocation() const {
  Mat A(3, 4);
  const double s = 1.0 / std::sqrt(3.0);
  A.col(0) << s, s, s;
  A.col(1) << s, -s, -s;
  A.col(2) << -s, s, -s;
  A.col(3) << -s, -s, s;
  return A;
}

Mat SpacecraftParams::allocation_pinv() const {
  Mat A = allocation();
  // Moore-Penrose pseudoinverse; for this geometry A A^T = (4/3) I
  return A.transpose() * (A * A.transpose()).inverse();
}

Vec SpacecraftParams::theta_desired(double t) const {
  Vec th(3);
  th << 0.05 * std::sin(0.2 * M_PI * t), 0.05 * std::cos(0.2 * M_PI * t), (M_PI / 250.0) * t;
  return th;
}

Vec SpacecraftParams::theta_desired_rate(double t) const {
  Vec th(3);
  th << 0.05 * 0.2 * M_PI * std::cos(0.2 * M_PI * t), -0.05 * 0.2 * M_PI * std::sin(0.2 * M_PI * t),
      M_PI / 250.0;
  return th;
}

SystemModel build_spacecraft(const SpacecraftParams& p) {
  // benchmark constants are pinned; bail out loudly if a caller tampered
  if (p.inertia.size() != 3 || p.inertia.minCoeff() <= 0.0 || p.wheel_inertia <= 0.0)
    throw ConfigError("build_spacecraft: inertias must be positive");
  if ((p.kp.array() <= 0.0).any() || (p.kd.array() <= 0.0).any())
    throw ConfigError("build_spacecraft: PD gains must be positive definite");
  Mat A = p.allocation();
  for (int j = 0; j < 4; ++j)
    if (std::abs(A.col(j).norm() - 1.0) > 1e-12)
      throw ConfigError("build_spacecraft: allocation columns must be unit vectors");

  const Mat Apinv = p.allocation_pinv();
  const Mat I_inv = p.inertia.cwiseInverse().asDiagonal();
  const double Jw = p.wheel_inertia;
  const double limit = p.torque_limit;
  const double c_om = p.noise_body;
  const double c_w = p.noise_wheel;
  const SpacecraftParams params = p;

  SystemModel sm;
  sm.state_dim = 10;
  sm.control_dim = 4;
  sm.fault_dim = 4;
  sm.noise_dim = 7;
  sm.obs_dim = 10;

  const Vec inertia = p.inertia;
  sm.drift = [A, I_inv, Jw, inertia](const Vec& x, double) {
    Eigen::Vector3d omega = x.segment(3, 3);
    Vec omega_w = x.tail(4);
    Eigen::Vector3d h = inertia.cwiseProduct(x.segment(3, 3)) + Jw * (A * omega_w);
    Vec out(10);
    out.head(3) = omega;
    out.segment(3, 3) = I_inv * (-omega.cross(h));
    out.tail(4).setZero();
    return out;
  };

  Mat g_mat = Mat::Zero(10, 4);
  g_mat.block(3, 0, 3, 4) = I_inv * A;
  g_mat.block(6, 0, 4, 4) = (1.0 / Jw) * Mat::Identity(4, 4);
  sm.control_gain = [g_mat](const Vec&, double) { return g_mat; };

  auto u_cl = [params, Apinv, limit](const Vec& x, double t) {
    Vec theta = x.head(3);
    Vec omega = x.segment(3, 3);
    Vec u_nom = -params.kp.cwiseProduct(theta - params.theta_desired(t)) -
                params.kd.cwiseProduct(omega);
    Vec u_w = Apinv * u_nom;
    return Vec(u_w.cwiseMax(-limit).cwiseMin(limit));
  };
  sm.nominal_feedback = u_cl;

  sm.fault_channel = [g_mat, u_cl](const Vec& x, double t) {
    return Mat(-g_mat * u_cl(x, t).asDiagonal());
  };

  sm.diffusion = [c_om, c_w](const Vec& x, double) {
    Mat sig = Mat::Zero(10, 7);
    for (int i = 0; i < 3; ++i) sig(3 + i, i) = c_om * std::abs(x[3 + i]);
    for (int i = 0; i < 4; ++i) sig(6 + i, 3 + i) = c_w * std::abs(x[6 + i]);
    return sig;
  };

  sm.observation = [](const Vec& x) { return x; };
  return sm;
}

Vec spacecraft_initial_state(const SpacecraftParams& params) {
  Vec x = Vec::Zero(10);
  x.head(3) = params.theta_desired(0.0);
  x.segment(3, 3) = params.theta_desired_rate(0.0);
  return x;
}

}  // namespace pfo
