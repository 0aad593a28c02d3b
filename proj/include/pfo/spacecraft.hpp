#pragma once

#include "pfo/dynamics.hpp"

namespace pfo {

// 10-state spacecraft attitude benchmark: x = [theta, omega, omega_w] with
// four tetrahedrally mounted reaction wheels and a saturated PD tracker.
struct SpacecraftParams {
  Vec inertia = (Vec(3) << 1.0, 1.0, 0.8).finished();  // kg m^2
  double wheel_inertia = 0.01;                         // kg m^2
  Vec kp = (Vec(3) << 22.5, 18.0, 15.0).finished();
  Vec kd = (Vec(3) << 12.0, 9.0, 7.5).finished();
  double torque_limit = 0.14;  // N m per wheel
  double dt = 0.02;            // s
  double noise_body = 0.02;    // c_omega: multiplicative rate noise
  double noise_wheel = 0.02;   // c_w: multiplicative wheel-speed noise

  // columns are unit spin axes toward regular-tetrahedron vertices
  Mat allocation() const;
  Mat allocation_pinv() const;
  Vec theta_desired(double t) const;
  Vec theta_desired_rate(double t) const;
};

// Assembles the control-affine model (drift, gain, fault channel, diffusion,
// PD feedback, full-state observation). The multiplicative wheel
// loss-of-effectiveness alpha enters through the additive channel
// psi(x,t) alpha = -g(x,t) diag(u_cl(x,t)) alpha.
SystemModel build_spacecraft(const SpacecraftParams& params = {});

// Initial state on the reference: theta = theta_d(0), omega = dtheta_d(0),
// wheels at rest.
Vec spacecraft_initial_state(const SpacecraftParams& params = {});

}  // namespace pfo
