// Adaptive augmentation: uncertainty geometry, state predictor, piecewise
// constant adaptation law, discrete low-pass filter and the mapping of the
// estimates into residual accelerations.
#pragma once

#include "l1knode/knode.hpp"

namespace l1knode {

using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat6x2 = Eigen::Matrix<double, 6, 2>;

struct L1Config {
  Vec6 a_diag = -Vec6::Ones();  // diagonal Hurwitz predictor gain
  double period = 0.01;         // adaptation sampling period, s
  Vec4 gamma = Vec4::Zero();    // per-channel filter cut-offs, rad/s
  bool identity_filter = true;  // bypass the filter (u_l1 = -sigma_m)

  void validate() const;

  // Per-channel cut-offs matching the hardware tuning: 0.125 rad/s on the
  // roll/pitch moment channels, 0.75 rad/s on thrust and yaw.
  static Vec4 hardware_filter_preset();
};

struct L1State {
  Vec6 z_hat = Vec6::Zero();      // predicted (v, omega)
  Vec6 sigma_hat = Vec6::Zero();  // (sigma_m[4], sigma_um[2])
  Vec4 u_l1_prev = Vec4::Zero();
  bool initialized = false;

  Vec4 sigma_m() const { return sigma_hat.head<4>(); }
  Eigen::Vector2d sigma_um() const { return sigma_hat.tail<2>(); }
};

// G = [G1 G2] maps (sigma_m, sigma_um) into (v_dot, omega_dot) space. The
// inverse is closed-form: the velocity block inverts through m R^T and the
// rate block through J.
struct GMap {
  Eigen::Matrix<double, 6, 4> g1;
  Mat6x2 g2;
  Mat6 g;
  Mat6 g_inv;
};

GMap build_G(const State& x, const QuadrotorParams& p);

// Partial state z = (v, omega) of a full state.
Vec6 partial_state(const State& x);

// Advances z_hat over one adaptation period by an explicit fifth-order RK
// step of the predictor dynamics, holding x, u_bar, d_theta_z and sigma_hat
// constant across the step.
Vec6 predictor_step(const L1State& l1, const State& x,
                    const ControlInput& u_bar, const Vec6& d_theta_z,
                    const QuadrotorParams& p, const L1Config& cfg);

// Piecewise-constant adaptation law. With a diagonal predictor gain the
// interval-exact update reduces to per-channel scalar gains
// mu_i = a_i e^{a_i T} / (e^{a_i T} - 1) applied to the prediction error
// before the G inverse; no general matrix exponential is formed.
Vec6 adaptation_update(const Vec6& z, const Vec6& z_hat, const GMap& G,
                       const L1Config& cfg);

// Discrete low-pass filter: u = (u_prev + sigma_m) e^{-gamma T} - sigma_m.
Vec4 lpf_step(const Vec4& u_prev, const Vec4& sigma_m, const L1Config& cfg);

struct UncertaintyAccels {
  Vec3 f_sigma = Vec3::Zero();  // translational, inertial frame, m/s^2
  Vec3 m_sigma = Vec3::Zero();  // rotational, rad/s^2
};

UncertaintyAccels uncertainty_to_accels(const GMap& G, const Vec6& sigma_hat);

// Adds the frozen residual accelerations to the fused model's velocity and
// rate slots; the accels act as constants over one MPC solve.
DerivModel augment_deriv(const KnodeModel& model,
                         const UncertaintyAccels& accels);

}  // namespace l1knode
