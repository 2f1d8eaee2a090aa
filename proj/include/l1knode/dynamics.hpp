// Rigid-body quadrotor model, quaternion utilities and fixed-step
// explicit Runge-Kutta integrators shared by the plant, the adaptive
// predictor and the MPC internal models.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>

namespace l1knode {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec13 = Eigen::Matrix<double, 13, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat13 = Eigen::Matrix<double, 13, 13>;
using Mat13x4 = Eigen::Matrix<double, 13, 4>;

struct InvalidStateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Physical parameters. Gravity is stored as the inertial-frame
// acceleration vector (East-North-Up, z pointing away from the ground).
struct QuadrotorParams {
  double mass = 0.04;
  Vec3 inertia_diag = Vec3(1.43e-5, 1.43e-5, 2.89e-5);
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);

  Mat3 inertia() const { return inertia_diag.asDiagonal(); }
  Vec3 inertia_inv_diag() const { return inertia_diag.cwiseInverse(); }
  double hover_thrust() const { return mass * gravity.norm(); }
  void validate() const;
};

// Collective thrust along body z plus three body moments.
struct ControlInput {
  double eta = 0.0;
  Vec3 tau = Vec3::Zero();

  Vec4 pack() const { return Vec4(eta, tau.x(), tau.y(), tau.z()); }
  static ControlInput unpack(const Vec4& u) { return {u(0), u.tail<3>()}; }
};

// 13-dimensional state: position, velocity (inertial), scalar-first unit
// quaternion, body angular rate.
struct State {
  Vec3 r = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec4 q = Vec4(1.0, 0.0, 0.0, 0.0);
  Vec3 omega = Vec3::Zero();

  Vec13 pack() const;
  static State unpack(const Vec13& x);
  bool finite() const;
};

// Time derivative of State, same layout.
using StateDeriv = Vec13;

// Skew-structured 4x4 quaternion-rate matrix; q_dot = 0.5 * Omega * q.
Mat4 omega_matrix(const Vec3& omega);

// Body-to-inertial rotation for an arbitrary nonzero quaternion. Uses the
// homogeneous (norm-invariant) form so it stays exact for solver iterates
// that have drifted slightly off the unit sphere.
Mat3 rotation_matrix(const Vec4& q);

// Validating variant: rejects quaternions more than 1e-6 away from unit norm.
Mat3 rotation_from_quat(const Vec4& q);

// Partial derivatives of rotation_matrix with respect to each quaternion
// component, written into dr[0..3].
void rotation_jacobian(const Vec4& q, Mat3 dr[4]);

Vec13 nominal_deriv(const Vec13& x, const Vec4& u, const QuadrotorParams& p);
StateDeriv nominal_deriv(const State& x, const ControlInput& u,
                         const QuadrotorParams& p);

// Analytic Jacobians of nominal_deriv with respect to state and input.
void nominal_deriv_jac(const Vec13& x, const Vec4& u, const QuadrotorParams& p,
                       Mat13& fx, Mat13x4& fu);

// Rescales the quaternion block to unit norm; throws on zero quaternion.
Vec13 normalize_quat(const Vec13& x);
State normalize_quat(const State& x);

// Jacobian of v -> v/|v| evaluated at v.
Mat4 quat_normalize_jacobian(const Vec4& q);

// One classical fourth-order Runge-Kutta step of dy/dt = f(y); the caller
// binds any held inputs into f.
template <class Vec, class F>
Vec rk4_step_raw(F&& f, const Vec& y, double h) {
  const Vec k1 = f(y);
  const Vec k2 = f(y + (0.5 * h) * k1);
  const Vec k3 = f(y + (0.5 * h) * k2);
  const Vec k4 = f(y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// One fixed-step fifth-order Runge-Kutta step (the fifth-order stage set of
// the Dormand-Prince pair).
template <class Vec, class F>
Vec rk5_step_raw(F&& f, const Vec& y, double h) {
  const Vec k1 = f(y);
  const Vec k2 = f(y + h * (1.0 / 5.0) * k1);
  const Vec k3 = f(y + h * ((3.0 / 40.0) * k1 + (9.0 / 40.0) * k2));
  const Vec k4 = f(y + h * ((44.0 / 45.0) * k1 - (56.0 / 15.0) * k2 +
                            (32.0 / 9.0) * k3));
  const Vec k5 =
      f(y + h * ((19372.0 / 6561.0) * k1 - (25360.0 / 2187.0) * k2 +
                 (64448.0 / 6561.0) * k3 - (212.0 / 729.0) * k4));
  const Vec k6 = f(y + h * ((9017.0 / 3168.0) * k1 - (355.0 / 33.0) * k2 +
                            (46732.0 / 5247.0) * k3 + (49.0 / 176.0) * k4 -
                            (5103.0 / 18656.0) * k5));
  return y + h * ((35.0 / 384.0) * k1 + (500.0 / 1113.0) * k3 +
                  (125.0 / 192.0) * k4 - (2187.0 / 6784.0) * k5 +
                  (11.0 / 84.0) * k6);
}

using DerivFn = std::function<StateDeriv(const State&, const ControlInput&)>;

// Full-state RK4/RK5 steps with the input held constant; the quaternion is
// renormalized afterwards and non-finite results raise DivergenceError.
State rk4_step(const DerivFn& f, const State& x, const ControlInput& u,
               double h);
State rk5_step(const DerivFn& f, const State& x, const ControlInput& u,
               double h);

// Derivative function bundled with its Jacobians; this is what the MPC
// transcription and the discrete one-step map consume. Models that cannot
// provide analytic Jacobians may leave jac empty and the caller falls back
// to finite differences.
struct DerivModel {
  std::function<Vec13(const Vec13&, const Vec4&)> f;
  std::function<void(const Vec13&, const Vec4&, Mat13&, Mat13x4&)> jac;
};

DerivModel nominal_model(const QuadrotorParams& p);

}  // namespace l1knode
