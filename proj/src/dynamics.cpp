#include "l1knode/dynamics.hpp"

namespace l1knode {

namespace {

Mat3 skew(const Vec3& a) {
  Mat3 s;
  s << 0.0, -a.z(), a.y(), a.z(), 0.0, -a.x(), -a.y(), a.x(), 0.0;
  return s;
}

// Homogeneous quadratic form M(q) with rotation_matrix(q) = M(q) / |q|^2.
Mat3 rotation_numerator(const Vec4& q) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3 m;
  m << w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z),
      2.0 * (x * z + w * y), 2.0 * (x * y + w * z),
      w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x),
      2.0 * (x * z - w * y), 2.0 * (y * z + w * x),
      w * w - x * x - y * y + z * z;
  return m;
}

}  // namespace

void QuadrotorParams::validate() const {
  if (!(mass > 0.0)) throw ConfigError("quadrotor mass must be positive");
  if (!(inertia_diag.minCoeff() > 0.0))
    throw ConfigError("inertia diagonal entries must be positive");
  if (!inertia_diag.allFinite() || !gravity.allFinite() ||
      !std::isfinite(mass))
    throw ConfigError("quadrotor parameters must be finite");
}

Vec13 State::pack() const {
  Vec13 x;
  x.segment<3>(0) = r;
  x.segment<3>(3) = v;
  x.segment<4>(6) = q;
  x.segment<3>(10) = omega;
  return x;
}

State State::unpack(const Vec13& x) {
  State s;
  s.r = x.segment<3>(0);
  s.v = x.segment<3>(3);
  s.q = x.segment<4>(6);
  s.omega = x.segment<3>(10);
  return s;
}

bool State::finite() const {
  return r.allFinite() && v.allFinite() && q.allFinite() &&
         omega.allFinite();
}

Mat4 omega_matrix(const Vec3& w) {
  Mat4 m;
  m << 0.0, -w.x(), -w.y(), -w.z(),  //
      w.x(), 0.0, w.z(), -w.y(),     //
      w.y(), -w.z(), 0.0, w.x(),     //
      w.z(), w.y(), -w.x(), 0.0;
  return m;
}

Mat3 rotation_matrix(const Vec4& q) {
  const double n2 = q.squaredNorm();
  if (!(n2 > 0.0) || !q.allFinite())
    throw InvalidStateError("rotation_matrix: zero or non-finite quaternion");
  return rotation_numerator(q) / n2;
}

Mat3 rotation_from_quat(const Vec4& q) {
  if (std::abs(q.norm() - 1.0) > 1e-6)
    throw InvalidStateError("rotation_from_quat: quaternion norm deviates from 1");
  return rotation_matrix(q);
}

void rotation_jacobian(const Vec4& q, Mat3 dr[4]) {
  const double n2 = q.squaredNorm();
  const Mat3 m = rotation_numerator(q);
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3 dm[4];
  dm[0] << 2 * w, -2 * z, 2 * y,  //
      2 * z, 2 * w, -2 * x,       //
      -2 * y, 2 * x, 2 * w;
  dm[1] << 2 * x, 2 * y, 2 * z,  //
      2 * y, -2 * x, -2 * w,     //
      2 * z, 2 * w, -2 * x;
  dm[2] << -2 * y, 2 * x, 2 * w,  //
      2 * x, 2 * y, 2 * z,        //
      -2 * w, 2 * z, -2 * y;
  dm[3] << -2 * z, -2 * w, 2 * x,  //
      2 * w, -2 * z, 2 * y,        //
      2 * x, 2 * y, 2 * z;
  for (int k = 0; k < 4; ++k)
    dr[k] = (dm[k] * n2 - m * (2.0 * q(k))) / (n2 * n2);
}

Vec13 nominal_deriv(const Vec13& x, const Vec4& u, const QuadrotorParams& p) {
  const Vec3 v = x.segment<3>(3);
  const Vec4 q = x.segment<4>(6);
  const Vec3 w = x.segment<3>(10);
  const Mat3 rot = rotation_matrix(q);

  Vec13 dx;
  dx.segment<3>(0) = v;
  dx.segment<3>(3) = p.gravity + rot.col(2) * (u(0) / p.mass);
  dx.segment<4>(6) = 0.5 * omega_matrix(w) * q;
  const Vec3 jw = p.inertia_diag.cwiseProduct(w);
  dx.segment<3>(10) =
      p.inertia_inv_diag().cwiseProduct(u.tail<3>() - w.cross(jw));
  return dx;
}

StateDeriv nominal_deriv(const State& x, const ControlInput& u,
                         const QuadrotorParams& p) {
  return nominal_deriv(x.pack(), u.pack(), p);
}

void nominal_deriv_jac(const Vec13& x, const Vec4& u, const QuadrotorParams& p,
                       Mat13& fx, Mat13x4& fu) {
  const Vec4 q = x.segment<4>(6);
  const Vec3 w = x.segment<3>(10);
  const Mat3 rot = rotation_matrix(q);
  Mat3 dr[4];
  rotation_jacobian(q, dr);

  fx.setZero();
  fu.setZero();

  // r_dot = v
  fx.block<3, 3>(0, 3).setIdentity();

  // v_dot = gravity + R e3 eta / m
  for (int k = 0; k < 4; ++k)
    fx.block<3, 1>(3, 6 + k) = dr[k].col(2) * (u(0) / p.mass);
  fu.block<3, 1>(3, 0) = rot.col(2) / p.mass;

  // q_dot = 0.5 Omega(w) q
  fx.block<4, 4>(6, 6) = 0.5 * omega_matrix(w);
  const double qw = q(0);
  const Vec3 qv = q.tail<3>();
  Eigen::Matrix<double, 4, 3> dq_dw;
  dq_dw.row(0) = -qv.transpose();
  dq_dw.block<3, 3>(1, 0) = qw * Mat3::Identity() + skew(qv);
  fx.block<4, 3>(6, 10) = 0.5 * dq_dw;

  // w_dot = J^-1 (tau - w x J w)
  const Mat3 jmat = p.inertia_diag.asDiagonal();
  const Mat3 jinv = p.inertia_inv_diag().asDiagonal();
  const Mat3 d_cross = skew(w) * jmat - skew(jmat * w);
  fx.block<3, 3>(10, 10) = -jinv * d_cross;
  fu.block<3, 3>(10, 1) = jinv;
}

Vec13 normalize_quat(const Vec13& x) {
  Vec13 y = x;
  const double n = y.segment<4>(6).norm();
  if (!(n > 0.0))
    throw InvalidStateError("normalize_quat: zero quaternion");
  y.segment<4>(6) /= n;
  return y;
}

State normalize_quat(const State& x) {
  return State::unpack(normalize_quat(x.pack()));
}

Mat4 quat_normalize_jacobian(const Vec4& q) {
  const double n = q.norm();
  const Vec4 qh = q / n;
  return (Mat4::Identity() - qh * qh.transpose()) / n;
}

State rk4_step(const DerivFn& f, const State& x, const ControlInput& u,
               double h) {
  if (!(h > 0.0)) throw ConfigError("rk4_step: step size must be positive");
  auto rhs = [&](const Vec13& y) { return f(State::unpack(y), u); };
  Vec13 y = rk4_step_raw(rhs, x.pack(), h);
  if (!y.allFinite()) throw DivergenceError("rk4_step: non-finite state");
  return State::unpack(normalize_quat(y));
}

State rk5_step(const DerivFn& f, const State& x, const ControlInput& u,
               double h) {
  if (!(h > 0.0)) throw ConfigError("rk5_step: step size must be positive");
  auto rhs = [&](const Vec13& y) { return f(State::unpack(y), u); };
  Vec13 y = rk5_step_raw(rhs, x.pack(), h);
  if (!y.allFinite()) throw DivergenceError("rk5_step: non-finite state");
  return State::unpack(normalize_quat(y));
}

DerivModel nominal_model(const QuadrotorParams& p) {
  DerivModel m;
  m.f = [p](const Vec13& x, const Vec4& u) { return nominal_deriv(x, u, p); };
  m.jac = [p](const Vec13& x, const Vec4& u, Mat13& fx, Mat13x4& fu) {
    nominal_deriv_jac(x, u, p, fx, fu);
  };
  return m;
}

}  // namespace l1knode
