#include "l1knode/l1_adaptive.hpp"

namespace l1knode {

void L1Config::validate() const {
  if (!(a_diag.maxCoeff() < 0.0))
    throw ConfigError("L1Config: predictor gain diagonal must be negative");
  if (!(period > 0.0)) throw ConfigError("L1Config: period must be positive");
  if (gamma.minCoeff() < 0.0)
    throw ConfigError("L1Config: filter cut-offs must be non-negative");
}

Vec4 L1Config::hardware_filter_preset() {
  return Vec4(0.75, 0.125, 0.125, 0.75);
}

Vec6 partial_state(const State& x) {
  Vec6 z;
  z.head<3>() = x.v;
  z.tail<3>() = x.omega;
  return z;
}

GMap build_G(const State& x, const QuadrotorParams& p) {
  const Mat3 rot = rotation_matrix(x.q);
  const double inv_m = 1.0 / p.mass;

  GMap g;
  g.g1.setZero();
  g.g1.block<3, 1>(0, 0) = inv_m * rot.col(2);
  g.g1.block<3, 3>(3, 1) = p.inertia_inv_diag().asDiagonal();
  g.g2.setZero();
  g.g2.block<3, 1>(0, 0) = inv_m * rot.col(0);
  g.g2.block<3, 1>(0, 1) = inv_m * rot.col(1);
  g.g.leftCols<4>() = g.g1;
  g.g.rightCols<2>() = g.g2;

  // Closed-form inverse: velocity rows project through m R^T with the
  // (z, x, y) column ordering; rate rows multiply by J.
  g.g_inv.setZero();
  g.g_inv.block<1, 3>(0, 0) = p.mass * rot.col(2).transpose();
  g.g_inv.block<3, 3>(1, 3) = p.inertia_diag.asDiagonal();
  g.g_inv.block<1, 3>(4, 0) = p.mass * rot.col(0).transpose();
  g.g_inv.block<1, 3>(5, 0) = p.mass * rot.col(1).transpose();
  return g;
}

Vec6 predictor_step(const L1State& l1, const State& x,
                    const ControlInput& u_bar, const Vec6& d_theta_z,
                    const QuadrotorParams& p, const L1Config& cfg) {
  const GMap g = build_G(x, p);
  const Vec6 z = partial_state(x);

  Vec6 fixed;
  fixed.head<3>() = p.gravity;
  const Vec3 jw = p.inertia_diag.cwiseProduct(x.omega);
  fixed.tail<3>() = -p.inertia_inv_diag().cwiseProduct(x.omega.cross(jw));
  fixed += d_theta_z + g.g1 * u_bar.pack() + g.g * l1.sigma_hat;

  auto rhs = [&](const Vec6& zh) -> Vec6 {
    return fixed + cfg.a_diag.cwiseProduct(zh - z);
  };
  Vec6 next = rk5_step_raw(rhs, l1.z_hat, cfg.period);
  if (!next.allFinite())
    throw DivergenceError("predictor_step: non-finite prediction");
  return next;
}

Vec6 adaptation_update(const Vec6& z, const Vec6& z_hat, const GMap& G,
                       const L1Config& cfg) {
  Vec6 gain;
  for (int i = 0; i < 6; ++i) {
    const double e_at = std::exp(cfg.a_diag(i) * cfg.period);
    gain(i) = cfg.a_diag(i) * e_at / (e_at - 1.0);
  }
  return G.g_inv * gain.cwiseProduct(z - z_hat);
}

Vec4 lpf_step(const Vec4& u_prev, const Vec4& sigma_m, const L1Config& cfg) {
  if (cfg.identity_filter) return -sigma_m;
  const Vec4 decay = (-cfg.gamma * cfg.period).array().exp();
  return (u_prev + sigma_m).cwiseProduct(decay) - sigma_m;
}

UncertaintyAccels uncertainty_to_accels(const GMap& G, const Vec6& sigma_hat) {
  const Vec6 accel = G.g * sigma_hat;
  UncertaintyAccels out;
  out.f_sigma = accel.head<3>();
  out.m_sigma = accel.tail<3>();
  return out;
}

DerivModel augment_deriv(const KnodeModel& model,
                         const UncertaintyAccels& accels) {
  DerivModel base = model.deriv_model();
  const Vec3 f = accels.f_sigma;
  const Vec3 m = accels.m_sigma;
  DerivModel out;
  out.f = [base, f, m](const Vec13& x, const Vec4& u) {
    Vec13 dx = base.f(x, u);
    dx.segment<3>(3) += f;
    dx.segment<3>(10) += m;
    return dx;
  };
  out.jac = base.jac;  // constant shift, Jacobians unchanged
  return out;
}

}  // namespace l1knode
