#include "l1knode/mpc.hpp"

#include <algorithm>
#include <cmath>

#include "l1knode/qp.hpp"

namespace l1knode {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Converged:
      return "converged";
    case SolveStatus::MaxIterations:
      return "max-iterations";
    case SolveStatus::LineSearchFailure:
      return "line-search-failure";
  }
  return "unknown";
}

void OcpConfig::validate() const {
  if (horizon < 1) throw ConfigError("OcpConfig: horizon must be >= 1");
  if (!(dt > 0.0)) throw ConfigError("OcpConfig: dt must be positive");
  if ((u_min.array() > u_max.array()).any())
    throw ConfigError("OcpConfig: u_min exceeds u_max");
  auto check_sym_psd = [](const auto& m, const char* name, bool strict) {
    if (!m.isApprox(m.transpose(), 1e-9))
      throw ConfigError(std::string("OcpConfig: ") + name +
                        " must be symmetric");
    Eigen::SelfAdjointEigenSolver<std::decay_t<decltype(m)>> es(m);
    const double floor = strict ? 1e-12 : -1e-12;
    if (es.eigenvalues().minCoeff() < floor)
      throw ConfigError(std::string("OcpConfig: ") + name +
                        (strict ? " must be positive definite"
                                : " must be positive semidefinite"));
  };
  check_sym_psd(q_stage, "Q", false);
  check_sym_psd(p_terminal, "P", false);
  check_sym_psd(r_input, "R", true);
  if (solver.max_iterations < 1 || !(solver.kkt_tolerance > 0.0))
    throw ConfigError("OcpConfig: bad solver options");
  if (x_min.has_value() != x_max.has_value() ||
      xf_min.has_value() != xf_max.has_value())
    throw ConfigError("OcpConfig: state bounds need both sides");
}

OcpConfig OcpConfig::defaults_for(const QuadrotorParams& model) {
  OcpConfig cfg;
  Vec13 q;
  q << 20, 20, 40, 2, 2, 4, 1, 1, 1, 1, 0.1, 0.1, 0.1;
  cfg.q_stage = q.asDiagonal();
  cfg.p_terminal = (5.0 * q).asDiagonal();
  Vec4 r(0.5, 10.0, 10.0, 10.0);
  cfg.r_input = r.asDiagonal();
  const double hover = model.hover_thrust();
  cfg.u_min = Vec4(0.0, -5e-3, -5e-3, -5e-3);
  cfg.u_max = Vec4(2.0 * hover, 5e-3, 5e-3, 5e-3);
  cfg.u_ref = Vec4(hover, 0.0, 0.0, 0.0);
  return cfg;
}

StepMap discretize(const DerivModel& model, double dt) {
  if (!(dt > 0.0)) throw ConfigError("discretize: dt must be positive");
  StepMap sm;
  sm.dt = dt;
  auto f = model.f;
  sm.f = [f, dt](const Vec13& x, const Vec4& u) -> Vec13 {
    const Vec13 k1 = f(x, u);
    const Vec13 k2 = f(x + (0.5 * dt) * k1, u);
    const Vec13 k3 = f(x + (0.5 * dt) * k2, u);
    const Vec13 k4 = f(x + dt * k3, u);
    Vec13 y = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    return normalize_quat(y);
  };

  auto jac = model.jac;
  if (!jac) {
    // Finite-difference fallback on the continuous derivative.
    jac = [f](const Vec13& x, const Vec4& u, Mat13& fx, Mat13x4& fu) {
      const double eps = 1e-7;
      for (int j = 0; j < 13; ++j) {
        Vec13 xp = x, xm = x;
        xp(j) += eps;
        xm(j) -= eps;
        fx.col(j) = (f(xp, u) - f(xm, u)) / (2.0 * eps);
      }
      for (int j = 0; j < 4; ++j) {
        Vec4 up = u, um = u;
        up(j) += eps;
        um(j) -= eps;
        fu.col(j) = (f(x, up) - f(x, um)) / (2.0 * eps);
      }
    };
  }
  sm.jac = [f, jac, dt](const Vec13& x, const Vec4& u, Vec13& next, Mat13& a,
                        Mat13x4& b) {
    Mat13 fx;
    Mat13x4 fu;
    Mat13 dk[4];
    Mat13x4 dku[4];
    Vec13 k[4];
    Vec13 xs = x;
    for (int s = 0; s < 4; ++s) {
      k[s] = f(xs, u);
      jac(xs, u, fx, fu);
      if (s == 0) {
        dk[0] = fx;
        dku[0] = fu;
      } else {
        const double c = (s == 3) ? dt : 0.5 * dt;
        dk[s].noalias() = fx * (Mat13::Identity() + c * dk[s - 1]);
        dku[s].noalias() = fu + c * (fx * dku[s - 1]);
      }
      if (s < 3) {
        const double c = (s == 2) ? dt : 0.5 * dt;
        xs = x + c * k[s];
      }
    }
    Vec13 y = x + (dt / 6.0) * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3]);
    Mat13 a_raw = Mat13::Identity() +
                  (dt / 6.0) * (dk[0] + 2.0 * dk[1] + 2.0 * dk[2] + dk[3]);
    Mat13x4 b_raw =
        (dt / 6.0) * (dku[0] + 2.0 * dku[1] + 2.0 * dku[2] + dku[3]);
    // Fold the quaternion renormalization into the map and its Jacobians.
    const Mat4 nq = quat_normalize_jacobian(y.segment<4>(6));
    next = normalize_quat(y);
    a = a_raw;
    a.middleRows<4>(6) = nq * a_raw.middleRows<4>(6);
    b = b_raw;
    b.middleRows<4>(6) = nq * b_raw.middleRows<4>(6);
  };
  return sm;
}

namespace {

// Reference with the quaternion sign aligned to the iterate (q and -q are
// the same attitude).
Vec13 aligned_ref(const Vec13& ref, const Vec13& x) {
  Vec13 out = ref;
  if (x.segment<4>(6).dot(ref.segment<4>(6)) < 0.0)
    out.segment<4>(6) *= -1.0;
  return out;
}

struct Linearization {
  std::vector<Vec13> next;   // f(x_i, u_i)
  std::vector<Mat13> a;      // df/dx
  std::vector<Mat13x4> b;    // df/du
  std::vector<Vec13> defect;  // f(x_i, u_i) - x_{i+1}
};

struct Iterate {
  std::vector<Vec13> x;  // N + 1
  std::vector<Vec4> u;   // N
};

double trajectory_cost(const Iterate& it, const ReferenceWindow& ref,
                       const OcpConfig& cfg) {
  const int n = static_cast<int>(it.u.size());
  double cost = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vec13 e = it.x[i] - aligned_ref(ref.states[i], it.x[i]);
    const Vec4 du = it.u[i] - cfg.u_ref;
    cost += e.dot(cfg.q_stage * e) + du.dot(cfg.r_input * du);
  }
  const Vec13 ef = it.x[n] - aligned_ref(ref.states[n], it.x[n]);
  cost += ef.dot(cfg.p_terminal * ef);
  return cost;
}

double defect_l1(const Linearization& lin) {
  double total = 0.0;
  for (const auto& d : lin.defect) total += d.lpNorm<1>();
  return total;
}

void linearize(const StepMap& step, const Iterate& it, Linearization& lin) {
  const int n = static_cast<int>(it.u.size());
  lin.next.resize(n);
  lin.a.resize(n);
  lin.b.resize(n);
  lin.defect.resize(n);
  for (int i = 0; i < n; ++i) {
    step.jac(it.x[i], it.u[i], lin.next[i], lin.a[i], lin.b[i]);
    lin.defect[i] = lin.next[i] - it.x[i + 1];
  }
}

// Multiplier recursion and stationarity residuals for the current iterate.
struct KktInfo {
  double residual = 0.0;
  double lambda_inf = 0.0;
};

KktInfo kkt_info(const Iterate& it, const Linearization& lin,
                 const ReferenceWindow& ref, const OcpConfig& cfg) {
  const int n = static_cast<int>(it.u.size());
  KktInfo info;
  for (const auto& d : lin.defect)
    info.residual = std::max(info.residual, d.lpNorm<Eigen::Infinity>());

  Vec13 lambda =
      2.0 * cfg.p_terminal * (it.x[n] - aligned_ref(ref.states[n], it.x[n]));
  info.lambda_inf = lambda.lpNorm<Eigen::Infinity>();
  for (int i = n - 1; i >= 0; --i) {
    const Vec4 s =
        2.0 * cfg.r_input * (it.u[i] - cfg.u_ref) + lin.b[i].transpose() * lambda;
    for (int c = 0; c < 4; ++c) {
      const double at_lower = it.u[i](c) - cfg.u_min(c);
      const double at_upper = cfg.u_max(c) - it.u[i](c);
      double r;
      if (at_lower < 1e-10)
        r = std::max(0.0, -s(c));  // pushing below an active lower bound
      else if (at_upper < 1e-10)
        r = std::max(0.0, s(c));  // pushing above an active upper bound
      else
        r = std::abs(s(c));
      info.residual = std::max(info.residual, r);
      info.residual = std::max(info.residual, std::max(0.0, -at_lower));
      info.residual = std::max(info.residual, std::max(0.0, -at_upper));
    }
    if (i >= 1) {
      lambda = 2.0 * cfg.q_stage *
                   (it.x[i] - aligned_ref(ref.states[i], it.x[i])) +
               lin.a[i].transpose() * lambda;
      info.lambda_inf =
          std::max(info.lambda_inf, lambda.lpNorm<Eigen::Infinity>());
    }
  }
  // Optional state boxes contribute their primal violation.
  auto box_violation = [&](const Vec13& x, const Vec13& lo, const Vec13& hi) {
    double v = 0.0;
    for (int c = 0; c < 13; ++c) {
      v = std::max(v, lo(c) - x(c));
      v = std::max(v, x(c) - hi(c));
    }
    return std::max(0.0, v);
  };
  if (cfg.x_min) {
    for (int i = 1; i <= n; ++i)
      info.residual =
          std::max(info.residual, box_violation(it.x[i], *cfg.x_min, *cfg.x_max));
  }
  if (cfg.xf_min)
    info.residual =
        std::max(info.residual, box_violation(it.x[n], *cfg.xf_min, *cfg.xf_max));
  return info;
}

}  // namespace

OcpSolution solve_ocp(const StepMap& step, const Vec13& x0,
                      const ReferenceWindow& ref, const OcpConfig& cfg,
                      const OcpSolution* warm) {
  cfg.validate();
  const int n = cfg.horizon;
  if (static_cast<int>(ref.states.size()) != n + 1)
    throw ConfigError("solve_ocp: reference window length must be N + 1");
  if (!x0.allFinite()) throw InvalidStateError("solve_ocp: non-finite x0");

  Iterate it;
  it.x.assign(n + 1, x0);
  it.u.assign(n, cfg.u_ref.cwiseMax(cfg.u_min).cwiseMin(cfg.u_max));
  std::vector<int> active;
  if (warm && static_cast<int>(warm->u_star.size()) == n &&
      static_cast<int>(warm->x_pred.size()) == n + 1) {
    it.u = warm->u_star;
    it.x = warm->x_pred;
    active = warm->qp_active_set;
  } else {
    for (int i = 0; i < n; ++i) it.x[i + 1] = step.f(it.x[i], it.u[i]);
  }
  it.x[0] = x0;

  OcpSolution sol;
  Linearization lin;
  double merit_weight = 1.0;
  double best_merit = std::numeric_limits<double>::infinity();
  Iterate best = it;
  SolveStatus status = SolveStatus::MaxIterations;
  int qp_solves = 0;

  for (int iter = 0; iter <= cfg.solver.max_iterations; ++iter) {
    linearize(step, it, lin);
    const KktInfo kkt = kkt_info(it, lin, ref, cfg);
    const double cost_now = trajectory_cost(it, ref, cfg);
    const double merit_now = cost_now + merit_weight * defect_l1(lin);
    if (merit_now < best_merit) {
      best_merit = merit_now;
      best = it;
    }
    if (kkt.residual <= cfg.solver.kkt_tolerance) {
      status = SolveStatus::Converged;
      sol.kkt_residual = kkt.residual;
      break;
    }
    if (iter == cfg.solver.max_iterations) {
      sol.kkt_residual = kkt.residual;
      break;
    }

    // Condense onto the stacked input step w; dx_i = M_i w + m_i.
    const int nw = 4 * n;
    std::vector<Eigen::MatrixXd> sens(n + 1);
    std::vector<Vec13> shift(n + 1);
    sens[0] = Eigen::MatrixXd::Zero(13, nw);
    shift[0].setZero();
    for (int i = 0; i < n; ++i) {
      sens[i + 1].noalias() = lin.a[i] * sens[i];
      sens[i + 1].middleCols<4>(4 * i) += lin.b[i];
      shift[i + 1] = lin.a[i] * shift[i] + lin.defect[i];
    }

    QpProblem qp;
    qp.hessian = Eigen::MatrixXd::Zero(nw, nw);
    qp.gradient = Eigen::VectorXd::Zero(nw);
    for (int i = 0; i < n; ++i) {
      qp.hessian.block<4, 4>(4 * i, 4 * i) += 2.0 * cfg.r_input;
      qp.gradient.segment<4>(4 * i) +=
          2.0 * cfg.r_input * (it.u[i] - cfg.u_ref);
    }
    for (int i = 1; i <= n; ++i) {
      const Mat13& weight = (i == n) ? cfg.p_terminal : cfg.q_stage;
      const Vec13 e =
          it.x[i] + shift[i] - aligned_ref(ref.states[i], it.x[i]);
      const Eigen::MatrixXd wm = weight * sens[i];
      qp.hessian.noalias() += 2.0 * sens[i].transpose() * wm;
      qp.gradient.noalias() += 2.0 * sens[i].transpose() * (weight * e);
    }
    qp.lower.resize(nw);
    qp.upper.resize(nw);
    for (int i = 0; i < n; ++i) {
      qp.lower.segment<4>(4 * i) = cfg.u_min - it.u[i];
      qp.upper.segment<4>(4 * i) = cfg.u_max - it.u[i];
    }
    int extra_rows = 0;
    if (cfg.x_min) extra_rows += 13 * n;
    if (cfg.xf_min) extra_rows += 13;
    qp.rows.resize(extra_rows, nw);
    qp.row_lower.resize(extra_rows);
    qp.row_upper.resize(extra_rows);
    int at = 0;
    if (cfg.x_min) {
      for (int i = 1; i <= n; ++i) {
        qp.rows.middleRows<13>(at) = sens[i];
        qp.row_lower.segment<13>(at) = *cfg.x_min - it.x[i] - shift[i];
        qp.row_upper.segment<13>(at) = *cfg.x_max - it.x[i] - shift[i];
        at += 13;
      }
    }
    if (cfg.xf_min) {
      qp.rows.middleRows<13>(at) = sens[n];
      qp.row_lower.segment<13>(at) = *cfg.xf_min - it.x[n] - shift[n];
      qp.row_upper.segment<13>(at) = *cfg.xf_max - it.x[n] - shift[n];
    }

    QpResult qpr = solve_qp(qp, active);
    active = qpr.active;
    ++qp_solves;

    // Merit weight tracks the multiplier scale.
    merit_weight = std::max({merit_weight, 2.0 * kkt.lambda_inf, 1.0});

    // Candidate full step.
    std::vector<Vec4> du(n);
    std::vector<Vec13> dx(n + 1);
    dx[0].setZero();
    for (int i = 0; i < n; ++i) du[i] = qpr.x.segment<4>(4 * i);
    for (int i = 1; i <= n; ++i) dx[i] = sens[i] * qpr.x + shift[i];

    // Directional derivative of the merit along the step.
    double grad_dot = 0.0;
    for (int i = 0; i < n; ++i) {
      const Vec13 e = it.x[i] - aligned_ref(ref.states[i], it.x[i]);
      grad_dot += 2.0 * (cfg.q_stage * e).dot(dx[i]) +
                  2.0 * (cfg.r_input * (it.u[i] - cfg.u_ref)).dot(du[i]);
    }
    const Vec13 ef = it.x[n] - aligned_ref(ref.states[n], it.x[n]);
    grad_dot += 2.0 * (cfg.p_terminal * ef).dot(dx[n]);
    const double descent = grad_dot - merit_weight * defect_l1(lin);

    double alpha = 1.0;
    bool accepted = false;
    Iterate trial = it;
    Linearization trial_lin;
    for (int ls = 0; ls < cfg.solver.max_line_search; ++ls) {
      for (int i = 0; i < n; ++i) trial.u[i] = it.u[i] + alpha * du[i];
      for (int i = 1; i <= n; ++i) trial.x[i] = it.x[i] + alpha * dx[i];
      double trial_defect = 0.0;
      bool finite = true;
      for (int i = 0; i < n && finite; ++i) {
        const Vec13 nx = step.f(trial.x[i], trial.u[i]);
        if (!nx.allFinite()) finite = false;
        trial_defect += (nx - trial.x[i + 1]).lpNorm<1>();
      }
      if (finite) {
        const double trial_merit =
            trajectory_cost(trial, ref, cfg) + merit_weight * trial_defect;
        const double required =
            merit_now + cfg.solver.armijo_c * alpha * std::min(descent, 0.0);
        if (trial_merit <= required ||
            (descent >= 0.0 && trial_merit < merit_now)) {
          accepted = true;
          break;
        }
      }
      alpha *= cfg.solver.backtrack_ratio;
    }
    if (!accepted) {
      status = SolveStatus::LineSearchFailure;
      it = best;
      linearize(step, it, lin);
      sol.kkt_residual = kkt_info(it, lin, ref, cfg).residual;
      break;
    }
    it = trial;
  }

  sol.u_star = it.u;
  sol.x_pred = it.x;
  sol.iterations = qp_solves;
  sol.cost = trajectory_cost(it, ref, cfg);
  sol.status = status;
  sol.qp_active_set = active;
  return sol;
}

double kkt_residual(const OcpSolution& sol, const StepMap& step,
                    const Vec13& x0, const ReferenceWindow& ref,
                    const OcpConfig& cfg) {
  Iterate it;
  it.x = sol.x_pred;
  it.u = sol.u_star;
  if (it.x.empty() || it.u.size() + 1 != it.x.size() ||
      it.u.size() != static_cast<size_t>(cfg.horizon))
    throw ConfigError("kkt_residual: solution shape mismatch");
  it.x[0] = x0;
  Linearization lin;
  linearize(step, it, lin);
  return kkt_info(it, lin, ref, cfg).residual;
}

OcpSolution warm_start_shift(const OcpSolution& prev) {
  if (prev.u_star.size() < 2)
    throw ConfigError("warm_start_shift: need at least two stages");
  OcpSolution out = prev;
  const int n = static_cast<int>(prev.u_star.size());
  for (int i = 0; i + 1 < n; ++i) out.u_star[i] = prev.u_star[i + 1];
  out.u_star[n - 1] = prev.u_star[n - 1];
  for (int i = 0; i + 1 <= n; ++i) out.x_pred[i] = prev.x_pred[i + 1];
  out.x_pred[n] = prev.x_pred[n];
  out.qp_active_set.clear();
  for (int id : prev.qp_active_set) {
    // Bound ids live in [0, 4N) for lower and [4N, 8N) for upper sides;
    // shift each one stage earlier and drop the first stage.
    const int nw = 4 * n;
    if (id < nw) {
      if (id >= 4) out.qp_active_set.push_back(id - 4);
    } else if (id < 2 * nw) {
      if (id - nw >= 4) out.qp_active_set.push_back(id - 4);
    }
  }
  out.status = SolveStatus::MaxIterations;
  out.iterations = 0;
  return out;
}

}  // namespace l1knode
