#include "l1knode/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace l1knode {

namespace {

struct ConstraintView {
  // Row a and bound b of a >= constraint: a.x >= b.
  Eigen::VectorXd a;
  double b;
};

ConstraintView constraint(const QpProblem& qp, int id) {
  const int n = static_cast<int>(qp.gradient.size());
  const int m = static_cast<int>(qp.rows.rows());
  ConstraintView c;
  c.a = Eigen::VectorXd::Zero(n);
  if (id < n) {
    c.a(id) = 1.0;
    c.b = qp.lower(id);
  } else if (id < 2 * n) {
    c.a(id - n) = -1.0;
    c.b = -qp.upper(id - n);
  } else if (id < 2 * n + m) {
    c.a = qp.rows.row(id - 2 * n).transpose();
    c.b = qp.row_lower(id - 2 * n);
  } else {
    c.a = -qp.rows.row(id - 2 * n - m).transpose();
    c.b = -qp.row_upper(id - 2 * n - m);
  }
  return c;
}

double eval_constraint(const QpProblem& qp, int id, const Eigen::VectorXd& x,
                       const Eigen::VectorXd& rows_x) {
  const int n = static_cast<int>(qp.gradient.size());
  const int m = static_cast<int>(qp.rows.rows());
  if (id < n) return x(id) - qp.lower(id);
  if (id < 2 * n) return qp.upper(id - n) - x(id - n);
  if (id < 2 * n + m) return rows_x(id - 2 * n) - qp.row_lower(id - 2 * n);
  return qp.row_upper(id - 2 * n - m) - rows_x(id - 2 * n - m);
}

int paired_id(int id, int n, int m) {
  if (id < n) return id + n;
  if (id < 2 * n) return id - n;
  if (id < 2 * n + m) return id + m;
  return id - m;
}

}  // namespace

QpResult solve_qp(const QpProblem& qp, const std::vector<int>& warm_active) {
  const int n = static_cast<int>(qp.gradient.size());
  const int m = static_cast<int>(qp.rows.rows());
  const int total = 2 * n + 2 * m;
  const double feas_tol = 1e-10;

  QpResult res;
  res.x = Eigen::VectorXd::Zero(n);

  // Feasible start: clamp into the box, then pin warm-start bound ids so the
  // previous working set carries over.
  for (int i = 0; i < n; ++i)
    res.x(i) = std::clamp(res.x(i), qp.lower(i), qp.upper(i));
  std::vector<int> working;
  std::vector<char> in_set(total, 0);
  for (int id : warm_active) {
    if (id < 0 || id >= total) continue;
    if (id < n && std::isfinite(qp.lower(id)))
      res.x(id) = qp.lower(id);
    else if (id >= n && id < 2 * n && std::isfinite(qp.upper(id - n)))
      res.x(id - n) = qp.upper(id - n);
    else
      continue;  // general rows are not pinned for warm start
    if (!in_set[id] && !in_set[paired_id(id, n, m)]) {
      working.push_back(id);
      in_set[id] = 1;
    }
  }

  // Drop general rows this start point violates; the surrounding SQP loop
  // restores feasibility through its own iteration.
  std::vector<char> row_enabled(m, 1);
  if (m > 0) {
    Eigen::VectorXd rx = qp.rows * res.x;
    for (int j = 0; j < m; ++j) {
      if (rx(j) < qp.row_lower(j) - feas_tol ||
          rx(j) > qp.row_upper(j) + feas_tol) {
        row_enabled[j] = 0;
        res.dropped_infeasible_rows = true;
      }
    }
  }

  const int max_iter = 50 * (n + m + 1);
  for (int iter = 0; iter < max_iter; ++iter) {
    res.iterations = iter;
    const int k = static_cast<int>(working.size());
    const Eigen::VectorXd grad_now = qp.hessian * res.x + qp.gradient;

    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd lambda;
    if (k == 0) {
      p = -qp.hessian.llt().solve(grad_now);
    } else {
      Eigen::MatrixXd at(n, k);  // columns are constraint normals
      for (int j = 0; j < k; ++j) at.col(j) = constraint(qp, working[j]).a;
      // Null-space step: x stays on the active constraints.
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(at);
      const int rank = static_cast<int>(qr.rank());
      Eigen::MatrixXd q = qr.householderQ();
      if (rank < n) {
        Eigen::MatrixXd z = q.rightCols(n - rank);
        Eigen::MatrixXd hz = qp.hessian * z;
        Eigen::VectorXd pz =
            (z.transpose() * hz).llt().solve(-z.transpose() * grad_now);
        p = z * pz;
      }
      // Multipliers from stationarity: at * lambda = grad(x + p).
      lambda = qr.solve(grad_now + qp.hessian * p);
    }

    if (p.lpNorm<Eigen::Infinity>() < 1e-12) {
      // Stationary on the working set; check multiplier signs.
      int worst = -1;
      double worst_val = -1e-9;
      for (int j = 0; j < k; ++j) {
        if (lambda(j) < worst_val) {
          worst_val = lambda(j);
          worst = j;
        }
      }
      if (worst < 0) {
        res.converged = true;
        res.active = working;
        res.multipliers = k > 0 ? lambda : Eigen::VectorXd();
        return res;
      }
      in_set[working[worst]] = 0;
      working.erase(working.begin() + worst);
      continue;
    }

    // Ratio test against constraints not in the working set.
    Eigen::VectorXd rows_x, rows_p;
    if (m > 0) {
      rows_x = qp.rows * res.x;
      rows_p = qp.rows * p;
    }
    double alpha = 1.0;
    int blocking = -1;
    for (int id = 0; id < total; ++id) {
      if (in_set[id]) continue;
      if (id >= 2 * n && !row_enabled[(id - 2 * n) % m]) continue;
      double ap;  // a . p for this constraint
      if (id < n)
        ap = p(id);
      else if (id < 2 * n)
        ap = -p(id - n);
      else if (id < 2 * n + m)
        ap = rows_p(id - 2 * n);
      else
        ap = -rows_p(id - 2 * n - m);
      if (ap >= -1e-14) continue;  // not moving toward this constraint
      const double slack = eval_constraint(qp, id, res.x, rows_x);
      const double step = std::max(0.0, slack) / (-ap);
      if (step < alpha) {
        alpha = step;
        blocking = id;
      }
    }

    res.x += alpha * p;
    if (blocking >= 0) {
      // Keep the iterate exactly on the blocking bound.
      if (blocking < n)
        res.x(blocking) = qp.lower(blocking);
      else if (blocking < 2 * n)
        res.x(blocking - n) = qp.upper(blocking - n);
      const int pair = paired_id(blocking, n, m);
      if (in_set[pair]) {
        // Degenerate interval; keep the existing side.
      } else {
        working.push_back(blocking);
        in_set[blocking] = 1;
      }
    }
  }

  res.active = working;
  res.converged = false;
  return res;
}

}  // namespace l1knode
