// Dense primal active-set solver for strictly convex QPs with variable
// bounds and optional two-sided general inequality rows. Sized for the
// condensed input-space subproblems of the shooting transcription.
#pragma once

#include <Eigen/Dense>

#include <vector>

namespace l1knode {

struct QpProblem {
  Eigen::MatrixXd hessian;  // positive definite
  Eigen::VectorXd gradient;
  Eigen::VectorXd lower;  // variable bounds
  Eigen::VectorXd upper;
  Eigen::MatrixXd rows;  // general constraint rows (may be 0 x n)
  Eigen::VectorXd row_lower;
  Eigen::VectorXd row_upper;
};

// Constraint ids: [0, n) lower bounds, [n, 2n) upper bounds, then
// [2n, 2n+m) row lower and [2n+m, 2n+2m) row upper sides.
struct QpResult {
  Eigen::VectorXd x;
  std::vector<int> active;          // final working set
  Eigen::VectorXd multipliers;      // one per active id, same order
  int iterations = 0;
  bool converged = false;
  bool dropped_infeasible_rows = false;
};

QpResult solve_qp(const QpProblem& qp, const std::vector<int>& warm_active);

}  // namespace l1knode
