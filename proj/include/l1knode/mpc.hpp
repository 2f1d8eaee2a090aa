// Finite-horizon tracking OCP: direct multiple shooting over any derivative
// model, solved by a Gauss-Newton SQP with an input-condensed active-set QP
// subproblem and an l1-merit line search.
#pragma once

#include <optional>
#include <vector>

#include "l1knode/dynamics.hpp"

namespace l1knode {

enum class SolveStatus { Converged, MaxIterations, LineSearchFailure };
const char* to_string(SolveStatus s);

struct SolverOptions {
  int max_iterations = 30;
  double kkt_tolerance = 1e-6;
  double armijo_c = 1e-4;
  double backtrack_ratio = 0.5;
  int max_line_search = 25;
};

struct OcpConfig {
  int horizon = 20;
  double dt = 0.02;
  Mat13 q_stage = Mat13::Identity();
  Mat13 p_terminal = Mat13::Identity();
  Mat4 r_input = Mat4::Identity();
  Vec4 u_min = Vec4::Constant(-1e9);
  Vec4 u_max = Vec4::Constant(1e9);
  Vec4 u_ref = Vec4::Zero();  // input cost reference (hover feedforward)
  std::optional<Vec13> x_min;  // stage state box, applied at nodes 1..N
  std::optional<Vec13> x_max;
  std::optional<Vec13> xf_min;  // terminal box, node N
  std::optional<Vec13> xf_max;
  SolverOptions solver;

  void validate() const;
  static OcpConfig defaults_for(const QuadrotorParams& model);
};

struct ReferenceWindow {
  std::vector<Vec13> states;  // N + 1 entries
};

struct OcpSolution {
  std::vector<Vec4> u_star;
  std::vector<Vec13> x_pred;
  int iterations = 0;
  double kkt_residual = 0.0;
  double cost = 0.0;
  SolveStatus status = SolveStatus::MaxIterations;
  std::vector<int> qp_active_set;  // warm-start carrier
};

// Discrete one-step map: one RK4 step with the quaternion renormalization
// folded in, plus chained Jacobians.
struct StepMap {
  std::function<Vec13(const Vec13&, const Vec4&)> f;
  std::function<void(const Vec13&, const Vec4&, Vec13&, Mat13&, Mat13x4&)>
      jac;
  double dt = 0.0;
};

StepMap discretize(const DerivModel& model, double dt);

OcpSolution solve_ocp(const StepMap& step, const Vec13& x0,
                      const ReferenceWindow& ref, const OcpConfig& cfg,
                      const OcpSolution* warm = nullptr);

// Infinity norm over stationarity, primal feasibility and complementarity of
// a candidate solution.
double kkt_residual(const OcpSolution& sol, const StepMap& step,
                    const Vec13& x0, const ReferenceWindow& ref,
                    const OcpConfig& cfg);

// Receding-horizon initial guess: drop the first stage, duplicate the last.
OcpSolution warm_start_shift(const OcpSolution& prev);

}  // namespace l1knode
