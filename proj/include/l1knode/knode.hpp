// Learned residual dynamics: a single-hidden-layer tanh network fused with
// the nominal rigid-body model, trained offline on one-step flight data.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l1knode/dynamics.hpp"

namespace l1knode {

using Vec17 = Eigen::Matrix<double, 17, 1>;
using Mat6x13 = Eigen::Matrix<double, 6, 13>;
using Mat6x4 = Eigen::Matrix<double, 6, 4>;

// Weights of the residual network plus the fixed input normalization that
// the network was trained with. Input is the normalized 17-vector (state,
// input); output is the raw 6-vector of (v_dot, omega_dot) corrections
// before per-output scaling.
struct MlpParams {
  Eigen::MatrixXd w1;  // hidden x 17
  Eigen::VectorXd b1;  // hidden
  Eigen::MatrixXd w2;  // 6 x hidden
  Vec6 b2 = Vec6::Zero();
  Vec17 input_scale = Vec17::Ones();

  int hidden() const { return static_cast<int>(w1.rows()); }
  Eigen::Index param_count() const;
  Eigen::VectorXd flatten() const;
  void add_scaled(const Eigen::VectorXd& direction, double alpha);
  void validate() const;

  // Uniform +-1/sqrt(fan-in) hidden layer, zero output layer.
  static MlpParams init(int hidden, std::uint64_t seed);
  static Vec17 default_input_scale(double mass);
};

Vec6 residual_eval(const MlpParams& theta, const Vec13& x, const Vec4& u);
Vec6 residual_eval(const MlpParams& theta, const State& x,
                   const ControlInput& u);

// Gradient of adjoint . residual_eval(theta, x, u) over the flattened
// parameters (exact reverse mode).
Eigen::VectorXd residual_grad(const MlpParams& theta, const Vec13& x,
                              const Vec4& u, const Vec6& output_adjoint);

// Jacobians of the raw residual with respect to state and input.
void residual_jac(const MlpParams& theta, const Vec13& x, const Vec4& u,
                  Mat6x13& rx, Mat6x4& ru);

// Nominal model plus scaled residual in the velocity and rate slots.
struct KnodeModel {
  QuadrotorParams nominal;
  MlpParams theta;
  Vec6 residual_scale = default_residual_scale();

  static Vec6 default_residual_scale();

  // Physical-units residual accelerations (v_dot, omega_dot slots).
  Vec6 residual(const Vec13& x, const Vec4& u) const;
  Vec13 deriv(const Vec13& x, const Vec4& u) const;
  void deriv_jac(const Vec13& x, const Vec4& u, Mat13& fx, Mat13x4& fu) const;
  DerivModel deriv_model() const;

  void save(const std::string& path) const;
  static KnodeModel load(const std::string& path);
};

KnodeModel make_knode(const QuadrotorParams& nominal, int hidden,
                      std::uint64_t seed);

Vec13 knode_deriv(const KnodeModel& model, const Vec13& x, const Vec4& u);
StateDeriv knode_deriv(const KnodeModel& model, const State& x,
                       const ControlInput& u);

struct TrainingRecord {
  Vec13 x;
  Vec4 u;
  Vec13 x_next;
};

struct TrainingDataset {
  std::vector<TrainingRecord> records;
  double step = 0.01;
  std::string source;
  double sample_rate_hz = 0.0;

  void validate() const;
  void save_csv(const std::string& path) const;
  static TrainingDataset load_csv(const std::string& path);
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 2000;
  int batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
  double loss_tolerance = 0.0;  // stop early once loss drops below
  int hidden = 32;

  void validate() const;
};

// Mean squared one-step prediction error through an RK4 step of the fused
// model, with the exact parameter gradient accumulated by reverse mode
// through the integrator stages. Quaternion errors are taken component-wise
// after sign alignment.
struct LossValue {
  double loss = 0.0;
  Eigen::VectorXd grad;
};
LossValue one_step_loss(const KnodeModel& model, const TrainingDataset& data);

KnodeModel train_knode(const QuadrotorParams& nominal,
                       const TrainingDataset& data, const TrainConfig& cfg,
                       std::vector<double>* loss_history = nullptr);

}  // namespace l1knode
