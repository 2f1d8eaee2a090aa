#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "l1knode/knode.hpp"

using namespace l1knode;

namespace {

QuadrotorParams true_params() {
  QuadrotorParams p;
  p.mass = 0.04;
  return p;
}

QuadrotorParams believed_params() {
  QuadrotorParams p;
  p.mass = 0.03;
  return p;
}

Vec13 random_state(std::mt19937_64& rng, double spread = 0.3) {
  std::normal_distribution<double> n(0.0, spread);
  Vec13 x = Vec13::Zero();
  x(0) = n(rng);
  x(1) = n(rng);
  x(2) = 1.0 + n(rng);
  x(3) = n(rng);
  x(4) = n(rng);
  x(5) = n(rng);
  Vec4 q(1.0, 0.2 * n(rng), 0.2 * n(rng), 0.2 * n(rng));
  x.segment<4>(6) = q / q.norm();
  x(10) = n(rng);
  x(11) = n(rng);
  x(12) = n(rng);
  return x;
}

Vec4 random_input(std::mt19937_64& rng, double hover) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec4(hover * (1.0 + 0.2 * n(rng)), 2e-4 * n(rng), 2e-4 * n(rng),
              2e-4 * n(rng));
}

// One-step truth generated by the plant-grade integrator.
Vec13 true_step(const QuadrotorParams& p, const Vec13& x, const Vec4& u,
                double h) {
  DerivFn f = [&](const State& s, const ControlInput& c) {
    return nominal_deriv(s, c, p);
  };
  return rk5_step(f, State::unpack(x), ControlInput::unpack(u), h).pack();
}

TrainingDataset synthetic_dataset(const QuadrotorParams& plant, int n,
                                  std::uint64_t seed) {
  TrainingDataset d;
  d.step = 0.01;
  d.source = "synthetic";
  d.sample_rate_hz = 100.0;
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    TrainingRecord r;
    r.x = random_state(rng);
    r.u = random_input(rng, plant.mass * 9.81);
    r.x_next = true_step(plant, r.x, r.u, d.step);
    d.records.push_back(r);
  }
  return d;
}

}  // namespace

TEST_CASE("residual_eval zero output layer and determinism") {
  KnodeModel m = make_knode(believed_params(), 8, 42);
  std::mt19937_64 rng(1);
  const Vec13 x = random_state(rng);
  const Vec4 u = random_input(rng, 0.3);
  CHECK(residual_eval(m.theta, x, u).isZero(0.0));

  m.theta.w2.setRandom();
  const Vec6 a = residual_eval(m.theta, x, u);
  const Vec6 b = residual_eval(m.theta, x, u);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("residual_eval single-neuron analytic case") {
  MlpParams theta;
  theta.w1 = Eigen::MatrixXd::Zero(1, 17);
  theta.w1(0, 2) = 1.0;  // z position feeds the single neuron
  theta.b1 = Eigen::VectorXd::Zero(1);
  theta.w2 = Eigen::MatrixXd::Zero(6, 1);
  theta.w2(0, 0) = 1.0;
  Vec13 x = Vec13::Zero();
  x(2) = 0.73;
  x(6) = 1.0;
  const Vec6 out = residual_eval(theta, x, Vec4::Zero());
  CHECK(std::abs(out(0) - std::tanh(0.73)) < 1e-12);
  CHECK(out.tail<5>().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("knode_deriv reduces to nominal with zero weights") {
  KnodeModel m = make_knode(believed_params(), 32, 3);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 10; ++i) {
    const Vec13 x = random_state(rng);
    const Vec4 u = random_input(rng, m.nominal.hover_thrust());
    const Vec13 lhs = knode_deriv(m, x, u);
    const Vec13 rhs = nominal_deriv(x, u, m.nominal);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("knode_deriv keeps kinematics exact for any weights") {
  KnodeModel m = make_knode(believed_params(), 16, 5);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int i = 0; i < m.theta.w2.rows(); ++i)
    for (int j = 0; j < m.theta.w2.cols(); ++j) m.theta.w2(i, j) = n(rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec13 x = random_state(rng);
    const Vec4 u = random_input(rng, 0.3);
    const Vec13 dx = knode_deriv(m, x, u);
    CHECK((dx.segment<3>(0) - x.segment<3>(3)).cwiseAbs().maxCoeff() == 0.0);
    // Residual never touches the quaternion slots.
    CHECK(std::abs(x.segment<4>(6).dot(dx.segment<4>(6))) < 1e-12);
  }
}

TEST_CASE("residual_grad matches finite differences") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int trial = 0; trial < 10; ++trial) {
    KnodeModel m = make_knode(believed_params(), 12, trial);
    for (int i = 0; i < m.theta.w2.rows(); ++i)
      for (int j = 0; j < m.theta.w2.cols(); ++j) m.theta.w2(i, j) = n(rng);
    for (int i = 0; i < 6; ++i) m.theta.b2(i) = n(rng);
    const Vec13 x = random_state(rng);
    const Vec4 u = random_input(rng, 0.3);
    Vec6 adjoint;
    for (int i = 0; i < 6; ++i) adjoint(i) = n(rng);

    const Eigen::VectorXd g = residual_grad(m.theta, x, u, adjoint);
    const double scale = g.cwiseAbs().maxCoeff() + 1e-12;
    std::uniform_int_distribution<int> pick(0, int(g.size()) - 1);
    const double eps = 1e-6;
    for (int probe = 0; probe < 40; ++probe) {
      const int idx = pick(rng);
      Eigen::VectorXd e = Eigen::VectorXd::Zero(g.size());
      e(idx) = 1.0;
      MlpParams plus = m.theta, minus = m.theta;
      plus.add_scaled(e, eps);
      minus.add_scaled(e, -eps);
      const double fd = (adjoint.dot(residual_eval(plus, x, u)) -
                         adjoint.dot(residual_eval(minus, x, u))) /
                        (2 * eps);
      CHECK(std::abs(fd - g(idx)) / scale < 1e-5);
    }
  }
}

TEST_CASE("residual_grad adjoint linearity and zero adjoint") {
  KnodeModel m = make_knode(believed_params(), 10, 77);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int i = 0; i < m.theta.w2.rows(); ++i)
    for (int j = 0; j < m.theta.w2.cols(); ++j) m.theta.w2(i, j) = n(rng);
  const Vec13 x = random_state(rng);
  const Vec4 u = random_input(rng, 0.3);

  CHECK(residual_grad(m.theta, x, u, Vec6::Zero()).isZero(0.0));

  Vec6 a1, a2;
  for (int i = 0; i < 6; ++i) {
    a1(i) = n(rng);
    a2(i) = n(rng);
  }
  const Eigen::VectorXd sum = residual_grad(m.theta, x, u, a1 + a2);
  const Eigen::VectorXd parts =
      residual_grad(m.theta, x, u, a1) + residual_grad(m.theta, x, u, a2);
  CHECK((sum - parts).cwiseAbs().maxCoeff() < 1e-12 * (1 + sum.cwiseAbs().maxCoeff()));
}

TEST_CASE("residual_jac matches finite differences") {
  KnodeModel m = make_knode(believed_params(), 12, 21);
  std::mt19937_64 rng(31);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int i = 0; i < m.theta.w2.rows(); ++i)
    for (int j = 0; j < m.theta.w2.cols(); ++j) m.theta.w2(i, j) = n(rng);
  const Vec13 x = random_state(rng);
  const Vec4 u = random_input(rng, 0.3);
  Mat6x13 rx;
  Mat6x4 ru;
  residual_jac(m.theta, x, u, rx, ru);
  const double eps = 1e-6;
  for (int j = 0; j < 13; ++j) {
    Vec13 xp = x, xm = x;
    xp(j) += eps;
    xm(j) -= eps;
    Vec6 col = (residual_eval(m.theta, xp, u) - residual_eval(m.theta, xm, u)) /
               (2 * eps);
    CHECK((col - rx.col(j)).cwiseAbs().maxCoeff() <
          1e-6 * (1 + rx.col(j).cwiseAbs().maxCoeff()));
  }
  for (int j = 0; j < 4; ++j) {
    Vec4 up = u, um = u;
    up(j) += eps;
    um(j) -= eps;
    Vec6 col = (residual_eval(m.theta, x, up) - residual_eval(m.theta, x, um)) /
               (2 * eps);
    CHECK((col - ru.col(j)).cwiseAbs().maxCoeff() <
          1e-5 * (1 + ru.col(j).cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("one_step_loss self-consistency and discretization floor") {
  const QuadrotorParams believed = believed_params();
  KnodeModel m = make_knode(believed, 8, 17);

  // Data generated by the model's own one-step map reproduces exactly.
  TrainingDataset self;
  self.step = 0.01;
  std::mt19937_64 rng(6);
  DerivFn f = [&](const State& s, const ControlInput& c) {
    return knode_deriv(m, s, c);
  };
  for (int i = 0; i < 8; ++i) {
    TrainingRecord r;
    r.x = random_state(rng);
    r.u = random_input(rng, believed.hover_thrust());
    r.x_next =
        rk4_step(f, State::unpack(r.x), ControlInput::unpack(r.u), self.step)
            .pack();
    self.records.push_back(r);
  }
  CHECK(one_step_loss(m, self).loss < 1e-16);

  // Zero-residual model against matched-plant data: only integrator error.
  TrainingDataset matched;
  matched.step = 0.002;
  for (int i = 0; i < 8; ++i) {
    TrainingRecord r;
    r.x = random_state(rng);
    r.u = random_input(rng, believed.hover_thrust());
    r.x_next = true_step(believed, r.x, r.u, matched.step);
    matched.records.push_back(r);
  }
  CHECK(one_step_loss(m, matched).loss < 1e-10);
}

TEST_CASE("one_step_loss gradient matches finite differences") {
  const QuadrotorParams believed = believed_params();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int trial = 0; trial < 4; ++trial) {
    KnodeModel m = make_knode(believed, 10, 100 + trial);
    for (int i = 0; i < m.theta.w2.rows(); ++i)
      for (int j = 0; j < m.theta.w2.cols(); ++j)
        m.theta.w2(i, j) = 0.02 * n(rng);
    TrainingDataset d = synthetic_dataset(true_params(), 12, 50 + trial);

    const LossValue lv = one_step_loss(m, d);
    const double scale = lv.grad.cwiseAbs().maxCoeff() + 1e-12;
    std::uniform_int_distribution<int> pick(0, int(lv.grad.size()) - 1);
    const double eps = 1e-6;
    for (int probe = 0; probe < 25; ++probe) {
      const int idx = pick(rng);
      Eigen::VectorXd e = Eigen::VectorXd::Zero(lv.grad.size());
      e(idx) = 1.0;
      KnodeModel plus = m, minus = m;
      plus.theta.add_scaled(e, eps);
      minus.theta.add_scaled(e, -eps);
      const double fd =
          (one_step_loss(plus, d).loss - one_step_loss(minus, d).loss) /
          (2 * eps);
      CHECK(std::abs(fd - lv.grad(idx)) / scale < 1e-4);
    }
  }
}

TEST_CASE("training recovers the mass mismatch") {
  const QuadrotorParams plant = true_params();
  const QuadrotorParams believed = believed_params();
  TrainingDataset train = synthetic_dataset(plant, 250, 1234);
  TrainingDataset held_out = synthetic_dataset(plant, 60, 4321);

  TrainConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 600;
  cfg.learning_rate = 1e-3;
  cfg.seed = 7;

  std::vector<double> history;
  KnodeModel trained = train_knode(believed, train, cfg, &history);
  CHECK(history.back() <= history.front());

  // Held-out one-step position error must drop at least 10x.
  KnodeModel untrained = make_knode(believed, cfg.hidden, cfg.seed);
  auto position_err = [&](const KnodeModel& m) {
    double total = 0.0;
    for (const auto& rec : held_out.records) {
      DerivFn f = [&](const State& s, const ControlInput& c) {
        return knode_deriv(m, s, c);
      };
      Vec13 pred = rk4_step(f, State::unpack(rec.x),
                            ControlInput::unpack(rec.u), held_out.step)
                       .pack();
      total += (pred.segment<3>(0) - rec.x_next.segment<3>(0)).norm();
    }
    return total / double(held_out.records.size());
  };
  const double before = position_err(untrained);
  const double after = position_err(trained);
  CHECK(after * 10.0 < before);

  // Hover residual approximates the analytic thrust deficit.
  Vec13 hover = Vec13::Zero();
  hover(2) = 1.0;
  hover(6) = 1.0;
  Vec4 u(0.03 * 9.81, 0, 0, 0);
  const double expected = (0.03 / 0.04 - 1.0) * 9.81;  // about -2.45
  const double got = trained.residual(hover, u)(2);
  CHECK(std::abs(got - expected) < 0.2 * std::abs(expected));
}

TEST_CASE("training on matched data leaves the residual tiny") {
  const QuadrotorParams believed = believed_params();
  TrainingDataset d = synthetic_dataset(believed, 150, 99);
  TrainConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 150;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  KnodeModel m = train_knode(believed, d, cfg);
  double worst = 0.0;
  for (const auto& rec : d.records)
    worst = std::max(worst, m.residual(rec.x, rec.u).cwiseAbs().maxCoeff());
  CHECK(worst < 1e-3);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.epochs = 10;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("model file round trip") {
  KnodeModel m = make_knode(believed_params(), 12, 5);
  std::mt19937_64 rng(55);
  std::normal_distribution<double> n(0.0, 0.5);
  for (int i = 0; i < m.theta.w2.rows(); ++i)
    for (int j = 0; j < m.theta.w2.cols(); ++j) m.theta.w2(i, j) = n(rng);
  const std::string path = "test_model_roundtrip.json";
  m.save(path);
  KnodeModel loaded = KnodeModel::load(path);
  std::remove(path.c_str());

  const Vec13 x = random_state(rng);
  const Vec4 u = random_input(rng, 0.3);
  CHECK((m.deriv(x, u) - loaded.deriv(x, u)).cwiseAbs().maxCoeff() == 0.0);
  CHECK(loaded.nominal.mass == m.nominal.mass);
}

TEST_CASE("dataset csv round trip") {
  TrainingDataset d = synthetic_dataset(true_params(), 10, 2);
  const std::string path = "test_dataset_roundtrip.csv";
  d.save_csv(path);
  TrainingDataset loaded = TrainingDataset::load_csv(path);
  std::remove(path.c_str());
  REQUIRE(loaded.records.size() == d.records.size());
  CHECK(loaded.step == d.step);
  double worst = 0.0;
  for (size_t i = 0; i < d.records.size(); ++i) {
    worst = std::max(worst, (d.records[i].x - loaded.records[i].x)
                                .cwiseAbs()
                                .maxCoeff());
    worst = std::max(worst, (d.records[i].x_next - loaded.records[i].x_next)
                                .cwiseAbs()
                                .maxCoeff());
  }
  CHECK(worst == 0.0);
}
