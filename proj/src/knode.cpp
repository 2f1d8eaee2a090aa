#include "l1knode/knode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace l1knode {

namespace {

constexpr int kInputDim = 17;
constexpr int kOutputDim = 6;

// Uniform double in [-1, 1) from raw 64-bit draws; keeps weight init
// reproducible independent of the standard library distribution.
double uniform_pm1(std::mt19937_64& rng) {
  return 2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0;
}

Vec17 stack_input(const Vec13& x, const Vec4& u) {
  Vec17 xi;
  xi.head<13>() = x;
  xi.tail<4>() = u;
  return xi;
}

// Residual output slots within the 13-dim derivative.
const int kSlots[kOutputDim] = {3, 4, 5, 10, 11, 12};

}  // namespace

Eigen::Index MlpParams::param_count() const {
  return w1.size() + b1.size() + w2.size() + b2.size();
}

Eigen::VectorXd MlpParams::flatten() const {
  Eigen::VectorXd v(param_count());
  Eigen::Index at = 0;
  for (int i = 0; i < w1.rows(); ++i)
    for (int j = 0; j < w1.cols(); ++j) v(at++) = w1(i, j);
  for (int i = 0; i < b1.size(); ++i) v(at++) = b1(i);
  for (int i = 0; i < w2.rows(); ++i)
    for (int j = 0; j < w2.cols(); ++j) v(at++) = w2(i, j);
  for (int i = 0; i < b2.size(); ++i) v(at++) = b2(i);
  return v;
}

void MlpParams::add_scaled(const Eigen::VectorXd& direction, double alpha) {
  if (direction.size() != param_count())
    throw ConfigError("MlpParams::add_scaled: size mismatch");
  Eigen::Index at = 0;
  for (int i = 0; i < w1.rows(); ++i)
    for (int j = 0; j < w1.cols(); ++j) w1(i, j) += alpha * direction(at++);
  for (int i = 0; i < b1.size(); ++i) b1(i) += alpha * direction(at++);
  for (int i = 0; i < w2.rows(); ++i)
    for (int j = 0; j < w2.cols(); ++j) w2(i, j) += alpha * direction(at++);
  for (int i = 0; i < b2.size(); ++i) b2(i) += alpha * direction(at++);
}

void MlpParams::validate() const {
  if (w1.cols() != kInputDim || w2.rows() != kOutputDim ||
      w1.rows() != w2.cols() || b1.size() != w1.rows())
    throw ConfigError("MlpParams: inconsistent shapes");
  if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() ||
      !b2.allFinite() || !input_scale.allFinite())
    throw ConfigError("MlpParams: non-finite entries");
  if (!(input_scale.minCoeff() > 0.0))
    throw ConfigError("MlpParams: input scales must be positive");
}

MlpParams MlpParams::init(int hidden, std::uint64_t seed) {
  if (hidden < 1) throw ConfigError("MlpParams::init: hidden width < 1");
  MlpParams p;
  p.w1.resize(hidden, kInputDim);
  p.b1.resize(hidden);
  p.w2 = Eigen::MatrixXd::Zero(kOutputDim, hidden);
  p.b2.setZero();
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double bound = 1.0 / std::sqrt(static_cast<double>(kInputDim));
  for (int i = 0; i < hidden; ++i) {
    for (int j = 0; j < kInputDim; ++j) p.w1(i, j) = bound * uniform_pm1(rng);
    p.b1(i) = bound * uniform_pm1(rng);
  }
  return p;
}

Vec17 MlpParams::default_input_scale(double mass) {
  Vec17 s = Vec17::Ones();
  s(13) = mass * 9.81;           // thrust channel
  s(14) = s(15) = s(16) = 0.01;  // moments, N*m
  return s;
}

Vec6 residual_eval(const MlpParams& theta, const Vec13& x, const Vec4& u) {
  const Vec17 xi = stack_input(x, u).cwiseQuotient(theta.input_scale);
  const Eigen::VectorXd t = (theta.w1 * xi + theta.b1).array().tanh();
  return theta.w2 * t + theta.b2;
}

Vec6 residual_eval(const MlpParams& theta, const State& x,
                   const ControlInput& u) {
  return residual_eval(theta, x.pack(), u.pack());
}

Eigen::VectorXd residual_grad(const MlpParams& theta, const Vec13& x,
                              const Vec4& u, const Vec6& output_adjoint) {
  const Vec17 xi = stack_input(x, u).cwiseQuotient(theta.input_scale);
  const Eigen::VectorXd pre = theta.w1 * xi + theta.b1;
  const Eigen::VectorXd t = pre.array().tanh();

  Eigen::VectorXd g(theta.param_count());
  Eigen::Index at = 0;
  const Eigen::VectorXd dt = theta.w2.transpose() * output_adjoint;
  const Eigen::VectorXd dpre = dt.array() * (1.0 - t.array().square());
  for (int i = 0; i < theta.w1.rows(); ++i)
    for (int j = 0; j < kInputDim; ++j) g(at++) = dpre(i) * xi(j);
  for (int i = 0; i < theta.b1.size(); ++i) g(at++) = dpre(i);
  for (int i = 0; i < kOutputDim; ++i)
    for (int j = 0; j < theta.w2.cols(); ++j)
      g(at++) = output_adjoint(i) * t(j);
  for (int i = 0; i < kOutputDim; ++i) g(at++) = output_adjoint(i);
  return g;
}

void residual_jac(const MlpParams& theta, const Vec13& x, const Vec4& u,
                  Mat6x13& rx, Mat6x4& ru) {
  const Vec17 xi = stack_input(x, u).cwiseQuotient(theta.input_scale);
  const Eigen::VectorXd t = (theta.w1 * xi + theta.b1).array().tanh();
  const Eigen::VectorXd gain = 1.0 - t.array().square();
  // d out / d xi = w2 diag(gain) w1, then chain the input normalization.
  const Eigen::MatrixXd inner = gain.asDiagonal() * theta.w1;
  Eigen::Matrix<double, kOutputDim, kInputDim> full = theta.w2 * inner;
  full = full * theta.input_scale.cwiseInverse().asDiagonal();
  rx = full.leftCols<13>();
  ru = full.rightCols<4>();
}

Vec6 KnodeModel::default_residual_scale() {
  Vec6 s;
  s << 50.0, 50.0, 50.0, 200.0, 200.0, 200.0;
  return s;
}

Vec6 KnodeModel::residual(const Vec13& x, const Vec4& u) const {
  return residual_scale.cwiseProduct(residual_eval(theta, x, u));
}

Vec13 KnodeModel::deriv(const Vec13& x, const Vec4& u) const {
  Vec13 dx = nominal_deriv(x, u, nominal);
  const Vec6 res = residual(x, u);
  for (int i = 0; i < kOutputDim; ++i) dx(kSlots[i]) += res(i);
  return dx;
}

void KnodeModel::deriv_jac(const Vec13& x, const Vec4& u, Mat13& fx,
                           Mat13x4& fu) const {
  nominal_deriv_jac(x, u, nominal, fx, fu);
  Mat6x13 rx;
  Mat6x4 ru;
  residual_jac(theta, x, u, rx, ru);
  for (int i = 0; i < kOutputDim; ++i) {
    fx.row(kSlots[i]) += residual_scale(i) * rx.row(i);
    fu.row(kSlots[i]) += residual_scale(i) * ru.row(i);
  }
}

DerivModel KnodeModel::deriv_model() const {
  DerivModel m;
  KnodeModel copy = *this;
  m.f = [copy](const Vec13& x, const Vec4& u) { return copy.deriv(x, u); };
  m.jac = [copy](const Vec13& x, const Vec4& u, Mat13& fx, Mat13x4& fu) {
    copy.deriv_jac(x, u, fx, fu);
  };
  return m;
}

Vec13 knode_deriv(const KnodeModel& model, const Vec13& x, const Vec4& u) {
  return model.deriv(x, u);
}

StateDeriv knode_deriv(const KnodeModel& model, const State& x,
                       const ControlInput& u) {
  return model.deriv(x.pack(), u.pack());
}

KnodeModel make_knode(const QuadrotorParams& nominal, int hidden,
                      std::uint64_t seed) {
  nominal.validate();
  KnodeModel m;
  m.nominal = nominal;
  m.theta = MlpParams::init(hidden, seed);
  m.theta.input_scale = MlpParams::default_input_scale(nominal.mass);
  return m;
}

void KnodeModel::save(const std::string& path) const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["nominal"] = {{"mass", nominal.mass},
                  {"inertia",
                   {nominal.inertia_diag.x(), nominal.inertia_diag.y(),
                    nominal.inertia_diag.z()}},
                  {"gravity",
                   {nominal.gravity.x(), nominal.gravity.y(),
                    nominal.gravity.z()}}};
  j["hidden"] = theta.hidden();
  j["input_dim"] = kInputDim;
  j["output_dim"] = kOutputDim;
  auto dump = [](const auto& m) {
    std::vector<double> v;
    for (int i = 0; i < m.rows(); ++i)
      for (int j2 = 0; j2 < m.cols(); ++j2) v.push_back(m(i, j2));
    return v;
  };
  j["input_scale"] = dump(theta.input_scale);
  j["residual_scale"] = dump(residual_scale);
  j["w1"] = dump(theta.w1);
  j["b1"] = dump(theta.b1);
  j["w2"] = dump(theta.w2);
  j["b2"] = dump(theta.b2);
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write model file: " + path);
  out << j.dump(1) << "\n";
}

KnodeModel KnodeModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed model file " + path + ": " + e.what());
  }
  if (j.value("format_version", 0) != 1)
    throw ConfigError("unsupported model format version in " + path);

  KnodeModel m;
  const auto& n = j.at("nominal");
  m.nominal.mass = n.at("mass").get<double>();
  const auto inertia = n.at("inertia").get<std::vector<double>>();
  const auto gravity = n.at("gravity").get<std::vector<double>>();
  if (inertia.size() != 3 || gravity.size() != 3)
    throw ConfigError("model file: bad nominal parameter shapes");
  m.nominal.inertia_diag = Vec3(inertia[0], inertia[1], inertia[2]);
  m.nominal.gravity = Vec3(gravity[0], gravity[1], gravity[2]);
  m.nominal.validate();

  const int hidden = j.at("hidden").get<int>();
  if (j.at("input_dim").get<int>() != kInputDim ||
      j.at("output_dim").get<int>() != kOutputDim)
    throw ConfigError("model file: unsupported network dimensions");
  auto fill = [&](const char* key, Eigen::MatrixXd& mat, int rows, int cols) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (static_cast<int>(v.size()) != rows * cols)
      throw ConfigError(std::string("model file: bad shape for ") + key);
    mat.resize(rows, cols);
    int at = 0;
    for (int i = 0; i < rows; ++i)
      for (int j2 = 0; j2 < cols; ++j2) mat(i, j2) = v[at++];
  };
  Eigen::MatrixXd tmp;
  fill("w1", m.theta.w1, hidden, kInputDim);
  fill("b1", tmp, hidden, 1);
  m.theta.b1 = tmp;
  fill("w2", m.theta.w2, kOutputDim, hidden);
  fill("b2", tmp, kOutputDim, 1);
  m.theta.b2 = tmp;
  fill("input_scale", tmp, kInputDim, 1);
  m.theta.input_scale = tmp;
  fill("residual_scale", tmp, kOutputDim, 1);
  m.residual_scale = tmp;
  m.theta.validate();
  return m;
}

void TrainingDataset::validate() const {
  if (records.size() < 2)
    throw ConfigError("training dataset needs at least 2 records");
  if (!(step > 0.0)) throw ConfigError("training dataset step must be > 0");
  for (const auto& r : records)
    if (!r.x.allFinite() || !r.u.allFinite() || !r.x_next.allFinite())
      throw ConfigError("training dataset contains non-finite values");
}

void TrainingDataset::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write dataset: " + path);
  out << std::setprecision(17);
  const char* state_cols[13] = {"rx", "ry", "rz", "vx", "vy", "vz", "qw",
                                "qx", "qy", "qz", "wx", "wy", "wz"};
  for (int i = 0; i < 13; ++i) out << "x_" << state_cols[i] << ",";
  out << "u_eta,u_taux,u_tauy,u_tauz,";
  for (int i = 0; i < 13; ++i) out << "xn_" << state_cols[i] << ",";
  out << "h\n";
  for (const auto& r : records) {
    for (int i = 0; i < 13; ++i) out << r.x(i) << ",";
    for (int i = 0; i < 4; ++i) out << r.u(i) << ",";
    for (int i = 0; i < 13; ++i) out << r.x_next(i) << ",";
    out << step << "\n";
  }
}

TrainingDataset TrainingDataset::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw ConfigError("dataset file is empty: " + path);

  TrainingDataset d;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != 31)
      throw ConfigError("dataset row has wrong column count");
    TrainingRecord r;
    for (int i = 0; i < 13; ++i) r.x(i) = row[i];
    for (int i = 0; i < 4; ++i) r.u(i) = row[13 + i];
    for (int i = 0; i < 13; ++i) r.x_next(i) = row[17 + i];
    if (first) {
      d.step = row[30];
      first = false;
    } else if (std::abs(row[30] - d.step) > 1e-12) {
      throw ConfigError("dataset records do not share a uniform step");
    }
    d.records.push_back(r);
  }
  d.validate();
  return d;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 0) throw ConfigError("batch size must be >= 0");
  if (hidden < 1) throw ConfigError("hidden width must be >= 1");
}

namespace {

struct StagePoint {
  Vec13 x;
  Vec13 k;
};

// One-record forward/adjoint pass; returns the squared error and adds the
// (unnormalized) parameter gradient into grad when requested.
double record_loss_and_grad(const KnodeModel& model, const TrainingRecord& rec,
                            double h, Eigen::VectorXd* grad) {
  StagePoint s1, s2, s3, s4;
  const Vec4& u = rec.u;
  s1.x = rec.x;
  s1.k = model.deriv(s1.x, u);
  s2.x = rec.x + (0.5 * h) * s1.k;
  s2.k = model.deriv(s2.x, u);
  s3.x = rec.x + (0.5 * h) * s2.k;
  s3.k = model.deriv(s3.x, u);
  s4.x = rec.x + h * s3.k;
  s4.k = model.deriv(s4.x, u);
  Vec13 y_raw = rec.x + (h / 6.0) * (s1.k + 2.0 * s2.k + 2.0 * s3.k + s4.k);
  Vec13 y = normalize_quat(y_raw);

  Vec13 target = rec.x_next;
  if (y.segment<4>(6).dot(target.segment<4>(6)) < 0.0)
    target.segment<4>(6) *= -1.0;
  const Vec13 err = y - target;
  const double sq = err.squaredNorm();
  if (grad == nullptr) return sq;

  Vec13 lambda_raw = 2.0 * err;
  lambda_raw.segment<4>(6) =
      quat_normalize_jacobian(y_raw.segment<4>(6)).transpose() *
      (2.0 * err.segment<4>(6));

  Mat13 fx;
  Mat13x4 fu;
  auto accumulate = [&](const StagePoint& s, const Vec13& lambda_k) {
    Vec6 adjoint;
    for (int i = 0; i < kOutputDim; ++i)
      adjoint(i) = model.residual_scale(i) * lambda_k(kSlots[i]);
    *grad += residual_grad(model.theta, s.x, u, adjoint);
  };
  auto pullback = [&](const StagePoint& s, const Vec13& lambda_k) -> Vec13 {
    model.deriv_jac(s.x, u, fx, fu);
    return fx.transpose() * lambda_k;
  };

  const Vec13 lk4 = (h / 6.0) * lambda_raw;
  accumulate(s4, lk4);
  const Vec13 lx4 = pullback(s4, lk4);
  const Vec13 lk3 = (2.0 * h / 6.0) * lambda_raw + h * lx4;
  accumulate(s3, lk3);
  const Vec13 lx3 = pullback(s3, lk3);
  const Vec13 lk2 = (2.0 * h / 6.0) * lambda_raw + (0.5 * h) * lx3;
  accumulate(s2, lk2);
  const Vec13 lx2 = pullback(s2, lk2);
  const Vec13 lk1 = (h / 6.0) * lambda_raw + (0.5 * h) * lx2;
  accumulate(s1, lk1);
  return sq;
}

}  // namespace

LossValue one_step_loss(const KnodeModel& model, const TrainingDataset& data) {
  data.validate();
  LossValue out;
  out.grad = Eigen::VectorXd::Zero(model.theta.param_count());
  double total = 0.0;
  for (const auto& rec : data.records)
    total += record_loss_and_grad(model, rec, data.step, &out.grad);
  const double n = static_cast<double>(data.records.size());
  out.loss = total / n;
  out.grad /= n;
  return out;
}

KnodeModel train_knode(const QuadrotorParams& nominal,
                       const TrainingDataset& data, const TrainConfig& cfg,
                       std::vector<double>* loss_history) {
  cfg.validate();
  data.validate();
  KnodeModel model = make_knode(nominal, cfg.hidden, cfg.seed);

  const int n = static_cast<int>(data.records.size());
  const bool full_batch = cfg.batch_size <= 0 || cfg.batch_size >= n;
  std::mt19937_64 shuffle_rng(cfg.seed + 1);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  // Adam moments; reset together with a revert so a halved rate restarts
  // from a clean slate and the epoch-level loss stays non-increasing.
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(model.theta.param_count());
  Eigen::VectorXd m2 = m1;
  double steps = 0.0;
  auto adam_step = [&](const Eigen::VectorXd& grad, double lr) {
    steps += 1.0;
    m1 = beta1 * m1 + (1.0 - beta1) * grad;
    m2 = beta2 * m2.array() + (1.0 - beta2) * grad.array().square();
    const Eigen::VectorXd mhat = m1 / (1.0 - std::pow(beta1, steps));
    const Eigen::VectorXd vhat = m2 / (1.0 - std::pow(beta2, steps));
    const Eigen::VectorXd dir = mhat.array() / (vhat.array().sqrt() + adam_eps);
    model.theta.add_scaled(dir, -lr);
  };

  double lr = cfg.learning_rate;
  LossValue current = one_step_loss(model, data);
  if (loss_history) loss_history->push_back(current.loss);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (!std::isfinite(current.loss))
      throw DivergenceError("training loss diverged at epoch " +
                            std::to_string(epoch));
    if (current.loss <= cfg.loss_tolerance) break;

    const MlpParams saved = model.theta;
    if (full_batch) {
      adam_step(current.grad, lr);
    } else {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (int start = 0; start < n; start += cfg.batch_size) {
        const int end = std::min(n, start + cfg.batch_size);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(model.theta.param_count());
        for (int i = start; i < end; ++i)
          record_loss_and_grad(model, data.records[order[i]], data.step, &g);
        adam_step(g / static_cast<double>(end - start), lr);
      }
    }

    LossValue next = one_step_loss(model, data);
    if (!std::isfinite(next.loss))
      throw DivergenceError("training loss diverged at epoch " +
                            std::to_string(epoch));
    if (next.loss > current.loss) {
      model.theta = saved;
      lr *= 0.5;
      m1.setZero();
      m2.setZero();
      steps = 0.0;
      if (loss_history) loss_history->push_back(current.loss);
      continue;
    }
    current = next;
    if (loss_history) loss_history->push_back(current.loss);
  }
  return model;
}

}  // namespace l1knode
