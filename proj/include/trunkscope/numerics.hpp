// Dense numerical kernels shared by every other module. All reals are f64.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace trunkscope {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using IVec = Eigen::VectorXi;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Coords = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using BoolMat = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public NumericsError {
 public:
  using NumericsError::NumericsError;
};

// Row-wise softmax with max subtraction; rows of the result sum to one.
template <typename Derived>
Mat softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  Mat out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double peak = m.row(r).maxCoeff();
    out.row(r) = (m.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Parameter-free layer normalization over the columns of each row.
template <typename Derived>
Mat layer_norm_rows(const Eigen::MatrixBase<Derived>& m, double eps = 1e-5) {
  Mat out(m.rows(), m.cols());
  const double inv_n = 1.0 / static_cast<double>(m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mean = m.row(r).sum() * inv_n;
    const auto centered = (m.row(r).array() - mean).eval();
    const double var = centered.square().sum() * inv_n;
    out.row(r) = (centered / std::sqrt(var + eps)).matrix();
  }
  return out;
}

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return 1.0 / (1.0 + std::exp(-x));
}

struct LinearModel {
  Vec w;
  double b = 0.0;

  template <typename Derived>
  Vec predict(const Eigen::MatrixBase<Derived>& x) const {
    return ((x * w).array() + b).matrix();
  }
};

struct RidgeOptions {
  double lambda = 1e-3;
  // With an intercept the features and targets are centred and b is
  // recovered from the means; the intercept is never penalized.
  bool fit_intercept = true;
};

// Minimizes |Xw + b - y|^2 + lambda |w|^2. Throws RankDeficientError when
// lambda == 0 and the (centred) design has rank below d.
LinearModel ridge_fit(const Mat& x, const Vec& y, const RidgeOptions& options = {});

struct LogisticConfig {
  int max_iters = 5000;
  double tol = 1e-6;
  double l2 = 1e-4;
};

struct LogisticFit {
  LinearModel model;
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0.0;
};

// Mean log-loss plus (l2 / 2) |w|^2. Labels are 0/1.
double logistic_loss(const Mat& x, const IVec& labels, const Vec& w, double b, double l2);
// Gradient of logistic_loss; entries [0, d) are dw, entry d is db.
Vec logistic_gradient(const Mat& x, const IVec& labels, const Vec& w, double b, double l2);
Vec logistic_predict_proba(const Mat& x, const LinearModel& model);

// Full-batch gradient descent with Armijo backtracking.
LogisticFit logistic_fit(const Mat& x, const IVec& labels, const LogisticConfig& config = {});

struct SymEig {
  Vec values;  // descending
  Mat vectors;  // column k pairs with values(k)
  int sweeps = 0;
};

// Cyclic Jacobi with a threshold sweep. Rejects inputs that are not
// symmetric to within 1e-9 (scaled by max(1, max |m_ij|)).
SymEig sym_eig(const Mat& m);

struct KabschResult {
  double rmsd = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  // Collinear or coincident inputs: the rotation is not unique.
  bool degenerate = false;
};

// Proper rigid motion (R, t) minimizing sum |R p_i + t - q_i|^2.
KabschResult kabsch_align(const Coords& p, const Coords& q);

}  // namespace trunkscope
