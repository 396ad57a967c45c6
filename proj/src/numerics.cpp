#include "trunkscope/numerics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace trunkscope {

LinearModel ridge_fit(const Mat& x, const Vec& y, const RidgeOptions& options) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (n < 1) throw NumericsError("ridge_fit: need at least one sample");
  if (y.size() != n) throw NumericsError("ridge_fit: X and y row counts differ");
  if (options.lambda < 0.0) throw NumericsError("ridge_fit: lambda must be >= 0");

  Eigen::RowVectorXd x_mean = Eigen::RowVectorXd::Zero(d);
  double y_mean = 0.0;
  if (options.fit_intercept) {
    x_mean = x.colwise().mean();
    y_mean = y.mean();
  }
  const Mat xc = x.rowwise() - x_mean;
  const Vec yc = y.array() - y_mean;

  LinearModel model;
  if (options.lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Mat> qr(xc);
    qr.setThreshold(1e-12);
    if (qr.rank() < d) {
      throw RankDeficientError("ridge_fit: design has rank " + std::to_string(qr.rank()) +
                               " < " + std::to_string(d) + " with lambda = 0");
    }
    model.w = qr.solve(yc);
  } else {
    Mat normal = xc.transpose() * xc;
    normal.diagonal().array() += options.lambda;
    model.w = normal.ldlt().solve(xc.transpose() * yc);
  }
  model.b = options.fit_intercept ? y_mean - x_mean.dot(model.w) : 0.0;
  return model;
}

namespace {

void check_logistic_inputs(const Mat& x, const IVec& labels) {
  if (labels.size() != x.rows()) throw NumericsError("logistic: X and labels row counts differ");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels(i) != 0 && labels(i) != 1) throw NumericsError("logistic: labels must be 0 or 1");
  }
}

}  // namespace

double logistic_loss(const Mat& x, const IVec& labels, const Vec& w, double b, double l2) {
  const Vec t = (x * w).array() + b;
  double total = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    total += softplus(t(i)) - static_cast<double>(labels(i)) * t(i);
  }
  return total / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
}

Vec logistic_gradient(const Mat& x, const IVec& labels, const Vec& w, double b, double l2) {
  const Eigen::Index d = x.cols();
  const Vec t = (x * w).array() + b;
  Vec residual(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    residual(i) = sigmoid(t(i)) - static_cast<double>(labels(i));
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  Vec grad(d + 1);
  grad.head(d) = x.transpose() * residual * inv_n + l2 * w;
  grad(d) = residual.sum() * inv_n;
  return grad;
}

Vec logistic_predict_proba(const Mat& x, const LinearModel& model) {
  return model.predict(x).unaryExpr([](double t) { return sigmoid(t); });
}

LogisticFit logistic_fit(const Mat& x, const IVec& labels, const LogisticConfig& config) {
  check_logistic_inputs(x, labels);
  const Eigen::Index positives = labels.sum();
  if (positives == 0 || positives == labels.size()) {
    throw NumericsError("logistic_fit: both classes must be present");
  }
  const Eigen::Index d = x.cols();
  LogisticFit fit;
  fit.model.w = Vec::Zero(d);
  fit.model.b = 0.0;

  double step = 1.0;
  double loss = logistic_loss(x, labels, fit.model.w, fit.model.b, config.l2);
  for (fit.iterations = 0; fit.iterations < config.max_iters; ++fit.iterations) {
    const Vec grad = logistic_gradient(x, labels, fit.model.w, fit.model.b, config.l2);
    fit.grad_norm = grad.norm();
    if (fit.grad_norm < config.tol) {
      fit.converged = true;
      return fit;
    }
    const double g2 = grad.squaredNorm();
    for (int halvings = 0; halvings < 60; ++halvings) {
      const Vec w_next = fit.model.w - step * grad.head(d);
      const double b_next = fit.model.b - step * grad(d);
      const double next = logistic_loss(x, labels, w_next, b_next, config.l2);
      if (next <= loss - 1e-4 * step * g2) {
        fit.model.w = w_next;
        fit.model.b = b_next;
        loss = next;
        break;
      }
      step *= 0.5;
    }
    step = std::min(step * 2.0, 1e6);
  }
  const Vec grad = logistic_gradient(x, labels, fit.model.w, fit.model.b, config.l2);
  fit.grad_norm = grad.norm();
  fit.converged = fit.grad_norm < config.tol;
  return fit;
}

namespace {

inline void jacobi_rotate(Mat& a, Eigen::Index i, Eigen::Index j, Eigen::Index k, Eigen::Index l,
                          double s, double tau) {
  const double g = a(i, j);
  const double h = a(k, l);
  a(i, j) = g - s * (h + g * tau);
  a(k, l) = h + s * (g - h * tau);
}

}  // namespace

SymEig sym_eig(const Mat& m) {
  const Eigen::Index n = m.rows();
  if (n == 0 || m.cols() != n) throw NumericsError("sym_eig: matrix must be square and non-empty");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    throw NumericsError("sym_eig: matrix is not symmetric");
  }

  // Threshold Jacobi on the upper triangle. Every test is relative so the
  // iteration commutes with scaling by powers of two.
  Mat a = m;
  Mat v = Mat::Identity(n, n);
  Vec d = a.diagonal();
  Vec b = d;
  Vec z = Vec::Zero(n);
  SymEig out;
  for (int sweep = 1; sweep <= 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) off += std::abs(a(p, q));
    }
    out.sweeps = sweep;
    if (off == 0.0) break;
    const double tresh = sweep < 4 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double g = 100.0 * std::abs(a(p, q));
        if (sweep > 4 && std::abs(d(p)) + g == std::abs(d(p)) &&
            std::abs(d(q)) + g == std::abs(d(q))) {
          a(p, q) = 0.0;
        } else if (std::abs(a(p, q)) > tresh) {
          double h = d(q) - d(p);
          double t;
          if (std::abs(h) + g == std::abs(h)) {
            t = a(p, q) / h;
          } else {
            const double theta = 0.5 * h / a(p, q);
            t = 1.0 / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
            if (theta < 0.0) t = -t;
          }
          const double c = 1.0 / std::sqrt(1.0 + t * t);
          const double s = t * c;
          const double tau = s / (1.0 + c);
          h = t * a(p, q);
          z(p) -= h;
          z(q) += h;
          d(p) -= h;
          d(q) += h;
          a(p, q) = 0.0;
          for (Eigen::Index j = 0; j < p; ++j) jacobi_rotate(a, j, p, j, q, s, tau);
          for (Eigen::Index j = p + 1; j < q; ++j) jacobi_rotate(a, p, j, j, q, s, tau);
          for (Eigen::Index j = q + 1; j < n; ++j) jacobi_rotate(a, p, j, q, j, s, tau);
          for (Eigen::Index j = 0; j < n; ++j) jacobi_rotate(v, j, p, j, q, s, tau);
        }
      }
    }
    b += z;
    d = b;
    z.setZero();
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index lhs, Eigen::Index rhs) { return d(lhs) > d(rhs); });
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = d(src);
    Vec col = v.col(src);
    Eigen::Index pivot = 0;
    col.cwiseAbs().maxCoeff(&pivot);
    if (col(pivot) < 0.0) col = -col;
    out.vectors.col(k) = col;
  }
  return out;
}

KabschResult kabsch_align(const Coords& p, const Coords& q) {
  if (p.rows() != q.rows()) throw NumericsError("kabsch_align: point counts differ");
  if (p.rows() < 3) throw NumericsError("kabsch_align: need at least 3 points");
  const Eigen::RowVector3d p_mean = p.colwise().mean();
  const Eigen::RowVector3d q_mean = q.colwise().mean();
  const Coords pc = p.rowwise() - p_mean;
  const Coords qc = q.rowwise() - q_mean;

  const Mat3 h = pc.transpose() * qc;
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  const Mat3 u = svd.matrixU();
  const Mat3 vm = svd.matrixV();
  const double det = (vm * u.transpose()).determinant();
  Mat3 fix = Mat3::Identity();
  fix(2, 2) = det < 0.0 ? -1.0 : 1.0;

  KabschResult result;
  result.rotation = vm * fix * u.transpose();
  result.translation = q_mean.transpose() - result.rotation * p_mean.transpose();
  result.degenerate = sv(0) == 0.0 || sv(1) <= 1e-9 * sv(0);
  const Coords moved = pc * result.rotation.transpose();
  result.rmsd = std::sqrt((moved - qc).squaredNorm() / static_cast<double>(p.rows()));
  return result;
}

}  // namespace trunkscope
