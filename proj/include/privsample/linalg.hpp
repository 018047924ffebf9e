#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace privsample {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Raised when a factorization cannot be rescued by the jitter policy.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on dimension or precondition violations.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace diag {

inline std::atomic<long> warning_count{0};
inline std::function<void(const std::string&)> warning_sink = [](const std::string& msg) {
  std::cerr << "privsample warning: " << msg << '\n';
};

/// Reports the first few warnings; all of them are counted.
inline void warn(const std::string& msg) {
  if (warning_count.fetch_add(1) < 20 && warning_sink) warning_sink(msg);
}

}  // namespace diag

namespace linalg {

constexpr double kJitter = 1e-10;
constexpr double kPinvTol = 1e-10;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

inline MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

inline bool is_symmetric(const MatrixXd& m, double tol) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

inline double min_eigenvalue(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

/// log|M| for symmetric PSD M. Cholesky first, then 1e-10 jitter, then an
/// eigenvalue floor. A singular matrix yields a large negative number rather
/// than -inf so that differences stay finite.
inline double log_det_psd(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  const MatrixXd jittered = m + kJitter * MatrixXd::Identity(m.rows(), m.cols());
  llt.compute(jittered);
  if (llt.info() == Eigen::Success) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    acc += std::log(std::max(es.eigenvalues()(i), 1e-300));
  }
  return acc;
}

/// Factor L with L L^T = M for PSD M; negative eigenvalues are clipped to 0.
inline MatrixXd psd_factor(const MatrixXd& m) {
  if (m.size() == 0) return m;
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
  const VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

/// Pseudo-inverse of a symmetric matrix; eigenvalues below tol·max are dropped.
inline MatrixXd pinv_sym(const MatrixXd& m, double tol = kPinvTol) {
  if (m.size() == 0) return m;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(m));
  const VectorXd& ev = es.eigenvalues();
  const double cutoff = tol * std::max(1.0, ev.cwiseAbs().maxCoeff());
  VectorXd inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv(i) = ev(i) > cutoff ? 1.0 / ev(i) : 0.0;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

/// Inverse of an SPD matrix, with the jitter then pseudo-inverse fallbacks.
inline MatrixXd spd_inverse(const MatrixXd& m, bool* used_pinv = nullptr) {
  if (used_pinv) *used_pinv = false;
  if (m.size() == 0) return m;
  const auto identity = MatrixXd::Identity(m.rows(), m.cols());
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() == Eigen::Success && llt.matrixLLT().diagonal().minCoeff() > 1e-150) {
    return symmetrize(llt.solve(identity));
  }
  if (used_pinv) *used_pinv = true;
  return pinv_sym(m);
}

/// Schur complement P_bb - P_ba P_aa^{-1} P_ab of block `a` in [a; b] ordering.
inline MatrixXd schur_complement(const MatrixXd& p, Eigen::Index na) {
  const Eigen::Index nb = p.rows() - na;
  const MatrixXd inv = spd_inverse(p.topLeftCorner(na, na));
  return symmetrize(p.bottomRightCorner(nb, nb) -
                    p.bottomLeftCorner(nb, na) * inv * p.topRightCorner(na, nb));
}

}  // namespace linalg
}  // namespace privsample
