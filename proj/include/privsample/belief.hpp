#pragma once

#include <string>
#include <utility>

#include <Eigen/Dense>

#include "privsample/linalg.hpp"
#include "privsample/lingauss.hpp"

namespace privsample {

enum class Phase { predicted, filtered };

inline const char* to_string(Phase p) { return p == Phase::predicted ? "predicted" : "filtered"; }

/// Gaussian over (X_k, Y^k) given the sampler output history.
///
/// Layout of `mean` and `cov`: [x_k; y_k; y_{k-1}; ...; y_{k-T+1}], i.e. the
/// current Y block sits directly after X and older blocks follow. T is the
/// number of tracked Y blocks: k+1 when `window` is 0, otherwise at most
/// `window`. Dropping old blocks marginalizes them exactly.
///
/// Two statistics are carried alongside so that the information terms stay
/// exact under a window:
///   x_given_y_cov = Cov(X_k | Y^k, history)     (n_x x n_x)
///   log_det_yy    = log|Cov(Y^k | history)|      (whole trajectory)
struct GaussianBelief {
  int n_x = 1;
  int n_y = 1;
  int k = 0;
  Phase phase = Phase::predicted;
  VectorXd mean;
  MatrixXd cov;
  MatrixXd x_given_y_cov;
  double log_det_yy = 0.0;
  int window = 0;

  Eigen::Index dim() const { return mean.size(); }
  Eigen::Index y_dim() const { return mean.size() - n_x; }
  int y_blocks() const { return static_cast<int>(y_dim() / n_y); }
  bool truncated() const { return y_blocks() < k + 1; }

  VectorXd x_mean() const { return mean.head(n_x); }
  VectorXd y_current_mean() const { return mean.segment(n_x, n_y); }
  MatrixXd p_xx() const { return cov.topLeftCorner(n_x, n_x); }
  MatrixXd p_xy() const { return cov.topRightCorner(n_x, y_dim()); }
  MatrixXd p_yy() const { return cov.bottomRightCorner(y_dim(), y_dim()); }
};

namespace detail {

inline void require_phase(const GaussianBelief& b, Phase want, const char* op) {
  if (b.phase != want) {
    throw ContractError(std::string(op) + ": belief must be " + to_string(want) + ", got " +
                        to_string(b.phase));
  }
}

/// Cov(X | Y) of a joint covariance in [x; y] layout.
inline MatrixXd conditional_x_cov(const MatrixXd& cov, int n_x) {
  const Eigen::Index ny = cov.rows() - n_x;
  if (ny == 0) return cov;
  const MatrixXd pyy_inv = linalg::spd_inverse(cov.bottomRightCorner(ny, ny));
  return linalg::symmetrize(cov.topLeftCorner(n_x, n_x) -
                            cov.topRightCorner(n_x, ny) * pyy_inv * cov.bottomLeftCorner(ny, n_x));
}

}  // namespace detail

/// Cov(X_k | Y^k) computed from the stored covariance. Only meaningful for an
/// untruncated belief; the tracked `x_given_y_cov` is the general source.
inline MatrixXd x_given_y_cov_direct(const GaussianBelief& b) {
  return detail::conditional_x_cov(b.cov, b.n_x);
}

/// Builds a belief from raw moments over the full trajectory Y^k.
inline GaussianBelief make_belief(int n_x, int n_y, int k, Phase phase, VectorXd mean,
                                  MatrixXd cov) {
  using linalg::require;
  require(n_x > 0 && n_y > 0 && k >= 0, "make_belief: bad dimensions");
  const Eigen::Index d = n_x + static_cast<Eigen::Index>(n_y) * (k + 1);
  require(mean.size() == d && cov.rows() == d && cov.cols() == d,
          "make_belief: size must be n_x + n_y (k + 1)");
  GaussianBelief b;
  b.n_x = n_x;
  b.n_y = n_y;
  b.k = k;
  b.phase = phase;
  b.mean = std::move(mean);
  b.cov = linalg::symmetrize(cov);
  b.x_given_y_cov = x_given_y_cov_direct(b);
  b.log_det_yy = linalg::log_det_psd(b.p_yy());
  return b;
}

inline GaussianBelief init_belief(const LinearGaussianSystem& sys, int window = 0) {
  GaussianBelief b = make_belief(sys.n_x, sys.n_y, 0, Phase::predicted, sys.init_mean,
                                 sys.init_cov);
  b.window = window;
  return b;
}

/// Time update. Appends Y_{k+1}, keeps Y^k (up to the window) and replaces X_k
/// by X_{k+1}; Q enters only the new (X_{k+1}, Y_{k+1}) block.
inline GaussianBelief predict(const GaussianBelief& b, const LinearGaussianSystem& sys) {
  detail::require_phase(b, Phase::filtered, "predict");
  if (b.n_x != sys.n_x || b.n_y != sys.n_y) throw ContractError("predict: system mismatch");
  const int nx = b.n_x;
  const int ny = b.n_y;
  const int n = nx + ny;
  const int kept = b.window > 0 ? std::min(b.y_blocks(), b.window - 1) : b.y_blocks();
  const Eigen::Index tail = static_cast<Eigen::Index>(ny) * kept;
  const MatrixXd& a = sys.a_matrix;

  GaussianBelief out;
  out.n_x = nx;
  out.n_y = ny;
  out.k = b.k + 1;
  out.phase = Phase::predicted;
  out.window = b.window;
  out.mean.resize(n + tail);
  out.mean.head(n) = a * b.mean.head(n);
  out.mean.tail(tail) = b.mean.segment(nx, tail);

  out.cov.resize(n + tail, n + tail);
  out.cov.topLeftCorner(n, n) = a * b.cov.topLeftCorner(n, n) * a.transpose() + sys.q_cov;
  if (tail > 0) {
    out.cov.topRightCorner(n, tail) = a * b.cov.block(0, nx, n, tail);
    out.cov.bottomLeftCorner(tail, n) = out.cov.topRightCorner(n, tail).transpose();
    out.cov.bottomRightCorner(tail, tail) = b.cov.block(nx, nx, tail, tail);
  }
  out.cov = linalg::symmetrize(out.cov);

  // (X_{k+1}, Y_{k+1}) given (Y^k, history): X_k carries Cov(X_k | Y^k), Y_k is known.
  const MatrixXd ax = a.leftCols(nx);
  const MatrixXd s = ax * b.x_given_y_cov * ax.transpose() + sys.q_cov;
  out.x_given_y_cov = detail::conditional_x_cov(s, nx);
  out.log_det_yy = b.log_det_yy + linalg::log_det_psd(s.bottomRightCorner(ny, ny));
  return out;
}

/// Measurement update for a discarded sample. The no-sample likelihood
/// exp(-1/2 (x-g)^T f^{-1} (x-g)) acts as a pseudo-observation g of X with
/// noise covariance f, so this is the rank-n_x Kalman form of
///   mean <- (D+I)^{-1} (D [g; 0] + mean),  cov <- (D+I)^{-1} cov,
///   D = cov blockdiag(f^{-1}, 0).
inline GaussianBelief update_no_sample(const GaussianBelief& b, const MatrixXd& f,
                                       const VectorXd& g) {
  detail::require_phase(b, Phase::predicted, "update_no_sample");
  const int nx = b.n_x;
  if (f.rows() != nx || f.cols() != nx || g.size() != nx) {
    throw ContractError("update_no_sample: f must be n_x x n_x and g length n_x");
  }
  const MatrixXd m0 = f + b.p_xx();
  Eigen::LLT<MatrixXd> llt(m0);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("update_no_sample: f + Pxx is not positive definite");
  }
  const MatrixXd gain = llt.solve(b.cov.topRows(nx)).transpose();  // cov[:, x] (f+Pxx)^{-1}

  GaussianBelief out = b;
  out.phase = Phase::filtered;
  out.mean += gain * (g - b.x_mean());
  out.cov = linalg::symmetrize(b.cov - gain * b.cov.topRows(nx));

  const MatrixXd& c = b.x_given_y_cov;
  const MatrixXd fc = f + c;
  const MatrixXd h = linalg::spd_inverse(fc);
  out.x_given_y_cov = linalg::symmetrize(c - c * h * c);
  out.log_det_yy = b.log_det_yy - (linalg::log_det_psd(m0) - linalg::log_det_psd(fc));
  return out;
}

/// Measurement update for a transmitted sample z = X_k.
inline GaussianBelief update_sample(const GaussianBelief& b, const VectorXd& z) {
  detail::require_phase(b, Phase::predicted, "update_sample");
  const int nx = b.n_x;
  if (z.size() != nx) throw ContractError("update_sample: z must have length n_x");
  const Eigen::Index dy = b.y_dim();
  bool singular = false;
  const MatrixXd pxx = b.p_xx();
  const MatrixXd pxx_inv = linalg::spd_inverse(pxx, &singular);
  if (singular) diag::warn("update_sample: singular Pxx, using pseudo-inverse");
  const MatrixXd gain = b.cov.bottomLeftCorner(dy, nx) * pxx_inv;

  GaussianBelief out = b;
  out.phase = Phase::filtered;
  out.mean.tail(dy) += gain * (z - b.x_mean());
  out.mean.head(nx) = z;
  out.cov.bottomRightCorner(dy, dy) =
      linalg::symmetrize(b.p_yy() - gain * b.cov.topRightCorner(nx, dy));
  out.cov.topRows(nx).setZero();
  out.cov.leftCols(nx).setZero();

  out.x_given_y_cov = MatrixXd::Zero(nx, nx);
  out.log_det_yy =
      b.log_det_yy - (linalg::log_det_psd(pxx) - linalg::log_det_psd(b.x_given_y_cov));
  return out;
}

/// Mean and covariance of the current private state Y_k.
inline std::pair<VectorXd, MatrixXd> marginal_y_current(const GaussianBelief& b) {
  return {b.mean.segment(b.n_x, b.n_y), b.cov.block(b.n_x, b.n_x, b.n_y, b.n_y)};
}

}  // namespace privsample
