#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privsample/linalg.hpp"
#include "privsample/rng.hpp"

namespace privsample {

/// Joint linear-Gaussian process for the public state X and private state Y:
///   [X_{k+1}; Y_{k+1}] = A [X_k; Y_k] + W_k,  W_k ~ N(0, Q),
///   [X_0; Y_0] ~ N(init_mean, init_cov).
struct LinearGaussianSystem {
  MatrixXd a_matrix;
  MatrixXd q_cov;
  VectorXd init_mean;
  MatrixXd init_cov;
  int n_x = 1;
  int n_y = 1;

  int n() const { return n_x + n_y; }

  /// Throws ContractError if any invariant fails.
  void validate() const {
    using linalg::require;
    require(n_x > 0 && n_y > 0, "system: n_x and n_y must be positive");
    const Eigen::Index d = n();
    require(a_matrix.rows() == d && a_matrix.cols() == d, "system: A must be n x n");
    require(q_cov.rows() == d && q_cov.cols() == d, "system: Q must be n x n");
    require(init_mean.size() == d, "system: mean0 must have length n");
    require(init_cov.rows() == d && init_cov.cols() == d, "system: P0 must be n x n");
    require(linalg::is_symmetric(q_cov, 1e-12), "system: Q is not symmetric");
    require(linalg::is_symmetric(init_cov, 1e-12), "system: P0 is not symmetric");
    require(linalg::min_eigenvalue(q_cov) >= -1e-10, "system: Q has a negative eigenvalue");
    require(linalg::min_eigenvalue(init_cov) >= -1e-10, "system: P0 has a negative eigenvalue");
  }
};

/// The two-dimensional example system used throughout the experiments.
inline LinearGaussianSystem reference_system() {
  LinearGaussianSystem s;
  s.n_x = 1;
  s.n_y = 1;
  s.a_matrix.resize(2, 2);
  s.a_matrix << 0.98, -0.90, 0.00, 0.35;
  s.q_cov.resize(2, 2);
  s.q_cov << 1.00, 0.10, 0.10, 4.00;
  s.init_cov.resize(2, 2);
  s.init_cov << 0.50, 0.25, 0.25, 0.50;
  s.init_mean = VectorXd::Zero(2);
  return s;
}

struct JointState {
  VectorXd x;
  VectorXd y;
  int k = 0;

  VectorXd stacked() const {
    VectorXd s(x.size() + y.size());
    s << x, y;
    return s;
  }
};

inline JointState make_state(const LinearGaussianSystem& sys, const VectorXd& stacked, int k) {
  return {stacked.head(sys.n_x), stacked.tail(sys.n_y), k};
}

/// Square-root factors of Q and P0, computed once and shared by rollouts.
struct NoiseFactors {
  MatrixXd q;
  MatrixXd init;
};

inline NoiseFactors noise_factors(const LinearGaussianSystem& sys) {
  return {linalg::psd_factor(sys.q_cov), linalg::psd_factor(sys.init_cov)};
}

inline JointState step(const LinearGaussianSystem& sys, const NoiseFactors& nf,
                       const JointState& state, Rng& rng) {
  if (state.x.size() != sys.n_x || state.y.size() != sys.n_y) {
    throw ContractError("step: state dimensions do not match the system");
  }
  const VectorXd next = sys.a_matrix * state.stacked() + nf.q * rng.normal_vector(nf.q.cols());
  return make_state(sys, next, state.k + 1);
}

/// One transition of the joint process.
inline JointState step(const LinearGaussianSystem& sys, const JointState& state, Rng& rng) {
  return step(sys, noise_factors(sys), state, rng);
}

inline JointState initial_state(const LinearGaussianSystem& sys, const NoiseFactors& nf, Rng& rng) {
  return make_state(sys, sys.init_mean + nf.init * rng.normal_vector(nf.init.cols()), 0);
}

/// States k = 0..horizon.
inline std::vector<JointState> simulate(const LinearGaussianSystem& sys, int horizon, Rng& rng) {
  if (horizon < 0) throw ContractError("simulate: horizon must be >= 0");
  std::vector<JointState> out;
  out.reserve(static_cast<std::size_t>(horizon) + 1);
  const NoiseFactors nf = noise_factors(sys);
  out.push_back(initial_state(sys, nf, rng));
  for (int k = 0; k < horizon; ++k) out.push_back(step(sys, nf, out.back(), rng));
  return out;
}

}  // namespace privsample
