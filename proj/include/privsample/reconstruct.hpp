#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "privsample/belief.hpp"
#include "privsample/lingauss.hpp"
#include "privsample/loss.hpp"
#include "privsample/parallel.hpp"
#include "privsample/policy.hpp"
#include "privsample/rng.hpp"

namespace privsample {

/// Conditional mean of X_k given the outputs so far.
inline VectorXd reconstruct_x(const GaussianBelief& b) {
  detail::require_phase(b, Phase::filtered, "reconstruct_x");
  return b.x_mean();
}

/// The adversary's conditional-mean estimate of the current private state.
inline VectorXd estimate_y(const GaussianBelief& b) {
  detail::require_phase(b, Phase::filtered, "estimate_y");
  return b.y_current_mean();
}

/// One closed-loop rollout. All sequences have length horizon + 1.
struct TrajectoryLog {
  std::vector<JointState> states;
  std::vector<int> decisions;
  std::vector<std::optional<VectorXd>> outputs;
  std::vector<VectorXd> reconstructions;
  std::vector<VectorXd> y_estimates;
  std::vector<LossBreakdown> per_step_loss;
  std::vector<double> x_error_expected;  // tr Cov(X_k | outputs)
  std::vector<double> y_error_expected;  // tr Cov(Y_k | outputs)

  std::size_t size() const { return states.size(); }
};

/// Simulates states, decides with the pointwise rule and tracks the belief.
inline TrajectoryLog run_rollout(const LinearGaussianSystem& sys, const NoiseFactors& nf,
                                 const SamplerSchedule& schedule, double lambda, int horizon,
                                 int window, Rng rng) {
  TrajectoryLog log;
  GaussianBelief b = init_belief(sys, window);
  JointState state = initial_state(sys, nf, rng);
  for (int k = 0; k <= horizon; ++k) {
    if (k > 0) {
      b = predict(b, sys);
      state = step(sys, nf, state, rng);
    }
    const StepRule rule = rule_at(schedule, k, b);
    log.per_step_loss.push_back(one_step_loss(b, rule, lambda));
    Decision d = decide(schedule, k, state.x, b.x_mean(), rng);
    b = apply_decision(b, rule, d.n, d.z ? &*d.z : nullptr);
    log.states.push_back(state);
    log.decisions.push_back(d.n);
    log.outputs.push_back(std::move(d.z));
    log.reconstructions.push_back(reconstruct_x(b));
    log.y_estimates.push_back(estimate_y(b));
    log.x_error_expected.push_back(b.p_xx().trace());
    log.y_error_expected.push_back(marginal_y_current(b).second.trace());
  }
  return log;
}

/// Errors aggregated over rollouts. Per-step vectors average over rollouts;
/// the scalar means also average over k = 0..horizon. The `expected` fields
/// use the filter's posterior covariance traces instead of realized errors.
struct ReconstructionReport {
  std::vector<double> x_errors;
  std::vector<double> y_errors;
  double mean_x_error = 0.0;
  double mean_y_error = 0.0;
  double x_error_stderr = 0.0;
  double y_error_stderr = 0.0;
  double expected_x_error = 0.0;
  double expected_y_error = 0.0;
  double expected_x_stderr = 0.0;
  double expected_y_stderr = 0.0;
  double sampling_rate = 0.0;
  double objective = 0.0;     // mean of sum_k l_k
  double info_nats = 0.0;     // mean of the chain-rule information sum
  int rollouts = 0;
};

namespace detail {

struct RolloutErrors {
  std::vector<double> x, y;
  double x_exp = 0.0, y_exp = 0.0;
  double objective = 0.0, info = 0.0;
  int samples = 0;
};

inline ReconstructionReport aggregate(const std::vector<RolloutErrors>& rs, int horizon) {
  ReconstructionReport rep;
  const std::size_t steps = static_cast<std::size_t>(horizon) + 1;
  const double n = static_cast<double>(rs.size());
  rep.rollouts = static_cast<int>(rs.size());
  rep.x_errors.assign(steps, 0.0);
  rep.y_errors.assign(steps, 0.0);
  std::vector<double> mx(rs.size()), my(rs.size()), ex(rs.size()), ey(rs.size());
  CompensatedSum sx, sy, sex, sey, obj, info;
  long samples = 0;
  for (std::size_t r = 0; r < rs.size(); ++r) {
    CompensatedSum ax, ay;
    for (std::size_t k = 0; k < steps; ++k) {
      rep.x_errors[k] += rs[r].x[k] / n;
      rep.y_errors[k] += rs[r].y[k] / n;
      ax.add(rs[r].x[k]);
      ay.add(rs[r].y[k]);
    }
    mx[r] = ax.value() / steps;
    my[r] = ay.value() / steps;
    ex[r] = rs[r].x_exp / steps;
    ey[r] = rs[r].y_exp / steps;
    sx.add(mx[r]);
    sy.add(my[r]);
    sex.add(ex[r]);
    sey.add(ey[r]);
    obj.add(rs[r].objective);
    info.add(rs[r].info);
    samples += rs[r].samples;
  }
  auto ident = [](double v) { return v; };
  rep.mean_x_error = sx.value() / n;
  rep.mean_y_error = sy.value() / n;
  rep.expected_x_error = sex.value() / n;
  rep.expected_y_error = sey.value() / n;
  rep.x_error_stderr = standard_error(mx, rep.mean_x_error, ident);
  rep.y_error_stderr = standard_error(my, rep.mean_y_error, ident);
  rep.expected_x_stderr = standard_error(ex, rep.expected_x_error, ident);
  rep.expected_y_stderr = standard_error(ey, rep.expected_y_error, ident);
  rep.sampling_rate = static_cast<double>(samples) / (n * steps);
  rep.objective = obj.value() / n;
  rep.info_nats = info.value() / n;
  return rep;
}

inline RolloutErrors summarize(const TrajectoryLog& log) {
  RolloutErrors e;
  for (std::size_t k = 0; k < log.size(); ++k) {
    e.x.push_back((log.states[k].x - log.reconstructions[k]).squaredNorm());
    e.y.push_back((log.states[k].y - log.y_estimates[k]).squaredNorm());
    e.x_exp += log.x_error_expected[k];
    e.y_exp += log.y_error_expected[k];
    e.objective += log.per_step_loss[k].total;
    e.info += log.per_step_loss[k].info_nats;
    e.samples += log.decisions[k];
  }
  return e;
}

}  // namespace detail

/// Closed-loop evaluation of a schedule. Rollout r uses rng.split(r).
inline ReconstructionReport evaluate_schedule(const LinearGaussianSystem& sys,
                                              const SamplerSchedule& schedule, int horizon,
                                              int rollouts, const Rng& rng, double lambda = 0.0,
                                              int window = 1) {
  if (rollouts < 1 || horizon < 0) throw ContractError("evaluate_schedule: bad rollouts or horizon");
  sys.validate();
  schedule.validate();
  const NoiseFactors nf = noise_factors(sys);
  std::vector<detail::RolloutErrors> rs(static_cast<std::size_t>(rollouts));
  parallel_for(rs.size(), [&](std::size_t r) {
    rs[r] = detail::summarize(run_rollout(sys, nf, schedule, lambda, horizon, window, rng.split(r)));
  });
  return detail::aggregate(rs, horizon);
}

/// Realized quantities of one additive-noise rollout.
struct AdditiveLog {
  std::vector<JointState> states;
  std::vector<VectorXd> outputs;
  std::vector<VectorXd> x_estimates;
  std::vector<VectorXd> y_estimates;
  std::vector<VectorXd> normalized_innovations;  // S^{-1/2} (z - x̂_{k|k-1})
  std::vector<double> x_error_expected;
  std::vector<double> y_error_expected;
};

/// Standard Kalman filter on (X_k, Y_k) observing z_k = x_k + v_k every step.
inline AdditiveLog kalman_additive_rollout(const LinearGaussianSystem& sys, const NoiseFactors& nf,
                                           const MatrixXd& noise_cov, int horizon, Rng rng) {
  const int nx = sys.n_x;
  const int n = sys.n();
  AdditiveLog log;
  VectorXd m = sys.init_mean;
  MatrixXd p = sys.init_cov;
  JointState state = initial_state(sys, nf, rng);
  for (int k = 0; k <= horizon; ++k) {
    if (k > 0) {
      m = sys.a_matrix * m;
      p = linalg::symmetrize(sys.a_matrix * p * sys.a_matrix.transpose() + sys.q_cov);
      state = step(sys, nf, state, rng);
    }
    const VectorXd z = additive_noise_channel(state.x, noise_cov, rng);
    const MatrixXd s = p.topLeftCorner(nx, nx) + noise_cov;
    const Eigen::LLT<MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw NumericalError("kalman_additive_rollout: singular innovation covariance");
    const VectorXd nu = z - m.head(nx);
    const MatrixXd gain = llt.solve(p.topRows(nx)).transpose();
    m += gain * nu;
    p = linalg::symmetrize(p - gain * p.topRows(nx));
    log.states.push_back(state);
    log.outputs.push_back(z);
    log.x_estimates.push_back(m.head(nx));
    log.y_estimates.push_back(m.tail(n - nx));
    log.normalized_innovations.push_back(llt.matrixL().solve(nu));
    log.x_error_expected.push_back(p.topLeftCorner(nx, nx).trace());
    log.y_error_expected.push_back(p.bottomRightCorner(n - nx, n - nx).trace());
  }
  return log;
}

/// Additive-noise baseline: every step transmits x + v, v ~ N(0, noise_cov).
inline ReconstructionReport kalman_additive_baseline(const LinearGaussianSystem& sys,
                                                     const MatrixXd& noise_cov, int horizon,
                                                     int rollouts, const Rng& rng) {
  if (rollouts < 1 || horizon < 0) throw ContractError("kalman_additive_baseline: bad rollouts or horizon");
  if (noise_cov.rows() != sys.n_x || noise_cov.cols() != sys.n_x) {
    throw ContractError("kalman_additive_baseline: noise_cov must be n_x x n_x");
  }
  sys.validate();
  const NoiseFactors nf = noise_factors(sys);
  std::vector<detail::RolloutErrors> rs(static_cast<std::size_t>(rollouts));
  parallel_for(rs.size(), [&](std::size_t r) {
    const AdditiveLog log = kalman_additive_rollout(sys, nf, noise_cov, horizon, rng.split(r));
    detail::RolloutErrors& e = rs[r];
    for (std::size_t k = 0; k < log.states.size(); ++k) {
      e.x.push_back((log.states[k].x - log.x_estimates[k]).squaredNorm());
      e.y.push_back((log.states[k].y - log.y_estimates[k]).squaredNorm());
      e.x_exp += log.x_error_expected[k];
      e.y_exp += log.y_error_expected[k];
      e.samples += 1;
    }
  });
  return detail::aggregate(rs, horizon);
}

}  // namespace privsample
