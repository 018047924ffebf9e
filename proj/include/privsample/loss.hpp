#pragma once

#include <cmath>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "privsample/belief.hpp"
#include "privsample/linalg.hpp"
#include "privsample/lingauss.hpp"
#include "privsample/parallel.hpp"
#include "privsample/policy.hpp"
#include "privsample/rng.hpp"

namespace privsample {

/// Terms of the one-step loss at a predicted belief.
///
/// `total = distortion + leak_sample_branch + leak_no_sample_branch`. The two
/// branch terms are the prior Y entropy minus the branch posterior entropy,
/// weighted by the branch probability, so each is nonnegative.
/// `leak_prior_entropy` is lambda * log sqrt|Cov(Y^k | history)| and is
/// reported for reference only; it cancels inside the branch terms.
struct LossBreakdown {
  double distortion = 0.0;
  double leak_prior_entropy = 0.0;
  double leak_sample_branch = 0.0;
  double leak_no_sample_branch = 0.0;
  double info_nats = 0.0;  // unweighted expected information gain
  double p_no_sample = 0.0;
  double total = 0.0;
};

/// Which log-determinant evaluation the information terms use.
///   direct:   log|P^yy| - log|P^yy - P^yx M^{-1} P^xy| on the full Y block
///   identity: log|M| - log|M - P^xy (P^yy)^{-1} P^yx| on the n_x block
/// `automatic` picks identity unless the Y block is no larger than n_x.
enum class LogDetPath { automatic, direct, identity };

/// Sampling rule of one step after resolving the schedule kind.
struct StepRule {
  enum class Mode { exponential, always, never } mode = Mode::exponential;
  MatrixXd f;
  VectorXd g;
};

inline StepRule rule_at(const SamplerSchedule& s, int k, const GaussianBelief& b) {
  StepRule r;
  if (s.kind == ScheduleKind::always_sample) {
    r.mode = StepRule::Mode::always;
  } else if (s.kind == ScheduleKind::never_sample) {
    r.mode = StepRule::Mode::never;
  } else {
    r.f = s.f(k);
    r.g = s.center(k, b.x_mean());
  }
  return r;
}

/// P(N_k = 0 | history) for the exponential rule.
inline double no_sample_prob_marginal(const GaussianBelief& b, const MatrixXd& f,
                                      const VectorXd& g) {
  detail::require_phase(b, Phase::predicted, "no_sample_prob_marginal");
  if (f.rows() != b.n_x || f.cols() != b.n_x || g.size() != b.n_x) {
    throw ContractError("no_sample_prob_marginal: f must be n_x x n_x and g length n_x");
  }
  Eigen::LLT<MatrixXd> lf(f);
  if (lf.info() != Eigen::Success) throw ContractError("no_sample_prob_marginal: f must be SPD");
  const MatrixXd m0 = f + b.p_xx();
  Eigen::LLT<MatrixXd> lm(m0);
  if (lm.info() != Eigen::Success) throw NumericalError("no_sample_prob_marginal: f + Pxx not SPD");
  const double log_ratio = 2.0 * (lf.matrixLLT().diagonal().array().log().sum() -
                                  lm.matrixLLT().diagonal().array().log().sum());
  const VectorXd w = lm.matrixL().solve(g - b.x_mean());
  return std::exp(0.5 * log_ratio - 0.5 * w.squaredNorm());
}

namespace detail {

inline std::string dump_belief(const GaussianBelief& b) {
  std::ostringstream os;
  os << "k=" << b.k << " phase=" << to_string(b.phase) << "\nmean=\n"
     << b.mean.transpose() << "\ncov=\n"
     << b.cov << "\nx_given_y_cov=\n"
     << b.x_given_y_cov;
  return os.str();
}

inline void check_schur(const MatrixXd& s, const GaussianBelief& b, const char* what) {
  if (linalg::min_eigenvalue(s) < -1e-8) {
    throw NumericalError(std::string("one_step_loss: indefinite ") + what + "\n" + dump_belief(b));
  }
}

/// Half log-det gain of Y^k from observing X (m = Pxx) or X + V (m = f + Pxx).
/// `m_given_y` is m - Pxx + Cov(X | Y^k).
inline double half_info(const GaussianBelief& b, const MatrixXd& m, const MatrixXd& m_given_y,
                        bool direct) {
  if (!direct) return 0.5 * (linalg::log_det_psd(m) - linalg::log_det_psd(m_given_y));
  const MatrixXd pyy = b.p_yy();
  const MatrixXd pxy = b.p_xy();
  const MatrixXd post = linalg::symmetrize(pyy - pxy.transpose() * linalg::spd_inverse(m) * pxy);
  check_schur(post, b, "Y Schur complement");
  return 0.5 * (linalg::log_det_psd(pyy) - linalg::log_det_psd(post));
}

}  // namespace detail

/// One-step loss for the exponential rule at a predicted belief.
inline LossBreakdown one_step_loss(const GaussianBelief& b, const MatrixXd& f, const VectorXd& g,
                                   double lambda, LogDetPath path = LogDetPath::automatic) {
  if (lambda < 0.0) throw ContractError("one_step_loss: lambda must be >= 0");
  const double p0 = no_sample_prob_marginal(b, f, g);
  const MatrixXd pxx = b.p_xx();
  const MatrixXd& c = b.x_given_y_cov;
  const MatrixXd m0 = f + pxx;

  bool direct = false;
  if (path == LogDetPath::direct) {
    if (b.truncated()) throw ContractError("one_step_loss: direct path needs the full Y block");
    direct = true;
  } else if (path == LogDetPath::automatic) {
    direct = !b.truncated() && b.y_dim() <= b.n_x;
  }
  if (!direct) detail::check_schur(c, b, "Cov(X | Y^k)");

  LossBreakdown out;
  out.p_no_sample = p0;
  const Eigen::LLT<MatrixXd> lm(m0);
  out.distortion = p0 * (f * lm.solve(pxx)).trace();
  const double info_sample = detail::half_info(b, pxx, c, direct);
  const double info_no_sample = detail::half_info(b, m0, f + c, direct);
  out.info_nats = (1.0 - p0) * info_sample + p0 * info_no_sample;
  out.leak_prior_entropy = lambda * 0.5 * b.log_det_yy;
  out.leak_sample_branch = lambda * (1.0 - p0) * info_sample;
  out.leak_no_sample_branch = lambda * p0 * info_no_sample;
  out.total = out.distortion + out.leak_sample_branch + out.leak_no_sample_branch;
  return out;
}

/// One-step loss for any schedule kind; the degenerate kinds are the
/// f -> 0 and f -> infinity limits.
inline LossBreakdown one_step_loss(const GaussianBelief& b, const StepRule& rule, double lambda,
                                   LogDetPath path = LogDetPath::automatic) {
  if (rule.mode == StepRule::Mode::exponential) return one_step_loss(b, rule.f, rule.g, lambda, path);
  detail::require_phase(b, Phase::predicted, "one_step_loss");
  LossBreakdown out;
  out.leak_prior_entropy = lambda * 0.5 * b.log_det_yy;
  if (rule.mode == StepRule::Mode::never) {
    out.p_no_sample = 1.0;
    out.distortion = b.p_xx().trace();
    out.total = out.distortion;
    return out;
  }
  const bool direct = path == LogDetPath::direct ||
                      (path == LogDetPath::automatic && !b.truncated() && b.y_dim() <= b.n_x);
  if (direct && b.truncated()) throw ContractError("one_step_loss: direct path needs the full Y block");
  out.info_nats = detail::half_info(b, b.p_xx(), b.x_given_y_cov, direct);
  out.leak_sample_branch = lambda * out.info_nats;
  out.total = out.leak_sample_branch;
  return out;
}

/// Draws Z_k given N_k = 1: X ~ N(x̃, Pxx) accepted with probability 1 - pi_0(X).
inline VectorXd draw_sampled_state(const GaussianBelief& b, const StepRule& rule, Rng& rng) {
  const MatrixXd l = linalg::psd_factor(b.p_xx());
  const VectorXd mu = b.x_mean();
  if (rule.mode != StepRule::Mode::exponential) return mu + l * rng.normal_vector(l.cols());
  const Eigen::LLT<MatrixXd> lf(rule.f);
  for (int tries = 0; tries < 10'000'000; ++tries) {
    const VectorXd x = mu + l * rng.normal_vector(l.cols());
    const VectorXd w = lf.matrixL().solve(x - rule.g);
    if (rng.uniform() > std::exp(-0.5 * w.squaredNorm())) return x;
  }
  throw NumericalError("draw_sampled_state: rejection sampler did not accept");
}

/// Applies the decision to a predicted belief.
inline GaussianBelief apply_decision(const GaussianBelief& b, const StepRule& rule, int n,
                                     const VectorXd* z) {
  if (n == 1) {
    if (!z) throw ContractError("apply_decision: sampled step needs z");
    return update_sample(b, *z);
  }
  if (rule.mode == StepRule::Mode::never) {
    GaussianBelief out = b;
    out.phase = Phase::filtered;
    return out;
  }
  if (rule.mode == StepRule::Mode::always) throw ContractError("apply_decision: always-sample rule discarded");
  return update_no_sample(b, rule.f, rule.g);
}

enum class ObjectiveMode {
  belief_mdp,       // N_k from the marginal no-sample probability
  state_simulation  // true states simulated, N_k from the pointwise rule
};

struct RolloutTotals {
  double total = 0.0;
  double distortion = 0.0;
  double info_nats = 0.0;
  int samples = 0;
};

/// One rollout of the horizon objective sum_k l_k over k = 0..horizon.
inline RolloutTotals objective_rollout(const LinearGaussianSystem& sys, const NoiseFactors& nf,
                                       const SamplerSchedule& schedule, double lambda, int horizon,
                                       ObjectiveMode mode, int window, Rng rng) {
  RolloutTotals out;
  CompensatedSum total, distortion, info;
  GaussianBelief b = init_belief(sys, window);
  JointState state;
  if (mode == ObjectiveMode::state_simulation) state = initial_state(sys, nf, rng);
  for (int k = 0; k <= horizon; ++k) {
    if (k > 0) {
      b = predict(b, sys);
      if (mode == ObjectiveMode::state_simulation) state = step(sys, nf, state, rng);
    }
    const StepRule rule = rule_at(schedule, k, b);
    const LossBreakdown l = one_step_loss(b, rule, lambda);
    total.add(l.total);
    distortion.add(l.distortion);
    info.add(l.info_nats);

    int n = 0;
    VectorXd z;
    if (mode == ObjectiveMode::belief_mdp) {
      n = rng.uniform() <= l.p_no_sample ? 0 : 1;
      if (n == 1) z = draw_sampled_state(b, rule, rng);
    } else {
      Decision d = decide(schedule, k, state.x, b.x_mean(), rng);
      n = d.n;
      if (n == 1) z = *d.z;
    }
    out.samples += n;
    b = apply_decision(b, rule, n, n == 1 ? &z : nullptr);
  }
  out.total = total.value();
  out.distortion = distortion.value();
  out.info_nats = info.value();
  return out;
}

/// Two-pass standard error of the mean of key(item).
template <class T, class Key>
double standard_error(const std::vector<T>& items, double mean, Key key) {
  if (items.size() < 2) return 0.0;
  CompensatedSum ss;
  for (const auto& it : items) {
    const double d = key(it) - mean;
    ss.add(d * d);
  }
  const double n = static_cast<double>(items.size());
  return std::sqrt(ss.value() / (n - 1) / n);
}

struct ObjectiveEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  double sampling_rate = 0.0;
  double mean_distortion = 0.0;  // horizon sum
  double mean_info_nats = 0.0;   // horizon sum, estimates I(Z^K; Y^K)
  int rollouts = 0;
};

/// Monte Carlo estimate of E[sum_k l_k]. Rollout r uses rng.split(r).
/// `window` bounds the tracked Y blocks (0 = all); the loss is exact either way.
inline ObjectiveEstimate trajectory_objective(const LinearGaussianSystem& sys,
                                              const SamplerSchedule& schedule, double lambda,
                                              int rollouts, int horizon, const Rng& rng,
                                              ObjectiveMode mode = ObjectiveMode::belief_mdp,
                                              int window = 1) {
  if (rollouts < 1) throw ContractError("trajectory_objective: rollouts must be >= 1");
  if (horizon < 0) throw ContractError("trajectory_objective: horizon must be >= 0");
  sys.validate();
  schedule.validate();
  const NoiseFactors nf = noise_factors(sys);
  std::vector<RolloutTotals> res(static_cast<std::size_t>(rollouts));
  parallel_for(res.size(), [&](std::size_t r) {
    res[r] = objective_rollout(sys, nf, schedule, lambda, horizon, mode, window, rng.split(r));
  });
  CompensatedSum s, d, info;
  long samples = 0;
  for (const auto& r : res) {
    s.add(r.total);
    d.add(r.distortion);
    info.add(r.info_nats);
    samples += r.samples;
  }
  const double n = rollouts;
  ObjectiveEstimate est;
  est.rollouts = rollouts;
  est.mean = s.value() / n;
  est.std_error = standard_error(res, est.mean, [](const RolloutTotals& r) { return r.total; });
  est.sampling_rate = static_cast<double>(samples) / (n * (horizon + 1));
  est.mean_distortion = d.value() / n;
  est.mean_info_nats = info.value() / n;
  return est;
}

struct MiAccumulation {
  double info_nats = 0.0;
  double weighted = 0.0;  // lambda * info_nats
};

/// Chain-rule sum of per-step expected information gains along one rollout.
inline MiAccumulation mi_accumulate(const std::vector<LossBreakdown>& steps, double lambda) {
  CompensatedSum acc;
  for (const auto& s : steps) acc.add(s.info_nats);
  return {acc.value(), lambda * acc.value()};
}

/// Same, recomputing each step from the predicted beliefs and the schedule.
inline MiAccumulation mi_accumulate(const std::vector<GaussianBelief>& predicted,
                                    const SamplerSchedule& schedule, double lambda) {
  std::vector<LossBreakdown> steps;
  steps.reserve(predicted.size());
  for (const auto& b : predicted) steps.push_back(one_step_loss(b, rule_at(schedule, b.k, b), lambda));
  return mi_accumulate(steps, lambda);
}

}  // namespace privsample
