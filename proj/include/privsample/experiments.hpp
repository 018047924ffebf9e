#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privsample/optimizer.hpp"
#include "privsample/reconstruct.hpp"

namespace privsample {

/// One evaluated configuration of a trade-off family. Errors are per-step
/// averages of the posterior covariance traces, which have far less Monte
/// Carlo noise than the realized squared errors (both are kept).
struct CurvePoint {
  std::string family;  // optimized, open_loop, additive, always_sample, never_sample
  double lambda = 0.0;
  double param = 0.0;  // f for the sampler families, noise variance for additive
  double offset = 0.0; // |g| of the optimized schedule
  double x_error = 0.0;
  double y_error = 0.0;
  double x_stderr = 0.0;
  double y_stderr = 0.0;
  double realized_x_error = 0.0;
  double realized_y_error = 0.0;
  double sampling_rate = 0.0;
  double leak_nats = 0.0;
  int iterations = 0;
  bool converged = true;
  SamplerSchedule schedule;
};

struct SweepConfig {
  int horizon = 100;
  int rollouts = 10000;
  std::uint64_t seed = 1;
  std::vector<double> lambdas{4, 8, 15, 30, 60, 120, 250};
  std::vector<double> open_loop_f{1, 3, 10, 30, 100, 300, 1000};
  std::vector<double> noise_var{0.1, 0.3, 1, 2, 4, 8, 16, 32, 64};
  double f_init = 3.0;
  bool endpoints = true;
  OptimizerConfig optimizer = sweep_optimizer_config(100);

  /// Step size and clip scaled to the horizon: the objective is a sum over
  /// K + 1 steps, so its gradient grows linearly with K.
  static OptimizerConfig sweep_optimizer_config(int horizon) {
    OptimizerConfig c;
    c.horizon = horizon;
    c.alpha = 0.1 / (horizon + 1);
    c.clip_norm = 2.5 * (horizon + 1);
    c.rollouts_per_step = 128;
    c.max_iters = 80;
    c.validation_every = 10;
    c.validation_rollouts = 500;
    c.patience = 3;
    return c;
  }

  void validate() const {
    using linalg::require;
    require(horizon >= 0, "sweep: horizon must be >= 0");
    require(rollouts >= 1, "sweep: rollouts must be >= 1");
    for (double l : lambdas) require(l >= 0.0 && std::isfinite(l), "sweep: lambdas must be finite and >= 0");
    for (double f : open_loop_f) require(f > 0.0 && std::isfinite(f), "sweep: open_loop_f must be positive");
    for (double v : noise_var) require(v > 0.0 && std::isfinite(v), "sweep: noise_var must be positive");
    require(f_init > 0.0, "sweep: f_init must be positive");
    optimizer.validate();
  }
};

namespace detail {

inline CurvePoint to_point(std::string family, double param, const ReconstructionReport& rep) {
  CurvePoint p;
  p.family = std::move(family);
  p.param = param;
  p.x_error = rep.expected_x_error;
  p.y_error = rep.expected_y_error;
  p.x_stderr = rep.expected_x_stderr;
  p.y_stderr = rep.expected_y_stderr;
  p.realized_x_error = rep.mean_x_error;
  p.realized_y_error = rep.mean_y_error;
  p.sampling_rate = rep.sampling_rate;
  p.leak_nats = rep.info_nats;
  return p;
}

// Evaluation streams are shared across points of a sweep (common random numbers).
inline Rng evaluation_rng(std::uint64_t seed) { return Rng(seed).split(0xe7a1ULL); }

}  // namespace detail

/// Optimizes the feedback schedule for each λ (ascending, warm-started from
/// the previous optimum) and evaluates it.
inline std::vector<CurvePoint> optimized_family(const LinearGaussianSystem& sys, const SweepConfig& cfg) {
  cfg.validate();
  std::vector<double> lambdas = cfg.lambdas;
  std::sort(lambdas.begin(), lambdas.end());
  const MatrixXd eye = MatrixXd::Identity(sys.n_x, sys.n_x);
  SamplerSchedule init = constant_schedule(cfg.f_init * eye, VectorXd::Zero(sys.n_x), true);
  std::vector<CurvePoint> out;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    OptimizerConfig oc = cfg.optimizer;
    oc.horizon = cfg.horizon;
    oc.seed = cfg.seed + 1000 * (i + 1);
    const OptimizeResult res = stackelberg_optimize(oc, sys, lambdas[i], init);
    const auto rep = evaluate_schedule(sys, res.schedule, cfg.horizon, cfg.rollouts,
                                       detail::evaluation_rng(cfg.seed), lambdas[i]);
    CurvePoint p = detail::to_point("optimized", res.schedule.f(0).trace() / sys.n_x, rep);
    p.lambda = lambdas[i];
    p.offset = res.schedule.g_param(0).norm();
    p.iterations = res.iterations;
    p.converged = res.converged;
    p.schedule = res.schedule;
    out.push_back(std::move(p));
    init = res.schedule;
  }
  return out;
}

inline CurvePoint evaluate_open_loop(const LinearGaussianSystem& sys, double f, int horizon, int rollouts,
                                     std::uint64_t seed) {
  const SamplerSchedule s = open_loop_schedule(f * MatrixXd::Identity(sys.n_x, sys.n_x));
  CurvePoint p = detail::to_point("open_loop", f,
                                  evaluate_schedule(sys, s, horizon, rollouts, detail::evaluation_rng(seed)));
  p.schedule = s;
  return p;
}

inline std::vector<CurvePoint> open_loop_family(const LinearGaussianSystem& sys, const SweepConfig& cfg) {
  cfg.validate();
  std::vector<CurvePoint> out;
  for (double f : cfg.open_loop_f) out.push_back(evaluate_open_loop(sys, f, cfg.horizon, cfg.rollouts, cfg.seed));
  if (cfg.endpoints) {
    for (const auto& s : {always_sample_schedule(sys.n_x), never_sample_schedule(sys.n_x)}) {
      CurvePoint p = detail::to_point(to_string(s.kind), 0.0,
                                      evaluate_schedule(sys, s, cfg.horizon, cfg.rollouts,
                                                        detail::evaluation_rng(cfg.seed)));
      p.schedule = s;
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline std::vector<CurvePoint> additive_family(const LinearGaussianSystem& sys, const SweepConfig& cfg) {
  cfg.validate();
  std::vector<CurvePoint> out;
  for (double v : cfg.noise_var) {
    const auto rep = kalman_additive_baseline(sys, v * MatrixXd::Identity(sys.n_x, sys.n_x), cfg.horizon,
                                              cfg.rollouts, detail::evaluation_rng(cfg.seed));
    out.push_back(detail::to_point("additive", v, rep));
  }
  return out;
}

/// Piecewise-linear interpolation of `value(p)` at `at`, along `key(p)`.
/// Empty outside the range spanned by the curve.
template <class Key, class Value>
std::optional<double> interpolate_curve(std::vector<CurvePoint> curve, double at, Key key, Value value) {
  if (curve.empty()) return std::nullopt;
  std::sort(curve.begin(), curve.end(), [&](const CurvePoint& a, const CurvePoint& b) { return key(a) < key(b); });
  if (at < key(curve.front()) || at > key(curve.back())) return std::nullopt;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const double k0 = key(curve[i - 1]), k1 = key(curve[i]);
    if (at <= k1) {
      if (k1 == k0) return value(curve[i]);
      const double t = (at - k0) / (k1 - k0);
      return (1 - t) * value(curve[i - 1]) + t * value(curve[i]);
    }
  }
  return value(curve.back());
}

inline std::optional<double> x_error_at_y(const std::vector<CurvePoint>& curve, double y) {
  return interpolate_curve(curve, y, [](const CurvePoint& p) { return p.y_error; },
                           [](const CurvePoint& p) { return p.x_error; });
}

struct MatchedLevel {
  double y_error = 0.0;
  double optimized_x = 0.0;
  double open_loop_x = 0.0;
  std::optional<double> additive_x;
  bool dominates() const { return optimized_x <= open_loop_x; }
  std::optional<double> additive_gap() const {
    if (!additive_x) return std::nullopt;
    return std::abs(*additive_x - optimized_x) / optimized_x;
  }
};

struct TradeoffComparison {
  std::vector<MatchedLevel> levels;
  int dominated = 0;
  int additive_matched = 0;
  double max_additive_gap = 0.0;
};

/// Matches each optimized point to the baseline curves at its own y-error.
/// Only the sampler-family open-loop points and the always/never endpoints
/// enter the open-loop curve.
inline TradeoffComparison compare_tradeoff(const std::vector<CurvePoint>& optimized,
                                           const std::vector<CurvePoint>& open_loop,
                                           const std::vector<CurvePoint>& additive) {
  TradeoffComparison c;
  for (const auto& p : optimized) {
    const auto ol = x_error_at_y(open_loop, p.y_error);
    if (!ol) continue;
    MatchedLevel m{p.y_error, p.x_error, *ol, x_error_at_y(additive, p.y_error)};
    if (m.dominates()) ++c.dominated;
    if (const auto gap = m.additive_gap()) {
      ++c.additive_matched;
      c.max_additive_gap = std::max(c.max_additive_gap, *gap);
    }
    c.levels.push_back(m);
  }
  return c;
}

/// Open-loop f whose sampling rate equals `rate`, by bisection on log f with
/// common random numbers (the rate is then monotone in f).
inline CurvePoint open_loop_at_rate(const LinearGaussianSystem& sys, double rate, int horizon, int rollouts,
                                    std::uint64_t seed, int search_rollouts = 1000) {
  if (!(rate > 0.0 && rate < 1.0)) throw ContractError("open_loop_at_rate: rate must be in (0, 1)");
  double lo = std::log(1e-6), hi = std::log(1e8);
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double r = evaluate_open_loop(sys, std::exp(mid), horizon, search_rollouts, seed).sampling_rate;
    (r > rate ? lo : hi) = mid;
    if (hi - lo < 1e-4) break;
  }
  return evaluate_open_loop(sys, std::exp(0.5 * (lo + hi)), horizon, rollouts, seed);
}

struct RateComparison {
  CurvePoint open_loop;                 // the rate-matched open-loop configuration
  std::optional<CurvePoint> witness;    // cheapest optimized point at least as accurate
  std::optional<double> rate_at_match;  // optimized-curve rate interpolated at the open-loop x-error
  bool passes() const { return witness && witness->sampling_rate < open_loop.sampling_rate; }
};

inline RateComparison compare_rate(const std::vector<CurvePoint>& optimized, const CurvePoint& open_loop) {
  RateComparison c;
  c.open_loop = open_loop;
  for (const auto& p : optimized) {
    if (p.x_error > open_loop.x_error) continue;
    if (!c.witness || p.sampling_rate < c.witness->sampling_rate) c.witness = p;
  }
  c.rate_at_match = interpolate_curve(optimized, open_loop.x_error, [](const CurvePoint& p) { return p.x_error; },
                                      [](const CurvePoint& p) { return p.sampling_rate; });
  return c;
}

}  // namespace privsample
