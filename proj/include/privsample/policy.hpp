#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "privsample/linalg.hpp"
#include "privsample/rng.hpp"

namespace privsample {

enum class ScheduleKind { privacy_aware, open_loop, always_sample, never_sample };

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::privacy_aware: return "privacy_aware";
    case ScheduleKind::open_loop: return "open_loop";
    case ScheduleKind::always_sample: return "always_sample";
    case ScheduleKind::never_sample: return "never_sample";
  }
  return "unknown";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "privacy_aware") return ScheduleKind::privacy_aware;
  if (s == "open_loop") return ScheduleKind::open_loop;
  if (s == "always_sample") return ScheduleKind::always_sample;
  if (s == "never_sample") return ScheduleKind::never_sample;
  throw ContractError("unknown schedule kind: " + s);
}

/// Per-step parameters of the exponential sampling rule.
///
/// f_k = L_k L_k^T with L_k lower-triangular and positive on the diagonal.
/// With `feedback` set, the center is g_k = x̃_{k|k-1} + g[k] (an offset from
/// the predicted mean) instead of g[k] itself. A sequence shorter than the
/// horizon repeats its last entry, so a single entry means "constant".
struct SamplerSchedule {
  ScheduleKind kind = ScheduleKind::privacy_aware;
  int n_x = 1;
  std::vector<MatrixXd> f_chol;
  std::vector<VectorXd> g;
  bool feedback = false;

  bool degenerate() const {
    return kind == ScheduleKind::always_sample || kind == ScheduleKind::never_sample;
  }

  const MatrixXd& chol(int k) const {
    return f_chol[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(f_chol.size()) - 1))];
  }
  MatrixXd f(int k) const {
    const MatrixXd& l = chol(k);
    return l * l.transpose();
  }
  const VectorXd& g_param(int k) const {
    return g[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(g.size()) - 1))];
  }
  /// Center of the rule at step k given the predicted X mean.
  VectorXd center(int k, const VectorXd& x_pred_mean) const {
    return feedback ? VectorXd(x_pred_mean + g_param(k)) : g_param(k);
  }

  void validate() const {
    using linalg::require;
    require(n_x > 0, "schedule: n_x must be positive");
    if (degenerate()) return;
    require(!f_chol.empty() && !g.empty(), "schedule: f_chol and g must be non-empty");
    for (const auto& l : f_chol) {
      require(l.rows() == n_x && l.cols() == n_x, "schedule: f_chol entries must be n_x x n_x");
      require(l.isLowerTriangular(0.0), "schedule: f_chol entries must be lower-triangular");
      require(l.diagonal().minCoeff() > 0.0, "schedule: f_chol diagonal must be positive");
    }
    for (const auto& v : g) require(v.size() == n_x, "schedule: g entries must have length n_x");
    if (kind == ScheduleKind::open_loop) {
      require(!feedback, "schedule: open_loop cannot use feedback");
      for (const auto& v : g) require(v.isZero(0.0), "schedule: open_loop requires g = 0");
      for (const auto& l : f_chol) require(l == f_chol.front(), "schedule: open_loop requires constant f");
    }
  }
};

/// Constant privacy-aware schedule.
inline SamplerSchedule constant_schedule(const MatrixXd& f, const VectorXd& g, bool feedback) {
  SamplerSchedule s;
  s.kind = ScheduleKind::privacy_aware;
  s.n_x = static_cast<int>(f.rows());
  Eigen::LLT<MatrixXd> llt(f);
  if (llt.info() != Eigen::Success) throw ContractError("constant_schedule: f must be SPD");
  s.f_chol = {llt.matrixL()};
  s.g = {g};
  s.feedback = feedback;
  return s;
}

inline SamplerSchedule open_loop_schedule(const MatrixXd& f) {
  SamplerSchedule s = constant_schedule(f, VectorXd::Zero(f.rows()), false);
  s.kind = ScheduleKind::open_loop;
  return s;
}

inline SamplerSchedule always_sample_schedule(int n_x) {
  SamplerSchedule s;
  s.kind = ScheduleKind::always_sample;
  s.n_x = n_x;
  return s;
}

inline SamplerSchedule never_sample_schedule(int n_x) {
  SamplerSchedule s;
  s.kind = ScheduleKind::never_sample;
  s.n_x = n_x;
  return s;
}

/// Copies the schedule with one explicit entry per step k = 0..horizon.
inline SamplerSchedule expand(const SamplerSchedule& s, int horizon) {
  if (s.degenerate()) return s;
  SamplerSchedule out = s;
  out.f_chol.clear();
  out.g.clear();
  for (int k = 0; k <= horizon; ++k) {
    out.f_chol.push_back(s.chol(k));
    out.g.push_back(s.g_param(k));
  }
  return out;
}

/// exp(-1/2 d^T f^{-1} d), d = x - g.
inline double no_sample_prob_pointwise(const VectorXd& x, const MatrixXd& f, const VectorXd& g) {
  Eigen::LLT<MatrixXd> llt(f);
  if (llt.info() != Eigen::Success) throw ContractError("no_sample_prob_pointwise: f must be SPD");
  const VectorXd w = llt.matrixL().solve(x - g);
  return std::exp(-0.5 * w.squaredNorm());
}

struct Decision {
  int n = 0;                   // 1 = transmit
  std::optional<VectorXd> z;   // present iff n == 1
};

/// Discards iff eps <= exp(-1/2 d^T f^{-1} d), eps ~ U[0,1].
inline Decision decide(const VectorXd& x, const MatrixXd& f, const VectorXd& g, Rng& rng) {
  const double p0 = no_sample_prob_pointwise(x, f, g);
  if (rng.uniform() <= p0) return {0, std::nullopt};
  return {1, x};
}

/// Decision of a full schedule at step k; `x_pred_mean` feeds the feedback center.
inline Decision decide(const SamplerSchedule& s, int k, const VectorXd& x,
                       const VectorXd& x_pred_mean, Rng& rng) {
  switch (s.kind) {
    case ScheduleKind::never_sample: rng.uniform(); return {0, std::nullopt};
    case ScheduleKind::always_sample: rng.uniform(); return {1, x};
    default: return decide(x, s.f(k), s.center(k, x_pred_mean), rng);
  }
}

/// x + v with v ~ N(0, noise_cov).
inline VectorXd additive_noise_channel(const VectorXd& x, const MatrixXd& noise_cov, Rng& rng) {
  const MatrixXd l = linalg::psd_factor(noise_cov);
  return x + l * rng.normal_vector(l.cols());
}

/// Flat parameter vector for the optimizer. Per step the block holds the
/// lower triangle of L_k row by row (diagonal entries as log L_ii) followed by
/// g_k (or the feedback offset). `tied` shares one block across all steps.
struct ParamLayout {
  int n_x = 1;
  int steps = 1;
  bool tied = true;

  int chol_size() const { return n_x * (n_x + 1) / 2; }
  int block() const { return chol_size() + n_x; }
  int size() const { return tied ? block() : block() * steps; }
  int offset(int k) const { return tied ? 0 : k * block(); }

  /// (row, col) of the j-th Cholesky parameter.
  static std::pair<int, int> chol_entry(int j) {
    int r = 0;
    while ((r + 1) * (r + 2) / 2 <= j) ++r;
    return {r, j - r * (r + 1) / 2};
  }
};

inline VectorXd pack_params(const SamplerSchedule& s, const ParamLayout& lay) {
  VectorXd theta(lay.size());
  const int steps = lay.tied ? 1 : lay.steps;
  for (int k = 0; k < steps; ++k) {
    const int o = lay.offset(k);
    const MatrixXd& l = s.chol(k);
    for (int j = 0; j < lay.chol_size(); ++j) {
      const auto [r, c] = ParamLayout::chol_entry(j);
      theta(o + j) = r == c ? std::log(l(r, c)) : l(r, c);
    }
    theta.segment(o + lay.chol_size(), lay.n_x) = s.g_param(k);
  }
  return theta;
}

inline SamplerSchedule unpack_params(const VectorXd& theta, const SamplerSchedule& shape,
                                     const ParamLayout& lay) {
  if (theta.size() != lay.size()) throw ContractError("unpack_params: size mismatch");
  SamplerSchedule s = shape;
  if (s.kind != ScheduleKind::open_loop) s.kind = ScheduleKind::privacy_aware;
  s.n_x = lay.n_x;
  s.f_chol.clear();
  s.g.clear();
  const int steps = lay.tied ? 1 : lay.steps;
  for (int k = 0; k < steps; ++k) {
    const int o = lay.offset(k);
    MatrixXd l = MatrixXd::Zero(lay.n_x, lay.n_x);
    for (int j = 0; j < lay.chol_size(); ++j) {
      const auto [r, c] = ParamLayout::chol_entry(j);
      l(r, c) = r == c ? std::exp(theta(o + j)) : theta(o + j);
    }
    s.f_chol.push_back(l);
    s.g.push_back(theta.segment(o + lay.chol_size(), lay.n_x));
  }
  return s;
}

}  // namespace privsample
