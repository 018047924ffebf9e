#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privsample/belief.hpp"
#include "privsample/lingauss.hpp"
#include "privsample/loss.hpp"
#include "privsample/parallel.hpp"
#include "privsample/policy.hpp"
#include "privsample/rng.hpp"

namespace privsample {

/// How decisions are drawn while estimating a gradient.
///   belief_mdp:       N_k from the marginal no-sample probability; only valid
///                     for feedback schedules, whose losses depend on the
///                     history through the decisions alone.
///   state_simulation: true states simulated, N_k from the pointwise rule.
///   automatic:        belief_mdp for feedback schedules, else state_simulation.
enum class GradientMode { automatic, belief_mdp, state_simulation };

/// Everything needed to replay one rollout at other parameters.
struct RolloutRecord {
  std::vector<int> n;
  std::vector<VectorXd> x;  // simulated X_k (state_simulation) or Z_k (belief_mdp, empty if N_k = 0)
  double baseline = 0.0;
  double total = 0.0;
  double log_prob = 0.0;
};

struct GradientEstimate {
  VectorXd gradient;
  VectorXd std_error;
  double objective = 0.0;
  double objective_stderr = 0.0;
  double sampling_rate = 0.0;
  GradientMode mode = GradientMode::automatic;
  std::vector<RolloutRecord> records;  // filled when requested
};

struct GradientOptions {
  GradientMode mode = GradientMode::automatic;
  bool keep_records = false;
  std::optional<double> baseline_init;  // carried over from a previous batch
};

namespace detail {

struct Tangent {
  MatrixXd dp;  // joint (X_k, Y_k) covariance
  MatrixXd dc;  // Cov(X_k | Y^k)
  VectorXd dm;  // joint mean
};

struct RolloutGrad {
  double total = 0.0;
  double log_prob = 0.0;
  int samples = 0;
  VectorXd pathwise;
  VectorXd score;
  RolloutRecord record;
};

inline GradientMode resolve_mode(GradientMode m, const SamplerSchedule& s) {
  if (m == GradientMode::automatic) return s.feedback ? GradientMode::belief_mdp : GradientMode::state_simulation;
  if (m == GradientMode::belief_mdp && !s.feedback) {
    throw ContractError("objective_gradient_linear: belief_mdp mode needs a feedback schedule");
  }
  return m;
}

/// df for parameter j of a Cholesky block (zero for the g entries).
inline MatrixXd chol_tangent(const MatrixXd& l, int j) {
  const auto [r, c] = ParamLayout::chol_entry(j);
  MatrixXd dl = MatrixXd::Zero(l.rows(), l.cols());
  dl(r, c) = r == c ? l(r, c) : 1.0;
  return dl * l.transpose() + l * dl.transpose();
}

/// One rollout of the linear-case objective with forward-mode tangents of
/// every loss term. With `replay` set, decisions and states come from the
/// record instead of the generator.
inline RolloutGrad gradient_rollout(const LinearGaussianSystem& sys, const NoiseFactors& nf,
                                    const SamplerSchedule& sched, const ParamLayout& lay,
                                    double lambda, int horizon, GradientMode mode, Rng rng,
                                    const RolloutRecord* replay,
                                    std::vector<MatrixXd>* mean_tangents = nullptr) {
  const int nx = sys.n_x;
  const int n = sys.n();
  const int np = lay.size();
  const bool need_mean = mode == GradientMode::state_simulation || mean_tangents;
  const MatrixXd ax = sys.a_matrix.leftCols(nx);

  RolloutGrad out;
  out.pathwise = VectorXd::Zero(np);
  out.score = VectorXd::Zero(np);
  std::vector<Tangent> tan(static_cast<std::size_t>(np),
                           Tangent{MatrixXd::Zero(n, n), MatrixXd::Zero(nx, nx), VectorXd::Zero(n)});

  GaussianBelief b = init_belief(sys, 1);
  JointState state;
  if (mode == GradientMode::state_simulation && !replay) state = initial_state(sys, nf, rng);

  for (int k = 0; k <= horizon; ++k) {
    if (k > 0 && mode == GradientMode::state_simulation && !replay) state = step(sys, nf, state, rng);
    const int block = lay.tied ? 0 : std::min(k, lay.steps - 1);
    const int off = lay.offset(block);
    const MatrixXd& lchol = sched.chol(k);
    const MatrixXd f = lchol * lchol.transpose();
    const VectorXd mx = b.x_mean();
    const VectorXd g = sched.center(k, mx);
    const VectorXd r = g - mx;

    const MatrixXd pxx = b.p_xx();
    const MatrixXd& c = b.x_given_y_cov;
    const MatrixXd m0 = f + pxx;
    const MatrixXd m0i = linalg::spd_inverse(m0);
    const MatrixXd fi = linalg::spd_inverse(f);
    const MatrixXd fc = f + c;
    const MatrixXd h = linalg::spd_inverse(fc);
    const MatrixXd pxxi = linalg::spd_inverse(pxx);
    const MatrixXd ci = linalg::spd_inverse(c);

    const LossBreakdown lb = one_step_loss(b, f, g, lambda);
    const double p0 = lb.p_no_sample;
    const MatrixXd m0i_pxx = m0i * pxx;
    const double t = (f * m0i_pxx).trace();
    const double l1 = 0.5 * (linalg::log_det_psd(pxx) - linalg::log_det_psd(c));
    const double l0 = 0.5 * (linalg::log_det_psd(m0) - linalg::log_det_psd(fc));
    out.total += lb.total;

    // decision
    int nk = 0;
    VectorXd z;
    double pi0 = p0;
    VectorXd dvec;  // x - g for the pointwise rule
    if (mode == GradientMode::belief_mdp) {
      if (replay) {
        nk = replay->n[static_cast<std::size_t>(k)];
        if (nk == 1) z = replay->x[static_cast<std::size_t>(k)];
      } else {
        nk = rng.uniform() <= p0 ? 0 : 1;
        if (nk == 1) z = draw_sampled_state(b, StepRule{StepRule::Mode::exponential, f, g}, rng);
      }
      out.log_prob += nk == 0 ? std::log(p0) : std::log1p(-p0);
    } else {
      const VectorXd x = replay ? replay->x[static_cast<std::size_t>(k)] : state.x;
      dvec = x - g;
      pi0 = std::exp(-0.5 * dvec.dot(fi * dvec));
      if (replay) {
        nk = replay->n[static_cast<std::size_t>(k)];
      } else {
        nk = rng.uniform() <= pi0 ? 0 : 1;
      }
      if (nk == 1) z = x;
      out.log_prob += nk == 0 ? std::log(pi0) : std::log1p(-pi0);
      out.record.x.push_back(x);
    }
    if (mode == GradientMode::belief_mdp) out.record.x.push_back(nk == 1 ? z : VectorXd());
    out.record.n.push_back(nk);
    out.samples += nk;

    // loss and score tangents
    for (int j = 0; j < np; ++j) {
      Tangent& tj = tan[static_cast<std::size_t>(j)];
      MatrixXd df = MatrixXd::Zero(nx, nx);
      VectorXd dc_param = VectorXd::Zero(nx);
      const int local = j - off;
      if (local >= 0 && local < lay.block()) {
        if (local < lay.chol_size()) {
          df = chol_tangent(lchol, local);
        } else {
          dc_param(local - lay.chol_size()) = 1.0;
        }
      }
      const VectorXd dmx = tj.dm.head(nx);
      const VectorXd dg = sched.feedback ? VectorXd(dmx + dc_param) : dc_param;
      const VectorXd dr = dg - dmx;
      const MatrixXd dpxx = tj.dp.topLeftCorner(nx, nx);
      const MatrixXd dm0 = df + dpxx;
      const VectorXd m0i_r = m0i * r;

      const double dlogp0 = 0.5 * (fi * df).trace() - 0.5 * (m0i * dm0).trace() - m0i_r.dot(dr) +
                            0.5 * m0i_r.dot(dm0 * m0i_r);
      const double dp0 = p0 * dlogp0;
      const double dt = (df * m0i_pxx).trace() - (f * m0i * dm0 * m0i_pxx).trace() + (f * m0i * dpxx).trace();
      const double dl1 = 0.5 * (pxxi * dpxx).trace() - 0.5 * (ci * tj.dc).trace();
      const double dl0 = 0.5 * (m0i * dm0).trace() - 0.5 * (h * (df + tj.dc)).trace();
      out.pathwise(j) += dp0 * t + p0 * dt +
                         lambda * (-dp0 * l1 + (1.0 - p0) * dl1 + dp0 * l0 + p0 * dl0);

      double dlogpi0 = dlogp0;
      double base_p0 = p0;
      if (mode == GradientMode::state_simulation) {
        const VectorXd fid = fi * dvec;
        dlogpi0 = fid.dot(dg) + 0.5 * fid.dot(df * fid);
        base_p0 = pi0;
      }
      out.score(j) += nk == 0 ? dlogpi0 : -base_p0 / (1.0 - base_p0) * dlogpi0;

      // belief tangents through the update
      if (nk == 0) {
        const MatrixXd px = b.cov.leftCols(nx);
        const MatrixXd gain = px * m0i;
        const MatrixXd dgain = tj.dp.leftCols(nx) * m0i - gain * dm0 * m0i;
        const MatrixXd dp_new = tj.dp - dgain * px.transpose() - gain * tj.dp.topRows(nx);
        if (need_mean) tj.dm += dgain * r + gain * dr;
        tj.dp = linalg::symmetrize(dp_new);
        const MatrixXd hc = h * c;
        tj.dc = linalg::symmetrize(tj.dc - tj.dc * hc - hc.transpose() * tj.dc +
                                   hc.transpose() * (df + tj.dc) * hc);
      } else {
        const int ny = n - nx;
        const MatrixXd kx = b.cov.block(nx, 0, ny, nx) * pxxi;
        const MatrixXd dk = tj.dp.block(nx, 0, ny, nx) * pxxi - kx * dpxx * pxxi;
        const MatrixXd dpyy = tj.dp.bottomRightCorner(ny, ny) - dk * b.cov.block(0, nx, nx, ny) -
                              kx * tj.dp.block(0, nx, nx, ny);
        if (need_mean) {
          const VectorXd dmy = tj.dm.tail(ny) + dk * (z - mx) - kx * dmx;
          tj.dm.head(nx).setZero();
          tj.dm.tail(ny) = dmy;
        }
        tj.dp.setZero();
        tj.dp.bottomRightCorner(ny, ny) = linalg::symmetrize(dpyy);
        tj.dc.setZero();
      }
    }
    const StepRule rule{StepRule::Mode::exponential, f, g};
    b = apply_decision(b, rule, nk, nk == 1 ? &z : nullptr);
    if (mean_tangents) {
      MatrixXd dmx(nx, np);
      for (int j = 0; j < np; ++j) dmx.col(j) = tan[static_cast<std::size_t>(j)].dm.head(nx);
      mean_tangents->push_back(std::move(dmx));
    }

    if (k < horizon) {
      const MatrixXd s = ax * b.x_given_y_cov * ax.transpose() + sys.q_cov;
      const int ny = n - nx;
      const MatrixXd w = linalg::spd_inverse(s.bottomRightCorner(ny, ny)) * s.bottomLeftCorner(ny, nx);
      for (auto& tj : tan) {
        tj.dp = sys.a_matrix * tj.dp * sys.a_matrix.transpose();
        if (need_mean) tj.dm = sys.a_matrix * tj.dm;
        const MatrixXd ds = ax * tj.dc * ax.transpose();
        const MatrixXd dsxy = ds.topRightCorner(nx, ny);
        tj.dc = linalg::symmetrize(ds.topLeftCorner(nx, nx) - dsxy * w - w.transpose() * dsxy.transpose() +
                                   w.transpose() * ds.bottomRightCorner(ny, ny) * w);
      }
      b = predict(b, sys);
    }
  }
  out.record.total = out.total;
  out.record.log_prob = out.log_prob;
  return out;
}

inline void check_gradient_inputs(const LinearGaussianSystem& sys, const SamplerSchedule& s,
                                  const ParamLayout& lay, int horizon) {
  sys.validate();
  s.validate();
  if (s.degenerate()) throw ContractError("objective_gradient_linear: schedule has no parameters");
  if (lay.n_x != sys.n_x || s.n_x != sys.n_x) throw ContractError("objective_gradient_linear: n_x mismatch");
  if (!lay.tied && lay.steps < horizon + 1) {
    throw ContractError("objective_gradient_linear: untied layout needs horizon + 1 blocks");
  }
  if (horizon < 0) throw ContractError("objective_gradient_linear: horizon must be >= 0");
}

inline std::string dump_params(const VectorXd& theta) {
  std::ostringstream os;
  os.precision(17);
  os << theta.transpose();
  return os.str();
}

}  // namespace detail

/// Score-function estimate of the gradient of E[sum_k l_k] with respect to
/// the packed schedule parameters:
///   E[sum_k grad l_k + (sum_k l_k - b) sum_k grad log P(N_k | history)],
/// with b the running mean of earlier rollout totals. Rollout r uses rng.split(r).
inline GradientEstimate objective_gradient_linear(const VectorXd& theta, const SamplerSchedule& shape,
                                                  const ParamLayout& lay, const LinearGaussianSystem& sys,
                                                  double lambda, int rollouts, int horizon, const Rng& rng,
                                                  const GradientOptions& opt = {}) {
  if (rollouts < 1) throw ContractError("objective_gradient_linear: rollouts must be >= 1");
  if (shape.degenerate()) throw ContractError("objective_gradient_linear: schedule has no parameters");
  const SamplerSchedule sched = unpack_params(theta, shape, lay);
  detail::check_gradient_inputs(sys, sched, lay, horizon);
  const GradientMode mode = detail::resolve_mode(opt.mode, sched);
  const NoiseFactors nf = noise_factors(sys);

  std::vector<detail::RolloutGrad> rs(static_cast<std::size_t>(rollouts));
  parallel_for(rs.size(), [&](std::size_t r) {
    rs[r] = detail::gradient_rollout(sys, nf, sched, lay, lambda, horizon, mode, rng.split(r), nullptr);
  });

  const int np = lay.size();
  GradientEstimate est;
  est.mode = mode;
  std::vector<VectorXd> contrib(rs.size());
  CompensatedSum total_sum;
  double run_sum = opt.baseline_init.value_or(0.0);
  double run_n = opt.baseline_init ? 1.0 : 0.0;
  long samples = 0;
  for (std::size_t r = 0; r < rs.size(); ++r) {
    const double base = run_n > 0 ? run_sum / run_n : 0.0;
    contrib[r] = rs[r].pathwise + (rs[r].total - base) * rs[r].score;
    rs[r].record.baseline = base;
    run_sum += rs[r].total;
    run_n += 1.0;
    total_sum.add(rs[r].total);
    samples += rs[r].samples;
  }
  est.gradient = VectorXd::Zero(np);
  for (int j = 0; j < np; ++j) {
    CompensatedSum s;
    for (const auto& c : contrib) s.add(c(j));
    est.gradient(j) = s.value() / rollouts;
  }
  est.std_error = VectorXd::Zero(np);
  for (int j = 0; j < np; ++j) {
    est.std_error(j) = standard_error(contrib, est.gradient(j), [j](const VectorXd& v) { return v(j); });
  }
  est.objective = total_sum.value() / rollouts;
  est.objective_stderr = standard_error(rs, est.objective, [](const detail::RolloutGrad& g) { return g.total; });
  est.sampling_rate = static_cast<double>(samples) / (static_cast<double>(rollouts) * (horizon + 1));
  if (!est.gradient.allFinite()) {
    throw NumericalError("objective_gradient_linear: non-finite gradient at theta = " + detail::dump_params(theta));
  }
  if (opt.keep_records) {
    est.records.reserve(rs.size());
    for (auto& r : rs) est.records.push_back(std::move(r.record));
  }
  return est;
}

/// Total and log-probability of a recorded rollout evaluated at other parameters.
struct ReplayResult {
  double total = 0.0;
  double log_prob = 0.0;
};

inline ReplayResult replay_rollout(const VectorXd& theta, const SamplerSchedule& shape, const ParamLayout& lay,
                                   const LinearGaussianSystem& sys, double lambda, int horizon,
                                   GradientMode mode, const RolloutRecord& rec) {
  const SamplerSchedule sched = unpack_params(theta, shape, lay);
  const auto g = detail::gradient_rollout(sys, noise_factors(sys), sched, lay, lambda, horizon,
                                          detail::resolve_mode(mode, sched), Rng(0), &rec);
  return {g.total, g.log_prob};
}

/// Importance-weighted common-random-numbers objective over recorded rollouts:
///   mean_i [w_i(theta) (total_i(theta) - b_i)] + mean_i b_i,
/// w_i the likelihood ratio of the recorded decisions. Its gradient at the
/// recording parameters equals the estimator output exactly, which makes it
/// the reference for finite-difference checks.
inline double importance_weighted_objective(const VectorXd& theta, const SamplerSchedule& shape,
                                            const ParamLayout& lay, const LinearGaussianSystem& sys,
                                            double lambda, int horizon, const GradientEstimate& est) {
  if (est.records.empty()) throw ContractError("importance_weighted_objective: estimate has no records");
  CompensatedSum acc, base;
  for (const auto& rec : est.records) {
    const ReplayResult rr = replay_rollout(theta, shape, lay, sys, lambda, horizon, est.mode, rec);
    acc.add(std::exp(rr.log_prob - rec.log_prob) * (rr.total - rec.baseline));
    base.add(rec.baseline);
  }
  const double n = static_cast<double>(est.records.size());
  return acc.value() / n + base.value() / n;
}

/// One trajectory's contribution to the general bilevel gradient.
struct PolicySample {
  double weight = 1.0;
  double total_loss = 0.0;   // leader loss of the trajectory
  VectorXd score;            // sum_k grad_theta log pi_theta(N_k | ...)
  VectorXd follower_grad;    // sum_k grad_phi l_D
  MatrixXd follower_hess;    // sum_k hess_phi l_D
  VectorXd pathwise;         // direct theta dependence of the loss (optional)
};

struct PolicyGradientResult {
  VectorXd gradient;
  VectorXd score_term;
  VectorXd implicit_term;
  MatrixXd jacobian;         // d phi* / d theta
  VectorXd follower_grad;    // E[sum grad_phi l_D], ~0 at the best response
  bool regularized = false;
};

/// Follower gradient E[sum_k grad_phi l_D] over a weighted batch.
inline VectorXd follower_gradient(const std::vector<PolicySample>& batch) {
  if (batch.empty()) throw ContractError("follower_gradient: empty batch");
  VectorXd g = VectorXd::Zero(batch.front().follower_grad.size());
  double wsum = 0.0;
  for (const auto& s : batch) {
    g += s.weight * s.follower_grad;
    wsum += s.weight;
  }
  return g / wsum;
}

/// Leader gradient at a follower best response:
///   J = -H^{-1} E[(sum grad_phi l_D)(sum grad_theta log pi)^T],
///   grad = E[pathwise + (L - baseline) score] + J^T E[sum grad_phi l_D].
/// A singular H is regularized with 1e-6 I and a warning.
inline PolicyGradientResult general_policy_gradient(const std::vector<PolicySample>& batch,
                                                    double baseline = 0.0) {
  if (batch.empty()) throw ContractError("general_policy_gradient: empty batch");
  const Eigen::Index nt = batch.front().score.size();
  const Eigen::Index nf = batch.front().follower_grad.size();
  double wsum = 0.0;
  VectorXd score_term = VectorXd::Zero(nt);
  MatrixXd cross = MatrixXd::Zero(nf, nt);
  MatrixXd hess = MatrixXd::Zero(nf, nf);
  VectorXd fg = VectorXd::Zero(nf);
  for (const auto& s : batch) {
    if (s.score.size() != nt || s.follower_grad.size() != nf || s.follower_hess.rows() != nf) {
      throw ContractError("general_policy_gradient: inconsistent sample sizes");
    }
    wsum += s.weight;
    score_term += s.weight * (s.total_loss - baseline) * s.score;
    if (s.pathwise.size() == nt) score_term += s.weight * s.pathwise;
    cross += s.weight * s.follower_grad * s.score.transpose();
    hess += s.weight * s.follower_hess;
    fg += s.weight * s.follower_grad;
  }
  score_term /= wsum;
  cross /= wsum;
  hess = linalg::symmetrize(hess / wsum);
  fg /= wsum;

  PolicyGradientResult out;
  Eigen::LDLT<MatrixXd> ldlt(hess);
  const double scale = std::max(1.0, hess.cwiseAbs().maxCoeff());
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().cwiseAbs().minCoeff() < 1e-12 * scale) {
    diag::warn("general_policy_gradient: singular follower Hessian, adding 1e-6 I");
    ldlt.compute(hess + 1e-6 * MatrixXd::Identity(nf, nf));
    out.regularized = true;
  }
  out.jacobian = -ldlt.solve(cross);
  out.score_term = score_term;
  out.follower_grad = fg;
  out.implicit_term = out.jacobian.transpose() * fg;
  out.gradient = out.score_term + out.implicit_term;
  return out;
}

/// Affine reconstruction x̂_k = W x̃_{k|k} + b on top of the belief mean.
/// Parameters are vec(W) (column-major) followed by b; the analytic
/// conditional mean is W = I, b = 0.
struct AffineFollower {
  MatrixXd w;
  VectorXd b;

  static AffineFollower identity(int n_x) { return {MatrixXd::Identity(n_x, n_x), VectorXd::Zero(n_x)}; }
  int size() const { return static_cast<int>(w.size() + b.size()); }
  VectorXd params() const {
    VectorXd p(size());
    p << Eigen::Map<const VectorXd>(w.data(), w.size()), b;
    return p;
  }
  void set_params(const VectorXd& p) {
    w = Eigen::Map<const MatrixXd>(p.data(), w.rows(), w.cols());
    b = p.tail(b.size());
  }
  VectorXd apply(const VectorXd& m) const { return w * m + b; }

  /// grad and Hessian of |x - W m - b|^2 in the parameter ordering above.
  void derivatives(const VectorXd& x, const VectorXd& m, VectorXd& grad, MatrixXd& hess) const {
    const Eigen::Index n = w.rows();
    const VectorXd e = x - apply(m);
    VectorXd feat(m.size() + 1);
    feat << m, 1.0;
    grad.resize(size());
    hess.setZero(size(), size());
    // d/dW_{ij} = -2 e_i m_j, column-major index i + j n; d/db_i = -2 e_i
    for (Eigen::Index j = 0; j < feat.size(); ++j) {
      for (Eigen::Index i = 0; i < n; ++i) grad(i + j * n) = -2.0 * e(i) * feat(j);
    }
    for (Eigen::Index a = 0; a < feat.size(); ++a) {
      for (Eigen::Index c = 0; c < feat.size(); ++c) {
        for (Eigen::Index i = 0; i < n; ++i) hess(i + a * n, i + c * n) = 2.0 * feat(a) * feat(c);
      }
    }
  }
};

/// Rollouts of a schedule with an affine follower, packaged for
/// general_policy_gradient. The leader loss is the realized squared error of
/// the follower plus lambda times the expected information term; the latter
/// depends on theta directly and contributes through `pathwise`.
inline std::vector<PolicySample> follower_batch(const VectorXd& theta, const SamplerSchedule& shape,
                                                const ParamLayout& lay, const LinearGaussianSystem& sys,
                                                double lambda, const AffineFollower& follower, int rollouts,
                                                int horizon, const Rng& rng) {
  const SamplerSchedule sched = unpack_params(theta, shape, lay);
  detail::check_gradient_inputs(sys, sched, lay, horizon);
  const NoiseFactors nf = noise_factors(sys);
  std::vector<PolicySample> batch(static_cast<std::size_t>(rollouts));
  parallel_for(batch.size(), [&](std::size_t r) {
    // Information-only pass supplies the score and the pathwise info gradient.
    Rng stream = rng.split(r);
    const auto info = detail::gradient_rollout(sys, nf, sched, lay, lambda, horizon,
                                               GradientMode::state_simulation, stream, nullptr);
    std::vector<MatrixXd> dm;
    const auto dist = detail::gradient_rollout(sys, nf, sched, lay, 0.0, horizon,
                                               GradientMode::state_simulation, stream, &info.record, &dm);
    PolicySample s;
    s.weight = 1.0;
    s.score = info.score;
    s.pathwise = info.pathwise - dist.pathwise;
    s.follower_grad = VectorXd::Zero(follower.size());
    s.follower_hess = MatrixXd::Zero(follower.size(), follower.size());

    GaussianBelief b = init_belief(sys, 1);
    double loss = info.total - dist.total;
    for (int k = 0; k <= horizon; ++k) {
      if (k > 0) b = predict(b, sys);
      const StepRule rule = rule_at(sched, k, b);
      const int nk = info.record.n[static_cast<std::size_t>(k)];
      const VectorXd& x = info.record.x[static_cast<std::size_t>(k)];
      b = apply_decision(b, rule, nk, nk == 1 ? &x : nullptr);
      VectorXd g;
      MatrixXd h;
      follower.derivatives(x, b.x_mean(), g, h);
      s.follower_grad += g;
      s.follower_hess += h;
      const VectorXd e = x - follower.apply(b.x_mean());
      loss += e.squaredNorm();
      s.pathwise -= 2.0 * dm[static_cast<std::size_t>(k)].transpose() * (follower.w.transpose() * e);
    }
    s.total_loss = loss;
    batch[r] = std::move(s);
  });
  return batch;
}

struct OptimizerConfig {
  double alpha = 0.02;             // leader step size
  double beta = 0.05;              // follower step size
  int rollouts_per_step = 256;
  int max_iters = 200;
  double tol = 1e-3;               // relative change of the validation objective
  std::uint64_t seed = 1;
  int horizon = 100;
  int validation_every = 5;
  int validation_rollouts = 2000;
  int patience = 10;               // consecutive validations below tol
  double clip_norm = 50.0;         // leader gradient norm cap (<= 0 disables)
  int follower_max_iters = 200;
  double follower_tol = 1e-3;
  bool tied = true;
  GradientMode mode = GradientMode::automatic;

  void validate() const {
    using linalg::require;
    require(alpha > 0 && beta > 0, "optimizer: step sizes must be positive");
    require(rollouts_per_step >= 1 && max_iters >= 1 && validation_rollouts >= 1,
            "optimizer: counts must be >= 1");
    require(validation_every >= 1 && patience >= 1, "optimizer: validation cadence must be >= 1");
    require(tol > 0, "optimizer: tol must be positive");
    require(horizon >= 0, "optimizer: horizon must be >= 0");
  }
};

struct TraceRow {
  int iter = 0;
  double objective = 0.0;
  double stderr_ = 0.0;
  double sampling_rate = 0.0;
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;
  bool validation = false;
};

struct OptimizeResult {
  SamplerSchedule schedule;
  VectorXd theta;
  double best_objective = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  std::vector<TraceRow> trace;
  std::optional<AffineFollower> follower;
};

/// Leader/follower loop: a leader step on theta, then follower steps on phi
/// until its gradient norm drops below follower_tol (skipped for the analytic
/// follower). Keeps the best schedule seen on a fixed validation batch.
inline OptimizeResult stackelberg_optimize(const OptimizerConfig& cfg, const LinearGaussianSystem& sys,
                                           double lambda, const SamplerSchedule& init,
                                           std::optional<AffineFollower> follower = std::nullopt) {
  cfg.validate();
  if (init.degenerate()) throw ContractError("stackelberg_optimize: initial schedule must be parameterized");
  const ParamLayout lay{sys.n_x, cfg.tied ? 1 : cfg.horizon + 1, cfg.tied};
  const SamplerSchedule shape = cfg.tied ? init : expand(init, cfg.horizon);
  VectorXd theta = pack_params(shape, lay);
  const Rng root(cfg.seed);
  const Rng validation_rng = root.split(0xfeedULL);

  OptimizeResult res;
  res.theta = theta;
  res.schedule = unpack_params(theta, shape, lay);
  res.follower = follower;
  auto validate_at = [&](const VectorXd& th) {
    return trajectory_objective(sys, unpack_params(th, shape, lay), lambda, cfg.validation_rollouts,
                                cfg.horizon, validation_rng);
  };
  {
    const auto v = validate_at(theta);
    res.best_objective = v.mean;
    res.trace.push_back({0, v.mean, v.std_error, v.sampling_rate, 0.0, 0.0, true});
  }

  double last_val = res.best_objective;
  int quiet = 0;
  std::optional<double> baseline;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const Rng batch_rng = root.split(static_cast<std::uint64_t>(it));
    VectorXd grad;
    double obj = 0.0, se = 0.0, rate = 0.0, phi_norm = 0.0;
    if (!follower) {
      GradientOptions opt;
      opt.mode = cfg.mode;
      opt.baseline_init = baseline;
      const auto est = objective_gradient_linear(theta, shape, lay, sys, lambda, cfg.rollouts_per_step,
                                                 cfg.horizon, batch_rng, opt);
      grad = est.gradient;
      obj = est.objective;
      se = est.objective_stderr;
      rate = est.sampling_rate;
      baseline = obj;
    } else {
      const auto batch = follower_batch(theta, shape, lay, sys, lambda, *follower, cfg.rollouts_per_step,
                                        cfg.horizon, batch_rng);
      double mean_loss = 0.0;
      for (const auto& s : batch) mean_loss += s.total_loss / batch.size();
      const auto pg = general_policy_gradient(batch, baseline.value_or(mean_loss));
      grad = pg.gradient;
      obj = mean_loss;
      baseline = mean_loss;
      // follower best response on the same batch (its loss is quadratic in phi)
      VectorXd phi = follower->params();
      for (int inner = 0; inner < cfg.follower_max_iters; ++inner) {
        const auto fb = follower_batch(theta, shape, lay, sys, lambda, *follower,
                                       std::max(1, cfg.rollouts_per_step / 4), cfg.horizon,
                                       root.split(1'000'000ULL + static_cast<std::uint64_t>(it)));
        const VectorXd fg = follower_gradient(fb) / (cfg.horizon + 1);
        phi_norm = fg.norm();
        if (phi_norm < cfg.follower_tol) break;
        phi -= cfg.beta * fg;
        follower->set_params(phi);
      }
    }
    const double gnorm = grad.norm();
    if (cfg.clip_norm > 0 && gnorm > cfg.clip_norm) grad *= cfg.clip_norm / gnorm;
    const double step = cfg.alpha / (1.0 + it / 100.0);
    theta -= step * grad;
    res.trace.push_back({it, obj, se, rate, gnorm, phi_norm, false});
    res.iterations = it;

    if (it % cfg.validation_every == 0 || it == cfg.max_iters) {
      const auto v = validate_at(theta);
      res.trace.push_back({it, v.mean, v.std_error, v.sampling_rate, gnorm, phi_norm, true});
      if (v.mean < res.best_objective) {
        res.best_objective = v.mean;
        res.theta = theta;
        res.schedule = unpack_params(theta, shape, lay);
        res.follower = follower;
      }
      const double rel = std::abs(v.mean - last_val) / std::max(std::abs(last_val), 1e-12);
      last_val = v.mean;
      quiet = rel < cfg.tol ? quiet + 1 : 0;
      if (quiet >= cfg.patience) {
        res.converged = true;
        break;
      }
    }
  }
  return res;
}

}  // namespace privsample
