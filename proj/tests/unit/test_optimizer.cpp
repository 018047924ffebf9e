#include <cmath>

#include <gtest/gtest.h>

#include "oracles/enumeration.hpp"
#include "oracles/gauss_hermite.hpp"
#include "privsample/optimizer.hpp"

using namespace privsample;

namespace {

struct Case {
  bool feedback;
  bool tied;
};

VectorXd central_difference(const std::function<double(const VectorXd&)>& fn, const VectorXd& theta,
                            double h) {
  VectorXd g(theta.size());
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    VectorXd tp = theta, tm = theta;
    tp(j) += h;
    tm(j) -= h;
    g(j) = (fn(tp) - fn(tm)) / (2.0 * h);
  }
  return g;
}

// x ~ N(theta, I_2), follower loss 1/2 phi^T H phi - phi^T B x, leader adds
// 1/2 x^T S x + r^T x. Best response phi* = H^{-1} B theta.
struct ToyGame {
  MatrixXd h = (MatrixXd(2, 2) << 2.0, 0.3, 0.3, 1.0).finished();
  MatrixXd bm = (MatrixXd(2, 2) << 1.0, -0.5, 0.4, 2.0).finished();
  MatrixXd s = (MatrixXd(2, 2) << 1.5, 0.2, 0.2, 0.7).finished();
  VectorXd r = (VectorXd(2) << 0.3, -0.8).finished();

  VectorXd best_response(const VectorXd& theta) const { return h.ldlt().solve(bm * theta); }

  double leader(const VectorXd& theta) const {
    const VectorXd phi = best_response(theta);
    // E over x of the follower loss plus the leader's own cost
    return 0.5 * phi.dot(h * phi) - phi.dot(bm * theta) + 0.5 * (theta.dot(s * theta) + s.trace()) +
           r.dot(theta);
  }

  std::vector<PolicySample> batch(const VectorXd& theta, const VectorXd& phi, int nodes) const {
    const auto q = oracle::gauss_hermite(nodes);
    std::vector<PolicySample> out;
    for (std::size_t i = 0; i < q.x.size(); ++i) {
      for (std::size_t j = 0; j < q.x.size(); ++j) {
        const VectorXd x = theta + (VectorXd(2) << q.x[i], q.x[j]).finished();
        PolicySample p;
        p.weight = q.w[i] * q.w[j];
        p.total_loss = 0.5 * phi.dot(h * phi) - phi.dot(bm * x) + 0.5 * x.dot(s * x) + r.dot(x);
        p.score = x - theta;
        p.follower_grad = h * phi - bm * x;
        p.follower_hess = h;
        out.push_back(std::move(p));
      }
    }
    return out;
  }
};

}  // namespace

TEST(Optimizer, GradientMatchesReplayFiniteDifferences) {
  const auto sys = reference_system();
  const int horizon = 3;
  const double lambda = 1.5;
  for (const Case c : {Case{true, true}, Case{false, true}, Case{true, false}, Case{false, false}}) {
    const auto shape = expand(constant_schedule(MatrixXd::Identity(1, 1) * 1.7, VectorXd::Constant(1, 0.4),
                                                c.feedback),
                              horizon);
    const ParamLayout lay{1, c.tied ? 1 : horizon + 1, c.tied};
    VectorXd theta = pack_params(shape, lay);
    for (Eigen::Index j = 0; j < theta.size(); ++j) theta(j) += 0.05 * static_cast<double>(j % 3);
    GradientOptions opt;
    opt.keep_records = true;
    const auto est = objective_gradient_linear(theta, shape, lay, sys, lambda, 400, horizon, Rng(21), opt);
    auto fn = [&](const VectorXd& t) {
      return importance_weighted_objective(t, shape, lay, sys, lambda, horizon, est);
    };
    EXPECT_NEAR(fn(theta), est.objective, 1e-10 * std::abs(est.objective));
    const VectorXd fd = central_difference(fn, theta, 1e-5);
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      EXPECT_NEAR(est.gradient(j), fd(j), 1e-3 * std::max(std::abs(fd(j)), 1e-3))
          << "feedback=" << c.feedback << " tied=" << c.tied << " j=" << j;
    }
  }
}

TEST(Optimizer, TwoDimensionalGradientMatchesReplay) {
  LinearGaussianSystem sys;
  sys.n_x = 2;
  sys.n_y = 1;
  sys.a_matrix = (MatrixXd(3, 3) << 0.9, 0.1, -0.4, 0.0, 0.8, 0.2, 0.1, 0.0, 0.5).finished();
  sys.q_cov = (MatrixXd(3, 3) << 1.0, 0.2, 0.1, 0.2, 1.5, 0.3, 0.1, 0.3, 2.0).finished();
  sys.init_cov = MatrixXd::Identity(3, 3) * 0.7;
  sys.init_mean = VectorXd::Zero(3);
  const int horizon = 3;
  for (bool feedback : {true, false}) {
    const MatrixXd l = (MatrixXd(2, 2) << 1.2, 0.0, 0.3, 0.9).finished();
    const auto shape = constant_schedule(l * l.transpose(), (VectorXd(2) << 0.2, -0.1).finished(), feedback);
    const ParamLayout lay{2, 1, true};
    const VectorXd theta = pack_params(shape, lay);
    GradientOptions opt;
    opt.keep_records = true;
    const auto est = objective_gradient_linear(theta, shape, lay, sys, 0.7, 300, horizon, Rng(22), opt);
    auto fn = [&](const VectorXd& t) { return importance_weighted_objective(t, shape, lay, sys, 0.7, horizon, est); };
    const VectorXd fd = central_difference(fn, theta, 1e-5);
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      EXPECT_NEAR(est.gradient(j), fd(j), 1e-3 * std::max(std::abs(fd(j)), 1e-3)) << "feedback=" << feedback;
    }
  }
}

TEST(Optimizer, GradientMatchesEnumeration) {
  const auto sys = reference_system();
  const int horizon = 5;
  const double lambda = 2.0;
  const auto shape = constant_schedule(MatrixXd::Identity(1, 1) * 2.0, VectorXd::Constant(1, 0.6), true);
  const ParamLayout lay{1, 1, true};
  const VectorXd theta = pack_params(shape, lay);
  auto exact = [&](const VectorXd& t) {
    return oracle::enumerate_objective(sys, unpack_params(t, shape, lay), lambda, horizon).objective;
  };
  const VectorXd want = central_difference(exact, theta, 1e-5);
  const auto est = objective_gradient_linear(theta, shape, lay, sys, lambda, 100000, horizon, Rng(23));
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    EXPECT_NEAR(est.gradient(j), want(j), 4.0 * est.std_error(j)) << "j=" << j;
    EXPECT_LT(est.std_error(j), 0.05 * std::abs(want(j)) + 0.05);
  }
}

TEST(Optimizer, CenteredFeedbackHasZeroOffsetGradient) {
  const auto sys = reference_system();
  const auto shape = constant_schedule(MatrixXd::Identity(1, 1) * 1e4, VectorXd::Zero(1), true);
  const ParamLayout lay{1, 1, true};
  for (double lambda : {0.0, 3.0}) {
    const auto est = objective_gradient_linear(pack_params(shape, lay), shape, lay, sys, lambda, 500, 20, Rng(24));
    EXPECT_NEAR(est.gradient(1), 0.0, 1e-9);
  }
}

TEST(Optimizer, GradientIsDeterministicAcrossThreadCounts) {
  const auto sys = reference_system();
  const auto shape = constant_schedule(MatrixXd::Identity(1, 1) * 2.0, VectorXd::Constant(1, 0.1), false);
  const ParamLayout lay{1, 1, true};
  const VectorXd theta = pack_params(shape, lay);
  const auto a = objective_gradient_linear(theta, shape, lay, sys, 1.0, 64, 15, Rng(25));
  setenv("PRIVSAMPLE_THREADS", "1", 1);
  const auto b = objective_gradient_linear(theta, shape, lay, sys, 1.0, 64, 15, Rng(25));
  unsetenv("PRIVSAMPLE_THREADS");
  EXPECT_EQ(a.gradient, b.gradient);
  EXPECT_EQ(a.objective, b.objective);
}

TEST(Optimizer, RejectsDegenerateAndMismatchedInputs) {
  const auto sys = reference_system();
  const auto s = always_sample_schedule(1);
  const ParamLayout lay{1, 1, true};
  EXPECT_THROW(objective_gradient_linear(VectorXd::Zero(2), s, lay, sys, 1.0, 10, 3, Rng(1)), ContractError);
  const auto fixed = constant_schedule(MatrixXd::Identity(1, 1), VectorXd::Zero(1), false);
  GradientOptions opt;
  opt.mode = GradientMode::belief_mdp;
  EXPECT_THROW(objective_gradient_linear(pack_params(fixed, lay), fixed, lay, sys, 1.0, 10, 3, Rng(1), opt),
               ContractError);
  const ParamLayout short_lay{1, 2, false};
  EXPECT_THROW(objective_gradient_linear(VectorXd::Zero(4), fixed, short_lay, sys, 1.0, 10, 3, Rng(1)),
               ContractError);
}

TEST(Optimizer, ToyGameJacobianIsExact) {
  const ToyGame game;
  const VectorXd theta = (VectorXd(2) << 0.7, -1.1).finished();
  const VectorXd phi = game.best_response(theta);
  const auto res = general_policy_gradient(game.batch(theta, phi, 12));
  const MatrixXd want = game.h.ldlt().solve(game.bm);
  EXPECT_LT((res.jacobian - want).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT(res.follower_grad.norm(), 1e-9);
  EXPECT_FALSE(res.regularized);
}

TEST(Optimizer, ToyGameGradientMatchesFiniteDifferences) {
  const ToyGame game;
  const VectorXd theta = (VectorXd(2) << -0.4, 0.9).finished();
  const auto res = general_policy_gradient(game.batch(theta, game.best_response(theta), 12));
  const VectorXd fd = central_difference([&](const VectorXd& t) { return game.leader(t); }, theta, 1e-5);
  for (int j = 0; j < 2; ++j) EXPECT_NEAR(res.gradient(j), fd(j), 1e-3 * std::max(1.0, std::abs(fd(j))));

  // Off the best response the implicit term carries the follower's gradient.
  const VectorXd phi = game.best_response(theta) + VectorXd::Constant(2, 0.1);
  const auto off = general_policy_gradient(game.batch(theta, phi, 12));
  EXPECT_GT(off.implicit_term.norm(), 1e-3);
  EXPECT_LT((off.jacobian - res.jacobian).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Optimizer, SingularFollowerHessianIsRegularized) {
  const ToyGame game;
  const VectorXd theta = VectorXd::Zero(2);
  auto batch = game.batch(theta, VectorXd::Zero(2), 6);
  for (auto& p : batch) p.follower_hess = MatrixXd::Zero(2, 2);
  const auto before = diag::warning_count.load();
  const auto res = general_policy_gradient(batch);
  EXPECT_TRUE(res.regularized);
  EXPECT_GT(diag::warning_count.load(), before);
  EXPECT_TRUE(res.gradient.allFinite());
}

TEST(Optimizer, AffineFollowerDerivativesMatchFiniteDifferences) {
  AffineFollower fol{(MatrixXd(2, 2) << 1.1, 0.2, -0.3, 0.8).finished(), (VectorXd(2) << 0.1, -0.2).finished()};
  const VectorXd x = (VectorXd(2) << 0.5, -1.0).finished();
  const VectorXd m = (VectorXd(2) << 0.3, 0.4).finished();
  VectorXd g;
  MatrixXd h;
  fol.derivatives(x, m, g, h);
  auto loss = [&](const VectorXd& p) {
    AffineFollower f = fol;
    f.set_params(p);
    return (x - f.apply(m)).squaredNorm();
  };
  const VectorXd p0 = fol.params();
  EXPECT_LT((central_difference(loss, p0, 1e-6) - g).cwiseAbs().maxCoeff(), 1e-6);
  for (Eigen::Index j = 0; j < p0.size(); ++j) {
    auto gj = [&](const VectorXd& p) {
      AffineFollower f = fol;
      f.set_params(p);
      VectorXd gg;
      MatrixXd hh;
      f.derivatives(x, m, gg, hh);
      return gg(j);
    };
    EXPECT_LT((central_difference(gj, p0, 1e-6) - h.row(j).transpose()).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Optimizer, ConditionalMeanFollowerIsBestResponse) {
  const auto sys = reference_system();
  const auto shape = constant_schedule(MatrixXd::Identity(1, 1) * 2.0, VectorXd::Constant(1, 0.3), true);
  const ParamLayout lay{1, 1, true};
  const VectorXd theta = pack_params(shape, lay);
  const int horizon = 10;
  const auto batch = follower_batch(theta, shape, lay, sys, 1.0, AffineFollower::identity(1), 20000, horizon, Rng(26));
  std::vector<VectorXd> fg;
  for (const auto& s : batch) fg.push_back(s.follower_grad);
  const VectorXd mean = follower_gradient(batch);
  for (Eigen::Index j = 0; j < mean.size(); ++j) {
    const double se = standard_error(fg, mean(j), [j](const VectorXd& v) { return v(j); });
    EXPECT_NEAR(mean(j), 0.0, 4.0 * se);
  }

  // With the analytic follower the leader gradient agrees with the linear estimator.
  double base = 0.0;
  for (const auto& s : batch) base += s.total_loss / batch.size();
  const auto pg = general_policy_gradient(batch, base);
  std::vector<VectorXd> contrib;
  for (const auto& s : batch) contrib.push_back(s.pathwise + (s.total_loss - base) * s.score);
  GradientOptions opt;
  opt.mode = GradientMode::state_simulation;
  const auto lin = objective_gradient_linear(theta, shape, lay, sys, 1.0, 20000, horizon, Rng(27), opt);
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    const double se = standard_error(contrib, pg.score_term(j), [j](const VectorXd& v) { return v(j); });
    EXPECT_NEAR(pg.score_term(j), lin.gradient(j), 4.0 * std::hypot(se, lin.std_error(j)));
  }
}

TEST(Optimizer, StackelbergImprovesPoorSchedule) {
  const auto sys = reference_system();
  OptimizerConfig cfg;
  cfg.horizon = 20;
  cfg.max_iters = 60;
  cfg.rollouts_per_step = 128;
  cfg.validation_rollouts = 1000;
  cfg.alpha = 0.05;
  cfg.seed = 3;
  const auto init = constant_schedule(MatrixXd::Identity(1, 1) * 3.0, VectorXd::Constant(1, 1.5), true);
  const auto res = stackelberg_optimize(cfg, sys, 2.0, init);
  ASSERT_FALSE(res.trace.empty());
  const double start = res.trace.front().objective;
  EXPECT_LT(res.best_objective, 0.8 * start);
  const auto other = stackelberg_optimize(cfg, sys, 2.0,
                                          constant_schedule(MatrixXd::Identity(1, 1) * 0.5, VectorXd::Zero(1), true));
  EXPECT_NEAR(res.best_objective, other.best_objective, 0.01 * other.best_objective);
  const auto again = stackelberg_optimize(cfg, sys, 2.0, init);
  EXPECT_EQ(res.theta, again.theta);
  EXPECT_EQ(res.best_objective, again.best_objective);
}

TEST(Optimizer, StackelbergWithAffineFollowerRuns) {
  const auto sys = reference_system();
  OptimizerConfig cfg;
  cfg.horizon = 8;
  cfg.max_iters = 6;
  cfg.rollouts_per_step = 64;
  cfg.validation_rollouts = 200;
  cfg.validation_every = 3;
  cfg.follower_max_iters = 5;
  const auto init = constant_schedule(MatrixXd::Identity(1, 1) * 1.0, VectorXd::Zero(1), true);
  AffineFollower start = AffineFollower::identity(1);
  start.b(0) = 0.5;
  const auto res = stackelberg_optimize(cfg, sys, 1.0, init, start);
  ASSERT_TRUE(res.follower.has_value());
  EXPECT_TRUE(res.theta.allFinite());
  EXPECT_LT(std::abs(res.follower->b(0)), 0.5);
}
