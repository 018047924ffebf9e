#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "oracles/enumeration.hpp"
#include "oracles/gauss_hermite.hpp"
#include "oracles/gaussian_oracles.hpp"
#include "privsample/finite.hpp"
#include "privsample/loss.hpp"

using namespace privsample;

namespace {

MatrixXd random_spd(int n, Rng& rng, double ridge = 0.1) {
  MatrixXd g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
  return g * g.transpose() / n + ridge * MatrixXd::Identity(n, n);
}

GaussianBelief scalar_belief(double mx, double my, double pxx, double pxy, double pyy) {
  return make_belief(1, 1, 0, Phase::predicted, (VectorXd(2) << mx, my).finished(),
                     (MatrixXd(2, 2) << pxx, pxy, pxy, pyy).finished());
}

// Predicted belief reached through a few random updates of the reference system.
GaussianBelief random_reachable_belief(int steps, Rng& rng, int window = 0) {
  const auto sys = reference_system();
  GaussianBelief b = init_belief(sys, window);
  for (int k = 0; k < steps; ++k) {
    if (rng.uniform() < 0.3) {
      b = update_sample(b, rng.normal_vector(1));
    } else {
      b = update_no_sample(b, MatrixXd::Constant(1, 1, 0.1 + 2 * rng.uniform()), rng.normal_vector(1));
    }
    b = predict(b, sys);
  }
  return b;
}

}  // namespace

TEST(Loss, MarginalProbabilityClosedForm) {
  const GaussianBelief b = scalar_belief(0.0, 0.0, 1.0, 0.2, 1.0);
  EXPECT_NEAR(no_sample_prob_marginal(b, MatrixXd::Identity(1, 1), VectorXd::Zero(1)),
              std::sqrt(0.5), 1e-15);
  EXPECT_NEAR(no_sample_prob_marginal(b, MatrixXd::Identity(1, 1) * 1e12, VectorXd::Zero(1)), 1.0, 1e-11);
}

TEST(Loss, MarginalProbabilityMatchesMonteCarlo) {
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const int nx = 1 + trial % 2;
    const int d = nx + 1;
    const GaussianBelief b = make_belief(nx, 1, 0, Phase::predicted, rng.normal_vector(d), random_spd(d, rng));
    const MatrixXd f = random_spd(nx, rng);
    const VectorXd g = rng.normal_vector(nx);
    const double p = no_sample_prob_marginal(b, f, g);
    const MatrixXd l = linalg::psd_factor(b.p_xx());
    const int n = 100000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const double v = no_sample_prob_pointwise(b.x_mean() + l * rng.normal_vector(nx), f, g);
      s += v;
      s2 += v * v;
    }
    const double m = s / n;
    EXPECT_NEAR(m, p, 3.0 * std::sqrt((s2 / n - m * m) / n));
  }
}

TEST(Loss, ZeroLambdaLeavesDistortionOnly) {
  const GaussianBelief b = scalar_belief(0.2, 0.1, 1.4, 0.5, 0.9);
  const LossBreakdown l = one_step_loss(b, MatrixXd::Identity(1, 1) * 0.7, VectorXd::Constant(1, 0.4), 0.0);
  EXPECT_DOUBLE_EQ(l.total, l.distortion);
  EXPECT_GT(l.info_nats, 0.0);
}

TEST(Loss, TinyFCollapsesToSampleBranch) {
  const GaussianBelief b = scalar_belief(0.2, 0.1, 1.4, 0.5, 0.9);
  const double lambda = 2.0;
  const LossBreakdown l = one_step_loss(b, MatrixXd::Identity(1, 1) * 1e-12, VectorXd::Constant(1, 0.4), lambda);
  EXPECT_LT(l.p_no_sample, 1e-5);
  EXPECT_LT(l.distortion, 1e-5);
  const double s = 0.9 - 0.5 * 0.5 / 1.4;
  const double expect = lambda * 0.5 * std::log(0.9 / s);
  EXPECT_NEAR(l.total, expect, 1e-5);
  EXPECT_GE(l.total, 0.0);
  const LossBreakdown a = one_step_loss(b, StepRule{StepRule::Mode::always, {}, {}}, lambda);
  EXPECT_NEAR(a.total, expect, 1e-12);
}

TEST(Loss, MatchesQuadratureOnScalarFixtures) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const double pxx = 0.3 + 2.0 * rng.uniform();
    const double pyy = 0.3 + 2.0 * rng.uniform();
    const double pxy = (rng.uniform() * 1.8 - 0.9) * std::sqrt(pxx * pyy);
    const double mx = rng.normal();
    const double my = rng.normal();
    const double f = 0.2 + 3.0 * rng.uniform();
    const double g = mx + rng.normal();
    const double lambda = 0.5 + 4.0 * rng.uniform();
    const auto q = oracle::quadrature_one_step(mx, my, pxx, pxy, pyy, f, g);
    const LossBreakdown l = one_step_loss(scalar_belief(mx, my, pxx, pxy, pyy),
                                          MatrixXd::Constant(1, 1, f), VectorXd::Constant(1, g), lambda);
    EXPECT_NEAR(l.p_no_sample, q.p_no_sample, 1e-8 * q.p_no_sample) << trial;
    EXPECT_NEAR(l.distortion, q.distortion, 1e-6 * q.distortion) << trial;
    EXPECT_NEAR(l.info_nats, q.info, 1e-5 * q.info) << trial;
    const double total = q.distortion + lambda * q.info;
    EXPECT_NEAR(l.total, total, 1e-4 * total) << trial;
  }
}

TEST(Loss, LogDetPathsAgree) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const int nx = 1 + trial % 3;
    const int ny = 1 + trial % 2;
    const int k = trial % 5;
    const int d = nx + ny * (k + 1);
    const GaussianBelief b = make_belief(nx, ny, k, Phase::predicted, rng.normal_vector(d), random_spd(d, rng, 0.05));
    const MatrixXd f = random_spd(nx, rng);
    const VectorXd g = rng.normal_vector(nx);
    const LossBreakdown a = one_step_loss(b, f, g, 1.5, LogDetPath::direct);
    const LossBreakdown c = one_step_loss(b, f, g, 1.5, LogDetPath::identity);
    EXPECT_NEAR(a.leak_sample_branch, c.leak_sample_branch, 1e-8 * std::abs(c.leak_sample_branch));
    EXPECT_NEAR(a.leak_no_sample_branch, c.leak_no_sample_branch, 1e-8 * std::abs(c.leak_no_sample_branch));
    EXPECT_NEAR(a.total, c.total, 1e-8 * std::abs(c.total));
  }
}

TEST(Loss, DirectPathNeedsFullBelief) {
  Rng rng(4);
  const GaussianBelief b = random_reachable_belief(4, rng, 1);
  ASSERT_TRUE(b.truncated());
  EXPECT_THROW(one_step_loss(b, MatrixXd::Identity(1, 1), VectorXd::Zero(1), 1.0, LogDetPath::direct),
               ContractError);
  EXPECT_NO_THROW(one_step_loss(b, MatrixXd::Identity(1, 1), VectorXd::Zero(1), 1.0));
}

TEST(Loss, BranchTermsAreNonnegative) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const GaussianBelief b = random_reachable_belief(1 + trial % 6, rng);
    const LossBreakdown l = one_step_loss(b, MatrixXd::Constant(1, 1, std::exp(4 * rng.normal())),
                                          rng.normal_vector(1) * 3.0, 1.0);
    EXPECT_GE(l.leak_sample_branch, -1e-10);
    EXPECT_GE(l.leak_no_sample_branch, -1e-10);
    EXPECT_GE(l.distortion, 0.0);
    EXPECT_GE(l.p_no_sample, 0.0);
    EXPECT_LE(l.p_no_sample, 1.0);
  }
}

TEST(Loss, ContinuousInCholeskyFactor) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const GaussianBelief b = random_reachable_belief(3, rng);
    const double l0 = 0.3 + rng.uniform();
    const VectorXd g = rng.normal_vector(1);
    const double a = one_step_loss(b, MatrixXd::Constant(1, 1, l0 * l0), g, 2.0).total;
    const double c = one_step_loss(b, MatrixXd::Constant(1, 1, (l0 + 1e-6) * (l0 + 1e-6)), g, 2.0).total;
    EXPECT_LT(std::abs(a - c), 1e-5);
  }
}

TEST(Loss, IndefiniteSchurIsReported) {
  GaussianBelief b = scalar_belief(0.0, 0.0, 1.0, 0.5, 1.0);
  b.x_given_y_cov(0, 0) = -1.0;
  EXPECT_THROW(one_step_loss(b, MatrixXd::Identity(1, 1), VectorXd::Zero(1), 1.0, LogDetPath::identity),
               NumericalError);
}

TEST(Loss, NeverSampleObjectiveIsPriorTrace) {
  const auto sys = reference_system();
  const int horizon = 10;
  const auto est = trajectory_objective(sys, never_sample_schedule(1), 0.0, 20, horizon, Rng(7));
  GaussianBelief b = init_belief(sys);
  double expect = 0.0;
  for (int k = 0; k <= horizon; ++k) {
    if (k > 0) b = predict(b, sys);
    expect += b.p_xx().trace();
    b.phase = Phase::filtered;
  }
  EXPECT_NEAR(est.mean, expect, 1e-10 * expect);
  EXPECT_NEAR(est.std_error, 0.0, 1e-10);
  EXPECT_DOUBLE_EQ(est.sampling_rate, 0.0);
  EXPECT_NEAR(est.mean_info_nats, 0.0, 1e-15);
}

TEST(Loss, AlwaysSampleObjective) {
  const auto sys = reference_system();
  const auto est = trajectory_objective(sys, always_sample_schedule(1), 1.0, 20, 10, Rng(8));
  EXPECT_DOUBLE_EQ(est.sampling_rate, 1.0);
  EXPECT_DOUBLE_EQ(est.mean_distortion, 0.0);
  const auto other = trajectory_objective(
      sys, constant_schedule(MatrixXd::Identity(1, 1), VectorXd::Zero(1), true), 1.0, 2000, 10, Rng(9));
  EXPECT_GT(est.mean_info_nats, other.mean_info_nats);
}

TEST(Loss, ObjectiveMatchesEnumeration) {
  const auto sys = reference_system();
  const int horizon = 6;
  for (double c : {0.0, 0.8}) {
    const auto s = constant_schedule(MatrixXd::Identity(1, 1) * 1.5, VectorXd::Constant(1, c), true);
    const auto exact = oracle::enumerate_objective(sys, s, 2.0, horizon);
    const auto est = trajectory_objective(sys, s, 2.0, 20000, horizon, Rng(10));
    EXPECT_NEAR(est.mean, exact.objective, 3.0 * est.std_error);
    EXPECT_NEAR(est.sampling_rate, exact.sampling_rate, 0.01);
  }
}

TEST(Loss, BeliefMdpAndStateSimulationAgree) {
  const auto sys = reference_system();
  for (bool feedback : {false, true}) {
    const auto s = constant_schedule(MatrixXd::Identity(1, 1) * 2.0, VectorXd::Constant(1, 0.5), feedback);
    const auto a = trajectory_objective(sys, s, 1.0, 20000, 12, Rng(11), ObjectiveMode::belief_mdp);
    const auto b = trajectory_objective(sys, s, 1.0, 20000, 12, Rng(12), ObjectiveMode::state_simulation);
    EXPECT_NEAR(a.mean, b.mean, 3.0 * std::hypot(a.std_error, b.std_error));
  }
}

TEST(Loss, WindowDoesNotChangeObjective) {
  const auto sys = reference_system();
  const auto s = constant_schedule(MatrixXd::Identity(1, 1) * 2.0, VectorXd::Constant(1, 0.3), false);
  const auto a = trajectory_objective(sys, s, 1.0, 50, 15, Rng(13), ObjectiveMode::belief_mdp, 0);
  const auto b = trajectory_objective(sys, s, 1.0, 50, 15, Rng(13), ObjectiveMode::belief_mdp, 1);
  EXPECT_NEAR(a.mean, b.mean, 1e-8 * std::abs(a.mean));
}

TEST(Loss, DistortionFallsWithSamplingRateOnOpenLoopFamily) {
  const auto sys = reference_system();
  double prev_rate = -1.0;
  double prev_obj = 0.0;
  for (double f : {300.0, 100.0, 30.0, 10.0, 3.0, 1.0}) {
    const auto est = trajectory_objective(sys, open_loop_schedule(MatrixXd::Identity(1, 1) * f), 0.0,
                                          4000, 30, Rng(14));
    if (prev_rate >= 0.0) {
      EXPECT_GT(est.sampling_rate, prev_rate);
      EXPECT_LE(est.mean, prev_obj + 3.0 * est.std_error);
    }
    prev_rate = est.sampling_rate;
    prev_obj = est.mean;
  }
}

TEST(Loss, MiAccumulateBranchCollapses) {
  const auto sys = reference_system();
  std::vector<GaussianBelief> predicted;
  GaussianBelief b = init_belief(sys);
  Rng rng(15);
  double expect = 0.0;
  for (int k = 0; k <= 8; ++k) {
    if (k > 0) b = predict(b, sys);
    predicted.push_back(b);
    const double before = linalg::log_det_psd(b.p_yy());
    b = update_sample(b, rng.normal_vector(1));
    expect += 0.5 * (before - linalg::log_det_psd(b.p_yy()));
  }
  EXPECT_NEAR(mi_accumulate(predicted, always_sample_schedule(1), 1.0).info_nats, expect, 1e-10);
  EXPECT_DOUBLE_EQ(mi_accumulate(predicted, never_sample_schedule(1), 1.0).info_nats, 0.0);
  const auto w = mi_accumulate(predicted, always_sample_schedule(1), 3.0);
  EXPECT_NEAR(w.weighted, 3.0 * w.info_nats, 1e-12);
}

namespace {

// Static private scalar Y and X_{k+1} = a X_k + b Y + W, quantized with
// Gauss-Hermite nodes for Y (4 levels) and CDF cells around scaled nodes for X.
FiniteModel quantized_model(double a, double b, double q, double c, double s0, int nx) {
  const auto gy = oracle::gauss_hermite(4);
  const auto gx = oracle::gauss_hermite(nx);
  const double sx = std::sqrt(c * c + s0 + 1.0);
  auto cells = [&](double mean, double var) {
    VectorXd p(nx);
    auto cdf = [&](double t) { return 0.5 * std::erfc(-(t - mean) / std::sqrt(2.0 * var)); };
    for (int i = 0; i < nx; ++i) {
      const double lo = i == 0 ? -1e9 : 0.5 * sx * (gx.x[i - 1] + gx.x[i]);
      const double hi = i == nx - 1 ? 1e9 : 0.5 * sx * (gx.x[i] + gx.x[i + 1]);
      p(i) = cdf(hi) - cdf(lo);
    }
    return VectorXd(p / p.sum());
  };
  FiniteModel m;
  m.n_x = nx;
  m.n_y = 4;
  m.y_kernel = MatrixXd::Identity(4, 4);
  m.init_joint = MatrixXd::Zero(nx, 4);
  for (int y = 0; y < 4; ++y) {
    m.init_joint.col(y) = gy.w[y] * cells(c * gy.x[y], s0);
    MatrixXd k(nx, nx);
    for (int x = 0; x < nx; ++x) k.row(x) = cells(a * sx * gx.x[x] + b * gy.x[y], q).transpose();
    m.x_kernel.push_back(k);
  }
  m.init_joint /= m.init_joint.sum();
  m.distortion = MatrixXd::Ones(nx, nx) - MatrixXd::Identity(nx, nx);
  return m;
}

}  // namespace

TEST(Loss, InformationSumTracksQuantizedModel) {
  const double a = 0.5, b = 0.9, q = 0.6, c = 0.8, s0 = 0.5;
  LinearGaussianSystem sys;
  sys.n_x = 1;
  sys.n_y = 1;
  sys.a_matrix = (MatrixXd(2, 2) << a, b, 0, 1).finished();
  sys.q_cov = (MatrixXd(2, 2) << q, 0, 0, 0).finished();
  sys.init_cov = (MatrixXd(2, 2) << c * c + s0, c, c, 1).finished();
  sys.init_mean = VectorXd::Zero(2);
  const auto coarse = quantized_model(a, b, q, c, s0, 5);
  const auto fine = quantized_model(a, b, q, c, s0, 8);
  for (int horizon = 0; horizon <= 2; ++horizon) {
    GaussianBelief bel = init_belief(sys);
    std::vector<GaussianBelief> predicted;
    for (int k = 0; k <= horizon; ++k) {
      if (k > 0) bel = predict(bel, sys);
      predicted.push_back(bel);
      bel = update_sample(bel, VectorXd::Zero(1));
    }
    const double gauss = mi_accumulate(predicted, always_sample_schedule(1), 1.0).info_nats;
    const double mi5 = mi_bruteforce(coarse, open_loop_policy({PolicyCollection::constant(5, 0.0)}), horizon);
    const double mi8 = mi_bruteforce(fine, open_loop_policy({PolicyCollection::constant(8, 0.0)}), horizon);
    // quantization discards information; a 5-level grid keeps most of it
    EXPECT_GT(mi5, 0.6 * gauss);
    EXPECT_LT(mi5, gauss);
    EXPECT_GT(mi8, mi5);
    EXPECT_LT(mi8, gauss);
  }
}
