#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "privsample/linalg.hpp"
#include "privsample/parallel.hpp"

namespace privsample {

/// Raised when an observation has zero probability under the belief.
class ImpossibleEvidence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Finite-alphabet system: X_{k+1} ~ p(.|X_k, Y_k), Y_{k+1} ~ p(.|Y_k).
struct FiniteModel {
  int n_x = 2;
  int n_y = 2;
  std::vector<MatrixXd> x_kernel;  // x_kernel[y](x, x') = p(x' | x, y)
  MatrixXd y_kernel;               // (y, y')
  MatrixXd init_joint;             // (x0, y0)
  MatrixXd distortion;             // l_D(x, x̃)

  double px(int x, int y, int xn) const { return x_kernel[static_cast<std::size_t>(y)](x, xn); }

  void validate() const {
    using linalg::require;
    constexpr double tol = 1e-12;
    require(n_x >= 1 && n_x <= 8, "FiniteModel: x alphabet size must be in [1, 8]");
    require(n_y >= 1 && n_y <= 4, "FiniteModel: y alphabet size must be in [1, 4]");
    require(static_cast<int>(x_kernel.size()) == n_y, "FiniteModel: need one x kernel per y symbol");
    auto stochastic = [&](const MatrixXd& m, int rows, int cols, const char* what) {
      require(m.rows() == rows && m.cols() == cols, std::string("FiniteModel: bad shape of ") + what);
      require(m.minCoeff() >= 0.0, std::string("FiniteModel: negative entry in ") + what);
      for (int r = 0; r < rows; ++r) {
        require(std::abs(m.row(r).sum() - 1.0) <= tol, std::string("FiniteModel: ") + what + " not row-stochastic");
      }
    };
    for (const auto& k : x_kernel) stochastic(k, n_x, n_x, "x_kernel");
    stochastic(y_kernel, n_y, n_y, "y_kernel");
    require(init_joint.rows() == n_x && init_joint.cols() == n_y, "FiniteModel: bad init_joint shape");
    require(init_joint.minCoeff() >= 0.0 && std::abs(init_joint.sum() - 1.0) <= tol,
            "FiniteModel: init_joint must be a distribution");
    require(distortion.rows() == n_x && distortion.cols() == n_x, "FiniteModel: bad distortion shape");
    require(distortion.minCoeff() >= 0.0, "FiniteModel: distortion must be nonnegative");
    for (int i = 0; i < n_x; ++i) require(distortion(i, i) == 0.0, "FiniteModel: distortion diagonal must be zero");
  }

  /// True when Y evolves by a fixed permutation, so y_k determines y^k.
  bool deterministic_y() const {
    for (int y = 0; y < n_y; ++y) {
      if ((y_kernel.row(y).array() == 1.0).count() != 1) return false;
    }
    return true;
  }
};

/// Support point (x_k, m_k, y^k). m_k lists the discarded samples in time order.
struct BeliefKey {
  int x = 0;
  std::vector<int> m;
  std::vector<int> y;
  auto operator<=>(const BeliefKey&) const = default;
};

/// b_k(x_k, m_k, y^k) = p(x_k, m_k, y^k | Z^{k-1}).
struct DiscreteBelief {
  int k = 0;
  int memory_cap = -1;  // keep at most this many discarded samples (-1 = all)
  std::map<BeliefKey, double> weights;

  double total() const {
    CompensatedSum s;
    for (const auto& [key, w] : weights) s.add(w);
    return s.value();
  }
  /// Marginal over (x_k, y_k), flattened x * n_y + y.
  VectorXd xy_marginal(int n_x, int n_y) const {
    VectorXd p = VectorXd::Zero(n_x * n_y);
    for (const auto& [key, w] : weights) p(key.x * n_y + key.y.back()) += w;
    return p;
  }
};

inline DiscreteBelief initial_belief(const FiniteModel& model, int memory_cap = -1) {
  model.validate();
  DiscreteBelief b;
  b.memory_cap = memory_cap;
  for (int x = 0; x < model.n_x; ++x) {
    for (int y = 0; y < model.n_y; ++y) {
      if (model.init_joint(x, y) > 0.0) b.weights[BeliefKey{x, {}, {y}}] = model.init_joint(x, y);
    }
  }
  return b;
}

/// a_k(N_k = 0 | x_k, m_k). Entries of `table` override the memoryless `by_x`.
struct PolicyCollection {
  std::vector<double> by_x;
  std::map<std::pair<int, std::vector<int>>, double> table;

  static PolicyCollection memoryless(std::vector<double> a) { return {std::move(a), {}}; }
  static PolicyCollection constant(int n_x, double a) { return memoryless(std::vector<double>(n_x, a)); }

  double no_sample(int x, const std::vector<int>& m) const {
    if (!table.empty()) {
      const auto it = table.find({x, m});
      if (it != table.end()) return it->second;
    }
    return by_x[static_cast<std::size_t>(x)];
  }

  void validate(int n_x) const {
    linalg::require(static_cast<int>(by_x.size()) == n_x, "PolicyCollection: by_x must have one entry per symbol");
    for (double a : by_x) linalg::require(a >= 0.0 && a <= 1.0, "PolicyCollection: probability outside [0, 1]");
    for (const auto& [key, a] : table) {
      linalg::require(a >= 0.0 && a <= 1.0, "PolicyCollection: probability outside [0, 1]");
    }
  }
};

/// Z_k encoded as -1 for an empty output, else the transmitted symbol.
inline constexpr int kEmpty = -1;

/// Policy collection chosen from the shared history Z^{k-1}.
using PolicyRule = std::function<PolicyCollection(int k, const std::vector<int>& z_history)>;

inline PolicyRule open_loop_policy(std::vector<PolicyCollection> seq) {
  if (seq.empty()) throw ContractError("open_loop_policy: empty sequence");
  return [seq = std::move(seq)](int k, const std::vector<int>&) {
    return seq[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(seq.size()) - 1))];
  };
}

/// Two-branch Bayes update followed by the kernel prediction:
///   z = empty: weights a(0|x,m) b, memory grows by x_k;
///   z = X:     weights a(1|X,m) b restricted to x_k = X, memory unchanged.
inline DiscreteBelief belief_step(const DiscreteBelief& b, const PolicyCollection& a, int z,
                                  const FiniteModel& model) {
  if (z != kEmpty && (z < 0 || z >= model.n_x)) throw ContractError("belief_step: z outside the alphabet");
  std::map<BeliefKey, double> post;
  CompensatedSum norm;
  for (const auto& [key, w] : b.weights) {
    const double a0 = a.no_sample(key.x, key.m);
    double v = 0.0;
    BeliefKey nk = key;
    if (z == kEmpty) {
      v = w * a0;
      nk.m.push_back(key.x);
      if (b.memory_cap >= 0 && static_cast<int>(nk.m.size()) > b.memory_cap) nk.m.erase(nk.m.begin());
    } else if (key.x == z) {
      v = w * (1.0 - a0);
    }
    if (v <= 0.0) continue;
    post[nk] += v;
    norm.add(v);
  }
  if (!(norm.value() > 0.0)) {
    throw ImpossibleEvidence("belief_step: observation " + (z == kEmpty ? std::string("empty") : std::to_string(z)) +
                             " has zero probability at k = " + std::to_string(b.k));
  }
  DiscreteBelief out;
  out.k = b.k + 1;
  out.memory_cap = b.memory_cap;
  for (const auto& [key, w] : post) {
    const int y = key.y.back();
    for (int xn = 0; xn < model.n_x; ++xn) {
      const double px = model.px(key.x, y, xn);
      if (px == 0.0) continue;
      for (int yn = 0; yn < model.n_y; ++yn) {
        const double py = model.y_kernel(y, yn);
        if (py == 0.0) continue;
        BeliefKey k2{xn, key.m, key.y};
        k2.y.push_back(yn);
        out.weights[k2] += w * px * py / norm.value();
      }
    }
  }
  CompensatedSum s;
  for (const auto& [key, w] : out.weights) s.add(w);
  for (auto& [key, w] : out.weights) w /= s.value();
  return out;
}

/// argmin over x̃ of sum_x w(x) l_D(x, x̃); ties go to the smallest index.
inline int optimal_reconstruction_finite(const VectorXd& x_weights, const FiniteModel& model) {
  if (x_weights.size() != model.n_x) throw ContractError("optimal_reconstruction_finite: size mismatch");
  int best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  for (int c = 0; c < model.n_x; ++c) {
    const double v = x_weights.dot(model.distortion.col(c));
    if (v < best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

inline int optimal_reconstruction_finite(const DiscreteBelief& b, const FiniteModel& model) {
  VectorXd w = VectorXd::Zero(model.n_x);
  for (const auto& [key, v] : b.weights) w(key.x) += v;
  return optimal_reconstruction_finite(w, model);
}

struct FiniteLoss {
  double distortion = 0.0;
  double info = 0.0;  // nats
  double p_no_sample = 0.0;
  double total = 0.0;
  int reconstruction = 0;  // x̃ used on the empty branch
};

namespace detail {

inline double xlogx_ratio(double p, double q) { return p > 0.0 ? p * std::log(p / q) : 0.0; }

}  // namespace detail

/// Expected distortion under the optimal empty-branch reconstruction and the
/// information term as the three-term sum
///   -sum p(y^k) log p(y^k) + sum q0(y^k) log(q0/Q0) + sum q1(x, y^k) log(q1/q1(x)).
inline FiniteLoss one_step_losses(const DiscreteBelief& b, const PolicyCollection& a, const FiniteModel& model,
                                  double lambda) {
  if (lambda < 0.0) throw ContractError("one_step_losses: lambda must be >= 0");
  std::map<std::vector<int>, double> py, q0;
  std::map<std::pair<int, std::vector<int>>, double> q1;
  VectorXd w0 = VectorXd::Zero(model.n_x);
  VectorXd q1x = VectorXd::Zero(model.n_x);
  double p0 = 0.0;
  for (const auto& [key, w] : b.weights) {
    const double a0 = a.no_sample(key.x, key.m);
    py[key.y] += w;
    q0[key.y] += a0 * w;
    q1[{key.x, key.y}] += (1.0 - a0) * w;
    w0(key.x) += a0 * w;
    q1x(key.x) += (1.0 - a0) * w;
    p0 += a0 * w;
  }
  FiniteLoss out;
  out.p_no_sample = p0;
  out.reconstruction = optimal_reconstruction_finite(w0, model);
  out.distortion = w0.dot(model.distortion.col(out.reconstruction));
  double info = 0.0;
  for (const auto& [y, p] : py) info -= detail::xlogx_ratio(p, 1.0);
  for (const auto& [y, q] : q0) info += detail::xlogx_ratio(q, p0);
  for (const auto& [key, q] : q1) info += detail::xlogx_ratio(q, q1x(key.first));
  out.info = std::max(info, 0.0);
  out.total = out.distortion + lambda * out.info;
  return out;
}

namespace detail {

inline void check_enumeration_size(const FiniteModel& model, int horizon, const char* what) {
  const double size = std::pow(2.0 * model.n_x * model.n_y, horizon + 1);
  if (size > 1e7) throw ContractError(std::string(what) + ": enumeration size exceeds 1e7");
}

/// Joint probabilities of (y^K, z^K) and per-step (z^k, x_k) from exhaustive
/// enumeration of trajectories and decisions.
struct Enumeration {
  std::map<std::pair<std::vector<int>, std::vector<int>>, double> yz;
  std::vector<std::map<std::vector<int>, VectorXd>> xz;  // per k: z^k -> p(x_k, z^k)
};

inline void enumerate_paths(const FiniteModel& model, const PolicyRule& policy, int horizon, int k, int x,
                            std::vector<int>& m, std::vector<int>& y, std::vector<int>& z, double p,
                            Enumeration& out) {
  const PolicyCollection a = policy(k, z);
  const double a0 = a.no_sample(x, m);
  for (int n = 0; n < 2; ++n) {
    const double pn = p * (n == 0 ? a0 : 1.0 - a0);
    if (pn == 0.0) continue;
    z.push_back(n == 0 ? kEmpty : x);
    if (n == 0) m.push_back(x);
    auto& slot = out.xz[static_cast<std::size_t>(k)][z];
    if (slot.size() == 0) slot = VectorXd::Zero(model.n_x);
    slot(x) += pn;
    if (k == horizon) {
      out.yz[{y, z}] += pn;
    } else {
      for (int xn = 0; xn < model.n_x; ++xn) {
        const double px = model.px(x, y.back(), xn);
        if (px == 0.0) continue;
        for (int yn = 0; yn < model.n_y; ++yn) {
          const double pyn = model.y_kernel(y.back(), yn);
          if (pyn == 0.0) continue;
          y.push_back(yn);
          enumerate_paths(model, policy, horizon, k + 1, xn, m, y, z, pn * px * pyn, out);
          y.pop_back();
        }
      }
    }
    if (n == 0) m.pop_back();
    z.pop_back();
  }
}

inline Enumeration enumerate_all(const FiniteModel& model, const PolicyRule& policy, int horizon) {
  Enumeration out;
  out.xz.resize(static_cast<std::size_t>(horizon) + 1);
  std::vector<int> m, y, z;
  for (int x = 0; x < model.n_x; ++x) {
    for (int y0 = 0; y0 < model.n_y; ++y0) {
      const double p = model.init_joint(x, y0);
      if (p == 0.0) continue;
      y.assign(1, y0);
      enumerate_paths(model, policy, horizon, 0, x, m, y, z, p, out);
    }
  }
  return out;
}

inline double mutual_information(const Enumeration& e) {
  std::map<std::vector<int>, double> py, pz;
  for (const auto& [key, p] : e.yz) {
    py[key.first] += p;
    pz[key.second] += p;
  }
  CompensatedSum s;
  for (const auto& [key, p] : e.yz) s.add(p * std::log(p / (py[key.first] * pz[key.second])));
  return std::max(s.value(), 0.0);
}

}  // namespace detail

/// I(Z^K; Y^K) in nats by exhaustive enumeration over k = 0..horizon.
inline double mi_bruteforce(const FiniteModel& model, const PolicyRule& policy, int horizon) {
  model.validate();
  detail::check_enumeration_size(model, horizon, "mi_bruteforce");
  return detail::mutual_information(detail::enumerate_all(model, policy, horizon));
}

struct FiniteObjective {
  double distortion = 0.0;  // sum_k E[l_D(X_k, x̃_k)]
  double info = 0.0;        // I(Z^K; Y^K) or the sum of expected one-step terms
  double total = 0.0;
};

/// Objective as distortion sum plus lambda times the brute-force MI.
inline FiniteObjective objective_bruteforce(const FiniteModel& model, const PolicyRule& policy, double lambda,
                                            int horizon) {
  model.validate();
  detail::check_enumeration_size(model, horizon, "objective_bruteforce");
  const auto e = detail::enumerate_all(model, policy, horizon);
  FiniteObjective out;
  CompensatedSum d;
  for (const auto& per_k : e.xz) {
    for (const auto& [z, px] : per_k) {
      if (z.back() != kEmpty) continue;
      d.add(px.dot(model.distortion.col(optimal_reconstruction_finite(px, model))));
    }
  }
  out.distortion = d.value();
  out.info = detail::mutual_information(e);
  out.total = out.distortion + lambda * out.info;
  return out;
}

namespace detail {

inline void decomposed_node(const FiniteModel& model, const PolicyRule& policy, double lambda, int horizon,
                            const DiscreteBelief& b, std::vector<int>& z, double weight, CompensatedSum& d,
                            CompensatedSum& info) {
  const PolicyCollection a = policy(b.k, z);
  const FiniteLoss l = one_step_losses(b, a, model, lambda);
  d.add(weight * l.distortion);
  info.add(weight * l.info);
  if (b.k == horizon) return;
  VectorXd p1 = VectorXd::Zero(model.n_x);
  for (const auto& [key, w] : b.weights) p1(key.x) += (1.0 - a.no_sample(key.x, key.m)) * w;
  for (int zz = kEmpty; zz < model.n_x; ++zz) {
    const double pz = zz == kEmpty ? l.p_no_sample : p1(zz);
    if (pz <= 0.0) continue;
    z.push_back(zz);
    decomposed_node(model, policy, lambda, horizon, belief_step(b, a, zz, model), z, weight * pz, d, info);
    z.pop_back();
  }
}

}  // namespace detail

/// Objective as the expected sum of one-step losses over the Z-history tree.
inline FiniteObjective objective_decomposed(const FiniteModel& model, const PolicyRule& policy, double lambda,
                                            int horizon, int memory_cap = -1) {
  std::vector<int> z;
  CompensatedSum d, info;
  detail::decomposed_node(model, policy, lambda, horizon, initial_belief(model, memory_cap), z, 1.0, d, info);
  return {d.value(), info.value(), d.value() + lambda * info.value()};
}

/// Regular lattice {q / n : q integer, q >= 0, sum q = n} on the probability
/// simplex of dimension d, with Freudenthal (Kuhn) interpolation.
class SimplexLattice {
 public:
  SimplexLattice(int dim, int resolution) : d_(dim), n_(resolution) {
    if (dim < 1 || resolution < 1) throw ContractError("SimplexLattice: bad dimension or resolution");
    std::vector<int> q(static_cast<std::size_t>(d_), 0);
    std::size_t codes = 1;
    for (int i = 0; i < d_; ++i) codes *= static_cast<std::size_t>(n_ + 1);
    if (codes > 50'000'000) throw ContractError("SimplexLattice: lattice too large");
    index_.assign(codes, -1);
    build(q, 0, n_);
  }

  int dim() const { return d_; }
  int resolution() const { return n_; }
  std::size_t size() const { return nodes_.size(); }
  VectorXd point(std::size_t i) const {
    VectorXd p(d_);
    for (int j = 0; j < d_; ++j) p(j) = static_cast<double>(nodes_[i][static_cast<std::size_t>(j)]) / n_;
    return p;
  }

  /// Nodes and barycentric weights of the simplex containing p.
  std::vector<std::pair<int, double>> locate(const VectorXd& p_in) const {
    VectorXd p = p_in.cwiseMax(0.0);
    p /= p.sum();
    std::vector<std::pair<int, double>> out;
    if (d_ == 1) return {{0, 1.0}};
    const int m = d_ - 1;
    std::vector<double> y(static_cast<std::size_t>(m));
    double tail = 0.0;
    for (int i = m; i >= 1; --i) {
      tail += p(i);
      y[static_cast<std::size_t>(i - 1)] = std::clamp(tail * n_, 0.0, static_cast<double>(n_));
    }
    std::vector<int> base(static_cast<std::size_t>(m));
    std::vector<double> frac(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      base[static_cast<std::size_t>(i)] = std::min(static_cast<int>(std::floor(y[static_cast<std::size_t>(i)])), n_);
      frac[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] - base[static_cast<std::size_t>(i)];
    }
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
    });
    std::vector<int> v = base;
    double prev = 1.0;
    for (int j = 0; j <= m; ++j) {
      const double next = j < m ? frac[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] : 0.0;
      const double w = prev - next;
      if (w > 0.0) out.emplace_back(node_of(v), w);
      if (j < m) ++v[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
      prev = next;
    }
    return out;
  }

  double interpolate(const VectorXd& p, const std::vector<double>& values) const {
    double s = 0.0;
    for (const auto& [i, w] : locate(p)) s += w * values[static_cast<std::size_t>(i)];
    return s;
  }

 private:
  void build(std::vector<int>& q, int pos, int left) {
    if (pos == d_ - 1) {
      q[static_cast<std::size_t>(pos)] = left;
      index_[encode(q)] = static_cast<int>(nodes_.size());
      nodes_.push_back(q);
      return;
    }
    for (int v = left; v >= 0; --v) {
      q[static_cast<std::size_t>(pos)] = v;
      build(q, pos + 1, left - v);
    }
  }
  std::size_t encode(const std::vector<int>& q) const {
    std::size_t c = 0;
    for (int v : q) c = c * static_cast<std::size_t>(n_ + 1) + static_cast<std::size_t>(v);
    return c;
  }
  int node_of(const std::vector<int>& y) const {
    const int m = d_ - 1;
    std::vector<int> q(static_cast<std::size_t>(d_));
    q[0] = n_ - y[0];
    for (int i = 1; i < m; ++i) q[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i - 1)] - y[static_cast<std::size_t>(i)];
    q[static_cast<std::size_t>(m)] = y[static_cast<std::size_t>(m - 1)];
    const int idx = index_[encode(q)];
    if (idx < 0) throw NumericalError("SimplexLattice: interpolation vertex off the lattice");
    return idx;
  }

  int d_;
  int n_;
  std::vector<std::vector<int>> nodes_;
  std::vector<int> index_;
};

struct GridSpec {
  int resolution = 16;    // belief lattice spacing 1 / resolution
  int action_levels = 11; // a values on {0, 1/(levels-1), ..., 1} per symbol
  int refine_passes = 2;  // coordinate-descent passes after the grid search
  bool check_refinement = true;  // also solve at resolution / 2 and compare
  double refinement_tol = 1e-2;  // relative mismatch that triggers a warning
};

/// One step of a memoryless policy on the (x_k, y_k) joint of a model with a
/// permutation y kernel: losses, outcome probabilities and predicted children.
struct JointStep {
  FiniteLoss loss;
  std::vector<double> prob;    // index 0: empty output, 1 + x: output x
  std::vector<VectorXd> child; // predicted (x, y) joint after each outcome
};

inline JointStep joint_step(const FiniteModel& model, const VectorXd& joint, const std::vector<double>& a,
                            double lambda, bool children = true) {
  const int nx = model.n_x, ny = model.n_y;
  JointStep out;
  VectorXd w0 = VectorXd::Zero(nx), q1x = VectorXd::Zero(nx), py = VectorXd::Zero(ny), q0 = VectorXd::Zero(ny);
  double p0 = 0.0;
  for (int x = 0; x < nx; ++x) {
    for (int y = 0; y < ny; ++y) {
      const double w = joint(x * ny + y);
      const double a0 = a[static_cast<std::size_t>(x)];
      py(y) += w;
      q0(y) += a0 * w;
      w0(x) += a0 * w;
      q1x(x) += (1.0 - a0) * w;
      p0 += a0 * w;
    }
  }
  FiniteLoss& l = out.loss;
  l.p_no_sample = p0;
  l.reconstruction = optimal_reconstruction_finite(w0, model);
  l.distortion = w0.dot(model.distortion.col(l.reconstruction));
  double info = 0.0;
  for (int y = 0; y < ny; ++y) info += -detail::xlogx_ratio(py(y), 1.0) + detail::xlogx_ratio(q0(y), p0);
  for (int x = 0; x < nx; ++x) {
    for (int y = 0; y < ny; ++y) {
      info += detail::xlogx_ratio((1.0 - a[static_cast<std::size_t>(x)]) * joint(x * ny + y), q1x(x));
    }
  }
  l.info = std::max(info, 0.0);
  l.total = l.distortion + lambda * l.info;
  if (!children) return out;

  auto predict = [&](const VectorXd& post) {
    VectorXd nxt = VectorXd::Zero(nx * ny);
    for (int x = 0; x < nx; ++x) {
      for (int y = 0; y < ny; ++y) {
        const double w = post(x * ny + y);
        if (w == 0.0) continue;
        for (int xn = 0; xn < nx; ++xn) {
          for (int yn = 0; yn < ny; ++yn) nxt(xn * ny + yn) += w * model.px(x, y, xn) * model.y_kernel(y, yn);
        }
      }
    }
    return nxt;
  };
  out.prob.assign(static_cast<std::size_t>(nx) + 1, 0.0);
  out.child.assign(static_cast<std::size_t>(nx) + 1, VectorXd());
  out.prob[0] = p0;
  if (p0 > 0.0) {
    VectorXd post(nx * ny);
    for (int x = 0; x < nx; ++x) {
      for (int y = 0; y < ny; ++y) post(x * ny + y) = a[static_cast<std::size_t>(x)] * joint(x * ny + y) / p0;
    }
    out.child[0] = predict(post);
  }
  for (int x = 0; x < nx; ++x) {
    const double p1 = q1x(x);
    out.prob[static_cast<std::size_t>(x) + 1] = p1;
    if (p1 <= 0.0) continue;
    VectorXd post = VectorXd::Zero(nx * ny);
    for (int y = 0; y < ny; ++y) post(x * ny + y) = (1.0 - a[static_cast<std::size_t>(x)]) * joint(x * ny + y) / p1;
    out.child[static_cast<std::size_t>(x) + 1] = predict(post);
  }
  return out;
}

struct DpResult {
  int horizon = 0;
  double lambda = 0.0;
  GridSpec grid;
  std::vector<std::vector<double>> values;               // [stage][node] V*_k
  std::vector<std::vector<std::vector<double>>> actions; // [stage][node][x] argmin a(0|x)
  std::vector<VectorXd> nodes;                           // lattice points over (x, y)
  double value = 0.0;             // V*_0(b_0) at the exact initial joint
  std::vector<double> root_action;
  double policy_value = 0.0;      // exact value of the greedy policy
  double coarse_value = 0.0;      // V*_0(b_0) at resolution / 2 (if checked)
  double resolution_bound = 0.0;  // a-posteriori interpolation bound
};

namespace detail {

struct Choice {
  std::vector<double> a;
  double value = std::numeric_limits<double>::infinity();
};

/// min over memoryless actions of l_D + lambda l_I + E[V_{k+1}(child)].
inline Choice minimize_action(const FiniteModel& model, const VectorXd& joint, double lambda, const GridSpec& grid,
                              const std::function<double(const VectorXd&)>& next) {
  const int nx = model.n_x;
  auto eval = [&](const std::vector<double>& a) {
    const JointStep s = joint_step(model, joint, a, lambda, static_cast<bool>(next));
    double v = s.loss.total;
    if (next) {
      for (std::size_t i = 0; i < s.prob.size(); ++i) {
        if (s.prob[i] > 0.0) v += s.prob[i] * next(s.child[i]);
      }
    }
    return v;
  };
  Choice best;
  const int levels = grid.action_levels;
  std::vector<int> idx(static_cast<std::size_t>(nx), 0);
  std::vector<double> a(static_cast<std::size_t>(nx));
  while (true) {
    for (int x = 0; x < nx; ++x) a[static_cast<std::size_t>(x)] = static_cast<double>(idx[static_cast<std::size_t>(x)]) / (levels - 1);
    const double v = eval(a);
    if (v < best.value) best = {a, v};
    int pos = 0;
    while (pos < nx && ++idx[static_cast<std::size_t>(pos)] == levels) idx[static_cast<std::size_t>(pos++)] = 0;
    if (pos == nx) break;
  }
  // golden-section refinement of one coordinate at a time
  const double step = 1.0 / (levels - 1);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int pass = 0; pass < grid.refine_passes; ++pass) {
    for (int x = 0; x < nx; ++x) {
      std::vector<double> trial = best.a;
      double lo = std::max(0.0, best.a[static_cast<std::size_t>(x)] - step);
      double hi = std::min(1.0, best.a[static_cast<std::size_t>(x)] + step);
      auto at = [&](double t) {
        trial[static_cast<std::size_t>(x)] = t;
        return eval(trial);
      };
      double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
      double fc = at(c), fd = at(d);
      for (int it = 0; it < 30; ++it) {
        if (fc < fd) {
          hi = d;
          d = c;
          fd = fc;
          c = hi - phi * (hi - lo);
          fc = at(c);
        } else {
          lo = c;
          c = d;
          fc = fd;
          d = lo + phi * (hi - lo);
          fd = at(d);
        }
      }
      const double t = fc < fd ? c : d;
      const double ft = std::min(fc, fd);
      if (ft < best.value) {
        best.a[static_cast<std::size_t>(x)] = t;
        best.value = ft;
      }
    }
  }
  return best;
}

struct DpTables {
  SimplexLattice lattice;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<std::vector<double>>> actions;
};

inline DpTables dp_tables(const FiniteModel& model, double lambda, int horizon, const GridSpec& grid) {
  DpTables t{SimplexLattice(model.n_x * model.n_y, grid.resolution), {}, {}};
  const std::size_t n = t.lattice.size();
  t.values.assign(static_cast<std::size_t>(horizon) + 1, std::vector<double>(n, 0.0));
  t.actions.assign(static_cast<std::size_t>(horizon) + 1, std::vector<std::vector<double>>(n));
  for (int k = horizon; k >= 0; --k) {
    std::function<double(const VectorXd&)> next;
    if (k < horizon) {
      const auto& vn = t.values[static_cast<std::size_t>(k) + 1];
      next = [&t, &vn](const VectorXd& p) { return t.lattice.interpolate(p, vn); };
    }
    parallel_for(n, [&](std::size_t i) {
      const Choice c = minimize_action(model, t.lattice.point(i), lambda, grid, next);
      t.values[static_cast<std::size_t>(k)][i] = c.value;
      t.actions[static_cast<std::size_t>(k)][i] = c.a;
    });
  }
  return t;
}

inline VectorXd initial_joint_vector(const FiniteModel& model) {
  VectorXd p(model.n_x * model.n_y);
  for (int x = 0; x < model.n_x; ++x) {
    for (int y = 0; y < model.n_y; ++y) p(x * model.n_y + y) = model.init_joint(x, y);
  }
  return p;
}

/// Exact value of the greedy policy: the action at every history node is the
/// one-step minimizer against the interpolated V_{k+1}.
inline double greedy_value(const FiniteModel& model, double lambda, int horizon, const GridSpec& grid,
                           const DpTables& t, const VectorXd& joint, int k) {
  std::function<double(const VectorXd&)> next;
  if (k < horizon) {
    const auto& vn = t.values[static_cast<std::size_t>(k) + 1];
    next = [&t, &vn](const VectorXd& p) { return t.lattice.interpolate(p, vn); };
  }
  const Choice c = minimize_action(model, joint, lambda, grid, next);
  const JointStep s = joint_step(model, joint, c.a, lambda, k < horizon);
  double v = s.loss.total;
  if (k < horizon) {
    for (std::size_t i = 0; i < s.prob.size(); ++i) {
      if (s.prob[i] > 0.0) v += s.prob[i] * greedy_value(model, lambda, horizon, grid, t, s.child[i], k + 1);
    }
  }
  return v;
}

}  // namespace detail

/// Backward recursion over a lattice of (x_k, y_k) beliefs for memoryless
/// policy collections a_k(0 | x_k). Requires a permutation y kernel so that
/// y_k determines y^k and the information term only needs the current symbol.
inline DpResult dp_solve(const FiniteModel& model, double lambda, int horizon, const GridSpec& grid = {}) {
  model.validate();
  using linalg::require;
  require(lambda >= 0.0, "dp_solve: lambda must be >= 0");
  require(horizon >= 0 && horizon <= 3, "dp_solve: horizon must be in [0, 3]");
  require(model.deterministic_y(), "dp_solve: y kernel must be a permutation");
  require(model.n_x * model.n_y <= 6, "dp_solve: belief simplex too large for gridding");
  require(grid.resolution >= 1 && grid.action_levels >= 2 && grid.refine_passes >= 0, "dp_solve: bad grid spec");

  const detail::DpTables t = detail::dp_tables(model, lambda, horizon, grid);
  DpResult res;
  res.horizon = horizon;
  res.lambda = lambda;
  res.grid = grid;
  res.values = t.values;
  res.actions = t.actions;
  for (std::size_t i = 0; i < t.lattice.size(); ++i) res.nodes.push_back(t.lattice.point(i));

  const VectorXd b0 = detail::initial_joint_vector(model);
  std::function<double(const VectorXd&)> next;
  if (horizon > 0) next = [&t](const VectorXd& p) { return t.lattice.interpolate(p, t.values[1]); };
  const detail::Choice root = detail::minimize_action(model, b0, lambda, grid, next);
  res.value = root.value;
  res.root_action = root.a;
  res.policy_value = detail::greedy_value(model, lambda, horizon, grid, t, b0, 0);
  res.resolution_bound = std::abs(res.policy_value - res.value);
  if (grid.check_refinement && grid.resolution >= 2) {
    GridSpec coarse = grid;
    coarse.resolution = grid.resolution / 2;
    const detail::DpTables tc = detail::dp_tables(model, lambda, horizon, coarse);
    std::function<double(const VectorXd&)> nc;
    if (horizon > 0) nc = [&tc](const VectorXd& p) { return tc.lattice.interpolate(p, tc.values[1]); };
    res.coarse_value = detail::minimize_action(model, b0, lambda, coarse, nc).value;
    const double mismatch = std::abs(res.coarse_value - res.value);
    res.resolution_bound = std::max(res.resolution_bound, mismatch);
    if (mismatch > grid.refinement_tol * std::max(1.0, std::abs(res.value))) {
      diag::warn("dp_solve: grid too coarse, refinement changes V_0 by " + std::to_string(mismatch));
    }
  } else {
    res.coarse_value = res.value;
  }
  return res;
}

}  // namespace privsample
