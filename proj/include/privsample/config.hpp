#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "privsample/experiments.hpp"
#include "privsample/finite.hpp"
#include "privsample/lingauss.hpp"
#include "privsample/optimizer.hpp"
#include "privsample/policy.hpp"

namespace privsample {

using Json = nlohmann::json;

/// Malformed or out-of-range configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a CLI command can read from a config file. Absent keys keep
/// the defaults below, which reproduce the two-dimensional example system.
struct RunConfig {
  LinearGaussianSystem system = reference_system();
  int horizon = 100;
  std::uint64_t seed = 1;
  int rollouts = 10000;
  double lambda = 8.0;
  int max_tracked_y = 1;  // 0 tracks every Y block; losses are exact either way
  SamplerSchedule schedule = constant_schedule(MatrixXd::Identity(1, 1) * 3.0, VectorXd::Zero(1), true);
  OptimizerConfig optimizer = SweepConfig::sweep_optimizer_config(100);
  SweepConfig sweep;
  double target_rate = 0.29;
  std::optional<FiniteModel> finite;
  int finite_horizon = 2;
  GridSpec grid;

  /// Pushes horizon and seed into the nested configs.
  void sync() {
    optimizer.horizon = horizon;
    sweep.horizon = horizon;
    sweep.rollouts = rollouts;
    sweep.seed = seed;
    sweep.optimizer = optimizer;
  }

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError(what);
    };
    check(horizon >= 0, "K must be >= 0");
    check(rollouts >= 1, "rollouts must be >= 1");
    check(lambda >= 0.0, "lambda must be >= 0");
    check(max_tracked_y >= 0, "max_tracked_y must be >= 0");
    check(target_rate > 0.0 && target_rate < 1.0, "rate_curve.target_rate must be in (0, 1)");
    check(finite_horizon >= 0, "finite.K must be >= 0");
    try {
      system.validate();
      schedule.validate();
      if (schedule.n_x != system.n_x) throw ContractError("schedule dimension differs from nx");
      optimizer.validate();
      sweep.validate();
      if (finite) finite->validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline MatrixXd matrix_from_json(const Json& j, const std::string& key) {
  if (j.is_number()) return MatrixXd::Constant(1, 1, j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError(key + ": expected a number or a nested array");
  if (j.front().is_number()) {
    // a flat array is a column vector
    MatrixXd m(static_cast<Eigen::Index>(j.size()), 1);
    for (std::size_t i = 0; i < j.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = j[i].get<double>();
    return m;
  }
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError(key + ": rows must have equal length");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline int json_depth(const Json& j) {
  return j.is_array() && !j.empty() ? 1 + json_depth(j.front()) : 0;
}

inline Json matrix_to_json(const MatrixXd& m) {
  Json out = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline Json vector_to_json(const VectorXd& v) {
  Json out = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

template <class T>
void read(const Json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

inline SamplerSchedule schedule_from_json(const Json& j, int n_x) {
  SamplerSchedule s;
  s.n_x = n_x;
  s.kind = schedule_kind_from_string(j.value("kind", std::string("privacy_aware")));
  s.feedback = j.value("feedback", false);
  if (s.degenerate()) return s;
  // f_chol: one matrix (depth <= 2) or a per-step list (depth 3).
  // g: one vector (depth <= 1) or a per-step list (depth 2).
  auto entries = [&](const char* key, int single_depth) {
    std::vector<MatrixXd> out;
    if (!j.contains(key)) return out;
    const Json& v = j.at(key);
    if (json_depth(v) > single_depth) {
      for (const auto& e : v) out.push_back(matrix_from_json(e, key));
    } else {
      out.push_back(matrix_from_json(v, key));
    }
    return out;
  };
  for (const auto& l : entries("f_chol", 2)) s.f_chol.push_back(l);
  if (s.f_chol.empty() && j.contains("f")) {
    const MatrixXd f = matrix_from_json(j.at("f"), "f");
    const Eigen::LLT<MatrixXd> llt(f);
    if (llt.info() != Eigen::Success) throw ConfigError("schedule.f must be SPD");
    s.f_chol.push_back(llt.matrixL());
  }
  for (const auto& g : entries("g", 1)) s.g.push_back(g.reshaped());
  if (s.g.empty()) s.g.push_back(VectorXd::Zero(n_x));
  if (s.f_chol.empty()) throw ConfigError("schedule: f_chol (or f) is required");
  return s;
}

inline Json schedule_to_json(const SamplerSchedule& s) {
  Json j{{"kind", to_string(s.kind)}, {"feedback", s.feedback}};
  if (s.degenerate()) return j;
  Json f = Json::array(), g = Json::array();
  for (const auto& l : s.f_chol) f.push_back(matrix_to_json(l));
  for (const auto& v : s.g) g.push_back(vector_to_json(v));
  j["f_chol"] = f;
  j["g"] = g;
  return j;
}

inline FiniteModel finite_from_json(const Json& j) {
  FiniteModel m;
  m.n_x = j.at("n_x").get<int>();
  m.n_y = j.at("n_y").get<int>();
  for (const auto& k : j.at("x_kernel")) m.x_kernel.push_back(matrix_from_json(k, "finite.x_kernel"));
  m.y_kernel = matrix_from_json(j.at("y_kernel"), "finite.y_kernel");
  m.init_joint = matrix_from_json(j.at("init_joint"), "finite.init_joint");
  m.distortion = matrix_from_json(j.at("distortion"), "finite.distortion");
  return m;
}

inline Json finite_to_json(const FiniteModel& m) {
  Json xk = Json::array();
  for (const auto& k : m.x_kernel) xk.push_back(matrix_to_json(k));
  return {{"n_x", m.n_x},
          {"n_y", m.n_y},
          {"x_kernel", xk},
          {"y_kernel", matrix_to_json(m.y_kernel)},
          {"init_joint", matrix_to_json(m.init_joint)},
          {"distortion", matrix_to_json(m.distortion)}};
}

}  // namespace detail

/// Parses a config document. Throws ConfigError on any malformed entry.
inline RunConfig parse_config(const Json& j) {
  RunConfig c;
  try {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    auto& s = c.system;
    detail::read(j, "nx", s.n_x);
    detail::read(j, "ny", s.n_y);
    if (j.contains("A")) s.a_matrix = detail::matrix_from_json(j.at("A"), "A");
    if (j.contains("Q")) s.q_cov = detail::matrix_from_json(j.at("Q"), "Q");
    if (j.contains("P0")) s.init_cov = detail::matrix_from_json(j.at("P0"), "P0");
    if (j.contains("mean0")) {
      s.init_mean = detail::matrix_from_json(j.at("mean0"), "mean0").reshaped();
    } else if (s.init_mean.size() != s.n()) {
      s.init_mean = VectorXd::Zero(s.n());
    }
    detail::read(j, "K", c.horizon);
    detail::read(j, "seed", c.seed);
    detail::read(j, "rollouts", c.rollouts);
    detail::read(j, "lambda", c.lambda);
    detail::read(j, "max_tracked_y", c.max_tracked_y);
    c.optimizer = SweepConfig::sweep_optimizer_config(c.horizon);
    if (j.contains("schedule")) {
      c.schedule = detail::schedule_from_json(j.at("schedule"), s.n_x);
    } else if (s.n_x != 1) {
      c.schedule = constant_schedule(MatrixXd::Identity(s.n_x, s.n_x) * 3.0, VectorXd::Zero(s.n_x), true);
    }
    if (j.contains("optimizer")) {
      const Json& o = j.at("optimizer");
      auto& oc = c.optimizer;
      detail::read(o, "alpha", oc.alpha);
      detail::read(o, "beta", oc.beta);
      detail::read(o, "rollouts_per_step", oc.rollouts_per_step);
      detail::read(o, "max_iters", oc.max_iters);
      detail::read(o, "tol", oc.tol);
      detail::read(o, "validation_every", oc.validation_every);
      detail::read(o, "validation_rollouts", oc.validation_rollouts);
      detail::read(o, "patience", oc.patience);
      detail::read(o, "clip_norm", oc.clip_norm);
      detail::read(o, "tied", oc.tied);
    }
    if (j.contains("sweep")) {
      const Json& w = j.at("sweep");
      detail::read(w, "lambdas", c.sweep.lambdas);
      detail::read(w, "open_loop_f", c.sweep.open_loop_f);
      detail::read(w, "noise_var", c.sweep.noise_var);
      detail::read(w, "f_init", c.sweep.f_init);
      detail::read(w, "endpoints", c.sweep.endpoints);
    }
    if (j.contains("rate_curve")) detail::read(j.at("rate_curve"), "target_rate", c.target_rate);
    if (j.contains("finite")) {
      const Json& f = j.at("finite");
      c.finite = detail::finite_from_json(f);
      detail::read(f, "K", c.finite_horizon);
      if (f.contains("grid")) {
        const Json& g = f.at("grid");
        detail::read(g, "resolution", c.grid.resolution);
        detail::read(g, "action_levels", c.grid.action_levels);
        detail::read(g, "refine_passes", c.grid.refine_passes);
        detail::read(g, "check_refinement", c.grid.check_refinement);
        detail::read(g, "refinement_tol", c.grid.refinement_tol);
      }
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.sync();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_config(j);
}

/// The effective configuration, in the same format parse_config reads.
inline Json to_json(const RunConfig& c) {
  const auto& s = c.system;
  const auto& o = c.optimizer;
  Json j{{"nx", s.n_x},
         {"ny", s.n_y},
         {"A", detail::matrix_to_json(s.a_matrix)},
         {"Q", detail::matrix_to_json(s.q_cov)},
         {"P0", detail::matrix_to_json(s.init_cov)},
         {"mean0", detail::vector_to_json(s.init_mean)},
         {"K", c.horizon},
         {"seed", c.seed},
         {"rollouts", c.rollouts},
         {"lambda", c.lambda},
         {"max_tracked_y", c.max_tracked_y},
         {"schedule", detail::schedule_to_json(c.schedule)},
         {"optimizer",
          {{"alpha", o.alpha},
           {"beta", o.beta},
           {"rollouts_per_step", o.rollouts_per_step},
           {"max_iters", o.max_iters},
           {"tol", o.tol},
           {"validation_every", o.validation_every},
           {"validation_rollouts", o.validation_rollouts},
           {"patience", o.patience},
           {"clip_norm", o.clip_norm},
           {"tied", o.tied}}},
         {"sweep",
          {{"lambdas", c.sweep.lambdas},
           {"open_loop_f", c.sweep.open_loop_f},
           {"noise_var", c.sweep.noise_var},
           {"f_init", c.sweep.f_init},
           {"endpoints", c.sweep.endpoints}}},
         {"rate_curve", {{"target_rate", c.target_rate}}}};
  if (c.finite) {
    Json f = detail::finite_to_json(*c.finite);
    f["K"] = c.finite_horizon;
    f["grid"] = {{"resolution", c.grid.resolution},
                 {"action_levels", c.grid.action_levels},
                 {"refine_passes", c.grid.refine_passes},
                 {"check_refinement", c.grid.check_refinement},
                 {"refinement_tol", c.grid.refinement_tol}};
    j["finite"] = f;
  }
  return j;
}

/// 64-bit FNV-1a hash of the canonical (sorted-key, compact) JSON dump.
inline std::uint64_t config_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace privsample
