// privsample: experiments and validation for privacy-aware sampling.
//
//   privsample simulate       one seeded rollout, per-step CSV
//   privsample optimize       policy-gradient optimization trace at one lambda
//   privsample sweep-tradeoff optimized / open-loop / additive-noise error curves
//   privsample rate-curve     sampling rate vs x-error for optimized and open-loop
//   privsample finite-dp      grid dynamic program on a finite-alphabet model
//   privsample validate       acceptance checks, one line per criterion
//
// Exit codes: 0 success, 1 runtime or I/O error, 2 validation failure,
// 3 configuration error.

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "criteria.hpp"
#include "privsample/config.hpp"
#include "privsample/experiments.hpp"
#include "privsample/finite.hpp"
#include "privsample/io.hpp"
#include "privsample/optimizer.hpp"
#include "privsample/reconstruct.hpp"

using namespace privsample;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;
constexpr int kExitConfig = 3;

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<int> rollouts;
  std::optional<int> horizon;
  std::vector<int> criteria;
};

RunConfig effective_config(const Flags& f) {
  RunConfig c = f.config.empty() ? parse_config(Json::object()) : load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.lambda) c.lambda = *f.lambda;
  if (f.rollouts) c.rollouts = *f.rollouts;
  if (f.horizon) {
    // the optimizer step scales with the horizon unless the config set it
    const auto scaled = SweepConfig::sweep_optimizer_config(*f.horizon);
    const auto old = SweepConfig::sweep_optimizer_config(c.horizon);
    if (c.optimizer.alpha == old.alpha) c.optimizer.alpha = scaled.alpha;
    if (c.optimizer.clip_norm == old.clip_norm) c.optimizer.clip_norm = scaled.clip_norm;
    c.horizon = *f.horizon;
  }
  c.sync();
  c.validate();
  return c;
}

RunMetadata metadata(const std::string& command, const RunConfig& c, const Json& j) {
  return {command, config_hash(j), c.seed};
}

std::string out_path(const Flags& f, const std::string& command) {
  return f.out.empty() ? command + ".csv" : f.out;
}

// Column names for a vector quantity: "x" when scalar, else "x1", "x2", ...
std::vector<std::string> columns(const std::string& name, int n) {
  if (n == 1) return {name};
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back(name + std::to_string(i));
  return out;
}

void append(std::vector<std::string>& row, const VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) row.push_back(CsvTable::cell(v(i)));
}

void append_blank(std::vector<std::string>& row, int n) {
  for (int i = 0; i < n; ++i) row.emplace_back();
}

Json point_json(const CurvePoint& p) {
  return {{"family", p.family},         {"lambda", p.lambda},       {"param", p.param},
          {"x_error", p.x_error},       {"y_error", p.y_error},     {"sampling_rate", p.sampling_rate},
          {"leak_nats", p.leak_nats},   {"converged", p.converged}, {"iterations", p.iterations}};
}

CsvTable curve_table(const std::vector<std::vector<CurvePoint>>& families) {
  CsvTable t({"family", "lambda", "f_spec", "g_offset", "mean_x_error", "mean_y_error", "mean_leak_nats",
              "sampling_rate", "x_stderr", "y_stderr", "realized_x_error", "realized_y_error", "iterations",
              "converged"});
  for (const auto& fam : families) {
    for (const auto& p : fam) {
      t.row({p.family, CsvTable::cell(p.lambda), CsvTable::cell(p.param), CsvTable::cell(p.offset),
             CsvTable::cell(p.x_error), CsvTable::cell(p.y_error), CsvTable::cell(p.leak_nats),
             CsvTable::cell(p.sampling_rate), CsvTable::cell(p.x_stderr), CsvTable::cell(p.y_stderr),
             CsvTable::cell(p.realized_x_error), CsvTable::cell(p.realized_y_error), CsvTable::cell(p.iterations),
             CsvTable::cell(p.converged)});
    }
  }
  return t;
}

int cmd_simulate(const Flags& f) {
  const RunConfig c = effective_config(f);
  const Json cj = to_json(c);
  const auto& sys = c.system;
  const auto log = run_rollout(sys, noise_factors(sys), c.schedule, c.lambda, c.horizon, c.max_tracked_y, Rng(c.seed));
  std::vector<std::string> header{"k"};
  for (const auto& [name, n] : {std::pair{"x", sys.n_x}, std::pair{"y", sys.n_y}}) {
    for (auto& h : columns(name, n)) header.push_back(h);
  }
  header.push_back("N");
  header.push_back("z_present");
  for (auto& h : columns("x_hat", sys.n_x)) header.push_back(h);
  for (auto& h : columns("y_hat", sys.n_y)) header.push_back(h);
  CsvTable t(header);
  double x_err = 0.0, y_err = 0.0;
  int samples = 0;
  for (std::size_t k = 0; k < log.size(); ++k) {
    std::vector<std::string> row{CsvTable::cell(static_cast<int>(k))};
    append(row, log.states[k].x);
    append(row, log.states[k].y);
    row.push_back(CsvTable::cell(log.decisions[k]));
    row.push_back(CsvTable::cell(log.outputs[k].has_value()));
    append(row, log.reconstructions[k]);
    append(row, log.y_estimates[k]);
    t.row(row);
    x_err += (log.states[k].x - log.reconstructions[k]).squaredNorm() / log.size();
    y_err += (log.states[k].y - log.y_estimates[k]).squaredNorm() / log.size();
    samples += log.decisions[k];
  }
  const Json summary{{"sampling_rate", static_cast<double>(samples) / log.size()},
                     {"mean_x_error", x_err},
                     {"mean_y_error", y_err}};
  const std::string path = out_path(f, "simulate");
  write_outputs(path, t, metadata("simulate", c, cj), cj, summary);
  std::cout << "wrote " << path << " (" << log.size() << " steps, sampling rate "
            << summary["sampling_rate"].get<double>() << ")\n";
  return 0;
}

int cmd_optimize(const Flags& f) {
  const RunConfig c = effective_config(f);
  const Json cj = to_json(c);
  const OptimizeResult res = stackelberg_optimize(c.optimizer, c.system, c.lambda, c.schedule);
  CsvTable t({"iter", "objective", "stderr", "sampling_rate", "grad_norm_theta", "grad_norm_phi", "validation"});
  for (const auto& r : res.trace) {
    t.row({CsvTable::cell(r.iter), CsvTable::cell(r.objective), CsvTable::cell(r.stderr_),
           CsvTable::cell(r.sampling_rate), CsvTable::cell(r.grad_norm_theta), CsvTable::cell(r.grad_norm_phi),
           CsvTable::cell(r.validation)});
  }
  const Json summary{{"lambda", c.lambda},
                     {"best_objective", res.best_objective},
                     {"converged", res.converged},
                     {"iterations", res.iterations},
                     {"schedule", detail::schedule_to_json(res.schedule)}};
  const std::string path = out_path(f, "optimize");
  write_outputs(path, t, metadata("optimize", c, cj), cj, summary);
  std::cout << "wrote " << path << " (best objective " << res.best_objective << ", "
            << (res.converged ? "converged" : "not converged") << " after " << res.iterations << " iterations)\n";
  if (!res.converged) std::cerr << "privsample: optimizer reached max_iters; the best-seen schedule was kept\n";
  return 0;
}

int cmd_sweep_tradeoff(const Flags& f) {
  const RunConfig c = effective_config(f);
  const Json cj = to_json(c);
  const auto opt = optimized_family(c.system, c.sweep);
  const auto ol = open_loop_family(c.system, c.sweep);
  const auto add = additive_family(c.system, c.sweep);
  const auto cmp = compare_tradeoff(opt, ol, add);
  Json levels = Json::array();
  for (const auto& lv : cmp.levels) {
    levels.push_back({{"y_error", lv.y_error},
                      {"optimized_x", lv.optimized_x},
                      {"open_loop_x", lv.open_loop_x},
                      {"additive_x", lv.additive_x ? Json(*lv.additive_x) : Json()}});
  }
  const Json summary{{"matched_levels", levels},
                     {"dominated", cmp.dominated},
                     {"max_additive_gap", cmp.max_additive_gap}};
  const std::string path = out_path(f, "sweep-tradeoff");
  write_outputs(path, curve_table({opt, ol, add}), metadata("sweep-tradeoff", c, cj), cj, summary);
  std::cout << "wrote " << path << " (" << cmp.dominated << "/" << cmp.levels.size()
            << " matched y-error levels where optimized beats open-loop; max additive gap "
            << 100 * cmp.max_additive_gap << "%)\n";
  return 0;
}

int cmd_rate_curve(const Flags& f) {
  const RunConfig c = effective_config(f);
  const Json cj = to_json(c);
  const auto opt = optimized_family(c.system, c.sweep);
  auto ol = open_loop_family(c.system, c.sweep);
  const CurvePoint matched = open_loop_at_rate(c.system, c.target_rate, c.horizon, c.rollouts, c.seed);
  ol.push_back(matched);
  const RateComparison cmp = compare_rate(opt, matched);
  CsvTable t({"family", "lambda", "f_spec", "sampling_rate", "mean_x_error", "x_stderr"});
  for (const std::vector<CurvePoint>* fam : {&opt, &std::as_const(ol)}) {
    for (const auto& p : *fam) {
      t.row({p.family, CsvTable::cell(p.lambda), CsvTable::cell(p.param), CsvTable::cell(p.sampling_rate),
             CsvTable::cell(p.x_error), CsvTable::cell(p.x_stderr)});
    }
  }
  Json summary{{"target_rate", c.target_rate}, {"open_loop", point_json(matched)}, {"passes", cmp.passes()}};
  if (cmp.witness) summary["optimized"] = point_json(*cmp.witness);
  if (cmp.rate_at_match) summary["optimized_rate_at_matched_x_error"] = *cmp.rate_at_match;
  const std::string path = out_path(f, "rate-curve");
  write_outputs(path, t, metadata("rate-curve", c, cj), cj, summary);
  std::cout << "wrote " << path << " (open-loop rate " << matched.sampling_rate << " at x-error "
            << matched.x_error;
  if (cmp.rate_at_match) std::cout << "; optimized reaches it at rate " << *cmp.rate_at_match;
  std::cout << ")\n";
  return 0;
}

int cmd_finite_dp(const Flags& f) {
  const RunConfig c = effective_config(f);
  if (!c.finite) throw ConfigError("finite-dp needs a \"finite\" model in the config");
  const Json cj = to_json(c);
  const FiniteModel& m = *c.finite;
  const DpResult dp = dp_solve(m, c.lambda, c.finite_horizon, c.grid);
  std::vector<std::string> header{"stage", "node"};
  for (int x = 0; x < m.n_x; ++x) {
    for (int y = 0; y < m.n_y; ++y) header.push_back("b_x" + std::to_string(x) + "_y" + std::to_string(y));
  }
  header.push_back("value");
  for (int x = 0; x < m.n_x; ++x) header.push_back("a_x" + std::to_string(x));
  CsvTable t(header);
  for (std::size_t k = 0; k < dp.values.size(); ++k) {
    for (std::size_t i = 0; i < dp.nodes.size(); ++i) {
      std::vector<std::string> row{CsvTable::cell(static_cast<int>(k)), CsvTable::cell(static_cast<int>(i))};
      append(row, dp.nodes[i]);
      row.push_back(CsvTable::cell(dp.values[k][i]));
      if (dp.actions[k][i].empty()) {
        append_blank(row, m.n_x);
      } else {
        for (double a : dp.actions[k][i]) row.push_back(CsvTable::cell(a));
      }
      t.row(row);
    }
  }
  const Json summary{{"value", dp.value},
                     {"policy_value", dp.policy_value},
                     {"coarse_value", dp.coarse_value},
                     {"resolution_bound", dp.resolution_bound},
                     {"root_action", dp.root_action}};
  const std::string path = out_path(f, "finite-dp");
  write_outputs(path, t, metadata("finite-dp", c, cj), cj, summary);
  std::cout << "wrote " << path << " (V0 " << dp.value << " +/- " << dp.resolution_bound << ", greedy policy value "
            << dp.policy_value << ")\n";
  return 0;
}

int cmd_validate(const Flags& f) {
  acceptance::Options opt;
  if (f.seed) opt.seed = *f.seed;
  if (f.rollouts) opt.rollouts = *f.rollouts;
  if (f.horizon) opt.horizon = *f.horizon;
  int failed = 0;
  const auto results = acceptance::run(opt, f.criteria, [&](const acceptance::CriterionResult& r) {
    std::cout << acceptance::format(r) << std::flush;
    failed += !r.passed;
  });
  if (!f.out.empty()) {
    CsvTable t({"criterion", "module", "name", "passed", "seconds", "failures"});
    for (const auto& r : results) {
      std::string fails;
      for (const auto& s : r.failures) fails += (fails.empty() ? "" : "; ") + s;
      t.row({CsvTable::cell(r.id), r.module, "\"" + r.name + "\"", CsvTable::cell(r.passed),
             CsvTable::cell(r.seconds), "\"" + fails + "\""});
    }
    const Json cj{{"seed", opt.seed}, {"rollouts", opt.rollouts}, {"K", opt.horizon}, {"criteria", f.criteria}};
    write_outputs(f.out, t, {"validate", config_hash(cj), opt.seed}, cj, {{"failed", failed}});
  }
  std::cout << results.size() - failed << "/" << results.size() << " criteria passed\n";
  return failed == 0 ? 0 : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Privacy-aware sampling and reconstruction of linear-Gaussian and finite processes"};
  app.require_subcommand(1);
  Flags flags;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  int rollouts = 0, horizon = 0;
  app.add_option("--config", flags.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", flags.out, "output CSV path (a .json sidecar is written next to it)");
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed");
  auto* lambda_opt = app.add_option("--lambda", lambda, "privacy weight")->check(CLI::NonNegativeNumber);
  auto* rollouts_opt = app.add_option("--rollouts", rollouts, "Monte Carlo rollouts per evaluation")
                           ->check(CLI::PositiveNumber);
  auto* horizon_opt = app.add_option("--horizon", horizon, "horizon K")->check(CLI::NonNegativeNumber);
  app.fallthrough();

  using Command = int (*)(const Flags&);
  std::vector<std::pair<CLI::App*, Command>> commands{
      {app.add_subcommand("simulate", "one seeded rollout of the configured schedule"), cmd_simulate},
      {app.add_subcommand("optimize", "optimize the configured schedule at --lambda"), cmd_optimize},
      {app.add_subcommand("sweep-tradeoff", "x-error vs y-error curves of the three families"), cmd_sweep_tradeoff},
      {app.add_subcommand("rate-curve", "sampling rate vs x-error, optimized vs open-loop"), cmd_rate_curve},
      {app.add_subcommand("finite-dp", "grid dynamic program on the configured finite model"), cmd_finite_dp},
      {app.add_subcommand("validate", "run the acceptance checks"), cmd_validate},
  };
  commands.back().first->add_option("criteria", flags.criteria, "criterion ids (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  if (*seed_opt) flags.seed = seed;
  if (*lambda_opt) flags.lambda = lambda;
  if (*rollouts_opt) flags.rollouts = rollouts;
  if (*horizon_opt) flags.horizon = horizon;

  try {
    for (const auto& [sub, fn] : commands) {
      if (*sub) return fn(flags);
    }
  } catch (const ConfigError& e) {
    std::cerr << "privsample: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "privsample: invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "privsample: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}
