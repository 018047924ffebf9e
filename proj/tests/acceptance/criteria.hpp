#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "privsample/experiments.hpp"

namespace acceptance {

struct CriterionResult {
  int id = 0;
  std::string module;
  std::string name;
  bool passed = false;
  double seconds = 0.0;
  double budget_seconds = 0.0;  // 0 when the criterion states no runtime limit
  std::vector<std::string> notes;     // observed values
  std::vector<std::string> failures;  // invariant, observed vs expected
};

/// Sweep outputs shared by the two directional criteria.
struct DirectionalData {
  std::vector<privsample::CurvePoint> optimized, open_loop, additive;
  privsample::TradeoffComparison tradeoff;
  double sweep_seconds = 0.0;
};

struct Options {
  std::uint64_t seed = 20240601;
  int rollouts = 10000;  // directional criteria
  int horizon = 100;
};

CriterionResult closed_form_vs_monte_carlo(const Options& opt);
CriterionResult belief_vs_quadrature_bayes(const Options& opt);
CriterionResult always_sample_vs_unrolled(const Options& opt);
CriterionResult one_step_loss_vs_quadrature(const Options& opt);
CriterionResult determinant_identity(const Options& opt);
CriterionResult gradient_checks(const Options& opt);
CriterionResult finite_equivalences(const Options& opt);
CriterionResult dp_optimality(const Options& opt);
CriterionResult tradeoff_direction(const Options& opt, DirectionalData& data);
CriterionResult rate_direction(const Options& opt, DirectionalData& data);

/// Runs the selected criteria (all when `ids` is empty) in order; `report`
/// sees each result as soon as it is available.
std::vector<CriterionResult> run(const Options& opt, const std::vector<int>& ids,
                                 const std::function<void(const CriterionResult&)>& report);

/// One summary line plus indented notes and failures.
std::string format(const CriterionResult& r);

}  // namespace acceptance
