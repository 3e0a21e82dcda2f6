#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace kelab {

/// Scores for one request after the whole sequence has been applied.
struct RequestMetrics {
  int index = 0;
  std::string subject;
  std::string prompt;
  std::string target;
  std::string post_answer;
  double edit_success = 0.0;
  bool exact = false;
  std::optional<double> portability;
  std::optional<double> locality;
  int cycles_used = 0;
  int total_steps = 0;
  bool converged = false;
  double param_drift = 0.0;
};

/// Aggregates for one editing method over a sequential run. Optional fields
/// are n/a (no requests, or no probes of that kind).
struct MethodMetrics {
  std::string method;
  std::optional<double> edit_success;
  std::optional<double> exact_match;
  std::optional<double> portability;
  std::optional<double> locality;
  std::optional<double> fluency;
  std::optional<double> mean_cycles;
  int converged = 0;
  int total_steps = 0;
  std::vector<RequestMetrics> per_request;
};

/// A pairwise claim checked on the finished run, e.g. "kdpo locality >= dpo".
struct DirectionCheck {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  bool strict = false;
  bool holds = false;
};

struct MetricsReport {
  int n_edits = 0;
  std::optional<double> fluency_pre;
  std::vector<MethodMetrics> methods;
  std::vector<DirectionCheck> directions;
  /// Copied verbatim into the report; describes the run that produced it.
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json pretrain = nlohmann::json::object();
};

/// The formula choices every report carries so its numbers are self-describing.
nlohmann::json metric_formulas(int fluency_gen_len);

nlohmann::json to_json(const MetricsReport& report, int fluency_gen_len);
/// Edit Succ. / Portability / Locality / Fluency table, one row per method.
std::string to_markdown(const MetricsReport& report, int fluency_gen_len);
/// Per-method metric vectors for radar-style plots.
nlohmann::json plot_data(const MetricsReport& report);

/// Checks `name`: lhs >= rhs (or > when strict) on the two methods' locality.
/// Returns std::nullopt if either method or its locality is missing.
std::optional<DirectionCheck> locality_direction(const MetricsReport& report, const std::string& lhs_method,
                                                 const std::string& rhs_method, bool strict);

}  // namespace kelab
