#include "kelab/report.hpp"

#include <cstdio>
#include <sstream>

namespace kelab {

using nlohmann::json;

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string percent(const std::optional<double>& v) {
  if (!v) {
    return "n/a";
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}

std::string plain(const std::optional<double>& v) {
  if (!v) {
    return "n/a";
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", *v);
  return buf;
}

const MethodMetrics* find_method(const MetricsReport& report, const std::string& name) {
  for (const MethodMetrics& m : report.methods) {
    if (m.method == name) {
      return &m;
    }
  }
  return nullptr;
}

json request_json(const RequestMetrics& r) {
  return {{"index", r.index},
          {"subject", r.subject},
          {"prompt", r.prompt},
          {"target", r.target},
          {"post_answer", r.post_answer},
          {"edit_success", r.edit_success},
          {"exact", r.exact},
          {"portability", opt(r.portability)},
          {"locality", opt(r.locality)},
          {"cycles_used", r.cycles_used},
          {"total_steps", r.total_steps},
          {"converged", r.converged},
          {"param_drift", r.param_drift}};
}

}  // namespace

json metric_formulas(int fluency_gen_len) {
  return {
      {"match_rule", "token-level: fraction of the |expected| positions where the greedy free-running answer "
                     "equals the expected token (answers are truncated or padded to |expected|)"},
      {"edit_success", "mean token match over each request's prompt and rephrasings, expected = target_new"},
      {"exact_match", "fraction of edit prompts whose greedy answer equals target_new exactly"},
      {"portability", "mean token match of greedy answers against the portability probes' answers"},
      {"locality", "mean token match of post-edit greedy answers against pre-edit greedy answers on the "
                   "locality probes (not against ground truth)"},
      {"fluency", "mean over edit prompts of (H2 + H3) / 2, Hn the Shannon entropy of the n-gram "
                  "distribution of a greedy continuation"},
      {"entropy_base", 2},
      {"fluency_gen_len", fluency_gen_len},
      {"ft_l_loss", "cross-entropy over every next-token position of prompt + target (prompt not masked)"},
  };
}

json to_json(const MetricsReport& report, int fluency_gen_len) {
  json methods = json::array();
  for (const MethodMetrics& m : report.methods) {
    json per = json::array();
    for (const RequestMetrics& r : m.per_request) {
      per.push_back(request_json(r));
    }
    methods.push_back({{"method", m.method},
                       {"edit_success", opt(m.edit_success)},
                       {"exact_match", opt(m.exact_match)},
                       {"portability", opt(m.portability)},
                       {"locality", opt(m.locality)},
                       {"fluency", opt(m.fluency)},
                       {"mean_cycles", opt(m.mean_cycles)},
                       {"converged", m.converged},
                       {"total_steps", m.total_steps},
                       {"per_request", std::move(per)}});
  }
  json directions = json::array();
  for (const DirectionCheck& d : report.directions) {
    directions.push_back(
        {{"name", d.name}, {"lhs", d.lhs}, {"rhs", d.rhs}, {"strict", d.strict}, {"holds", d.holds}});
  }
  return {{"schema", "kelab-report-v1"},
          {"formulas", metric_formulas(fluency_gen_len)},
          {"config", report.config},
          {"pretrain", report.pretrain},
          {"n_edits", report.n_edits},
          {"fluency_pre", opt(report.fluency_pre)},
          {"methods", std::move(methods)},
          {"directions", std::move(directions)}};
}

std::string to_markdown(const MetricsReport& report, int fluency_gen_len) {
  std::ostringstream out;
  out << "# Sequential editing report\n\n";
  out << "N = " << report.n_edits << " sequential edits, evaluated after the whole sequence.\n\n";
  out << "| Method | Edit Succ. | Portability | Locality | Fluency |\n";
  out << "|---|---|---|---|---|\n";
  for (const MethodMetrics& m : report.methods) {
    out << "| " << m.method << " | " << percent(m.edit_success) << " | " << percent(m.portability) << " | "
        << percent(m.locality) << " | " << plain(m.fluency) << " |\n";
  }
  out << "\nPre-edit fluency: " << plain(report.fluency_pre) << "\n\n";

  out << "| Method | Exact match | Mean cycles | Converged | Steps |\n";
  out << "|---|---|---|---|---|\n";
  for (const MethodMetrics& m : report.methods) {
    out << "| " << m.method << " | " << percent(m.exact_match) << " | " << plain(m.mean_cycles) << " | "
        << m.converged << "/" << m.per_request.size() << " | " << m.total_steps << " |\n";
  }

  if (!report.directions.empty()) {
    out << "\n## Direction checks\n\n";
    for (const DirectionCheck& d : report.directions) {
      out << "- " << d.name << ": " << plain(d.lhs) << (d.strict ? " > " : " >= ") << plain(d.rhs) << " "
          << (d.holds ? "holds" : "FAILS") << "\n";
    }
  }

  out << "\n## Formulas\n\n";
  out << "Edit Succ., Portability and Locality are percentages; Fluency is in bits.\n\n";
  const json formulas = metric_formulas(fluency_gen_len);
  for (const auto& [key, value] : formulas.items()) {
    out << "- " << key << ": " << (value.is_string() ? value.get<std::string>() : value.dump()) << "\n";
  }
  return out.str();
}

json plot_data(const MetricsReport& report) {
  json series = json::array();
  for (const MethodMetrics& m : report.methods) {
    json cycles = json::array();
    json drift = json::array();
    for (const RequestMetrics& r : m.per_request) {
      cycles.push_back(r.cycles_used);
      drift.push_back(r.param_drift);
    }
    series.push_back({{"method", m.method},
                      {"values", {opt(m.edit_success), opt(m.portability), opt(m.locality), opt(m.fluency)}},
                      {"cycles_per_edit", std::move(cycles)},
                      {"param_drift_per_edit", std::move(drift)}});
  }
  return {{"axes", {"Edit Succ.", "Portability", "Locality", "Fluency"}},
          {"n_edits", report.n_edits},
          {"series", std::move(series)}};
}

std::optional<DirectionCheck> locality_direction(const MetricsReport& report, const std::string& lhs_method,
                                                 const std::string& rhs_method, bool strict) {
  const MethodMetrics* a = find_method(report, lhs_method);
  const MethodMetrics* b = find_method(report, rhs_method);
  if (a == nullptr || b == nullptr || !a->locality || !b->locality) {
    return std::nullopt;
  }
  DirectionCheck d;
  d.name = lhs_method + " locality " + (strict ? ">" : ">=") + " " + rhs_method + " locality";
  d.lhs = *a->locality;
  d.rhs = *b->locality;
  d.strict = strict;
  d.holds = strict ? d.lhs > d.rhs : d.lhs >= d.rhs;
  return d;
}

}  // namespace kelab
