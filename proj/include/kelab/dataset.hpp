#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "kelab/editors.hpp"
#include "kelab/metrics.hpp"
#include "kelab/vocabulary.hpp"

namespace kelab {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbeText {
  std::string prompt;
  std::string ground_truth;
  bool operator==(const ProbeText&) const = default;
};

/// Probes grouped by category name (e.g. "One_Hop", "Neighborhood").
using ProbeGroups = std::map<std::string, std::vector<ProbeText>>;

/// One edit request in the KnowEdit-style record layout.
struct EditRequest {
  std::string subject;
  std::string prompt;
  std::string target_new;
  std::optional<std::string> ground_truth;
  std::vector<std::string> rephrase_prompts;
  ProbeGroups portability;
  ProbeGroups locality;

  bool operator==(const EditRequest&) const = default;
};

/// Parses a JSON array of records. Required per record: subject, prompt,
/// target_new. Optional: ground_truth, rephrase (string or array),
/// portability / locality (objects of category -> [{prompt, ground_truth}]).
/// Unknown fields are ignored; errors name the record index and field.
std::vector<EditRequest> parse_dataset(const nlohmann::json& doc);
std::vector<EditRequest> load_dataset(const std::string& path);

nlohmann::json to_json(const EditRequest& request);
nlohmann::json to_json(const std::vector<EditRequest>& requests);
void save_dataset(const std::vector<EditRequest>& requests, const std::string& path);

/// Prompt with the subject replaced by "{}"; identifies the relation asked.
std::string relation_key(const EditRequest& request);

/// Keeps the first request per (subject, relation_key); order preserved.
std::vector<EditRequest> dedup_by_subject(const std::vector<EditRequest>& requests);

/// Token-space views of a request; throw VocabularyError / ModelError when a
/// field does not tokenize or fit the model context.
EditTokens tokenize_edit(const EditRequest& request, const Vocabulary& vocab);
std::vector<Probe> rephrase_probes(const EditRequest& request, const Vocabulary& vocab);
std::vector<Probe> group_probes(const ProbeGroups& groups, const Vocabulary& vocab);

}  // namespace kelab
