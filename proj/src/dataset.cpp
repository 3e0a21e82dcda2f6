#include "kelab/dataset.hpp"

#include <fstream>
#include <set>

namespace kelab {

using nlohmann::json;

namespace {

std::string required_string(const json& rec, std::size_t index, const char* field) {
  const auto it = rec.find(field);
  if (it == rec.end()) {
    throw DatasetError("record " + std::to_string(index) + ": missing required field '" + field + "'");
  }
  if (!it->is_string()) {
    throw DatasetError("record " + std::to_string(index) + ": field '" + field + "' must be a string");
  }
  return it->get<std::string>();
}

// KnowEdit stores some answers as a list of aliases; the first is canonical.
std::string answer_text(const json& v, std::size_t index, const std::string& where) {
  if (v.is_string()) {
    return v.get<std::string>();
  }
  if (v.is_array() && !v.empty()) {
    return answer_text(v.front(), index, where);
  }
  throw DatasetError("record " + std::to_string(index) + ": " + where + " must be a string or non-empty array");
}

ProbeGroups parse_groups(const json& v, std::size_t index, const char* field) {
  ProbeGroups out;
  if (v.is_null()) {
    return out;
  }
  if (!v.is_object()) {
    throw DatasetError("record " + std::to_string(index) + ": field '" + field + "' must be an object");
  }
  for (const auto& [category, items] : v.items()) {
    const std::string where = std::string(field) + "." + category;
    if (!items.is_array()) {
      throw DatasetError("record " + std::to_string(index) + ": " + where + " must be an array");
    }
    auto& group = out[category];
    for (const json& item : items) {
      if (!item.is_object() || !item.contains("prompt") || !item.contains("ground_truth")) {
        throw DatasetError("record " + std::to_string(index) + ": " + where +
                           " entries need 'prompt' and 'ground_truth'");
      }
      group.push_back(ProbeText{answer_text(item["prompt"], index, where + ".prompt"),
                                answer_text(item["ground_truth"], index, where + ".ground_truth")});
    }
  }
  return out;
}

json groups_to_json(const ProbeGroups& groups) {
  json out = json::object();
  for (const auto& [category, probes] : groups) {
    json arr = json::array();
    for (const ProbeText& p : probes) {
      arr.push_back({{"prompt", p.prompt}, {"ground_truth", p.ground_truth}});
    }
    out[category] = std::move(arr);
  }
  return out;
}

}  // namespace

std::vector<EditRequest> parse_dataset(const json& doc) {
  if (!doc.is_array()) {
    throw DatasetError("dataset must be a JSON array of records");
  }
  std::vector<EditRequest> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& rec = doc[i];
    if (!rec.is_object()) {
      throw DatasetError("record " + std::to_string(i) + ": not a JSON object");
    }
    EditRequest r;
    r.subject = required_string(rec, i, "subject");
    r.prompt = required_string(rec, i, "prompt");
    r.target_new = required_string(rec, i, "target_new");
    if (const auto it = rec.find("ground_truth"); it != rec.end() && !it->is_null()) {
      r.ground_truth = answer_text(*it, i, "ground_truth");
    }
    if (const auto it = rec.find("rephrase"); it != rec.end() && !it->is_null()) {
      if (it->is_string()) {
        r.rephrase_prompts.push_back(it->get<std::string>());
      } else if (it->is_array()) {
        for (const json& p : *it) {
          if (!p.is_string()) {
            throw DatasetError("record " + std::to_string(i) + ": rephrase entries must be strings");
          }
          r.rephrase_prompts.push_back(p.get<std::string>());
        }
      } else {
        throw DatasetError("record " + std::to_string(i) + ": rephrase must be a string or array");
      }
    }
    if (const auto it = rec.find("portability"); it != rec.end()) {
      r.portability = parse_groups(*it, i, "portability");
    }
    if (const auto it = rec.find("locality"); it != rec.end()) {
      r.locality = parse_groups(*it, i, "locality");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EditRequest> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DatasetError("cannot read dataset '" + path + "'");
  }
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw DatasetError("dataset '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_dataset(doc);
}

json to_json(const EditRequest& r) {
  json out = {{"subject", r.subject}, {"prompt", r.prompt}, {"target_new", r.target_new}};
  if (r.ground_truth) {
    out["ground_truth"] = *r.ground_truth;
  }
  if (!r.rephrase_prompts.empty()) {
    out["rephrase"] = r.rephrase_prompts;
  }
  if (!r.portability.empty()) {
    out["portability"] = groups_to_json(r.portability);
  }
  if (!r.locality.empty()) {
    out["locality"] = groups_to_json(r.locality);
  }
  return out;
}

json to_json(const std::vector<EditRequest>& requests) {
  json out = json::array();
  for (const EditRequest& r : requests) {
    out.push_back(to_json(r));
  }
  return out;
}

void save_dataset(const std::vector<EditRequest>& requests, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw DatasetError("cannot write dataset '" + path + "'");
  }
  out << to_json(requests).dump(2) << '\n';
}

std::string relation_key(const EditRequest& request) {
  std::string key = request.prompt;
  if (!request.subject.empty()) {
    std::size_t pos = 0;
    while ((pos = key.find(request.subject, pos)) != std::string::npos) {
      key.replace(pos, request.subject.size(), "{}");
      pos += 2;
    }
  }
  return key;
}

std::vector<EditRequest> dedup_by_subject(const std::vector<EditRequest>& requests) {
  std::set<std::pair<std::string, std::string>> seen;
  std::vector<EditRequest> out;
  for (const EditRequest& r : requests) {
    if (seen.emplace(r.subject, relation_key(r)).second) {
      out.push_back(r);
    }
  }
  return out;
}

EditTokens tokenize_edit(const EditRequest& request, const Vocabulary& vocab) {
  EditTokens t{vocab.encode(request.prompt), vocab.encode(request.target_new)};
  if (t.prompt.empty()) {
    throw VocabularyError("edit prompt tokenizes to nothing");
  }
  if (t.target.empty()) {
    throw VocabularyError("target_new tokenizes to nothing");
  }
  return t;
}

std::vector<Probe> rephrase_probes(const EditRequest& request, const Vocabulary& vocab) {
  std::vector<Probe> out;
  const TokenSeq target = vocab.encode(request.target_new);
  out.push_back(Probe{vocab.encode(request.prompt), target});
  for (const std::string& p : request.rephrase_prompts) {
    out.push_back(Probe{vocab.encode(p), target});
  }
  return out;
}

std::vector<Probe> group_probes(const ProbeGroups& groups, const Vocabulary& vocab) {
  std::vector<Probe> out;
  for (const auto& [category, probes] : groups) {
    for (const ProbeText& p : probes) {
      out.push_back(Probe{vocab.encode(p.prompt), vocab.encode(p.ground_truth)});
    }
  }
  return out;
}

}  // namespace kelab
