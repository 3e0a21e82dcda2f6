#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kelab/dataset.hpp"

namespace kelab {

namespace world_words {

inline const std::vector<std::string> relations{"bornin", "worksfor", "livesin", "locatedin"};
inline const std::vector<std::string> countries{"france", "italy",  "spain",  "germany",
                                                "japan",  "brazil", "canada", "egypt"};
// Two cities per country, in country order.
inline const std::vector<std::string> cities{"paris", "lyon",   "rome",   "milan",   "madrid",  "seville",
                                             "berlin", "munich", "tokyo",  "osaka",   "rio",     "santos",
                                             "toronto", "montreal", "cairo", "giza"};
inline const std::vector<std::string> companies{"acme", "globex", "initech", "umbrella",
                                                "hooli", "vandelay", "stark", "wayne"};
inline const std::vector<std::string> first_names{"alice", "bruno", "chen", "dana", "emil", "farah", "goran",
                                                  "hana",  "ivan",  "jules", "kira", "liam", "mona", "nils"};
inline const std::vector<std::string> last_names{"ortiz", "park", "quinn", "reyes", "silva", "tanaka", "ueda",
                                                 "vance", "weber", "xu", "young", "zhang", "abe"};

}  // namespace world_words

struct FactWorldOptions {
  std::uint64_t seed = 0;
  int n_subjects = 100;
  /// 1..3 of bornin, worksfor, livesin (in that order).
  int n_relations = 2;
  /// Subjects that receive a counterfactual edit request; the rest are held out.
  int n_requests = 40;
};

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;  // "city country" for place relations, "company" otherwise

  std::string prompt() const { return subject + " " + relation; }
  std::string sentence() const { return prompt() + " " + object + " ."; }
};

struct FactWorld {
  FactWorldOptions options;
  std::vector<std::string> subjects;
  std::vector<std::string> relations;
  std::vector<Fact> base_facts;
  /// "city locatedin country" chains backing one-hop portability.
  std::vector<Fact> hop_facts;
};

struct GeneratedWorld {
  FactWorld world;
  std::vector<std::string> corpus;
  std::vector<EditRequest> requests;
};

/// Deterministic in options.seed. Throws std::invalid_argument when the
/// closed vocabulary does not fit `vocab_size` or the options are out of range.
GeneratedWorld gen_fact_world(const FactWorldOptions& options, int vocab_size);

std::string country_of(const std::string& city);

/// Base facts as (prompt, object) probes.
std::vector<Probe> fact_probes(const FactWorld& world, const Vocabulary& vocab);

}  // namespace kelab
