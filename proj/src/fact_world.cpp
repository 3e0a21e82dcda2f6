#include "kelab/fact_world.hpp"

#include <random>
#include <stdexcept>

namespace kelab {

namespace {

// Plain modulo draws keep the world byte-identical across standard libraries,
// unlike std::uniform_int_distribution.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[draw(rng, i)]);
  }
}

bool is_place_relation(const std::string& relation) { return relation == "bornin" || relation == "livesin"; }

std::string place_object(const std::string& city) { return city + " " + country_of(city); }

}  // namespace

std::string country_of(const std::string& city) {
  const auto& cities = world_words::cities;
  for (std::size_t i = 0; i < cities.size(); ++i) {
    if (cities[i] == city) {
      return world_words::countries[i / 2];
    }
  }
  throw std::invalid_argument("unknown city '" + city + "'");
}

GeneratedWorld gen_fact_world(const FactWorldOptions& options, int vocab_size) {
  const Vocabulary& vocab = Vocabulary::fact_world();
  if (vocab.size() > vocab_size) {
    throw std::invalid_argument("fact world needs " + std::to_string(vocab.size()) + " tokens but vocab_size is " +
                                std::to_string(vocab_size));
  }
  const std::size_t max_subjects = world_words::first_names.size() * world_words::last_names.size();
  if (options.n_subjects < 1 || static_cast<std::size_t>(options.n_subjects) > max_subjects) {
    throw std::invalid_argument("n_subjects must be in [1, " + std::to_string(max_subjects) + "]");
  }
  if (options.n_relations < 1 || options.n_relations > 3) {
    throw std::invalid_argument("n_relations must be in [1, 3]");
  }
  if (options.n_requests < 0 || options.n_requests > options.n_subjects) {
    throw std::invalid_argument("n_requests must be in [0, n_subjects]");
  }

  std::mt19937_64 rng(options.seed);
  GeneratedWorld out;
  FactWorld& world = out.world;
  world.options = options;

  std::vector<std::string> pool;
  for (const auto& f : world_words::first_names) {
    for (const auto& l : world_words::last_names) {
      pool.push_back(f + " " + l);
    }
  }
  shuffle(pool, rng);
  world.subjects.assign(pool.begin(), pool.begin() + options.n_subjects);
  world.relations.assign(world_words::relations.begin(), world_words::relations.begin() + options.n_relations);

  const auto& cities = world_words::cities;
  const auto& companies = world_words::companies;
  for (const std::string& s : world.subjects) {
    for (const std::string& r : world.relations) {
      const std::string object =
          is_place_relation(r) ? place_object(cities[draw(rng, cities.size())]) : companies[draw(rng, companies.size())];
      world.base_facts.push_back(Fact{s, r, object});
    }
  }
  for (const std::string& c : cities) {
    world.hop_facts.push_back(Fact{c, "locatedin", country_of(c)});
  }
  for (const Fact& f : world.base_facts) {
    out.corpus.push_back(f.sentence());
  }
  for (const Fact& f : world.hop_facts) {
    out.corpus.push_back(f.sentence());
  }

  // Facts of subjects without a request become locality probes, dealt round
  // robin across the requests.
  const std::size_t n_req = static_cast<std::size_t>(options.n_requests);
  const std::size_t per_subject = world.relations.size();
  std::vector<const Fact*> held_out;
  for (std::size_t i = n_req * per_subject; i < world.base_facts.size(); ++i) {
    held_out.push_back(&world.base_facts[i]);
  }

  std::vector<std::string> place_relations;
  for (const std::string& r : world.relations) {
    if (is_place_relation(r)) {
      place_relations.push_back(r);
    }
  }
  for (std::size_t i = 0; i < n_req; ++i) {
    const std::string& subject = world.subjects[i];
    const std::string& relation = place_relations[i % place_relations.size()];
    const Fact* old = nullptr;
    for (std::size_t j = i * per_subject; j < (i + 1) * per_subject; ++j) {
      if (world.base_facts[j].relation == relation) {
        old = &world.base_facts[j];
      }
    }
    const std::string old_city = old->object.substr(0, old->object.find(' '));
    std::string new_city;
    do {
      new_city = cities[draw(rng, cities.size())];
    } while (country_of(new_city) == country_of(old_city));

    EditRequest req;
    req.subject = subject;
    req.prompt = old->prompt();
    req.target_new = place_object(new_city);
    req.ground_truth = old->object;
    req.portability["One_Hop"].push_back(ProbeText{req.prompt + " " + new_city, country_of(new_city)});
    for (std::size_t j = i; j < held_out.size(); j += n_req) {
      req.locality["Neighborhood"].push_back(ProbeText{held_out[j]->prompt(), held_out[j]->object});
    }
    out.requests.push_back(std::move(req));
  }
  return out;
}

std::vector<Probe> fact_probes(const FactWorld& world, const Vocabulary& vocab) {
  std::vector<Probe> out;
  out.reserve(world.base_facts.size());
  for (const Fact& f : world.base_facts) {
    out.push_back(Probe{vocab.encode(f.prompt()), vocab.encode(f.object)});
  }
  return out;
}

}  // namespace kelab
