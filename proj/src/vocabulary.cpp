#include "kelab/vocabulary.hpp"

#include <sstream>

#include "kelab/fact_world.hpp"

namespace kelab {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const auto [it, fresh] = index_.emplace(words_[i], static_cast<int>(i));
    if (!fresh) {
      throw VocabularyError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

const Vocabulary& Vocabulary::fact_world() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> words{"."};
    for (const auto* list : {&world_words::relations, &world_words::countries, &world_words::cities,
                             &world_words::companies, &world_words::first_names, &world_words::last_names}) {
      words.insert(words.end(), list->begin(), list->end());
    }
    return Vocabulary(std::move(words));
  }();
  return vocab;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  if (it == index_.end()) {
    throw VocabularyError("word '" + std::string(word) + "' is not in the vocabulary");
  }
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) {
    throw VocabularyError("token id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode(std::string_view text) const {
  TokenSeq out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) {
    out.push_back(id(w));
  }
  return out;
}

std::string Vocabulary::decode(std::span<const int> tokens) const {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) {
      out += ' ';
    }
    out += word(t);
  }
  return out;
}

}  // namespace kelab
