#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kelab/tiny_lm.hpp"

namespace kelab {

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Closed whitespace word-level vocabulary. Token ids are list positions.
class Vocabulary {
 public:
  explicit Vocabulary(std::vector<std::string> words);

  /// The fixed 64-word vocabulary of the synthetic fact world.
  static const Vocabulary& fact_world();

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;

  /// Splits on whitespace; unknown words throw VocabularyError.
  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const int> tokens) const;

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace kelab
