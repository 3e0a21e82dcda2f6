#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kelab/scoring.hpp"
#include "kelab/tiny_lm.hpp"

namespace kelab {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A prompt and the completion it should produce.
struct Probe {
  TokenSeq prompt;
  TokenSeq expected;
};

/// Fraction of positions where predicted matches expected; predicted is
/// truncated or padded (with non-matching slots) to |expected|.
double token_match_score(std::span<const int> predicted, std::span<const int> expected);
bool exact_match(std::span<const int> predicted, std::span<const int> expected);

/// Mean token match of greedy answers over exact and rephrased edit prompts.
/// std::nullopt for an empty probe list.
std::optional<double> edit_success(const TinyLM& model, std::span<const Probe> probes);

/// Mean token match of post-edit greedy answers against pre-edit greedy
/// answers; only the probe prompts and |expected| are used.
double locality(const TinyLM& model_pre, const TinyLM& model_post, std::span<const Probe> probes);

double portability(const TinyLM& model, std::span<const Probe> probes);

/// Base-2 Shannon entropy of the empirical n-gram distribution.
double ngram_entropy(std::span<const int> tokens, int n);

/// Mean over prompts of (H2 + H3) / 2 of a greedy continuation of `gen_len` tokens.
double fluency(const TinyLM& model, std::span<const TokenSeq> prompts, int gen_len = 20);

/// Strict whole-sequence accuracy, reported next to the token-level scores.
std::optional<double> exact_match_rate(const TinyLM& model, std::span<const Probe> probes);

}  // namespace kelab
