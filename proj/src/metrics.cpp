#include "kelab/metrics.hpp"

#include <cmath>
#include <map>

namespace kelab {

double token_match_score(std::span<const int> predicted, std::span<const int> expected) {
  if (expected.empty()) {
    throw MetricError("token_match_score: expected sequence is empty");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (i < predicted.size() && predicted[i] == expected[i]) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(expected.size());
}

bool exact_match(std::span<const int> predicted, std::span<const int> expected) {
  return predicted.size() == expected.size() && std::equal(predicted.begin(), predicted.end(), expected.begin());
}

std::optional<double> edit_success(const TinyLM& model, std::span<const Probe> probes) {
  if (probes.empty()) {
    return std::nullopt;
  }
  double acc = 0.0;
  for (const Probe& p : probes) {
    acc += token_match_score(greedy_answer(model, p.prompt, p.expected.size()), p.expected);
  }
  return acc / static_cast<double>(probes.size());
}

std::optional<double> exact_match_rate(const TinyLM& model, std::span<const Probe> probes) {
  if (probes.empty()) {
    return std::nullopt;
  }
  std::size_t hits = 0;
  for (const Probe& p : probes) {
    hits += exact_match(greedy_answer(model, p.prompt, p.expected.size()), p.expected) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

double locality(const TinyLM& model_pre, const TinyLM& model_post, std::span<const Probe> probes) {
  if (probes.empty()) {
    throw MetricError("locality: empty probe set");
  }
  double acc = 0.0;
  for (const Probe& p : probes) {
    const std::size_t k = p.expected.size();
    acc += token_match_score(greedy_answer(model_post, p.prompt, k), greedy_answer(model_pre, p.prompt, k));
  }
  return acc / static_cast<double>(probes.size());
}

double portability(const TinyLM& model, std::span<const Probe> probes) {
  if (probes.empty()) {
    throw MetricError("portability: empty probe set");
  }
  return *edit_success(model, probes);
}

double ngram_entropy(std::span<const int> tokens, int n) {
  if (n < 1) {
    throw MetricError("ngram_entropy: n must be positive");
  }
  if (tokens.size() < static_cast<std::size_t>(n)) {
    throw MetricError("ngram_entropy: sequence of length " + std::to_string(tokens.size()) + " shorter than n=" +
                      std::to_string(n));
  }
  std::map<std::vector<int>, int> counts;
  const std::size_t total = tokens.size() - static_cast<std::size_t>(n) + 1;
  for (std::size_t i = 0; i < total; ++i) {
    counts[std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                            tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)] += 1;
  }
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h == 0.0 ? 0.0 : h;  // no negative zero
}

double fluency(const TinyLM& model, std::span<const TokenSeq> prompts, int gen_len) {
  if (gen_len < 3) {
    throw MetricError("fluency: gen_len must be >= 3, got " + std::to_string(gen_len));
  }
  if (prompts.empty()) {
    throw MetricError("fluency: no prompts");
  }
  double acc = 0.0;
  for (const TokenSeq& prompt : prompts) {
    const TokenSeq text = greedy_answer(model, prompt, static_cast<std::size_t>(gen_len));
    acc += 0.5 * (ngram_entropy(text, 2) + ngram_entropy(text, 3));
  }
  return acc / static_cast<double>(prompts.size());
}

}  // namespace kelab
