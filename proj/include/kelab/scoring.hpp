#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "kelab/tiny_lm.hpp"

namespace kelab {

/// What conditions the k-th completion token when scoring.
enum class ContextMode {
  own_prefix,      // c + y^{<k}
  teacher_forced,  // c + forced^{<k}
};

/// How a negative completion is decoded.
enum class GenMode {
  teacher_forced,  // token k from c + y_w^{<k}
  free_running,    // token k from c + y_l^{<k}
};

std::string_view to_string(ContextMode mode);
std::string_view to_string(GenMode mode);
GenMode parse_gen_mode(std::string_view text);

struct ScoredCompletion {
  TokenSeq tokens;
  std::vector<double> per_token_logprob;
  double total_logprob = 0.0;
  ContextMode context_mode = ContextMode::own_prefix;
};

/// Throws ModelError when prompt + completion of length k would not fit.
void check_completion_fits(const TinyLM& model, std::span<const int> prompt, std::size_t k);

/// Log-softmax rows of the forward pass over prompt + context[0, k-1).
/// Row `prompt.size() - 1 + j` is the distribution of completion token j.
Var completion_log_softmax(Tape& tape, TinyLM& model, std::span<const int> prompt, std::span<const int> context,
                           std::size_t k);
Var completion_log_softmax(Tape& tape, const TinyLM& model, std::span<const int> prompt,
                           std::span<const int> context, std::size_t k);

/// K x 1 column of log pi(targets[j] | prompt, context^{<j}) picked from
/// completion_log_softmax output.
Var pick_completion(const Var& log_softmax, std::size_t prompt_len, std::span<const int> targets);

/// Chain-rule factors of pi(y | c) from a single forward pass. In
/// teacher_forced mode `forced` supplies the conditioning prefix and must hold
/// at least |y| - 1 tokens.
ScoredCompletion completion_logprob(const TinyLM& model, std::span<const int> prompt, std::span<const int> completion,
                                    ContextMode mode, std::span<const int> forced = {});

/// Greedy negative of exactly |y_w| tokens; ties go to the lowest token id.
TokenSeq generate_negative(const TinyLM& model, std::span<const int> prompt, std::span<const int> target,
                           GenMode mode);

/// Free-running greedy decode of exactly `k` tokens.
TokenSeq greedy_answer(const TinyLM& model, std::span<const int> prompt, std::size_t k);

}  // namespace kelab
