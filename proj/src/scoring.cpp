#include "kelab/scoring.hpp"

#include <string>

namespace kelab {

std::string_view to_string(ContextMode mode) {
  return mode == ContextMode::own_prefix ? "own_prefix" : "teacher_forced";
}

std::string_view to_string(GenMode mode) {
  return mode == GenMode::teacher_forced ? "teacher_forced" : "free_running";
}

GenMode parse_gen_mode(std::string_view text) {
  if (text == "teacher_forced") {
    return GenMode::teacher_forced;
  }
  if (text == "free_running") {
    return GenMode::free_running;
  }
  throw ModelError("unknown generation mode '" + std::string(text) + "'");
}

void check_completion_fits(const TinyLM& model, std::span<const int> prompt, std::size_t k) {
  if (prompt.empty()) {
    throw ModelError("empty prompt");
  }
  if (k == 0) {
    throw ModelError("empty completion");
  }
  const std::size_t need = prompt.size() + k;
  if (need > static_cast<std::size_t>(model.config().max_ctx)) {
    throw ModelError("prompt (" + std::to_string(prompt.size()) + ") + completion (" + std::to_string(k) +
                     ") overflows max_ctx " + std::to_string(model.config().max_ctx));
  }
}

namespace {

TokenSeq joined_input(std::span<const int> prompt, std::span<const int> context, std::size_t k) {
  if (context.size() + 1 < k) {
    throw ModelError("conditioning prefix has " + std::to_string(context.size()) + " tokens, need " +
                     std::to_string(k - 1));
  }
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), context.begin(), context.begin() + static_cast<std::ptrdiff_t>(k - 1));
  return seq;
}

template <typename Model>
Var completion_log_softmax_impl(Tape& tape, Model& model, std::span<const int> prompt, std::span<const int> context,
                                std::size_t k) {
  check_completion_fits(model, prompt, k);
  const TokenSeq seq = joined_input(prompt, context, k);
  return log_softmax_rows(model.forward(tape, seq));
}

}  // namespace

Var completion_log_softmax(Tape& tape, TinyLM& model, std::span<const int> prompt, std::span<const int> context,
                           std::size_t k) {
  return completion_log_softmax_impl(tape, model, prompt, context, k);
}

Var completion_log_softmax(Tape& tape, const TinyLM& model, std::span<const int> prompt,
                           std::span<const int> context, std::size_t k) {
  return completion_log_softmax_impl(tape, model, prompt, context, k);
}

Var pick_completion(const Var& log_softmax, std::size_t prompt_len, std::span<const int> targets) {
  std::vector<Index> rows(targets.size()), cols(targets.size());
  for (std::size_t j = 0; j < targets.size(); ++j) {
    rows[j] = static_cast<Index>(prompt_len - 1 + j);
    cols[j] = targets[j];
  }
  return pick(log_softmax, rows, cols);
}

ScoredCompletion completion_logprob(const TinyLM& model, std::span<const int> prompt, std::span<const int> completion,
                                    ContextMode mode, std::span<const int> forced) {
  const std::span<const int> context = mode == ContextMode::own_prefix ? completion : forced;
  Tape tape;
  const Var logp = completion_log_softmax(tape, model, prompt, context, completion.size());
  const Var picked = pick_completion(logp, prompt.size(), completion);

  ScoredCompletion out;
  out.tokens.assign(completion.begin(), completion.end());
  out.context_mode = mode;
  out.per_token_logprob.resize(completion.size());
  for (std::size_t j = 0; j < completion.size(); ++j) {
    out.per_token_logprob[j] = picked.value()(static_cast<Index>(j), 0);
    out.total_logprob += out.per_token_logprob[j];
  }
  return out;
}

TokenSeq generate_negative(const TinyLM& model, std::span<const int> prompt, std::span<const int> target,
                           GenMode mode) {
  const std::size_t k = target.size();
  check_completion_fits(model, prompt, k);
  TokenSeq out;
  out.reserve(k);
  if (mode == GenMode::teacher_forced) {
    // Every position is conditioned on the target prefix, so one pass suffices.
    const Matrix logits = model.logits(joined_input(prompt, target, k));
    for (std::size_t j = 0; j < k; ++j) {
      out.push_back(static_cast<int>(argmax_lowest(logits.row(static_cast<Index>(prompt.size() - 1 + j)))));
    }
    return out;
  }
  TokenSeq seq(prompt.begin(), prompt.end());
  for (std::size_t j = 0; j < k; ++j) {
    const Matrix logits = model.logits(seq);
    const int next = static_cast<int>(argmax_lowest(logits.row(logits.rows() - 1)));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

TokenSeq greedy_answer(const TinyLM& model, std::span<const int> prompt, std::size_t k) {
  const TokenSeq placeholder(k, 0);
  return generate_negative(model, prompt, placeholder, GenMode::free_running);
}

}  // namespace kelab
