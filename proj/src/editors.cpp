#include "kelab/editors.hpp"

#include <cmath>
#include <sstream>

namespace kelab {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kdpo:
      return "kdpo";
    case Method::dpo:
      return "dpo";
    case Method::ft_m:
      return "ft_m";
    case Method::ft_l:
      return "ft_l";
  }
  return "?";
}

std::string_view to_string(ScoringMode mode) { return mode == ScoringMode::c_w ? "c_w" : "c_l"; }

Method parse_method(std::string_view text) {
  for (Method m : {Method::kdpo, Method::dpo, Method::ft_m, Method::ft_l}) {
    if (text == to_string(m)) {
      return m;
    }
  }
  throw std::invalid_argument("unknown edit method '" + std::string(text) + "'");
}

ScoringMode parse_scoring_mode(std::string_view text) {
  if (text == "c_w") {
    return ScoringMode::c_w;
  }
  if (text == "c_l") {
    return ScoringMode::c_l;
  }
  throw std::invalid_argument("unknown scoring mode '" + std::string(text) + "'");
}

EditorConfig EditorConfig::defaults(Method method) {
  EditorConfig cfg;
  cfg.method = method;
  if (method == Method::dpo) {
    cfg.gen_mode = GenMode::free_running;
    cfg.scoring_mode = ScoringMode::c_l;
  }
  return cfg;
}

void EditorConfig::validate() const {
  if (n_cycles < 1 || s_steps < 1) {
    throw std::invalid_argument("n_cycles and s_steps must be >= 1");
  }
  if (!(lr > 0.0)) {
    throw std::invalid_argument("lr must be positive");
  }
  if ((method == Method::kdpo || method == Method::dpo) && !(beta > 0.0)) {
    throw std::invalid_argument("beta must be positive for preference methods, got " + std::to_string(beta));
  }
}

// ------------------------------------------------------------------ losses

namespace {

void check_beta(double beta) {
  if (!(beta >= 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("beta must be a finite non-negative number, got " + std::to_string(beta));
  }
}

void check_equal_length(std::span<const int> chosen, std::span<const int> rejected) {
  if (chosen.size() != rejected.size()) {
    throw std::invalid_argument("teacher-forced scoring needs |y_l| == |y_w|, got " +
                                std::to_string(rejected.size()) + " vs " + std::to_string(chosen.size()));
  }
}

template <typename Model>
Var margin_impl(Tape& tape, Model& model, std::span<const int> prompt, std::span<const int> chosen,
                std::span<const int> rejected, ScoringMode mode) {
  if (mode == ScoringMode::c_w) {
    check_equal_length(chosen, rejected);
    const Var logp = completion_log_softmax(tape, model, prompt, chosen, chosen.size());
    const Var w = pick_completion(logp, prompt.size(), chosen);
    const Var l = pick_completion(logp, prompt.size(), rejected);
    return sum(sub(w, l));
  }
  const Var logp_w = completion_log_softmax(tape, model, prompt, chosen, chosen.size());
  const Var logp_l = completion_log_softmax(tape, model, prompt, rejected, rejected.size());
  return sub(sum(pick_completion(logp_w, prompt.size(), chosen)),
             sum(pick_completion(logp_l, prompt.size(), rejected)));
}

}  // namespace

Var policy_margin(Tape& tape, TinyLM& policy, std::span<const int> prompt, std::span<const int> chosen,
                  std::span<const int> rejected, ScoringMode mode) {
  return margin_impl(tape, policy, prompt, chosen, rejected, mode);
}

double reference_margin(const TinyLM& reference, std::span<const int> prompt, std::span<const int> chosen,
                        std::span<const int> rejected, ScoringMode mode) {
  Tape tape;
  return margin_impl(tape, reference, prompt, chosen, rejected, mode).item();
}

Var preference_loss(const Var& policy_margin, double ref_margin, double beta) {
  check_beta(beta);
  Tape& tape = *policy_margin.tape();
  const Var diff = sub(policy_margin, tape.constant(Matrix::Constant(1, 1, ref_margin)));
  return scale(log_sigmoid(scale(diff, beta)), -1.0);
}

Var dpo_loss(Tape& tape, TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
             std::span<const int> chosen, std::span<const int> rejected, double beta) {
  check_beta(beta);
  const double ref = reference_margin(reference, prompt, chosen, rejected, ScoringMode::c_l);
  return preference_loss(policy_margin(tape, policy, prompt, chosen, rejected, ScoringMode::c_l), ref, beta);
}

Var kdpo_loss(Tape& tape, TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
              std::span<const int> chosen, std::span<const int> rejected, double beta) {
  check_beta(beta);
  check_equal_length(chosen, rejected);
  const double ref = reference_margin(reference, prompt, chosen, rejected, ScoringMode::c_w);
  return preference_loss(policy_margin(tape, policy, prompt, chosen, rejected, ScoringMode::c_w), ref, beta);
}

double dpo_loss(const TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
                std::span<const int> chosen, std::span<const int> rejected, double beta) {
  check_beta(beta);
  const double p = reference_margin(policy, prompt, chosen, rejected, ScoringMode::c_l);
  const double r = reference_margin(reference, prompt, chosen, rejected, ScoringMode::c_l);
  return -log_sigmoid(beta * (p - r));
}

double kdpo_loss(const TinyLM& policy, const TinyLM& reference, std::span<const int> prompt,
                 std::span<const int> chosen, std::span<const int> rejected, double beta) {
  check_beta(beta);
  check_equal_length(chosen, rejected);
  const double p = reference_margin(policy, prompt, chosen, rejected, ScoringMode::c_w);
  const double r = reference_margin(reference, prompt, chosen, rejected, ScoringMode::c_w);
  return -log_sigmoid(beta * (p - r));
}

Var finetune_loss(Tape& tape, TinyLM& model, std::span<const int> prompt, std::span<const int> target,
                  bool mask_prompt) {
  const Var logp = completion_log_softmax(tape, model, prompt, target, target.size());
  if (mask_prompt) {
    return scale(sum(pick_completion(logp, prompt.size(), target)), -1.0);
  }
  // Next-token terms at every position of prompt + target.
  std::vector<Index> rows, cols;
  const std::size_t total = prompt.size() + target.size();
  for (std::size_t pos = 1; pos < total; ++pos) {
    rows.push_back(static_cast<Index>(pos - 1));
    cols.push_back(pos < prompt.size() ? prompt[pos] : target[pos - prompt.size()]);
  }
  return scale(sum(pick(logp, rows, cols)), -1.0);
}

// ---------------------------------------------------------------- editing

namespace {

int count_equal(std::span<const int> a, std::span<const int> b) {
  int n = 0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    n += a[i] == b[i] ? 1 : 0;
  }
  return n;
}

std::string format_trace(const EditOutcome& out) {
  std::ostringstream os;
  os << "method=" << to_string(out.method) << " cycles=" << out.cycles.size() << " steps=" << out.total_steps;
  for (std::size_t c = 0; c < out.cycles.size(); ++c) {
    os << "\n  cycle " << c << ": negative=[";
    for (std::size_t i = 0; i < out.cycles[c].negative.size(); ++i) {
      os << (i ? "," : "") << out.cycles[c].negative[i];
    }
    os << "] losses=[";
    for (std::size_t i = 0; i < out.cycles[c].losses.size(); ++i) {
      os << (i ? "," : "") << out.cycles[c].losses[i];
    }
    os << "]";
  }
  return os.str();
}

/// Restricts gradient tracking to the editable set for the lifetime of an edit.
class EditableScope {
 public:
  EditableScope(TinyLM& model, const ParamSelector& selector) : model_(model), which_(select_params(model, selector)) {
    model_.set_requires_grad(false);
    model_.set_requires_grad(which_, true);
    tensors_ = tensors_of(model_, which_);
  }
  ~EditableScope() { model_.set_requires_grad(false); }
  EditableScope(const EditableScope&) = delete;
  EditableScope& operator=(const EditableScope&) = delete;

  std::span<const std::size_t> indices() const { return which_; }
  std::span<Tensor* const> tensors() const { return tensors_; }

 private:
  TinyLM& model_;
  std::vector<std::size_t> which_;
  std::vector<Tensor*> tensors_;
};

void check_edit(const TinyLM& model, const EditTokens& edit) {
  check_completion_fits(model, edit.prompt, edit.target.size());
}

void optimizer_step(TinyLM& model, Tape& tape, const Var& loss, EditableScope& scope, AdamState& adam,
                    EditOutcome& out) {
  if (!std::isfinite(loss.item())) {
    throw EditError("non-finite loss " + std::to_string(loss.item()) + " at step " +
                        std::to_string(out.total_steps + 1),
                    format_trace(out));
  }
  model.zero_grad();
  tape.backward(loss);
  try {
    adam_step(scope.tensors(), adam);
  } catch (const NonFiniteGradient& e) {
    throw EditError(e.what(), format_trace(out));
  }
  out.total_steps += 1;
}

}  // namespace

EditOutcome single_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  if (cfg.method != Method::kdpo && cfg.method != Method::dpo) {
    throw std::invalid_argument("single_edit handles kdpo and dpo; use ft_edit for " +
                                std::string(to_string(cfg.method)));
  }
  check_edit(model, edit);

  const TinyLM reference = model.snapshot();
  EditableScope scope(model, cfg.editable);
  AdamState adam(AdamOptions{.lr = cfg.lr}, scope.tensors());

  EditOutcome out;
  out.method = cfg.method;
  for (int cycle = 0; cycle < cfg.n_cycles; ++cycle) {
    CycleTrace trace;
    trace.negative = generate_negative(model, edit.prompt, edit.target, cfg.gen_mode);
    trace.cancelled_positions = count_equal(trace.negative, edit.target);
    out.cycles_used = cycle + 1;
    if (trace.negative == edit.target) {
      out.cycles.push_back(std::move(trace));
      out.converged = true;
      break;
    }
    const double ref =
        reference_margin(reference, edit.prompt, edit.target, trace.negative, cfg.scoring_mode);
    out.cycles.push_back(std::move(trace));
    CycleTrace& current = out.cycles.back();
    for (int step = 0; step < cfg.s_steps; ++step) {
      Tape tape;
      const Var margin = policy_margin(tape, model, edit.prompt, edit.target, current.negative, cfg.scoring_mode);
      const Var loss = preference_loss(margin, ref, cfg.beta);
      current.losses.push_back(loss.item());
      if (observer) {
        observer(StepInfo{cycle, step, model, reference, edit, current.negative, loss.item()});
      }
      optimizer_step(model, tape, loss, scope, adam, out);
    }
  }
  if (!out.converged) {
    out.converged = generate_negative(model, edit.prompt, edit.target, cfg.gen_mode) == edit.target;
  }
  out.final_answer = greedy_answer(model, edit.prompt, edit.target.size());
  out.param_drift = l2_distance(model, reference, scope.indices());
  return out;
}

EditOutcome ft_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg, const StepObserver& observer) {
  cfg.validate();
  if (cfg.method != Method::ft_m && cfg.method != Method::ft_l) {
    throw std::invalid_argument("ft_edit handles ft_m and ft_l, got " + std::string(to_string(cfg.method)));
  }
  check_edit(model, edit);

  const TinyLM reference = model.snapshot();
  EditableScope scope(model, cfg.editable);
  AdamState adam(AdamOptions{.lr = cfg.lr}, scope.tensors());
  const bool mask_prompt = cfg.method == Method::ft_m;

  EditOutcome out;
  out.method = cfg.method;
  for (int cycle = 0; cycle < cfg.n_cycles; ++cycle) {
    CycleTrace trace;
    trace.negative = greedy_answer(model, edit.prompt, edit.target.size());
    trace.cancelled_positions = count_equal(trace.negative, edit.target);
    out.cycles_used = cycle + 1;
    const bool done = trace.negative == edit.target;
    out.cycles.push_back(std::move(trace));
    if (done) {
      out.converged = true;
      break;
    }
    CycleTrace& current = out.cycles.back();
    for (int step = 0; step < cfg.s_steps; ++step) {
      Tape tape;
      const Var loss = finetune_loss(tape, model, edit.prompt, edit.target, mask_prompt);
      current.losses.push_back(loss.item());
      if (observer) {
        observer(StepInfo{cycle, step, model, reference, edit, current.negative, loss.item()});
      }
      optimizer_step(model, tape, loss, scope, adam, out);
    }
  }
  out.final_answer = greedy_answer(model, edit.prompt, edit.target.size());
  if (!out.converged) {
    out.converged = out.final_answer == edit.target;
  }
  out.param_drift = l2_distance(model, reference, scope.indices());
  return out;
}

EditOutcome apply_edit(TinyLM& model, const EditTokens& edit, const EditorConfig& cfg, const StepObserver& observer) {
  if (cfg.method == Method::ft_m || cfg.method == Method::ft_l) {
    return ft_edit(model, edit, cfg, observer);
  }
  return single_edit(model, edit, cfg, observer);
}

std::vector<EditOutcome> sequential_edit(TinyLM& model, std::span<const EditTokens> edits, const EditorConfig& cfg) {
  std::vector<EditOutcome> outcomes;
  outcomes.reserve(edits.size());
  for (std::size_t i = 0; i < edits.size(); ++i) {
    try {
      outcomes.push_back(apply_edit(model, edits[i], cfg));
    } catch (const EditError& e) {
      throw EditError("edit #" + std::to_string(i) + ": " + e.what(), e.trace());
    } catch (const std::exception& e) {
      throw EditError("edit #" + std::to_string(i) + ": " + e.what(), "");
    }
  }
  return outcomes;
}

}  // namespace kelab
