#include <doctest.h>

#include <cmath>
#include <random>

#include "kelab/editors.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace kelab;

namespace {

const double kLn2 = std::log(2.0);

TinyLM tiny_zeros(int vocab, int ctx = 8) {
  LMConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_ctx = ctx;
  return TinyLM::zeros(cfg);
}

}  // namespace

TEST_CASE("identical policy and reference give ln 2") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const TinyLM m = testing::random_model(trial);
    const TinyLM ref = m.snapshot();
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq yw = testing::random_tokens(rng, 8, 3);
    const TokenSeq yl = testing::random_tokens(rng, 8, 3);
    const double beta = 0.05 + static_cast<double>(rng() % 100) / 10.0;
    CHECK(std::abs(dpo_loss(m, ref, c, yw, yl, beta) - kLn2) <= 1e-12);
    CHECK(std::abs(kdpo_loss(m, ref, c, yw, yl, beta) - kLn2) <= 1e-12);
  }
}

TEST_CASE("beta = 0 gives ln 2 whatever the models") {
  const TinyLM a = testing::random_model(1);
  const TinyLM b = testing::random_model(2);
  const TokenSeq c{1, 2}, yw{3, 4}, yl{5, 6};
  CHECK(dpo_loss(a, b, c, yw, yl, 0.0) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(kdpo_loss(a, b, c, yw, yl, 0.0) == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK_THROWS_AS(dpo_loss(a, b, c, yw, yl, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(kdpo_loss(a, b, c, yw, yl, std::nan("")), std::invalid_argument);
}

TEST_CASE("hand-set logits: (a, b, beta) = (1, 0, 2) gives softplus(-2)") {
  // V=2, K=1. The reference is uniform; the policy raises token 0 by one logit,
  // so [log pi(y_w) - log ref(y_w)] - [log pi(y_l) - log ref(y_l)] = 1.
  TinyLM ref = tiny_zeros(2);
  TinyLM pol = tiny_zeros(2);
  pol.param("unembed.b").value()(0, 0) = 1.0;
  const TokenSeq c{1}, yw{0}, yl{1};
  const double want = oracle::softplus(-2.0);
  CHECK(want == doctest::Approx(0.126928).epsilon(1e-6));
  CHECK(std::abs(dpo_loss(pol, ref, c, yw, yl, 2.0) - want) <= 1e-12);
  CHECK(std::abs(kdpo_loss(pol, ref, c, yw, yl, 2.0) - want) <= 1e-12);
}

TEST_CASE("dpo_loss matches the independent vanilla DPO oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const TinyLM ref = testing::random_model(50 + trial);
    const TinyLM pol = oracle::perturbed(ref, trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 1 + rng() % 3);
    const TokenSeq yw = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const TokenSeq yl = testing::random_tokens(rng, 8, yw.size());
    const double beta = 0.1 * static_cast<double>(1 + rng() % 20);
    CHECK(std::abs(dpo_loss(pol, ref, c, yw, yl, beta) - oracle::dpo_loss(pol, ref, c, yw, yl, beta)) <= 1e-12);
  }
}

TEST_CASE("kdpo over full sequences equals kdpo with equal positions deleted") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const TinyLM ref = testing::random_model(80 + trial);
    const TinyLM pol = oracle::perturbed(ref, 1000 + trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq yw = testing::random_tokens(rng, 8, 3);
    TokenSeq yl = yw;
    const std::size_t k = rng() % 3;
    yl[k] = (yw[k] + 1 + static_cast<int>(rng() % 7)) % 8;
    const double beta = 0.5;
    CHECK(std::abs(kdpo_loss(pol, ref, c, yw, yl, beta) - oracle::kdpo_loss_reduced(pol, ref, c, yw, yl, beta)) <= 1e-12);
  }
}

TEST_CASE("y_l == y_w cancels everything: ln 2 and an exactly zero gradient") {
  TinyLM pol = testing::random_model(4);
  const TinyLM ref = oracle::perturbed(pol, 4, 0.3);
  const TokenSeq c{1, 2}, y{3, 4, 5};
  pol.set_requires_grad(true);
  pol.zero_grad();
  Tape t;
  const Var loss = kdpo_loss(t, pol, ref, c, y, y, 0.7);
  CHECK(loss.item() == doctest::Approx(kLn2).epsilon(1e-15));
  t.backward(loss);
  for (const Tensor& p : pol.params()) {
    CHECK(p.grad().cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("kdpo gradient only involves the differing positions") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    TinyLM pol = testing::random_model(120 + trial);
    const TinyLM ref = oracle::perturbed(pol, 2000 + trial, 0.2);
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq yw = testing::random_tokens(rng, 8, 4);
    TokenSeq yl = yw;
    yl[1] = (yw[1] + 3) % 8;
    yl[3] = (yw[3] + 5) % 8;
    const double beta = 1.3;
    const std::vector<std::size_t> all = select_params(pol, ParamSelector::all());

    pol.set_requires_grad(true);
    pol.zero_grad();
    {
      Tape t;
      t.backward(kdpo_loss(t, pol, ref, c, yw, yl, beta));
    }
    const Eigen::VectorXd library = testing::flat_grads(pol, all);

    // Oracle graph: pick only the two differing positions out of one forward.
    pol.zero_grad();
    {
      Tape t;
      const Var ls = completion_log_softmax(t, pol, c, yw, yw.size());
      const Index base = static_cast<Index>(c.size()) - 1;
      const Index rows[] = {base + 1, base + 3};
      const Index win[] = {yw[1], yw[3]};
      const Index lose[] = {yl[1], yl[3]};
      const Var margin = sub(sum(pick(ls, rows, win)), sum(pick(ls, rows, lose)));
      const auto rw = oracle::position_logprobs(ref, c, yw, yw);
      const auto rl = oracle::position_logprobs(ref, c, yl, yw);
      const double ref_margin = (rw[1] - rl[1]) + (rw[3] - rl[3]);
      const Var shifted = sub(scale(margin, beta), t.constant(Matrix::Constant(1, 1, beta * ref_margin)));
      t.backward(scale(log_sigmoid(shifted), -1.0));
    }
    const Eigen::VectorXd oracle = testing::flat_grads(pol, all);
    CHECK(testing::relative_error(library, oracle) <= 1e-12);
  }
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 4; ++trial) {
    TinyLM pol = testing::random_model(150 + trial, 8, 8, 2, 16, 12, 2.0);
    const TinyLM ref = oracle::perturbed(pol, 3000 + trial, 0.2);
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq yw = testing::random_tokens(rng, 8, 3);
    const TokenSeq yl = testing::random_tokens(rng, 8, 3);
    const std::vector<std::size_t> which = select_params(pol, ParamSelector::ffn_of_layer(1));
    pol.set_requires_grad(false);
    pol.set_requires_grad(which, true);
    for (bool kdpo : {true, false}) {
      pol.zero_grad();
      {
        Tape t;
        t.backward(kdpo ? kdpo_loss(t, pol, ref, c, yw, yl, 0.8) : dpo_loss(t, pol, ref, c, yw, yl, 0.8));
      }
      const Eigen::VectorXd ad = testing::flat_grads(pol, which);
      const Eigen::VectorXd fd = testing::finite_difference(pol, which, [&] {
        return kdpo ? kdpo_loss(pol, ref, c, yw, yl, 0.8) : dpo_loss(pol, ref, c, yw, yl, 0.8);
      });
      CHECK(testing::relative_error(ad, fd) <= 1e-6);
    }
  }
}

TEST_CASE("kdpo rejects completions of different lengths") {
  const TinyLM a = testing::random_model(7);
  const TinyLM b = a.snapshot();
  CHECK_THROWS_AS(kdpo_loss(a, b, TokenSeq{1}, TokenSeq{1, 2}, TokenSeq{1}, 0.1), std::invalid_argument);
}

TEST_CASE("one kdpo step widens the margin at the single differing position") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    TinyLM pol = testing::random_model(170 + trial, 8, 8, 2, 16, 12, 2.0);
    const TinyLM ref = pol.snapshot();
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq yw = testing::random_tokens(rng, 8, 3);
    TokenSeq yl = yw;
    yl[2] = (yw[2] + 1) % 8;
    const auto margin = [&] {
      const auto w = oracle::position_logprobs(pol, c, yw, yw);
      const auto l = oracle::position_logprobs(pol, c, yl, yw);
      return w[2] - l[2];
    };
    const double before = margin();
    const std::vector<std::size_t> which = select_params(pol, ParamSelector::all());
    pol.set_requires_grad(true);
    pol.zero_grad();
    std::vector<Tensor*> tensors = tensors_of(pol, which);
    AdamState adam(AdamOptions{.lr = 1e-4}, tensors);
    {
      Tape t;
      t.backward(kdpo_loss(t, pol, ref, c, yw, yl, 0.1));
    }
    adam_step(tensors, adam);
    CHECK(margin() > before);
  }
}

TEST_CASE("editor config validation") {
  EditorConfig cfg = EditorConfig::defaults(Method::kdpo);
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.gen_mode == GenMode::teacher_forced);
  CHECK(cfg.scoring_mode == ScoringMode::c_w);
  CHECK(cfg.beta == 0.1);
  CHECK(cfg.n_cycles == 10);
  CHECK(cfg.s_steps == 8);
  CHECK(cfg.lr == 1e-4);
  const EditorConfig dpo = EditorConfig::defaults(Method::dpo);
  CHECK(dpo.gen_mode == GenMode::free_running);
  CHECK(dpo.scoring_mode == ScoringMode::c_l);

  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.beta = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  EditorConfig ft = EditorConfig::defaults(Method::ft_m);
  ft.beta = 0.0;
  CHECK_NOTHROW(ft.validate());
  ft.n_cycles = 0;
  CHECK_THROWS_AS(ft.validate(), std::invalid_argument);
  ft = EditorConfig::defaults(Method::ft_l);
  ft.s_steps = 0;
  CHECK_THROWS_AS(ft.validate(), std::invalid_argument);
  ft.s_steps = 1;
  ft.lr = 0.0;
  CHECK_THROWS_AS(ft.validate(), std::invalid_argument);

  CHECK(parse_method("kdpo") == Method::kdpo);
  CHECK(parse_method("ft_l") == Method::ft_l);
  CHECK_THROWS(parse_method("rome"));
}

// ------------------------------------------------------------ edit loop

namespace {

EditTokens fresh_edit(const TinyLM& m, const TokenSeq& prompt, std::size_t k) {
  const TokenSeq greedy = greedy_answer(m, prompt, k);
  TokenSeq target = greedy;
  for (int& t : target) {
    t = (t + 1) % m.config().vocab_size;
  }
  return EditTokens{prompt, target};
}

}  // namespace

TEST_CASE("an already-satisfied edit converges at once and touches nothing") {
  for (Method method : {Method::kdpo, Method::dpo, Method::ft_m, Method::ft_l}) {
    TinyLM m = testing::random_model(9);
    const TinyLM before = m.snapshot();
    const TokenSeq prompt{1, 2};
    const EditTokens edit{prompt, greedy_answer(m, prompt, 3)};
    const EditOutcome out = apply_edit(m, edit, EditorConfig::defaults(method));
    CHECK(out.converged);
    CHECK(out.total_steps == 0);
    CHECK(out.final_answer == edit.target);
    CHECK(bitwise_equal(m, before));
  }
}

TEST_CASE("n = 1, s = 1 runs exactly one loss evaluation and one step") {
  for (Method method : {Method::kdpo, Method::dpo, Method::ft_m, Method::ft_l}) {
    TinyLM m = testing::random_model(10);
    const EditTokens edit = fresh_edit(m, TokenSeq{3, 4}, 2);
    EditorConfig cfg = EditorConfig::defaults(method);
    cfg.editable = ParamSelector::ffn_of_layer(1);
    cfg.n_cycles = 1;
    cfg.s_steps = 1;
    int calls = 0;
    const EditOutcome out = apply_edit(m, edit, cfg, [&](const StepInfo&) { ++calls; });
    CHECK(calls == 1);
    CHECK(out.total_steps == 1);
    CHECK(out.cycles_used == 1);
  }
}

TEST_CASE("edit outcomes respect the loop contract") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    for (Method method : {Method::kdpo, Method::dpo, Method::ft_m}) {
      TinyLM m = testing::random_model(200 + trial, 8, 8, 2, 16, 12, 2.0);
      const EditTokens edit = fresh_edit(m, testing::random_tokens(rng, 8, 2), 2);
      EditorConfig cfg = EditorConfig::defaults(method);
      cfg.editable = ParamSelector::ffn_of_layer(1);
      cfg.lr = 3e-2;
      cfg.n_cycles = 4;
      cfg.s_steps = 3;
      int observed = 0;
      const EditOutcome out = apply_edit(m, edit, cfg, [&](const StepInfo& s) {
        CHECK(s.cycle == observed / cfg.s_steps);
        CHECK(s.step == observed % cfg.s_steps);
        CHECK(std::isfinite(s.loss));
        ++observed;
      });
      CHECK(out.method == method);
      CHECK(out.total_steps == observed);
      CHECK(out.total_steps <= cfg.n_cycles * cfg.s_steps);
      CHECK(out.cycles_used >= 1);
      CHECK(out.cycles_used <= cfg.n_cycles);
      CHECK(out.final_answer == greedy_answer(m, edit.prompt, edit.target.size()));
      if (out.converged) {
        CHECK(out.final_answer == edit.target);
      }
      if (method != Method::ft_m) {
        CHECK(out.cycles.size() == static_cast<std::size_t>(out.cycles_used));
        for (const CycleTrace& c : out.cycles) {
          CHECK(c.negative.size() == edit.target.size());
          int equal = 0;
          for (std::size_t k = 0; k < c.negative.size(); ++k) {
            equal += c.negative[k] == edit.target[k] ? 1 : 0;
          }
          CHECK(c.cancelled_positions == equal);
        }
        // Every cycle runs all s steps except one that opened on y_l == y_w.
        const bool stopped_early = out.cycles.back().negative == edit.target;
        const int full = stopped_early ? out.cycles_used - 1 : out.cycles_used;
        CHECK(out.total_steps == full * cfg.s_steps);
      }
    }
  }
}

TEST_CASE("free-running generation with c_l scoring runs the vanilla DPO loss") {
  TinyLM m = testing::random_model(12, 8, 8, 2, 16, 12, 2.0);
  const EditTokens edit = fresh_edit(m, TokenSeq{5, 6}, 3);
  EditorConfig cfg = EditorConfig::defaults(Method::kdpo);
  cfg.gen_mode = GenMode::free_running;
  cfg.scoring_mode = ScoringMode::c_l;
  cfg.editable = ParamSelector::ffn_of_layer(1);
  cfg.lr = 1e-2;
  cfg.n_cycles = 3;
  cfg.s_steps = 4;
  int steps = 0;
  apply_edit(m, edit, cfg, [&](const StepInfo& s) {
    CHECK(s.loss == dpo_loss(s.model, s.reference, s.edit.prompt, s.edit.target, s.negative, cfg.beta));
    if (s.step == 0) {
      CHECK(s.negative == generate_negative(s.model, s.edit.prompt, s.edit.target, GenMode::free_running));
    }
    ++steps;
  });
  CHECK(steps > 0);
}

TEST_CASE("kdpo defaults step on the kdpo loss against a fixed reference") {
  TinyLM m = testing::random_model(13, 8, 8, 2, 16, 12, 2.0);
  const TinyLM original = m.snapshot();
  const EditTokens edit = fresh_edit(m, TokenSeq{0, 7}, 3);
  EditorConfig cfg = EditorConfig::defaults(Method::kdpo);
  cfg.editable = ParamSelector::ffn_of_layer(1);
  cfg.lr = 1e-2;
  cfg.n_cycles = 2;
  cfg.s_steps = 3;
  apply_edit(m, edit, cfg, [&](const StepInfo& s) {
    CHECK(bitwise_equal(s.reference, original));
    CHECK(s.loss == kdpo_loss(s.model, s.reference, s.edit.prompt, s.edit.target, s.negative, cfg.beta));
  });
}

TEST_CASE("fine-tuning losses") {
  SUBCASE("masked loss on a uniform model is K ln V") {
    TinyLM m = tiny_zeros(6);
    for (std::size_t k = 1; k <= 3; ++k) {
      Tape t;
      const Var loss = finetune_loss(t, m, TokenSeq{1, 2}, TokenSeq(k, 4), true);
      CHECK(loss.item() == doctest::Approx(static_cast<double>(k) * std::log(6.0)).epsilon(1e-12));
    }
  }
  SUBCASE("masked loss is the target cross-entropy; unmasked adds the prompt terms") {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 10; ++trial) {
      TinyLM m = testing::random_model(220 + trial);
      const TokenSeq c = testing::random_tokens(rng, 8, 3);
      const TokenSeq y = testing::random_tokens(rng, 8, 2);
      Tape t1, t2;
      const double masked = finetune_loss(t1, m, c, y, true).item();
      const double full = finetune_loss(t2, m, c, y, false).item();
      CHECK(std::abs(masked + oracle::seq_logprob(m, c, y, y)) <= 1e-12);
      double prompt_terms = 0.0;
      for (std::size_t pos = 1; pos < c.size(); ++pos) {
        const TokenSeq head(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(pos));
        prompt_terms -= oracle::seq_logprob(m, head, TokenSeq{c[pos]}, TokenSeq{c[pos]});
      }
      CHECK(std::abs(full - masked - prompt_terms) <= 1e-12);
    }
  }
  SUBCASE("the masked gradient ignores prompt-position targets") {
    // Oracle graph built from completion positions only; prompt-position targets never enter it.
    TinyLM m = testing::random_model(15);
    const TokenSeq c{1, 2, 3}, y{4, 5};
    const std::vector<std::size_t> all = select_params(m, ParamSelector::all());
    m.set_requires_grad(true);
    m.zero_grad();
    {
      Tape t;
      t.backward(finetune_loss(t, m, c, y, true));
    }
    const Eigen::VectorXd lib = testing::flat_grads(m, all);
    m.zero_grad();
    {
      Tape t;
      const Var ls = completion_log_softmax(t, m, c, y, y.size());
      const Index rows[] = {2, 3};
      const Index cols[] = {4, 5};
      t.backward(scale(sum(pick(ls, rows, cols)), -1.0));
    }
    CHECK(testing::relative_error(lib, testing::flat_grads(m, all)) <= 1e-13);
  }
}

TEST_CASE("sequential editing") {
  SUBCASE("an empty list leaves the model alone") {
    TinyLM m = testing::random_model(16);
    const TinyLM before = m.snapshot();
    CHECK(sequential_edit(m, std::vector<EditTokens>{}, EditorConfig::defaults(Method::kdpo)).empty());
    CHECK(bitwise_equal(m, before));
  }
  SUBCASE("a sequence of one equals a single edit") {
    TinyLM a = testing::random_model(17, 8, 8, 2, 16, 12, 2.0);
    TinyLM b = a.snapshot();
    const EditTokens edit = fresh_edit(a, TokenSeq{2, 3}, 2);
    EditorConfig cfg = EditorConfig::defaults(Method::kdpo);
    cfg.editable = ParamSelector::ffn_of_layer(1);
    cfg.lr = 1e-2;
    const EditOutcome single = apply_edit(a, edit, cfg);
    const std::vector<EditOutcome> seq = sequential_edit(b, std::vector<EditTokens>{edit}, cfg);
    REQUIRE(seq.size() == 1);
    CHECK(bitwise_equal(a, b));
    CHECK(seq[0].total_steps == single.total_steps);
    CHECK(seq[0].final_answer == single.final_answer);
  }
  SUBCASE("outcomes keep request order and errors name the failing index") {
    TinyLM m = testing::random_model(18);
    EditorConfig cfg = EditorConfig::defaults(Method::ft_m);
    cfg.editable = ParamSelector::ffn_of_layer(1);
    cfg.n_cycles = 1;
    cfg.s_steps = 1;
    const std::vector<EditTokens> edits{fresh_edit(m, TokenSeq{1}, 1), fresh_edit(m, TokenSeq{2}, 2),
                                        fresh_edit(m, TokenSeq{3}, 3)};
    const std::vector<EditOutcome> outs = sequential_edit(m, edits, cfg);
    REQUIRE(outs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(outs[i].final_answer.size() == i + 1);
    }
    const std::vector<EditTokens> bad{edits[0], EditTokens{TokenSeq(11, 1), TokenSeq{1, 2}}};
    try {
      sequential_edit(m, bad, cfg);
      FAIL("expected EditError");
    } catch (const EditError& e) {
      CHECK(std::string(e.what()).find("edit #1") != std::string::npos);
    }
  }
}

TEST_CASE("non-finite losses abort with a trace") {
  TinyLM m = testing::random_model(19);
  m.param("h1.ffn.w2").value()(0, 0) = std::numeric_limits<double>::infinity();
  const EditTokens edit{TokenSeq{1, 2}, TokenSeq{3, 4}};
  EditorConfig cfg = EditorConfig::defaults(Method::ft_m);
  cfg.editable = ParamSelector::ffn_of_layer(1);
  CHECK_THROWS_AS(apply_edit(m, edit, cfg), EditError);
}

TEST_CASE("parameter drift is reported and zero for untouched models") {
  TinyLM m = testing::random_model(20, 8, 8, 2, 16, 12, 2.0);
  const TinyLM before = m.snapshot();
  const EditTokens edit = fresh_edit(m, TokenSeq{4, 4}, 2);
  EditorConfig cfg = EditorConfig::defaults(Method::kdpo);
  cfg.editable = ParamSelector::ffn_of_layer(1);
  cfg.lr = 1e-2;
  const EditOutcome out = apply_edit(m, edit, cfg);
  const std::vector<std::size_t> which = select_params(m, cfg.editable);
  CHECK(out.param_drift == doctest::Approx(l2_distance(m, before, which)).epsilon(1e-12));
  CHECK(out.param_drift > 0.0);
}
