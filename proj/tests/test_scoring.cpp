#include <doctest.h>

#include <cmath>
#include <random>

#include "kelab/fact_world.hpp"
#include "kelab/scoring.hpp"
#include "test_support.hpp"

using namespace kelab;

namespace {

// One forward pass per completion token: the oracle the batched scorer must match.
std::vector<double> one_at_a_time(const TinyLM& m, const TokenSeq& prompt, const TokenSeq& y, const TokenSeq& context) {
  std::vector<double> out;
  for (std::size_t k = 0; k < y.size(); ++k) {
    TokenSeq seq = prompt;
    seq.insert(seq.end(), context.begin(), context.begin() + static_cast<std::ptrdiff_t>(k));
    const Matrix l = m.logits(seq);
    const Eigen::RowVectorXd last = l.row(l.rows() - 1);
    const double mx = last.maxCoeff();
    const double lse = mx + std::log((last.array() - mx).exp().sum());
    out.push_back(last(y[k]) - lse);
  }
  return out;
}

// Greedy decode by hand: argmax (lowest id on ties) of the last row, step by step.
TokenSeq manual_decode(const TinyLM& m, const TokenSeq& prompt, const TokenSeq* forced, std::size_t k) {
  TokenSeq out, seq = prompt;
  for (std::size_t j = 0; j < k; ++j) {
    const Matrix l = m.logits(seq);
    int best = 0;
    for (int v = 1; v < l.cols(); ++v) {
      if (l(l.rows() - 1, v) > l(l.rows() - 1, best)) {
        best = v;
      }
    }
    out.push_back(best);
    seq.push_back(forced != nullptr ? (*forced)[j] : best);
  }
  return out;
}

TinyLM uniform_model(int vocab) {
  LMConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_ctx = 10;
  return TinyLM::zeros(cfg);
}

}  // namespace

TEST_CASE("uniform model scores -K ln V") {
  for (int vocab : {2, 5, 11}) {
    const TinyLM m = uniform_model(vocab);
    for (std::size_t k = 1; k <= 4; ++k) {
      const TokenSeq y(k, vocab - 1);
      const ScoredCompletion s = completion_logprob(m, TokenSeq{0, 1}, y, ContextMode::own_prefix);
      CHECK(s.total_logprob == doctest::Approx(-static_cast<double>(k) * std::log(vocab)).epsilon(1e-12));
    }
  }
}

TEST_CASE("scored completions are consistent") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const TinyLM m = testing::random_model(trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const TokenSeq y = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const ScoredCompletion s = completion_logprob(m, c, y, ContextMode::own_prefix);
    CHECK(s.tokens == y);
    CHECK(s.context_mode == ContextMode::own_prefix);
    double total = 0.0;
    for (double v : s.per_token_logprob) {
      CHECK(v <= 0.0);
      total += v;
    }
    CHECK(std::abs(total - s.total_logprob) <= 1e-12);
  }
}

TEST_CASE("K=1 scores agree across context modes") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const TinyLM m = testing::random_model(100 + trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 1 + rng() % 5);
    const TokenSeq y = testing::random_tokens(rng, 8, 1);
    const TokenSeq forced = testing::random_tokens(rng, 8, 3);
    const double a = completion_logprob(m, c, y, ContextMode::own_prefix).total_logprob;
    const double b = completion_logprob(m, c, y, ContextMode::teacher_forced, forced).total_logprob;
    CHECK(a == b);
  }
}

TEST_CASE("teacher-forced scoring of y against itself equals own-prefix scoring") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const TinyLM m = testing::random_model(200 + trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 2);
    const TokenSeq y = testing::random_tokens(rng, 8, 4);
    const ScoredCompletion a = completion_logprob(m, c, y, ContextMode::own_prefix);
    const ScoredCompletion b = completion_logprob(m, c, y, ContextMode::teacher_forced, y);
    CHECK(a.per_token_logprob == b.per_token_logprob);
  }
}

TEST_CASE("batched scoring matches the one-position-at-a-time oracle") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const TinyLM m = testing::random_model(300 + trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const TokenSeq y = testing::random_tokens(rng, 8, 1 + rng() % 5);
    const TokenSeq forced = testing::random_tokens(rng, 8, y.size());
    const ScoredCompletion own = completion_logprob(m, c, y, ContextMode::own_prefix);
    const ScoredCompletion tf = completion_logprob(m, c, y, ContextMode::teacher_forced, forced);
    const std::vector<double> own_oracle = one_at_a_time(m, c, y, y);
    const std::vector<double> tf_oracle = one_at_a_time(m, c, y, forced);
    for (std::size_t k = 0; k < y.size(); ++k) {
      CHECK(std::abs(own.per_token_logprob[k] - own_oracle[k]) <= 1e-10);
      CHECK(std::abs(tf.per_token_logprob[k] - tf_oracle[k]) <= 1e-10);
    }
  }
}

TEST_CASE("own-prefix probabilities of every completion sum to one") {
  // Exhaustive enumeration over V^K completions for V <= 4, K <= 3.
  for (int vocab = 2; vocab <= 4; ++vocab) {
    const TinyLM m = testing::random_model(400 + vocab, vocab, 8, 2, 16, 8);
    for (int k = 1; k <= 3; ++k) {
      int count = 1;
      for (int i = 0; i < k; ++i) {
        count *= vocab;
      }
      double total = 0.0;
      for (int code = 0; code < count; ++code) {
        TokenSeq y(static_cast<std::size_t>(k));
        int rest = code;
        for (int& t : y) {
          t = rest % vocab;
          rest /= vocab;
        }
        total += std::exp(completion_logprob(m, TokenSeq{1, 0}, y, ContextMode::own_prefix).total_logprob);
      }
      CHECK(std::abs(total - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("V=3, K=2 enumeration sums to one") {
  const TinyLM m = testing::random_model(5, 3, 8, 2, 16, 8);
  double total = 0.0;
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      total += std::exp(completion_logprob(m, TokenSeq{2}, TokenSeq{a, b}, ContextMode::own_prefix).total_logprob);
    }
  }
  CHECK(std::abs(total - 1.0) <= 1e-9);
}

TEST_CASE("scoring errors") {
  const TinyLM m = testing::random_model(6);
  CHECK_THROWS_AS(completion_logprob(m, TokenSeq{1}, TokenSeq{}, ContextMode::own_prefix), ModelError);
  CHECK_THROWS_AS(completion_logprob(m, TokenSeq(8, 1), TokenSeq(6, 1), ContextMode::own_prefix), ModelError);
  CHECK_THROWS_AS(completion_logprob(m, TokenSeq{1}, TokenSeq{1, 2, 3}, ContextMode::teacher_forced, TokenSeq{1}),
                  ModelError);
  CHECK_NOTHROW(completion_logprob(m, TokenSeq{1}, TokenSeq{1, 2, 3}, ContextMode::teacher_forced, TokenSeq{1, 2}));
  CHECK_THROWS_AS(generate_negative(m, TokenSeq(8, 1), TokenSeq(6, 1), GenMode::teacher_forced), ModelError);
  CHECK_THROWS_AS(greedy_answer(m, TokenSeq(10, 1), 4), ModelError);
}

TEST_CASE("a model that always prefers token 7 generates sevens") {
  LMConfig cfg;
  cfg.vocab_size = 9;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_ff = 4;
  cfg.max_ctx = 10;
  TinyLM m = TinyLM::zeros(cfg);
  m.param("unembed.b").value()(0, 7) = 3.0;
  for (std::size_t k = 1; k <= 4; ++k) {
    const TokenSeq yw(k, 2);
    CHECK(generate_negative(m, TokenSeq{0, 1}, yw, GenMode::teacher_forced) == TokenSeq(k, 7));
    CHECK(generate_negative(m, TokenSeq{0, 1}, yw, GenMode::free_running) == TokenSeq(k, 7));
  }
}

TEST_CASE("ties go to the lowest token id") {
  const TinyLM m = uniform_model(6);
  CHECK(greedy_answer(m, TokenSeq{3}, 3) == TokenSeq{0, 0, 0});
}

TEST_CASE("generation modes agree on the first token and match manual decoding") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const TinyLM m = testing::random_model(500 + trial);
    const TokenSeq c = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const TokenSeq yw = testing::random_tokens(rng, 8, 1 + rng() % 4);
    const TokenSeq tf = generate_negative(m, c, yw, GenMode::teacher_forced);
    const TokenSeq fr = generate_negative(m, c, yw, GenMode::free_running);
    CHECK(tf.size() == yw.size());
    CHECK(fr.size() == yw.size());
    CHECK(tf[0] == fr[0]);
    CHECK(tf == manual_decode(m, c, &yw, yw.size()));
    CHECK(fr == manual_decode(m, c, nullptr, yw.size()));
    CHECK(greedy_answer(m, c, yw.size()) == fr);
    CHECK(greedy_answer(m, c, yw.size()) == greedy_answer(m, c, yw.size()));
  }
}

TEST_CASE("trained fact world: memorized facts and the position-2 split") {
  const testing::ToyWorld& toy = testing::toy_world();
  const Vocabulary& vocab = Vocabulary::fact_world();

  SUBCASE("greedy answers reproduce at least 99% of the training facts") {
    const std::vector<Probe> facts = fact_probes(toy.world.world, vocab);
    REQUIRE(!facts.empty());
    int hit = 0;
    for (const Probe& p : facts) {
      hit += greedy_answer(toy.model, p.prompt, p.expected.size()) == p.expected ? 1 : 0;
    }
    MESSAGE("fact accuracy " << hit << "/" << facts.size());
    CHECK(static_cast<double>(hit) / static_cast<double>(facts.size()) >= 0.99);
  }

  SUBCASE("teacher forcing splits from free running at position 2 exactly when the forced city differs") {
    int splits = 0, linked = 0;
    for (const EditRequest& r : toy.world.requests) {
      const TokenSeq c = vocab.encode(r.prompt);
      const TokenSeq yw = vocab.encode(r.target_new);
      REQUIRE(yw.size() == 2);
      const TokenSeq tf = generate_negative(toy.model, c, yw, GenMode::teacher_forced);
      const TokenSeq fr = generate_negative(toy.model, c, yw, GenMode::free_running);
      CHECK(tf == manual_decode(toy.model, c, &yw, 2));
      CHECK(fr == manual_decode(toy.model, c, nullptr, 2));
      CHECK(tf[0] == fr[0]);
      if (tf[1] != fr[1]) {
        ++splits;
        // The forced new city pulls its own country in.
        linked += vocab.word(tf[1]) == country_of(vocab.word(yw[0])) ? 1 : 0;
      }
      if (fr[0] == yw[0]) {
        CHECK(tf == fr);
      }
    }
    MESSAGE("splits " << splits << ", linked " << linked);
    CHECK(splits > 0);
    CHECK(linked >= (9 * splits) / 10);
  }
}
