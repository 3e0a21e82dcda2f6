#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kelab/experiment.hpp"
#include "kelab/tiny_lm.hpp"

namespace kelab::testing {

/// A small randomly initialized model whose weights are scaled up so logits
/// are far from uniform (the default init is nearly flat).
inline TinyLM random_model(std::uint64_t seed, int vocab = 8, int d_model = 8, int n_layers = 2, int d_ff = 16,
                           int max_ctx = 12, double gain = 8.0) {
  LMConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.n_heads = 2;
  cfg.d_ff = d_ff;
  cfg.max_ctx = max_ctx;
  cfg.seed = seed;
  TinyLM m(cfg);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (Tensor& t : m.params()) {
    for (Index i = 0; i < t.size(); ++i) {
      // Layer-norm gains sit at 1; perturb them rather than scaling to zero.
      t.value()(i) = t.value()(i) * gain + jitter(rng);
    }
  }
  return m;
}

inline TokenSeq random_tokens(std::mt19937_64& rng, int vocab, std::size_t len) {
  TokenSeq out(len);
  for (int& t : out) {
    t = static_cast<int>(rng() % static_cast<std::uint64_t>(vocab));
  }
  return out;
}

/// Central differences of `f` with respect to every entry of the selected
/// parameters, flattened in selection order.
inline Eigen::VectorXd finite_difference(TinyLM& model, std::span<const std::size_t> which,
                                         const std::function<double()>& f, double h = 1e-5) {
  Index total = 0;
  for (std::size_t i : which) {
    total += model.params()[i].size();
  }
  Eigen::VectorXd out(total);
  Index k = 0;
  for (std::size_t i : which) {
    Matrix& v = model.params()[i].value();
    for (Index j = 0; j < v.size(); ++j, ++k) {
      const double keep = v(j);
      v(j) = keep + h;
      const double up = f();
      v(j) = keep - h;
      const double down = f();
      v(j) = keep;
      out(k) = (up - down) / (2.0 * h);
    }
  }
  return out;
}

inline Eigen::VectorXd flat_grads(const TinyLM& model, std::span<const std::size_t> which) {
  Index total = 0;
  for (std::size_t i : which) {
    total += model.params()[i].size();
  }
  Eigen::VectorXd out(total);
  Index k = 0;
  for (std::size_t i : which) {
    const Matrix& g = model.params()[i].grad();
    for (Index j = 0; j < g.size(); ++j) {
      out(k++) = g(j);
    }
  }
  return out;
}

/// Norm-wise relative error; entrywise relative error is meaningless for
/// gradient entries that are zero up to rounding.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-300});
  return (a - b).norm() / scale;
}

/// The default fact world together with a model pretrained on it. The model is
/// trained once and cached next to the test binaries.
struct ToyWorld {
  GeneratedWorld world;
  TinyLM model;
  PretrainResult pretrain;
};

#ifndef KELAB_TEST_CACHE_DIR
#define KELAB_TEST_CACHE_DIR "."
#endif

inline const ToyWorld& toy_world() {
  static const ToyWorld toy = [] {
    RunConfig defaults;
    const Vocabulary& vocab = Vocabulary::fact_world();
    GeneratedWorld g = gen_fact_world(defaults.synth, defaults.model.vocab_size);
    const std::filesystem::path path = std::filesystem::path(KELAB_TEST_CACHE_DIR) / "toy_world_pretrained.ckpt";
    const std::vector<Probe> facts = fact_probes(g.world, vocab);
    if (std::filesystem::exists(path)) {
      TinyLM m = load_checkpoint(path.string());
      PretrainResult r;
      r.fact_accuracy = fact_accuracy(m, facts);
      return ToyWorld{std::move(g), std::move(m), r};
    }
    TinyLM m(defaults.model);
    const PretrainResult r = pretrain(m, encode_all(g.corpus, vocab), facts, defaults.pretrain);
    const std::filesystem::path tmp = path.string() + ".tmp";
    save_checkpoint(m, tmp.string());
    std::filesystem::rename(tmp, path);
    return ToyWorld{std::move(g), std::move(m), r};
  }();
  return toy;
}

}  // namespace kelab::testing
