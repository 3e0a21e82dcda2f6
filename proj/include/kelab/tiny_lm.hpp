#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "kelab/autodiff.hpp"

namespace kelab {

using TokenSeq = std::vector<int>;

class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LMConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_ctx = 64;
  std::uint64_t seed = 0;

  /// Throws ModelError on an inconsistent configuration.
  void validate() const;
  bool operator==(const LMConfig&) const = default;
};

/// Decoder-only pre-norm transformer with learned positions.
///
/// Parameters live in a flat, name-addressed list so that optimizers,
/// checkpoints, and edit selectors can all address them uniformly. The order
/// of params() is fixed by the configuration.
class TinyLM {
 public:
  /// Random initialization seeded from config.seed.
  explicit TinyLM(const LMConfig& config);

  /// Every parameter zero except layer-norm gains (one). Handy for
  /// degenerate-weight tests.
  static TinyLM zeros(const LMConfig& config);

  const LMConfig& config() const { return config_; }

  std::span<Tensor> params() { return params_; }
  std::span<const Tensor> params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t index_of(std::string_view name) const;
  Tensor& param(std::string_view name) { return params_[index_of(name)]; }
  const Tensor& param(std::string_view name) const { return params_[index_of(name)]; }
  std::size_t parameter_count() const;

  /// Pre-softmax logits [T x V]; registers every parameter as a tape leaf.
  Var forward(Tape& tape, std::span<const int> tokens);
  /// Same computation over a const model; nothing on the tape requires grad.
  Var forward(Tape& tape, std::span<const int> tokens) const;
  /// Logits without keeping a tape around.
  Matrix logits(std::span<const int> tokens) const;

  /// Deep copy with gradient tracking switched off everywhere.
  TinyLM snapshot() const;

  void set_requires_grad(bool on);
  void set_requires_grad(std::span<const std::size_t> which, bool on);
  void zero_grad();

  void check_tokens(std::span<const int> tokens) const;

 private:
  struct Uninitialized {};
  TinyLM(const LMConfig& config, Uninitialized);
  void add_param(std::string name, Matrix value);

  template <typename Model>
  static Var forward_impl(Model& model, Tape& tape, std::span<const int> tokens);

  LMConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

/// Euclidean distance between the flattened parameter vectors.
double l2_distance(const TinyLM& a, const TinyLM& b);
/// Same, restricted to the parameter indices in `which`.
double l2_distance(const TinyLM& a, const TinyLM& b, std::span<const std::size_t> which);
/// True when every parameter matches bit for bit.
bool bitwise_equal(const TinyLM& a, const TinyLM& b);

/// Which parameters an edit may touch.
class ParamSelector {
 public:
  struct All {};
  /// Negative layers count from the end (-1 is the last block).
  struct FfnOfLayer {
    int layer;
  };
  struct Named {
    std::vector<std::string> names;
  };

  ParamSelector() : spec_(FfnOfLayer{-2}) {}
  static ParamSelector all() { return ParamSelector(All{}); }
  static ParamSelector ffn_of_layer(int layer) { return ParamSelector(FfnOfLayer{layer}); }
  static ParamSelector named(std::vector<std::string> names) { return ParamSelector(Named{std::move(names)}); }

  /// Parses "all", "ffn:<layer>", or a comma-separated list of parameter names.
  static ParamSelector parse(std::string_view text);
  std::string to_string() const;

  /// Sorted parameter indices; throws ModelError for unknown layers or names.
  std::vector<std::size_t> resolve(const TinyLM& model) const;

 private:
  using Spec = std::variant<All, FfnOfLayer, Named>;
  explicit ParamSelector(Spec spec) : spec_(std::move(spec)) {}
  Spec spec_;
};

std::vector<std::size_t> select_params(const TinyLM& model, const ParamSelector& selector);
std::vector<Tensor*> tensors_of(TinyLM& model, std::span<const std::size_t> which);

// Checkpoint container: magic, format version, config, then named parameter
// blocks of little-endian doubles. load(save(m)) reproduces m bit for bit.
void save_checkpoint(const TinyLM& model, const std::string& path);
TinyLM load_checkpoint(const std::string& path);

}  // namespace kelab
