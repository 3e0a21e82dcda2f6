#include "kelab/tiny_lm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <type_traits>

namespace kelab {

void LMConfig::validate() const {
  if (vocab_size < 2) {
    throw ModelError("vocab_size must be >= 2");
  }
  if (max_ctx < 2) {
    throw ModelError("max_ctx must be >= 2");
  }
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) {
    throw ModelError("d_model, n_layers, n_heads and d_ff must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ModelError("d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  }
}

namespace {

std::string layer_prefix(int layer) { return "h" + std::to_string(layer) + "."; }

}  // namespace

TinyLM::TinyLM(const LMConfig& config, Uninitialized) : config_(config) { config_.validate(); }

void TinyLM::add_param(std::string name, Matrix value) {
  params_.emplace_back(std::move(value), false);
  names_.push_back(std::move(name));
}

TinyLM TinyLM::zeros(const LMConfig& config) {
  TinyLM m(config, Uninitialized{});
  const int d = config.d_model, V = config.vocab_size;
  m.add_param("tok_emb", Matrix::Zero(V, d));
  m.add_param("pos_emb", Matrix::Zero(config.max_ctx, d));
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    m.add_param(p + "ln1.g", Matrix::Ones(1, d));
    m.add_param(p + "ln1.b", Matrix::Zero(1, d));
    m.add_param(p + "attn.wq", Matrix::Zero(d, d));
    m.add_param(p + "attn.wk", Matrix::Zero(d, d));
    m.add_param(p + "attn.wv", Matrix::Zero(d, d));
    m.add_param(p + "attn.wo", Matrix::Zero(d, d));
    m.add_param(p + "ln2.g", Matrix::Ones(1, d));
    m.add_param(p + "ln2.b", Matrix::Zero(1, d));
    m.add_param(p + "ffn.w1", Matrix::Zero(d, config.d_ff));
    m.add_param(p + "ffn.b1", Matrix::Zero(1, config.d_ff));
    m.add_param(p + "ffn.w2", Matrix::Zero(config.d_ff, d));
    m.add_param(p + "ffn.b2", Matrix::Zero(1, d));
  }
  m.add_param("ln_f.g", Matrix::Ones(1, d));
  m.add_param("ln_f.b", Matrix::Zero(1, d));
  m.add_param("unembed.w", Matrix::Zero(d, V));
  m.add_param("unembed.b", Matrix::Zero(1, V));
  return m;
}

TinyLM::TinyLM(const LMConfig& config) : TinyLM(zeros(config)) {
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& n = names_[i];
    const bool gain_or_bias = n.ends_with(".g") || n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2");
    if (gain_or_bias) {
      continue;
    }
    const double s = (n.ends_with("attn.wo") || n.ends_with("ffn.w2")) ? std_resid : std_base;
    Matrix& v = params_[i].value();
    for (Index c = 0; c < v.cols(); ++c) {
      for (Index r = 0; r < v.rows(); ++r) {
        v(r, c) = s * normal(rng);
      }
    }
  }
}

std::size_t TinyLM::index_of(std::string_view name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) {
    throw ModelError("unknown parameter '" + std::string(name) + "'");
  }
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t TinyLM::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : params_) {
    n += static_cast<std::size_t>(t.size());
  }
  return n;
}

void TinyLM::check_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) {
    throw ModelError("empty token sequence");
  }
  if (static_cast<int>(tokens.size()) > config_.max_ctx) {
    throw ModelError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_ctx " +
                     std::to_string(config_.max_ctx));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config_.vocab_size) {
      throw ModelError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " out of range for vocab_size " + std::to_string(config_.vocab_size));
    }
  }
}

template <typename Model>
Var TinyLM::forward_impl(Model& model, Tape& tape, std::span<const int> tokens) {
  model.check_tokens(tokens);
  const LMConfig& cfg = model.config_;
  std::size_t next = 0;
  auto take = [&]() -> Var {
    auto& t = model.params_[next++];
    if constexpr (std::is_const_v<Model>) {
      return tape.constant_view(t.value());
    } else {
      return tape.leaf(t);
    }
  };

  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);

  const Var tok_emb = take();
  const Var pos_emb = take();
  Var x = add(gather_rows(tok_emb, tokens), gather_rows(pos_emb, positions));

  const int dh = cfg.d_model / cfg.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Var ln1_g = take(), ln1_b = take();
    const Var wq = take(), wk = take(), wv = take(), wo = take();
    const Var ln2_g = take(), ln2_b = take();
    const Var w1 = take(), b1 = take(), w2 = take(), b2 = take();

    const Var h = layer_norm_rows(x, ln1_g, ln1_b);
    const Var q = matmul(h, wq), k = matmul(h, wk), v = matmul(h, wv);
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      const Var qh = slice_cols(q, hd * dh, dh);
      const Var kh = slice_cols(k, hd * dh, dh);
      const Var vh = slice_cols(v, hd * dh, dh);
      const Var scores = causal_mask(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
      heads.push_back(matmul(softmax_rows(scores), vh));
    }
    x = add(x, matmul(hconcat(heads), wo));

    const Var h2 = layer_norm_rows(x, ln2_g, ln2_b);
    const Var ff = add_row(matmul(gelu(add_row(matmul(h2, w1), b1)), w2), b2);
    x = add(x, ff);
  }
  const Var lnf_g = take(), lnf_b = take();
  const Var wu = take(), bu = take();
  return add_row(matmul(layer_norm_rows(x, lnf_g, lnf_b), wu), bu);
}

Var TinyLM::forward(Tape& tape, std::span<const int> tokens) { return forward_impl(*this, tape, tokens); }

Var TinyLM::forward(Tape& tape, std::span<const int> tokens) const { return forward_impl(*this, tape, tokens); }

Matrix TinyLM::logits(std::span<const int> tokens) const {
  Tape tape;
  return forward(tape, tokens).value();
}

TinyLM TinyLM::snapshot() const {
  TinyLM copy = *this;
  copy.set_requires_grad(false);
  return copy;
}

void TinyLM::set_requires_grad(bool on) {
  for (Tensor& t : params_) {
    t.set_requires_grad(on);
  }
}

void TinyLM::set_requires_grad(std::span<const std::size_t> which, bool on) {
  for (std::size_t i : which) {
    params_.at(i).set_requires_grad(on);
  }
}

void TinyLM::zero_grad() {
  for (Tensor& t : params_) {
    t.zero_grad();
  }
}

// -------------------------------------------------------------- comparisons

namespace {

void require_same_layout(const TinyLM& a, const TinyLM& b) {
  if (a.names() != b.names()) {
    throw ModelError("models have different parameter layouts");
  }
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].shape() != b.params()[i].shape()) {
      throw ModelError("parameter '" + a.names()[i] + "' shape mismatch " + to_string(a.params()[i].shape()) +
                       " vs " + to_string(b.params()[i].shape()));
    }
  }
}

}  // namespace

double l2_distance(const TinyLM& a, const TinyLM& b) {
  std::vector<std::size_t> all(a.params().size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return l2_distance(a, b, all);
}

double l2_distance(const TinyLM& a, const TinyLM& b, std::span<const std::size_t> which) {
  require_same_layout(a, b);
  double acc = 0.0;
  for (std::size_t i : which) {
    acc += (a.params()[i].value() - b.params()[i].value()).squaredNorm();
  }
  return std::sqrt(acc);
}

bool bitwise_equal(const TinyLM& a, const TinyLM& b) {
  if (!(a.config() == b.config()) || a.names() != b.names()) {
    return false;
  }
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const Matrix& x = a.params()[i].value();
    const Matrix& y = b.params()[i].value();
    if (x.rows() != y.rows() || x.cols() != y.cols()) {
      return false;
    }
    if (std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------- selectors

ParamSelector ParamSelector::parse(std::string_view text) {
  if (text == "all") {
    return all();
  }
  if (text.starts_with("ffn:")) {
    const std::string_view num = text.substr(4);
    int layer = 0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), layer);
    if (ec != std::errc() || ptr != num.data() + num.size()) {
      throw ModelError("bad layer index in selector '" + std::string(text) + "'");
    }
    return ffn_of_layer(layer);
  }
  std::vector<std::string> names;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string_view part = text.substr(start, comma == std::string_view::npos ? text.size() - start : comma - start);
    if (!part.empty()) {
      names.emplace_back(part);
    }
    if (comma == std::string_view::npos) {
      break;
    }
    start = comma + 1;
  }
  if (names.empty()) {
    throw ModelError("empty parameter selector");
  }
  return named(std::move(names));
}

std::string ParamSelector::to_string() const {
  if (std::holds_alternative<All>(spec_)) {
    return "all";
  }
  if (const auto* f = std::get_if<FfnOfLayer>(&spec_)) {
    return "ffn:" + std::to_string(f->layer);
  }
  std::string out;
  for (const std::string& n : std::get<Named>(spec_).names) {
    out += (out.empty() ? "" : ",") + n;
  }
  return out;
}

std::vector<std::size_t> ParamSelector::resolve(const TinyLM& model) const {
  std::vector<std::size_t> out;
  if (std::holds_alternative<All>(spec_)) {
    out.resize(model.params().size());
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  if (const auto* f = std::get_if<FfnOfLayer>(&spec_)) {
    const int n = model.config().n_layers;
    const int layer = f->layer < 0 ? n + f->layer : f->layer;
    if (layer < 0 || layer >= n) {
      throw ModelError("unknown layer index " + std::to_string(f->layer) + " for a " + std::to_string(n) +
                       "-layer model");
    }
    const std::string p = layer_prefix(layer);
    for (const char* s : {"ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"}) {
      out.push_back(model.index_of(p + s));
    }
  } else {
    for (const std::string& n : std::get<Named>(spec_).names) {
      out.push_back(model.index_of(n));
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::size_t> select_params(const TinyLM& model, const ParamSelector& selector) {
  return selector.resolve(model);
}

std::vector<Tensor*> tensors_of(TinyLM& model, std::span<const std::size_t> which) {
  std::vector<Tensor*> out;
  out.reserve(which.size());
  for (std::size_t i : which) {
    out.push_back(&model.params()[i]);
  }
  return out;
}

}  // namespace kelab
