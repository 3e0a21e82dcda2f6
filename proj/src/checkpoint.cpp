#include <bit>
#include <cstdint>
#include <fstream>

#include "kelab/tiny_lm.hpp"

namespace kelab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'K', 'E', 'L', 'A', 'B', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    throw ModelError("truncated checkpoint '" + path + "'");
  }
  return v;
}

}  // namespace

void save_checkpoint(const TinyLM& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw ModelError("cannot open '" + path + "' for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  put(out, kVersion);
  const LMConfig& c = model.config();
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_ctx}) {
    put(out, static_cast<std::int32_t>(v));
  }
  put(out, static_cast<std::uint64_t>(c.seed));
  put(out, static_cast<std::uint32_t>(model.params().size()));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string& name = model.names()[i];
    const Matrix& v = model.params()[i].value();
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::int64_t>(v.rows()));
    put(out, static_cast<std::int64_t>(v.cols()));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
  }
  if (!out) {
    throw ModelError("write failed for '" + path + "'");
  }
}

TinyLM load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ModelError("cannot open checkpoint '" + path + "'");
  }
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic))) {
    throw ModelError("'" + path + "' is not a kelab checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw ModelError("unsupported checkpoint version " + std::to_string(version));
  }
  LMConfig c;
  c.vocab_size = get<std::int32_t>(in, path);
  c.d_model = get<std::int32_t>(in, path);
  c.n_layers = get<std::int32_t>(in, path);
  c.n_heads = get<std::int32_t>(in, path);
  c.d_ff = get<std::int32_t>(in, path);
  c.max_ctx = get<std::int32_t>(in, path);
  c.seed = get<std::uint64_t>(in, path);

  TinyLM model = TinyLM::zeros(c);
  const auto count = get<std::uint32_t>(in, path);
  if (count != model.params().size()) {
    throw ModelError("checkpoint has " + std::to_string(count) + " parameters, config implies " +
                     std::to_string(model.params().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rows = get<std::int64_t>(in, path);
    const auto cols = get<std::int64_t>(in, path);
    Tensor& t = model.param(name);
    if (t.shape() != Shape{rows, cols}) {
      throw ModelError("parameter '" + name + "' has shape " + to_string({rows, cols}) + ", expected " +
                       to_string(t.shape()));
    }
    in.read(reinterpret_cast<char*>(t.value().data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
    if (!in) {
      throw ModelError("truncated checkpoint '" + path + "'");
    }
  }
  return model;
}

}  // namespace kelab
