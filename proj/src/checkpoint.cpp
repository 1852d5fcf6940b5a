#include "klnorm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace klnorm {

namespace {

constexpr std::uint32_t kVersion = 1;

struct Writer {
  std::vector<std::uint8_t> bytes;

  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back((v >> (8 * i)) & 0xff);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) bytes.push_back((bits >> (8 * i)) & 0xff);
  }
  void tensor(const Tensor& t) {
    for (double v : t.data()) f64(v);
  }
};

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n) {
    if (pos + n > bytes.size()) {
      throw std::invalid_argument("checkpoint: truncated file");
    }
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos++]) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(bytes[pos++]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void fill(Tensor& t) {
    auto d = t.data_mut();
    for (double& v : d) v = f64();
  }
};

void write_linear(Writer& w, const Linear& l) {
  w.tensor(l.weight);
  w.tensor(l.bias);
}

void read_linear(Reader& r, Linear& l) {
  r.fill(l.weight);
  r.fill(l.bias);
}

void write_moving(Writer& w, const MovingStats& s) {
  w.tensor(s.mu_hat);
  w.tensor(s.var_hat);
  w.f64(s.alpha);
  w.f64(s.eps);
}

void read_moving(Reader& r, MovingStats& s) {
  r.fill(s.mu_hat);
  r.fill(s.var_hat);
  s.alpha = r.f64();
  s.eps = r.f64();
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  Writer w;
  w.bytes = {'K', 'L', 'N', '1'};
  w.u32(kVersion);
  const auto& spec = model.spec;
  w.u32(static_cast<std::uint32_t>(spec.d_in));
  w.u32(static_cast<std::uint32_t>(spec.k));
  const auto hidden =
      spec.hidden.empty() ? ModelSpec::default_hidden(spec.d_in, spec.k)
                          : spec.hidden;
  w.u32(static_cast<std::uint32_t>(hidden.size()));
  for (std::size_t h : hidden) w.u32(static_cast<std::uint32_t>(h));
  w.u8(static_cast<std::uint8_t>(spec.norm_kind));
  w.u32(static_cast<std::uint32_t>(spec.groups));
  w.u32(static_cast<std::uint32_t>(spec.n_classes));

  for (const auto& l : model.encoder) write_linear(w, l);
  write_linear(w, model.classifier);

  if (const auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    w.tensor(bn->gamma);
    w.tensor(bn->beta_affine);
    write_moving(w, bn->stats);
  } else if (const auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    w.tensor(ln->gamma);
    w.tensor(ln->beta_affine);
    w.f64(ln->eps);
  } else if (const auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    w.tensor(gn->gamma);
    w.tensor(gn->beta_affine);
    w.f64(gn->eps);
  } else if (const auto* kn = std::get_if<KlNormState>(&model.norm)) {
    w.tensor(kn->mean_weight);
    w.tensor(kn->mean_bias);
    w.tensor(kn->logvar_weight);
    w.tensor(kn->logvar_bias);
    write_moving(w, kn->stats);
  }
  return std::move(w.bytes);
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), "KLN1", 4) != 0) {
    throw std::invalid_argument("checkpoint: bad magic, expected KLN1");
  }
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::invalid_argument("checkpoint: unsupported version " +
                                std::to_string(version));
  }
  ModelSpec spec;
  spec.d_in = r.u32();
  spec.k = r.u32();
  const std::uint32_t n_hidden = r.u32();
  for (std::uint32_t i = 0; i < n_hidden; ++i) spec.hidden.push_back(r.u32());
  const std::uint8_t kind = r.u8();
  if (kind > static_cast<std::uint8_t>(NormKind::klnorm)) {
    throw std::invalid_argument("checkpoint: bad norm kind byte");
  }
  spec.norm_kind = static_cast<NormKind>(kind);
  spec.groups = r.u32();
  spec.n_classes = r.u32();

  Model model = build_model(spec, /*seed=*/0);
  for (auto& l : model.encoder) read_linear(r, l);
  read_linear(r, model.classifier);
  if (auto* bn = std::get_if<BatchNormState>(&model.norm)) {
    r.fill(bn->gamma);
    r.fill(bn->beta_affine);
    read_moving(r, bn->stats);
  } else if (auto* ln = std::get_if<LayerNormState>(&model.norm)) {
    r.fill(ln->gamma);
    r.fill(ln->beta_affine);
    ln->eps = r.f64();
  } else if (auto* gn = std::get_if<GroupNormState>(&model.norm)) {
    r.fill(gn->gamma);
    r.fill(gn->beta_affine);
    gn->eps = r.f64();
  } else if (auto* kn = std::get_if<KlNormState>(&model.norm)) {
    r.fill(kn->mean_weight);
    r.fill(kn->mean_bias);
    r.fill(kn->logvar_weight);
    r.fill(kn->logvar_bias);
    read_moving(r, kn->stats);
  }
  if (r.pos != bytes.size()) {
    throw std::invalid_argument("checkpoint: trailing bytes");
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::invalid_argument("save_checkpoint: cannot open " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::invalid_argument("load_checkpoint: cannot open " + path.string());
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace klnorm
