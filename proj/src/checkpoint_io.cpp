#include "ilkd/checkpoint_io.hpp"

#include "binary_io.hpp"

namespace ilkd {

namespace {

constexpr std::string_view kMagic = "ILCK1";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 20;

void put_matrix_header(binary::Writer& w, const std::string& name, const Matrix& m) {
  w.str(name);
  w.u32(2);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
}

void put_values(binary::Writer& w, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
}

std::pair<Index, Index> get_dims(binary::Reader& r) {
  const auto at = r.offset();
  const auto rank = r.u32();
  if (rank < 1 || rank > 2) throw ParseError("unsupported tensor rank " + std::to_string(rank), at);
  std::uint32_t dims[2] = {1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto dat = r.offset();
    dims[i] = r.u32();
    if (dims[i] == 0 || dims[i] > kMaxDim) throw ParseError("dimension overflow", dat);
  }
  if (rank == 1) return {1, dims[0]};
  return {dims[0], dims[1]};
}

Matrix get_values(binary::Reader& r, Index rows, Index cols) {
  const auto bytes = static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) * 8;
  r.require(bytes);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.f64();
  return m;
}

std::uint32_t get_count(binary::Reader& r, const char* what) {
  const auto at = r.offset();
  const auto n = r.u32();
  if (n > kMaxDim) throw ParseError(std::string(what) + " count overflow", at);
  return n;
}

}  // namespace

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  binary::Writer w;
  w.bytes(kMagic);
  w.u32(kVersion);
  const auto& c = ckpt.config;
  w.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(c.conv_layers.size()));
  for (const auto& conv : c.conv_layers) {
    w.u32(static_cast<std::uint32_t>(conv.channels));
    w.u32(static_cast<std::uint32_t>(conv.kernel));
    w.u32(static_cast<std::uint32_t>(conv.stride));
  }
  w.u32(static_cast<std::uint32_t>(c.num_sabs));
  w.u32(static_cast<std::uint32_t>(c.d_h));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.u32(static_cast<std::uint32_t>(c.ff_dim));
  w.u32(static_cast<std::uint32_t>(c.fc_dims.size()));
  for (Index d : c.fc_dims) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(c.blank_id));

  w.i32(ckpt.stage);
  w.str(ckpt.method);

  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, m] : ckpt.params) {
    put_matrix_header(w, name, m);
    put_values(w, m);
  }

  w.u8(ckpt.ewc ? 1 : 0);
  if (ckpt.ewc) {
    w.u32(static_cast<std::uint32_t>(ckpt.ewc->reference.size()));
    for (const auto& [name, ref] : ckpt.ewc->reference) {
      put_matrix_header(w, name, ref);
      put_values(w, ref);
      put_values(w, ckpt.ewc->fisher.at(name));
    }
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  binary::Reader r(bytes);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) throw ParseError("bad magic", 0);
  const auto version_at = r.offset();
  if (const auto v = r.u32(); v != kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(v), version_at);

  Checkpoint ckpt;
  auto& c = ckpt.config;
  c.input_dim = r.u32();
  c.conv_layers.resize(get_count(r, "conv layer"));
  for (auto& conv : c.conv_layers) {
    conv.channels = r.u32();
    conv.kernel = r.u32();
    conv.stride = r.u32();
  }
  c.num_sabs = r.u32();
  c.d_h = r.u32();
  c.num_heads = r.u32();
  c.ff_dim = r.u32();
  c.fc_dims.resize(get_count(r, "fc layer"));
  for (auto& d : c.fc_dims) d = r.u32();
  c.blank_id = r.u32();
  const auto config_end = r.offset();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("invalid config block: ") + e.what(), config_end);
  }

  ckpt.stage = r.i32();
  ckpt.method = r.str();

  const auto expected = parameter_shapes(c);
  const auto count = get_count(r, "parameter");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    std::string name = r.str();
    const auto [rows, cols] = get_dims(r);
    auto it = expected.find(name);
    if (it == expected.end()) throw ParseError("unknown parameter '" + name + "'", at);
    if (it->second != std::make_pair(rows, cols)) throw ParseError("shape mismatch for '" + name + "'", at);
    if (ckpt.params.count(name)) throw ParseError("duplicate parameter '" + name + "'", at);
    ckpt.params.emplace(std::move(name), get_values(r, rows, cols));
  }
  if (ckpt.params.size() != expected.size())
    throw ParseError("checkpoint is missing parameters", r.offset());

  if (r.u8() != 0) {
    EwcState ewc;
    const auto n = get_count(r, "ewc entry");
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto at = r.offset();
      std::string name = r.str();
      const auto [rows, cols] = get_dims(r);
      auto it = ckpt.params.find(name);
      if (it == ckpt.params.end() || it->second.rows() != rows || it->second.cols() != cols)
        throw ParseError("ewc entry '" + name + "' does not match a parameter", at);
      ewc.reference.emplace(name, get_values(r, rows, cols));
      ewc.fisher.emplace(std::move(name), get_values(r, rows, cols));
    }
    ckpt.ewc = std::move(ewc);
  }
  if (!r.at_end()) throw ParseError("trailing bytes", r.offset());
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  binary::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(binary::read_file(path)); }

}  // namespace ilkd
