#include "ilkd/data.hpp"

#include "binary_io.hpp"
#include "ilkd/errors.hpp"
#include "random.hpp"

#include <algorithm>
#include <set>

namespace ilkd {

namespace {

constexpr std::string_view kMagic = "ILAD1";
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxFeatureDim = 1u << 16;
constexpr std::uint32_t kMaxSymbols = 1u << 20;

Matrix gaussian_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rnd::standard_normal(rng);
  return m;
}

Matrix prototype_for(Label symbol, Index feature_dim, Index proto_len, std::uint64_t seed) {
  std::mt19937_64 rng(rnd::derive_seed(seed, static_cast<std::uint64_t>(symbol)));
  return gaussian_matrix(feature_dim, proto_len, rng);
}

}  // namespace

Index TaskSpec::feature_dim() const { return prototypes.empty() ? 0 : prototypes.begin()->second.rows(); }
Index TaskSpec::proto_len() const { return prototypes.empty() ? 0 : prototypes.begin()->second.cols(); }

void TaskSpec::validate() const {
  auto fail = [this](const std::string& what) { throw ConfigError("task '" + task_id + "': " + what); };
  if (num_symbols < 2) fail("num_symbols must be >= 2");
  if (inventory.empty()) fail("symbol inventory must be non-empty");
  for (Label s : inventory) {
    if (s < 1 || s >= num_symbols)
      fail("inventory symbol " + std::to_string(s) + " outside [1, " + std::to_string(num_symbols - 1) + "]");
    auto it = prototypes.find(s);
    if (it == prototypes.end()) fail("missing prototype for symbol " + std::to_string(s));
    if (it->second.rows() != feature_dim() || it->second.cols() != proto_len())
      fail("prototypes must share one shape");
    if (!it->second.allFinite()) fail("prototype for symbol " + std::to_string(s) + " is not finite");
  }
  if (transform) {
    if (transform->mixing.rows() != feature_dim() || transform->mixing.cols() != feature_dim() ||
        transform->bias.size() != feature_dim())
      fail("accent transform does not match the feature dimension");
  }
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (min_len < 1) fail("min utterance length must be >= 1");
  if (max_len < min_len) fail("max utterance length must be >= min length");
  if (num_samples < 0) fail("num_samples must be >= 0");
}

TaskSpec make_base_task(const BaseTaskOptions& o) {
  TaskSpec spec;
  spec.task_id = o.task_id;
  spec.num_symbols = o.num_symbols;
  spec.inventory = o.inventory;
  std::sort(spec.inventory.begin(), spec.inventory.end());
  for (Label s : spec.inventory) spec.prototypes[s] = prototype_for(s, o.feature_dim, o.proto_len, o.prototype_seed);
  spec.noise_std = o.noise_std;
  spec.min_len = o.min_len;
  spec.max_len = o.max_len;
  spec.num_samples = o.num_samples;
  spec.seed = o.seed;
  spec.validate();
  return spec;
}

Dataset generate_task(const TaskSpec& spec) {
  spec.validate();
  const Index F = spec.feature_dim();
  const Index P = spec.proto_len();

  std::map<Label, Matrix> acoustic = spec.prototypes;
  if (spec.transform) {
    for (auto& [symbol, proto] : acoustic) {
      Matrix mixed = spec.transform->mixing * proto;
      mixed.colwise() += spec.transform->bias;
      proto = std::move(mixed);
    }
  }

  Dataset out;
  out.feature_dim = F;
  out.num_symbols = spec.num_symbols;
  out.samples.reserve(static_cast<size_t>(spec.num_samples));
  const auto span = static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1);
  for (Index i = 0; i < spec.num_samples; ++i) {
    std::mt19937_64 rng(rnd::derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    const Index length = spec.min_len + static_cast<Index>(rnd::below(rng, span));
    Sample s;
    s.task_id = spec.task_id;
    s.index = static_cast<std::uint32_t>(i);
    s.y.resize(static_cast<size_t>(length));
    for (auto& label : s.y) label = spec.inventory[rnd::below(rng, spec.inventory.size())];
    s.x.resize(F, length * P);
    for (Index u = 0; u < length; ++u) s.x.middleCols(u * P, P) = acoustic.at(s.y[static_cast<size_t>(u)]);
    if (spec.noise_std > 0.0)
      for (Index j = 0; j < s.x.size(); ++j) s.x.data()[j] += spec.noise_std * rnd::standard_normal(rng);
    out.samples.push_back(std::move(s));
  }
  return out;
}

TaskSpec derive_accent_task(const TaskSpec& base, double rotation_strength, std::uint64_t seed) {
  if (!(rotation_strength >= 0.0 && rotation_strength <= 1.0))
    throw ConfigError("accent: rotation_strength must lie in [0, 1]");
  TaskSpec spec = base;
  spec.task_id = base.task_id + "+accent";
  const Index F = base.feature_dim();
  std::mt19937_64 rng(rnd::derive_seed(seed, 0xACCE17ull));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(gaussian_matrix(F, F, rng)));
  Eigen::MatrixXd q = qr.householderQ();
  // Fix column signs so R has a positive diagonal, making the draw unique.
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index c = 0; c < F; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  AccentTransform t;
  t.mixing = (1.0 - rotation_strength) * Matrix::Identity(F, F) + rotation_strength * Matrix(q);
  t.bias.resize(F);
  for (Index i = 0; i < F; ++i) t.bias(i) = 0.2 * rotation_strength * rnd::standard_normal(rng);
  if (base.transform) {
    t.bias = t.mixing * base.transform->bias + t.bias;
    t.mixing = t.mixing * base.transform->mixing;
  }
  spec.transform = std::move(t);
  return spec;
}

TaskSpec derive_newwords_task(const TaskSpec& base, const std::vector<Label>& new_symbols, std::uint64_t seed) {
  std::set<Label> existing(base.inventory.begin(), base.inventory.end());
  std::set<Label> added;
  for (Label s : new_symbols) {
    if (s < 1 || s >= base.num_symbols)
      throw ConfigError("new-words: symbol " + std::to_string(s) + " outside [1, " +
                        std::to_string(base.num_symbols - 1) + "]");
    if (existing.count(s)) throw ConfigError("new-words: symbol " + std::to_string(s) + " already in the inventory");
    if (!added.insert(s).second) throw ConfigError("new-words: duplicate symbol " + std::to_string(s));
  }
  TaskSpec spec = base;
  spec.task_id = base.task_id + "+words";
  spec.transform.reset();
  for (Label s : added) {
    spec.inventory.push_back(s);
    spec.prototypes[s] = prototype_for(s, base.feature_dim(), base.proto_len(), rnd::derive_seed(seed, 0x3E3ull));
  }
  std::sort(spec.inventory.begin(), spec.inventory.end());
  return spec;
}

TaskSpec with_draw(TaskSpec spec, Index num_samples, std::uint64_t seed) {
  spec.num_samples = num_samples;
  spec.seed = seed;
  return spec;
}

Dataset concat_datasets(const std::vector<const Dataset*>& parts) {
  Dataset out;
  if (parts.empty()) return out;
  out.feature_dim = parts.front()->feature_dim;
  out.num_symbols = parts.front()->num_symbols;
  for (const Dataset* d : parts) {
    if (d->feature_dim != out.feature_dim || d->num_symbols != out.num_symbols)
      throw DataError("cannot concatenate datasets with different F or M");
    out.samples.insert(out.samples.end(), d->samples.begin(), d->samples.end());
  }
  return out;
}

std::vector<char> encode_dataset(const Dataset& dataset) {
  binary::Writer w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(dataset.feature_dim));
  w.u32(static_cast<std::uint32_t>(dataset.num_symbols));
  w.u32(static_cast<std::uint32_t>(dataset.samples.size()));
  for (const auto& s : dataset.samples) {
    if (s.x.rows() != dataset.feature_dim) throw DataError("sample feature dimension differs from the dataset's");
    w.u32(static_cast<std::uint32_t>(s.x.cols()));
    w.u32(static_cast<std::uint32_t>(s.y.size()));
    for (Index i = 0; i < s.x.size(); ++i) w.f64(s.x.data()[i]);
    for (Label l : s.y) w.u32(static_cast<std::uint32_t>(l));
  }
  return w.buffer();
}

Dataset decode_dataset(std::string_view bytes) {
  binary::Reader r(bytes);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) throw ParseError("bad magic", 0);
  auto at = r.offset();
  if (const auto v = r.u32(); v != kVersion) throw ParseError("unsupported dataset version " + std::to_string(v), at);
  Dataset d;
  at = r.offset();
  const auto F = r.u32();
  if (F == 0 || F > kMaxFeatureDim) throw ParseError("dimension overflow: F = " + std::to_string(F), at);
  at = r.offset();
  const auto M = r.u32();
  if (M < 2 || M > kMaxSymbols) throw ParseError("dimension overflow: M = " + std::to_string(M), at);
  at = r.offset();
  const auto N = r.u32();
  // Every sample needs at least its two length fields.
  if (static_cast<std::uint64_t>(N) * 8 > r.remaining())
    throw ParseError("dimension overflow: N = " + std::to_string(N) + " exceeds the file size", at);
  d.feature_dim = F;
  d.num_symbols = M;
  d.samples.reserve(N);
  for (std::uint32_t i = 0; i < N; ++i) {
    at = r.offset();
    const auto S = r.u32();
    const auto U = r.u32();
    const std::uint64_t need = static_cast<std::uint64_t>(S) * F * 8 + static_cast<std::uint64_t>(U) * 4;
    if (S == 0) throw ParseError("sample " + std::to_string(i) + " has no frames", at);
    r.require(need);
    Sample s;
    s.index = i;
    s.x.resize(F, S);
    for (Index j = 0; j < s.x.size(); ++j) s.x.data()[j] = r.f64();
    s.y.resize(U);
    for (auto& l : s.y) {
      const auto lat = r.offset();
      const auto v = r.u32();
      if (v == 0 || v >= M) throw ParseError("label " + std::to_string(v) + " outside [1, M-1]", lat);
      l = static_cast<Label>(v);
    }
    d.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw ParseError("trailing bytes", r.offset());
  return d;
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  binary::write_file(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::string& path) { return decode_dataset(binary::read_file(path)); }

bool same_content(const Dataset& a, const Dataset& b) {
  if (a.feature_dim != b.feature_dim || a.num_symbols != b.num_symbols || a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& sa = a.samples[i];
    const auto& sb = b.samples[i];
    if (sa.y != sb.y || sa.x.rows() != sb.x.rows() || sa.x.cols() != sb.x.cols()) return false;
    if (std::memcmp(sa.x.data(), sb.x.data(), static_cast<size_t>(sa.x.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace ilkd
