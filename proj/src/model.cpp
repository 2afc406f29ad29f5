#include "ilkd/model.hpp"

#include "ilkd/errors.hpp"
#include "ilkd/ops.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ilkd {

namespace {

std::string layer_name(const char* prefix, std::size_t i) { return prefix + std::to_string(i); }

Matrix sinusoidal_positions(Index frames, Index dim) {
  Matrix pe(frames, dim);
  for (Index k = 0; k < frames; ++k)
    for (Index i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe(k, i) = (i % 2 == 0) ? std::sin(static_cast<double>(k) * rate) : std::cos(static_cast<double>(k) * rate);
    }
  return pe;
}

Tensor linear(const Tensor& x, const ModelParameters& p, const std::string& name) {
  return add_rowwise(matmul(x, p.at(name + ".weight")), p.at(name + ".bias"));
}

Tensor norm_affine(const Tensor& x, const ModelParameters& p, const std::string& name) {
  return add_rowwise(mul_rowwise(layer_norm_rows(x), p.at(name + ".gain")), p.at(name + ".bias"));
}

Tensor self_attention(const Tensor& x, const ModelParameters& p, const std::string& name, Index heads,
                      const std::optional<Tensor>& key_bias) {
  const Index dim = x.cols();
  const Index head_dim = dim / heads;
  Tensor q = linear(x, p, name + ".q");
  Tensor k = linear(x, p, name + ".k");
  Tensor v = linear(x, p, name + ".v");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * head_dim, head_dim);
    Tensor kh = slice_cols(k, h * head_dim, head_dim);
    Tensor vh = slice_cols(v, h * head_dim, head_dim);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (key_bias) scores = add(scores, *key_bias);
    contexts.push_back(matmul(softmax_rows(scores), vh));
  }
  return linear(concat_cols(contexts), p, name + ".o");
}

}  // namespace

void ModelConfig::validate(Index expected_symbols) const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (input_dim < 1) fail("input_dim must be positive");
  if (conv_layers.empty()) fail("at least one conv layer is required");
  for (const auto& c : conv_layers) {
    if (c.channels < 1) fail("conv channels must be positive");
    if (c.kernel < 1) fail("conv kernel must be positive");
    if (c.stride < 1) fail("conv strides must be >= 1");
  }
  if (conv_layers.back().channels != d_h) fail("last conv layer channels must equal d_h");
  if (num_sabs < 1) fail("num_sabs must be positive");
  if (d_h < 1 || num_heads < 1) fail("d_h and num_heads must be positive");
  if (d_h % num_heads != 0) fail("d_h mod num_heads must be 0");
  if (ff_dim < 1) fail("ff_dim must be positive");
  if (fc_dims.empty()) fail("fc_dims must not be empty");
  for (Index d : fc_dims)
    if (d < 1) fail("fc_dims entries must be positive");
  if (fc_dims.back() < 2) fail("last fc_dim (M) must be >= 2");
  if (expected_symbols > 0 && fc_dims.back() != expected_symbols)
    fail("fc_dims must end in M = " + std::to_string(expected_symbols) + ", got " +
         std::to_string(fc_dims.back()));
  if (blank_id != 0) fail("blank_id is fixed at 0");
}

ModelConfig tiny_config(Index input_dim, Index num_symbols) {
  ModelConfig c;
  c.input_dim = input_dim;
  c.conv_layers = {{8, 3, 2}};
  c.num_sabs = 2;
  c.d_h = 8;
  c.num_heads = 2;
  c.ff_dim = 12;
  c.fc_dims = {8, num_symbols};
  return c;
}

std::size_t Checkpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : params) n += static_cast<std::size_t>(m.size());
  return n;
}

Index downsampled_length(Index input_frames, const ModelConfig& config) {
  Index k = input_frames;
  for (const auto& c : config.conv_layers) k = (k + c.stride - 1) / c.stride;
  return k;
}

std::map<std::string, std::pair<Index, Index>> parameter_shapes(const ModelConfig& config) {
  std::map<std::string, std::pair<Index, Index>> shapes;
  Index in = config.input_dim;
  for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& c = config.conv_layers[i];
    shapes[layer_name("conv", i) + ".weight"] = {c.kernel * in, c.channels};
    shapes[layer_name("conv", i) + ".bias"] = {1, c.channels};
    in = c.channels;
  }
  const Index d = config.d_h;
  for (Index b = 0; b < config.num_sabs; ++b) {
    const std::string s = layer_name("sab", static_cast<std::size_t>(b));
    for (const char* ln : {".ln1", ".ln2"}) {
      shapes[s + ln + ".gain"] = {1, d};
      shapes[s + ln + ".bias"] = {1, d};
    }
    for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
      shapes[s + proj + ".weight"] = {d, d};
      shapes[s + proj + ".bias"] = {1, d};
    }
    shapes[s + ".ff1.weight"] = {d, config.ff_dim};
    shapes[s + ".ff1.bias"] = {1, config.ff_dim};
    shapes[s + ".ff2.weight"] = {config.ff_dim, d};
    shapes[s + ".ff2.bias"] = {1, d};
  }
  shapes["final_ln.gain"] = {1, d};
  shapes["final_ln.bias"] = {1, d};
  in = d;
  for (std::size_t i = 0; i < config.fc_dims.size(); ++i) {
    shapes[layer_name("fc", i) + ".weight"] = {in, config.fc_dims[i]};
    shapes[layer_name("fc", i) + ".bias"] = {1, config.fc_dims[i]};
    in = config.fc_dims[i];
  }
  return shapes;
}

Checkpoint init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  std::mt19937_64 rng(seed);
  // std::map iteration order is sorted by name, so draws are reproducible.
  for (const auto& [name, shape] : parameter_shapes(config)) {
    const auto [rows, cols] = shape;
    Matrix m;
    if (name.ends_with(".gain")) {
      m = Matrix::Ones(rows, cols);
    } else if (name.ends_with(".bias")) {
      m = Matrix::Zero(rows, cols);
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
      m.resize(rows, cols);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = limit * (2.0 * rnd::unit_uniform(rng) - 1.0);
    }
    ckpt.params.emplace(name, std::move(m));
  }
  return ckpt;
}

ModelParameters ModelParameters::bind(const ParameterMap& params, bool trainable) {
  ModelParameters p;
  p.trainable_ = trainable;
  for (const auto& [name, value] : params) {
    p.names_.push_back(name);
    p.tensors_.push_back(Tensor::from_matrix(value, Shape{value.rows(), value.cols()}, trainable));
  }
  return p;
}

const Tensor& ModelParameters::at(const std::string& name) const {
  auto it = std::lower_bound(names_.begin(), names_.end(), name);
  if (it == names_.end() || *it != name) throw ConfigError("model: missing parameter '" + name + "'");
  return tensors_[static_cast<size_t>(it - names_.begin())];
}

ModelParameters ModelParameters::replace(const std::string& name, Tensor value) const {
  const Tensor& current = at(name);
  if (current.rows() != value.rows() || current.cols() != value.cols())
    throw ShapeError("replace: parameter '" + name + "' has shape " + shape_string(current.shape()) + ", got " +
                     shape_string(value.shape()));
  ModelParameters copy = *this;
  auto it = std::lower_bound(copy.names_.begin(), copy.names_.end(), name);
  copy.tensors_[static_cast<size_t>(it - copy.names_.begin())] = std::move(value);
  return copy;
}

std::vector<Matrix> ModelParameters::gradients(const Tensor& loss) const { return gradient(loss, tensors_); }

Tensor head_log_probs(const ModelConfig& config, const ModelParameters& params, const Tensor& feature_map) {
  Tensor h = feature_map;
  for (std::size_t i = 0; i < config.fc_dims.size(); ++i) {
    h = linear(h, params, layer_name("fc", i));
    if (i + 1 < config.fc_dims.size()) h = relu(h);
  }
  return log_softmax_rows(h);
}

EncoderOutput forward(const ModelConfig& config, const ModelParameters& params, const Matrix& x,
                      std::optional<Index> valid_frames) {
  if (x.rows() != config.input_dim)
    throw ShapeError("forward: expected " + std::to_string(config.input_dim) + " feature rows, got input [" +
                     std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + "]");
  const Index frames = x.cols();
  Index valid = valid_frames.value_or(frames);
  if (frames < 1 || valid < 1)
    throw ShapeError("forward: input needs at least 1 frame (minimum length 1), got " + std::to_string(valid));
  if (valid > frames) throw ShapeError("forward: valid_frames exceeds the input length");
  const bool padded = valid < frames;

  Tensor h = Tensor::from_matrix(Matrix(x.transpose()), Shape{frames, x.rows()});
  Index length = frames;
  if (padded) h = mask_rows(h, prefix_mask(length, valid));
  for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
    const auto& c = config.conv_layers[i];
    h = relu(linear(im2col_time(h, c.kernel, c.stride), params, layer_name("conv", i)));
    length = (length + c.stride - 1) / c.stride;
    valid = (valid + c.stride - 1) / c.stride;
    if (padded) h = mask_rows(h, prefix_mask(length, valid));
  }
  h = add(h, Tensor::from_matrix(sinusoidal_positions(length, config.d_h), Shape{length, config.d_h}));

  std::optional<Tensor> key_bias;
  if (padded) {
    Matrix bias = Matrix::Zero(length, length);
    bias.rightCols(length - valid).setConstant(-1e30);
    key_bias = Tensor::from_matrix(std::move(bias), Shape{length, length});
  }
  for (Index b = 0; b < config.num_sabs; ++b) {
    const std::string s = layer_name("sab", static_cast<std::size_t>(b));
    h = add(h, self_attention(norm_affine(h, params, s + ".ln1"), params, s + ".attn", config.num_heads, key_bias));
    Tensor ff = linear(relu(linear(norm_affine(h, params, s + ".ln2"), params, s + ".ff1")), params, s + ".ff2");
    h = add(h, ff);
  }
  Tensor feature_map = norm_affine(h, params, "final_ln");
  if (!feature_map.requires_grad()) feature_map = feature_map.detach().set_requires_grad(true);

  FrameMask mask = prefix_mask(length, valid);
  Tensor log_probs = head_log_probs(config, params, feature_map);
  return {Posteriors{std::move(log_probs), mask}, std::move(feature_map), mask};
}

EncoderOutput forward(const Checkpoint& ckpt, const Matrix& x, std::optional<Index> valid_frames) {
  return forward(ckpt.config, ModelParameters::bind(ckpt, false), x, valid_frames);
}

}  // namespace ilkd
