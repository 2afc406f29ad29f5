// Convolutional front-end + self-attention encoder + fully connected CTC head.
//
//   x (F x S) -> [conv1d over time, ReLU] x L -> + sinusoidal positions
//     -> [pre-norm self-attention block] x N -> final layer norm = feature map A
//     -> [FC, ReLU] ... -> FC -> log-softmax
//
// Tensors inside the model are frame-major: the feature map A is K x d_h,
// i.e. row k holds the d_h-dimensional vector of frame k.

#pragma once

#include "ilkd/posteriors.hpp"
#include "ilkd/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ilkd {

struct ConvSpec {
  Index channels = 32;
  Index kernel = 3;
  Index stride = 2;
  bool operator==(const ConvSpec&) const = default;
};

struct ModelConfig {
  Index input_dim = 16;
  std::vector<ConvSpec> conv_layers{{32, 3, 2}, {32, 3, 2}};
  Index num_sabs = 2;
  Index d_h = 32;
  Index num_heads = 4;
  Index ff_dim = 64;
  std::vector<Index> fc_dims{64, 13};
  Index blank_id = 0;

  Index num_symbols() const { return fc_dims.empty() ? 0 : fc_dims.back(); }
  /// Throws ConfigError naming the violated constraint. When `expected_symbols`
  /// is positive, the last FC width must equal it.
  void validate(Index expected_symbols = 0) const;
  bool operator==(const ModelConfig&) const = default;
};

/// Smallest config used by gradient checks: d_h = 8, 2 blocks, 2 heads.
ModelConfig tiny_config(Index input_dim = 4, Index num_symbols = 3);

using ParameterMap = std::map<std::string, Matrix>;

/// Reference parameters and diagonal Fisher for the quadratic consolidation penalty.
struct EwcState {
  ParameterMap reference;
  ParameterMap fisher;
  bool operator==(const EwcState&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  ParameterMap params;
  std::int32_t stage = 0;
  std::string method;
  std::optional<EwcState> ewc;

  std::size_t parameter_count() const;
  bool operator==(const Checkpoint&) const = default;
};

/// Number of output frames for S input frames: ceil-division by each stride.
Index downsampled_length(Index input_frames, const ModelConfig& config);

/// Glorot-uniform weights (gain 1), zero biases, unit layer-norm gains.
/// Bit-identical for equal (config, seed).
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed);

/// Parameter shapes implied by a config, keyed by parameter name.
std::map<std::string, std::pair<Index, Index>> parameter_shapes(const ModelConfig& config);

/// Leaf tensors bound to a checkpoint's parameters for one forward/backward.
class ModelParameters {
 public:
  static ModelParameters bind(const ParameterMap& params, bool trainable);
  static ModelParameters bind(const Checkpoint& ckpt, bool trainable) { return bind(ckpt.params, trainable); }

  const Tensor& at(const std::string& name) const;
  bool trainable() const { return trainable_; }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  /// Copy with one parameter swapped for `value` (same shape required).
  ModelParameters replace(const std::string& name, Tensor value) const;

  /// d(loss)/d(parameter) for every parameter, in names() order.
  std::vector<Matrix> gradients(const Tensor& loss) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  bool trainable_ = false;
};

struct EncoderOutput {
  Posteriors posteriors;
  /// Last block's output after the final layer norm, K x d_h. Always requires
  /// grad: when the parameters are frozen it is a fresh leaf, so importance
  /// maps can still be taken with respect to it.
  Tensor feature_map;
  FrameMask frame_mask;
};

/// Runs the model on x (F x S). Frames at or beyond `valid_frames` are padding:
/// they are zeroed at the input, excluded as attention keys and masked in the
/// output. Throws ShapeError for a wrong feature dimension or S < 1.
EncoderOutput forward(const ModelConfig& config, const ModelParameters& params, const Matrix& x,
                      std::optional<Index> valid_frames = std::nullopt);
EncoderOutput forward(const Checkpoint& ckpt, const Matrix& x, std::optional<Index> valid_frames = std::nullopt);

/// The FC head alone, applied to a feature map: returns K x M log-probabilities.
Tensor head_log_probs(const ModelConfig& config, const ModelParameters& params, const Tensor& feature_map);

}  // namespace ilkd
