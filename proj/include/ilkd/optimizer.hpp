// Adaptive-moment optimizer with an inverse-square-root warmup schedule:
//   lr(step) = peak * min(step / warmup, sqrt(warmup / step)),  step >= 1.

#pragma once

#include "ilkd/model.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ilkd {

struct OptimizerSettings {
  double peak_lr = 2e-3;
  std::int64_t warmup_steps = 200;
  std::int64_t total_steps = 3000;
  std::int64_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 5.0;

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  bool operator==(const OptimizerSettings&) const = default;
};

double learning_rate(const OptimizerSettings& settings, std::int64_t step);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(OptimizerSettings settings) : settings_(settings) {}

  /// Applies one update. `grads[i]` belongs to the i-th parameter in name
  /// order. Returns the learning rate used.
  double step(ParameterMap& params, std::span<const Matrix> grads);

  std::int64_t steps_taken() const { return step_; }

 private:
  OptimizerSettings settings_;
  std::int64_t step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace ilkd
