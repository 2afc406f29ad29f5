#include "ilkd/optimizer.hpp"

#include "ilkd/errors.hpp"

#include <algorithm>
#include <cmath>

namespace ilkd {

void OptimizerSettings::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("optimizer: " + what); };
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) fail("peak_lr must be a positive finite number");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (total_steps < 0) fail("total_steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("beta1 and beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be > 0");
  if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) fail("clip_norm must be >= 0");
}

double learning_rate(const OptimizerSettings& settings, std::int64_t step) {
  const double s = static_cast<double>(std::max<std::int64_t>(step, 1));
  const double w = static_cast<double>(settings.warmup_steps);
  return settings.peak_lr * std::min(s / w, std::sqrt(w / s));
}

double AdamOptimizer::step(ParameterMap& params, std::span<const Matrix> grads) {
  if (grads.size() != params.size()) throw ShapeError("adam: gradient count differs from parameter count");
  if (m_.empty()) {
    for (const auto& [name, value] : params) {
      m_.push_back(Matrix::Zero(value.rows(), value.cols()));
      v_.push_back(Matrix::Zero(value.rows(), value.cols()));
    }
  }
  ++step_;
  double scale = 1.0;
  if (settings_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Matrix& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > settings_.clip_norm) scale = settings_.clip_norm / norm;
  }
  const double lr = learning_rate(settings_, step_);
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  std::size_t i = 0;
  for (auto& [name, value] : params) {
    const Matrix& g = grads[i];
    if (g.rows() != value.rows() || g.cols() != value.cols())
      throw ShapeError("adam: gradient shape mismatch for '" + name + "'");
    m_[i] = b1 * m_[i] + (1.0 - b1) * scale * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * (scale * g).cwiseAbs2();
    value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + settings_.epsilon);
    ++i;
  }
  return lr;
}

}  // namespace ilkd
