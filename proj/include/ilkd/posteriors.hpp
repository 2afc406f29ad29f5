// Frame-wise output distributions of a CTC model.

#pragma once

#include "ilkd/tensor.hpp"

#include <vector>

namespace ilkd {

/// true marks a real frame; false marks padding.
using FrameMask = std::vector<bool>;

inline FrameMask full_mask(Index frames) { return FrameMask(static_cast<size_t>(frames), true); }
FrameMask prefix_mask(Index frames, Index valid);
std::vector<Index> valid_rows(const FrameMask& mask);
bool all_valid(const FrameMask& mask);

/// Per-frame log-probabilities over the alphabet plus blank (K x M).
///
/// Log space is the carrier so that CTC, distillation and greedy scoring never
/// take the log of a rounded-to-zero probability.
struct Posteriors {
  Tensor log_probs;
  FrameMask mask;

  /// Wraps explicit probabilities; each unmasked row must be a distribution.
  /// Zero entries become -inf log-probabilities.
  static Posteriors from_probabilities(const Matrix& probs, FrameMask mask = {});

  Matrix probabilities() const { return log_probs.value().array().exp().matrix(); }
  Index frames() const { return log_probs.rows(); }
  Index symbols() const { return log_probs.cols(); }
  Index valid_frames() const;
};

}  // namespace ilkd
