#include "ilkd/posteriors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ilkd {

FrameMask prefix_mask(Index frames, Index valid) {
  FrameMask mask(static_cast<size_t>(frames), false);
  std::fill_n(mask.begin(), std::min(frames, valid), true);
  return mask;
}

std::vector<Index> valid_rows(const FrameMask& mask) {
  std::vector<Index> rows;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) rows.push_back(static_cast<Index>(i));
  return rows;
}

bool all_valid(const FrameMask& mask) { return std::all_of(mask.begin(), mask.end(), [](bool b) { return b; }); }

Posteriors Posteriors::from_probabilities(const Matrix& probs, FrameMask mask) {
  if (mask.empty()) mask = full_mask(probs.rows());
  if (static_cast<Index>(mask.size()) != probs.rows())
    throw ShapeError("posteriors: mask length " + std::to_string(mask.size()) + " for " +
                     std::to_string(probs.rows()) + " frames");
  for (Index r = 0; r < probs.rows(); ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    if ((probs.row(r).array() < 0.0).any() || std::abs(probs.row(r).sum() - 1.0) > 1e-9)
      throw DomainError("posteriors: row " + std::to_string(r) + " is not a probability distribution");
  }
  Matrix logs = probs.unaryExpr([](double p) {
    return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
  });
  return {Tensor::from_matrix(std::move(logs), Shape{probs.rows(), probs.cols()}), std::move(mask)};
}

Index Posteriors::valid_frames() const {
  return static_cast<Index>(std::count(mask.begin(), mask.end(), true));
}

}  // namespace ilkd
