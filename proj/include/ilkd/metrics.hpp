// Best-path CTC decoding, edit distance, character error rate and correlation.

#pragma once

#include "ilkd/data.hpp"
#include "ilkd/posteriors.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ilkd {

/// Blank-free, repeat-collapsed label sequence.
using Transcript = std::vector<Label>;

/// Per-frame argmax (ties to the lowest index), collapse repeats, drop blanks.
/// Accepts probabilities or log-probabilities alike; masked frames are skipped.
template <typename Derived>
Transcript greedy_decode(const Eigen::MatrixBase<Derived>& scores, const FrameMask& mask = {}, Label blank = 0) {
  Transcript out;
  Index prev = -1;
  for (Index k = 0; k < scores.rows(); ++k) {
    if (!mask.empty() && !mask[static_cast<size_t>(k)]) continue;
    Index best = 0;
    for (Index m = 1; m < scores.cols(); ++m)
      if (scores(k, m) > scores(k, best)) best = m;
    if (best != prev && best != blank) out.push_back(static_cast<Label>(best));
    prev = best;
  }
  return out;
}

inline Transcript greedy_decode(const Posteriors& posteriors, Label blank = 0) {
  return greedy_decode(posteriors.log_probs.value(), posteriors.mask, blank);
}

/// Levenshtein distance with unit insertion, deletion and substitution costs.
std::size_t edit_distance(std::span<const Label> reference, std::span<const Label> hypothesis);

struct SampleScore {
  std::uint32_t sample_id = 0;
  std::size_t ref_len = 0;
  std::size_t edits = 0;
  std::optional<double> ebkd_loss;

  /// Per-sample CER; throws NumericalError for an empty reference.
  double cer() const;
};

/// sum(edits) / sum(ref_len); throws NumericalError when the total length is 0.
double corpus_cer(std::span<const SampleScore> scores);

struct EvalReport {
  std::string task;
  std::int32_t stage = 0;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<SampleScore> samples;

  double corpus_cer() const { return ilkd::corpus_cer(samples); }
};

/// `sample_id,ref_len,edits,cer,ebkd_loss` (ebkd_loss empty when absent).
std::string report_csv(const EvalReport& report);
/// JSON record with corpus_cer (percent, 2 decimals), n_samples, stage, method, seed.
std::string report_summary(const EvalReport& report);
/// Percentage with two decimals, e.g. 0.16666 -> "16.67".
std::string format_percent(double ratio);

/// Pearson r. Throws std::invalid_argument for mismatched or short (< 3)
/// series and NumericalError ("undefined correlation") when either is constant.
double pearson_correlation(std::span<const double> xs, std::span<const double> ys);

}  // namespace ilkd
