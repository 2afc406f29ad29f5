// Training objectives: CTC, response-based distillation (RBKD), explainability-
// based distillation (EBKD), their weighted aggregate and the EWC baseline.
//
// Attention maps follow the first-order convention: the importance map
// alpha = d log p_greedy / dA is detached for teacher and student alike, so
// gradients of the EBKD term reach the student only through its feature map A
// in Q = ReLU(alpha * A).

#pragma once

#include "ilkd/data.hpp"
#include "ilkd/model.hpp"
#include "ilkd/posteriors.hpp"
#include "ilkd/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>

namespace ilkd {

/// No CTC path of the given length collapses to the label sequence.
class InfeasibleAlignment : public DomainError {
 public:
  using DomainError::DomainError;
};

struct LossWeights {
  double temperature = 3.0;
  double beta = 0.03;
  double gamma = 500.0;
  double lambda_ewc = 0.0;

  /// Throws ConfigError unless all weights are finite, T > 0 and the rest >= 0.
  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Log-floor applied to softened student probabilities in the RBKD term.
inline constexpr double kRbkdLogFloor = 1e-12;
/// Frames whose attention vector is shorter than this normalize to zero.
inline constexpr double kAttentionNormEpsilon = 1e-8;

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
Index min_ctc_frames(std::span<const Label> labels);

/// -log sum over all CTC paths, by the log-space forward recursion over the
/// unmasked frames. Gradients come from the matching backward recursion.
Tensor ctc_loss(const Posteriors& posteriors, std::span<const Label> labels, Label blank = 0);

/// Literal enumeration of all M^K frame strings that collapse to `labels`.
/// Refuses instances with more than 2^20 strings.
template <typename Derived>
double ctc_loss_bruteforce(const Eigen::MatrixBase<Derived>& probs, std::span<const Label> labels, Label blank = 0) {
  const Index frames = probs.rows();
  const Index symbols = probs.cols();
  double strings = 1.0;
  for (Index k = 0; k < frames; ++k) strings *= static_cast<double>(symbols);
  if (strings > static_cast<double>(1 << 20))
    throw std::length_error("ctc_loss_bruteforce: M^K = " + std::to_string(strings) + " exceeds the bound 2^20");

  std::vector<Index> path(static_cast<size_t>(frames), 0);
  std::vector<Label> collapsed;
  double total = 0.0;
  for (;;) {
    collapsed.clear();
    Index prev = -1;
    for (Index s : path) {
      if (s != prev && s != blank) collapsed.push_back(static_cast<Label>(s));
      prev = s;
    }
    if (std::equal(collapsed.begin(), collapsed.end(), labels.begin(), labels.end())) {
      double prod = 1.0;
      for (Index k = 0; k < frames; ++k) prod *= probs(k, path[static_cast<size_t>(k)]);
      total += prod;
    }
    Index k = frames - 1;
    while (k >= 0 && ++path[static_cast<size_t>(k)] == symbols) path[static_cast<size_t>(k--)] = 0;
    if (k < 0) break;
  }
  if (!(total > 0.0)) throw InfeasibleAlignment("ctc_loss_bruteforce: no path of the given length yields the labels");
  return -std::log(total);
}

/// p = pi^(1/T) / sum(pi^(1/T)) per row.
template <typename Derived>
Matrix soften(const Eigen::MatrixBase<Derived>& probs, double temperature) {
  if (!(temperature > 0.0)) throw std::domain_error("soften: temperature must be > 0");
  Matrix out(probs.rows(), probs.cols());
  for (Index r = 0; r < probs.rows(); ++r) {
    const double peak = probs.row(r).maxCoeff();
    if (!(peak > 0.0)) throw std::domain_error("soften: row " + std::to_string(r) + " has no positive mass");
    for (Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(r, c);
      out(r, c) = p > 0.0 ? std::exp((std::log(p) - std::log(peak)) / temperature) : 0.0;
    }
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

/// Softened distribution kept in log space and differentiable.
Posteriors soften(const Posteriors& posteriors, double temperature);

/// -sum_k sum_m p_teacher log p_student over unmasked frames, both sides
/// softened by T. The teacher carries no gradient.
Tensor rbkd_loss(const Posteriors& teacher, const Posteriors& student, double temperature);

/// sum over unmasked frames of max_m log pi; gradient reaches only the argmax entries.
Tensor greedy_log_prob(const Posteriors& posteriors);

enum class AttentionGraph {
  Detached,  // teacher: Q is a constant
  Live,      // student: Q depends on A (alpha still constant)
};

struct ImportanceArtifacts {
  Matrix alpha;      // d log p / dA, K x d_h
  Tensor attention;  // Q = ReLU(alpha * A), K x d_h
  double log_p_greedy = 0.0;
};

/// Importance and attention maps of one forward pass. The pass's graph must
/// still be alive; otherwise a GraphError asks the caller to re-run forward.
ImportanceArtifacts importance_map(const EncoderOutput& output, AttentionGraph mode);

/// Mean over unmasked frames of || Q2_k/|Q2_k| - Q1_k/|Q1_k| ||_2. Frames whose
/// norm is below kAttentionNormEpsilon normalize to zero. Teacher side is detached.
Tensor ebkd_loss(const Tensor& teacher_q, const Tensor& student_q, const FrameMask& mask);

/// sum_j F_j (theta_j - theta*_j)^2 over every parameter.
Tensor ewc_penalty(const ModelParameters& student, const EwcState& state);

/// Mean over samples of the squared per-sample CTC-loss gradient. Uses every
/// sample when num_samples is 0 or covers the dataset, otherwise the first
/// num_samples of a seeded permutation.
ParameterMap fisher_estimate(const Checkpoint& ckpt, const Dataset& dataset, std::size_t num_samples,
                             std::uint64_t seed);

struct LossTerms {
  Tensor ctc;
  std::optional<Tensor> rbkd;
  std::optional<Tensor> ebkd;
  std::optional<Tensor> ewc;
};

/// ctc + beta rbkd + gamma ebkd + lambda ewc. Zero-weight terms are skipped
/// (and need not be present); a weighted term that is absent is an error.
Tensor aggregate_loss(const LossTerms& terms, const LossWeights& weights);
double aggregate_loss(double ctc, double rbkd, double ebkd, const LossWeights& weights, double ewc = 0.0);

}  // namespace ilkd
