#include "ilkd/losses.hpp"

#include "ilkd/errors.hpp"
#include "ilkd/ops.hpp"
#include "random.hpp"

#include <algorithm>
#include <numeric>

namespace ilkd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(-std::abs(a - b)));
}

Tensor valid_part(const Tensor& t, const FrameMask& mask) {
  if (all_valid(mask)) return t;
  const auto rows = valid_rows(mask);
  return select_rows(t, rows);
}

// Log-space CTC recursions over an extended label sequence
// blank, l1, blank, l2, ..., lU, blank.
struct CtcLattice {
  std::vector<Label> extended;
  Matrix alpha;  // K x (2U+1), includes emission at frame k
  Matrix beta;   // K x (2U+1), includes emission at frame k
  double log_likelihood = kNegInf;
};

CtcLattice ctc_lattice(const Matrix& logp, std::span<const Label> labels, Label blank) {
  CtcLattice lat;
  lat.extended.reserve(2 * labels.size() + 1);
  lat.extended.push_back(blank);
  for (Label l : labels) {
    lat.extended.push_back(l);
    lat.extended.push_back(blank);
  }
  const Index frames = logp.rows();
  const Index states = static_cast<Index>(lat.extended.size());
  auto emit = [&](Index k, Index s) { return logp(k, lat.extended[static_cast<size_t>(s)]); };
  // Skipping the blank between s-2 and s is allowed unless both are the same label.
  auto can_skip = [&](Index s) {
    return s >= 2 && lat.extended[static_cast<size_t>(s)] != blank &&
           lat.extended[static_cast<size_t>(s)] != lat.extended[static_cast<size_t>(s - 2)];
  };

  lat.alpha = Matrix::Constant(frames, states, kNegInf);
  lat.alpha(0, 0) = emit(0, 0);
  if (states > 1) lat.alpha(0, 1) = emit(0, 1);
  for (Index k = 1; k < frames; ++k)
    for (Index s = 0; s < states; ++s) {
      double acc = lat.alpha(k - 1, s);
      if (s >= 1) acc = log_add(acc, lat.alpha(k - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, lat.alpha(k - 1, s - 2));
      lat.alpha(k, s) = acc == kNegInf ? kNegInf : acc + emit(k, s);
    }

  lat.beta = Matrix::Constant(frames, states, kNegInf);
  lat.beta(frames - 1, states - 1) = emit(frames - 1, states - 1);
  if (states > 1) lat.beta(frames - 1, states - 2) = emit(frames - 1, states - 2);
  for (Index k = frames - 2; k >= 0; --k)
    for (Index s = 0; s < states; ++s) {
      double acc = lat.beta(k + 1, s);
      if (s + 1 < states) acc = log_add(acc, lat.beta(k + 1, s + 1));
      if (s + 2 < states && can_skip(s + 2)) acc = log_add(acc, lat.beta(k + 1, s + 2));
      lat.beta(k, s) = acc == kNegInf ? kNegInf : acc + emit(k, s);
    }

  lat.log_likelihood = lat.alpha(frames - 1, states - 1);
  if (states > 1) lat.log_likelihood = log_add(lat.log_likelihood, lat.alpha(frames - 1, states - 2));
  return lat;
}

void check_same_layout(const char* op, const Posteriors& a, const Posteriors& b) {
  if (a.frames() != b.frames() || a.symbols() != b.symbols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.log_probs.shape()) + " vs " +
                     shape_string(b.log_probs.shape()));
  if (a.mask != b.mask) throw ShapeError(std::string(op) + ": frame masks differ");
}

}  // namespace

void LossWeights::validate() const {
  if (!std::isfinite(temperature) || !std::isfinite(beta) || !std::isfinite(gamma) || !std::isfinite(lambda_ewc))
    throw ConfigError("loss weights must be finite");
  if (!(temperature > 0.0)) throw ConfigError("temperature T must be > 0");
  if (beta < 0.0 || gamma < 0.0 || lambda_ewc < 0.0) throw ConfigError("beta, gamma and lambda_ewc must be >= 0");
}

Index min_ctc_frames(std::span<const Label> labels) {
  Index need = static_cast<Index>(labels.size());
  for (size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++need;
  return need;
}

Tensor ctc_loss(const Posteriors& posteriors, std::span<const Label> labels, Label blank) {
  const Index symbols = posteriors.symbols();
  for (Label l : labels)
    if (l == blank || l < 0 || l >= symbols)
      throw DomainError("ctc_loss: label " + std::to_string(l) + " outside [1, " + std::to_string(symbols - 1) + "]");
  Tensor logp = valid_part(posteriors.log_probs, posteriors.mask);
  const Index frames = logp.rows();
  const Index need = min_ctc_frames(labels);
  if (frames < std::max<Index>(need, 1))
    throw InfeasibleAlignment("ctc_loss: infeasible alignment, " + std::to_string(labels.size()) +
                              " labels need at least " + std::to_string(need) + " frames, got " +
                              std::to_string(frames));

  CtcLattice lat = ctc_lattice(logp.value(), labels, blank);
  if (lat.log_likelihood == kNegInf)
    throw InfeasibleAlignment("ctc_loss: infeasible alignment, every path has zero probability");

  Matrix value = Matrix::Constant(1, 1, -lat.log_likelihood);
  return Tensor::make_result(
      "ctc_loss", std::move(value), {}, {logp},
      [lat = std::move(lat), lp = logp.value()](const Matrix& g, const std::vector<bool>& needs,
                                                 std::vector<Matrix>& out) {
        if (!needs[0]) return;
        // d(-log p)/d(log pi_k(m)) = -sum_{s: ext_s = m} alpha_k(s) beta_k(s) / (pi_k(m) p)
        Matrix grad = Matrix::Zero(lp.rows(), lp.cols());
        for (Index k = 0; k < lp.rows(); ++k)
          for (Index s = 0; s < lat.alpha.cols(); ++s) {
            const double a = lat.alpha(k, s), b = lat.beta(k, s);
            if (a == kNegInf || b == kNegInf) continue;
            const Label m = lat.extended[static_cast<size_t>(s)];
            grad(k, m) -= std::exp(a + b - lp(k, m) - lat.log_likelihood);
          }
        out[0] = grad * g(0, 0);
      });
}

Posteriors soften(const Posteriors& posteriors, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("soften: temperature must be > 0");
  if (temperature == 1.0) return posteriors;
  return {log_softmax_rows(scale(posteriors.log_probs, 1.0 / temperature)), posteriors.mask};
}

Tensor rbkd_loss(const Posteriors& teacher, const Posteriors& student, double temperature) {
  check_same_layout("rbkd_loss", teacher, student);
  if (!(temperature > 0.0)) throw DomainError("rbkd_loss: temperature must be > 0");
  Tensor target = valid_part(softmax_rows(scale(teacher.log_probs.detach(), 1.0 / temperature)), teacher.mask);
  Tensor log_student = valid_part(soften(student, temperature).log_probs, student.mask);
  return scale(sum(mul(target, clamp_min(log_student, std::log(kRbkdLogFloor)))), -1.0);
}

Tensor greedy_log_prob(const Posteriors& posteriors) {
  return sum(row_max(valid_part(posteriors.log_probs, posteriors.mask)));
}

ImportanceArtifacts importance_map(const EncoderOutput& output, AttentionGraph mode) {
  const Tensor& features = output.feature_map;
  Tensor log_p = greedy_log_prob(output.posteriors);
  ImportanceArtifacts art;
  art.log_p_greedy = log_p.item();
  try {
    art.alpha = gradient(log_p, features);
  } catch (const GraphError& e) {
    throw GraphError(std::string("importance_map: ") + e.what());
  }
  Tensor alpha = Tensor::from_matrix(art.alpha, features.shape());
  if (mode == AttentionGraph::Live)
    art.attention = relu(mul(alpha, features));
  else
    art.attention = Tensor::from_matrix(art.alpha.cwiseProduct(features.value()).cwiseMax(0.0), features.shape());
  return art;
}

Tensor ebkd_loss(const Tensor& teacher_q, const Tensor& student_q, const FrameMask& mask) {
  if (teacher_q.rows() != student_q.rows() || teacher_q.cols() != student_q.cols())
    throw ShapeError("ebkd_loss: shape mismatch " + shape_string(teacher_q.shape()) + " vs " +
                     shape_string(student_q.shape()));
  if (static_cast<Index>(mask.size()) != student_q.rows())
    throw ShapeError("ebkd_loss: mask length " + std::to_string(mask.size()) + " for " +
                     shape_string(student_q.shape()));
  if (valid_rows(mask).empty()) throw ShapeError("ebkd_loss: no unmasked frames");
  Tensor t = row_normalize(valid_part(teacher_q.detach(), mask), kAttentionNormEpsilon);
  Tensor s = row_normalize(valid_part(student_q, mask), kAttentionNormEpsilon);
  return mean(row_l2norm(sub(s, t)));
}

Tensor ewc_penalty(const ModelParameters& student, const EwcState& state) {
  const auto& names = student.names();
  if (state.reference.size() != names.size() || state.fisher.size() != names.size())
    throw ShapeError("ewc_penalty: parameter sets differ in size");
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < names.size(); ++i) {
    auto ref = state.reference.find(names[i]);
    auto fis = state.fisher.find(names[i]);
    if (ref == state.reference.end() || fis == state.fisher.end())
      throw ShapeError("ewc_penalty: no reference/fisher entry for '" + names[i] + "'");
    const Tensor& theta = student.tensors()[i];
    if (ref->second.rows() != theta.rows() || ref->second.cols() != theta.cols() ||
        fis->second.rows() != theta.rows() || fis->second.cols() != theta.cols())
      throw ShapeError("ewc_penalty: shape mismatch for '" + names[i] + "'");
    Tensor diff = sub(theta, Tensor::from_matrix(ref->second, theta.shape()));
    total = add(total, sum(mul(Tensor::from_matrix(fis->second, theta.shape()), mul(diff, diff))));
  }
  return total;
}

ParameterMap fisher_estimate(const Checkpoint& ckpt, const Dataset& dataset, std::size_t num_samples,
                             std::uint64_t seed) {
  if (dataset.empty()) throw DataError("fisher_estimate: dataset is empty");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (num_samples != 0 && num_samples < dataset.size()) {
    std::mt19937_64 rng(rnd::derive_seed(seed, 0xF15E4ull));
    rnd::shuffle(order.begin(), order.end(), rng);
    order.resize(num_samples);
  }
  ModelParameters params = ModelParameters::bind(ckpt, true);
  std::vector<Matrix> acc;
  for (const Tensor& t : params.tensors()) acc.push_back(Matrix::Zero(t.rows(), t.cols()));
  for (std::size_t idx : order) {
    const Sample& sample = dataset.samples[idx];
    EncoderOutput out = forward(ckpt.config, params, sample.x);
    auto grads = params.gradients(ctc_loss(out.posteriors, sample.y, static_cast<Label>(ckpt.config.blank_id)));
    for (size_t i = 0; i < grads.size(); ++i) acc[i] += grads[i].cwiseAbs2();
  }
  ParameterMap fisher;
  const double n = static_cast<double>(order.size());
  for (size_t i = 0; i < acc.size(); ++i) fisher.emplace(params.names()[i], acc[i] / n);
  return fisher;
}

Tensor aggregate_loss(const LossTerms& terms, const LossWeights& weights) {
  Tensor total = terms.ctc;
  auto add_term = [&](const std::optional<Tensor>& term, double weight, const char* name) {
    if (weight == 0.0) return;
    if (!term) throw std::invalid_argument(std::string("aggregate_loss: weight for ") + name + " is set but the term is missing");
    total = add(total, scale(*term, weight));
  };
  add_term(terms.rbkd, weights.beta, "rbkd");
  add_term(terms.ebkd, weights.gamma, "ebkd");
  add_term(terms.ewc, weights.lambda_ewc, "ewc");
  return total;
}

double aggregate_loss(double ctc, double rbkd, double ebkd, const LossWeights& weights, double ewc) {
  return ctc + weights.beta * rbkd + weights.gamma * ebkd + weights.lambda_ewc * ewc;
}

}  // namespace ilkd
