// Synthetic speech-like task families and the ILAD1 dataset format.
//
// Each symbol owns a prototype F x s_proto feature block. An utterance is the
// concatenation of its symbols' prototypes (optionally passed through an
// "accent" transform) plus i.i.d. Gaussian noise. Task variants:
//   base       inventory {1..8}, identity acoustics
//   accent     same inventory, prototypes mixed by a seeded near-orthogonal map
//   new-words  base inventory plus new symbols with fresh prototypes
//
// Prototype entries are standard normal. With the default model, a converged
// single-task model stays near 3% CER on the base task even at noise 2.0.

#pragma once

#include "ilkd/posteriors.hpp"
#include "ilkd/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ilkd {

using Label = std::int32_t;
using LabelSeq = std::vector<Label>;

struct AccentTransform {
  Matrix mixing;  // F x F
  Vector bias;    // F
  bool operator==(const AccentTransform&) const = default;
};

struct TaskSpec {
  std::string task_id = "base";
  Index num_symbols = 13;  // M, including blank 0
  std::vector<Label> inventory;
  std::map<Label, Matrix> prototypes;  // each F x s_proto
  std::optional<AccentTransform> transform;
  double noise_std = 0.3;
  Index min_len = 2;
  Index max_len = 6;
  Index num_samples = 2000;
  std::uint64_t seed = 0;

  Index feature_dim() const;
  Index proto_len() const;
  /// Throws ConfigError naming the violated constraint.
  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

struct BaseTaskOptions {
  std::string task_id = "base";
  Index feature_dim = 16;
  Index proto_len = 8;
  Index num_symbols = 13;
  std::vector<Label> inventory{1, 2, 3, 4, 5, 6, 7, 8};
  double noise_std = 0.3;
  Index min_len = 2;
  Index max_len = 6;
  Index num_samples = 2000;
  std::uint64_t seed = 1;
  std::uint64_t prototype_seed = 7;
};

struct Sample {
  Matrix x;  // F x S
  LabelSeq y;
  std::string task_id;
  std::uint32_t index = 0;
};

struct Dataset {
  Index feature_dim = 0;
  Index num_symbols = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Standard-normal prototypes for each inventory symbol, seeded per symbol.
TaskSpec make_base_task(const BaseTaskOptions& options);

/// Deterministic in the spec; sample i uses a seed derived from (spec.seed, i).
Dataset generate_task(const TaskSpec& spec);

/// Same inventory; mixing = (1 - s) I + s R for a seeded random orthogonal R,
/// plus a bias of scale 0.2 s. s = 0 reproduces the base acoustics exactly.
TaskSpec derive_accent_task(const TaskSpec& base, double rotation_strength, std::uint64_t seed);

/// Adds `new_symbols` (disjoint from the base inventory, each < M) with fresh
/// prototypes; the result uses identity acoustics.
TaskSpec derive_newwords_task(const TaskSpec& base, const std::vector<Label>& new_symbols, std::uint64_t seed);

/// Returns a copy drawing `num_samples` utterances from `seed` (train/test splits).
TaskSpec with_draw(TaskSpec spec, Index num_samples, std::uint64_t seed);

/// Concatenates datasets that share F and M.
Dataset concat_datasets(const std::vector<const Dataset*>& parts);

// ILAD1 layout, little-endian:
//   "ILAD1", u32 version = 1, u32 F, u32 M, u32 N,
//   N x (u32 S, u32 U, F*S f64 features (x as F x S, row-major), U x u32 labels)
std::vector<char> encode_dataset(const Dataset& dataset);
/// Throws ParseError carrying the byte offset of the defect.
Dataset decode_dataset(std::string_view bytes);
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

/// Same features and labels, in order (provenance is not compared).
bool same_content(const Dataset& a, const Dataset& b);

}  // namespace ilkd
