// JSON forms of model, loss, optimizer, stage, sequence and task-spec configs.
//
// Parsing is strict: unknown keys and wrongly typed values raise ConfigError
// with the key path. Every loader has a matching writer producing the fully
// resolved form (all defaults filled in), used for config snapshots.

#pragma once

#include "ilkd/data.hpp"
#include "ilkd/harness.hpp"

#include "json.hpp"

#include <string>

namespace ilkd {

using Json = nlohmann::ordered_json;

ModelConfig model_config_from_json(const Json& j);
Json to_json(const ModelConfig& config);

OptimizerSettings optimizer_from_json(const Json& j, OptimizerSettings defaults = {});
Json to_json(const OptimizerSettings& settings);

/// Unset keys take default_weights(method). An explicit nonzero weight for a
/// term the method does not use is a ConfigError.
LossWeights weights_from_json(const Json& j, Method method);
Json to_json(const LossWeights& weights);

StageConfig stage_config_from_json(const Json& j);
Json to_json(const StageConfig& config);

SequencePlan sequence_plan_from_json(const Json& j);
Json to_json(const RunManifest& manifest);

/// Keys: family ("base", "accent", "newwords"), task_id, feature_dim,
/// proto_len, num_symbols, inventory, noise_std, min_len, max_len,
/// prototype_seed, num_samples, seed; accent: rotation_strength,
/// transform_seed; newwords: new_symbols, new_symbol_seed.
TaskSpec task_spec_from_json(const Json& j);

/// Reads and parses a JSON file; DataError when unreadable, ConfigError when malformed.
Json load_json_file(const std::string& path);
/// Writes `j` with two-space indentation and a trailing newline.
void save_json_file(const Json& j, const std::string& path);

}  // namespace ilkd
