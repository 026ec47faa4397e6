#pragma once

#include <json.hpp>
#include <string>

#include "advlab/attacks.hpp"
#include "advlab/network.hpp"
#include "advlab/training.hpp"

namespace advlab {

using Json = nlohmann::json;

// JSON forms of the configuration types. Readers start from the supplied
// defaults, override the keys present, and throw ConfigError naming the
// offending key for unknown keys or wrong value types. Schemas are listed in
// docs/config-schema.md.

Json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const Json& j);

Json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const Json& j, AttackConfig defaults = {});

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j, ModelConfig defaults = {});

Json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const Json& j, OptimizerConfig defaults = {});

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j, TrainConfig defaults = {});

Json to_json(const StepMetrics& m);

/// SHA-256 of the compact JSON form of the resolved config.
std::string config_digest(const TrainConfig& cfg);

/// Parses a JSON file, reporting the path on failure.
Json read_json_file(const std::string& path);

}  // namespace advlab
