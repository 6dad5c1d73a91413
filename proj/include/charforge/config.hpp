#pragma once

// Run configuration: one JSON document holding every hyperparameter.
// Omitted fields take their defaults; the "toy" preset only changes the two
// learning rates. Component seeds default to the global seed.

#include "charforge/evalbench.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace charforge {

enum class Preset { reference, toy };
std::string_view to_string(Preset p);

struct EncoderConfig {
    uint64_t semantic_seed = 1;
    uint64_t structure_seed = 2;
    std::string scorer_command;  // empty: built-in scorer
};

struct DataConfig {
    uint64_t character_seed = 0;
    PackSizes sizes;
};

struct RunConfig {
    Preset preset = Preset::reference;
    uint64_t seed = 0;
    uint64_t init_seed = 0;
    std::filesystem::path output_dir = "charforge-out";
    std::optional<std::filesystem::path> pack;
    std::optional<std::filesystem::path> sft_checkpoint;
    std::optional<std::filesystem::path> checkpoint;
    ExperimentConfig experiment;
    EncoderConfig encoders;
    DataConfig data;
    int samples_per_prompt = 1;
    AblationSuite ablation_suite = AblationSuite::stage;
    std::vector<uint64_t> ablation_seeds{0, 1, 2};
};

inline constexpr double kToySftLearningRate = 1e-2;

/// Resolves a config document; throws SchemaError naming the first bad field.
RunConfig config_from_json(const nlohmann::json& j);
/// Fully resolved form (every field explicit); config_from_json inverts it.
nlohmann::json to_json(const RunConfig& c);

}  // namespace charforge
