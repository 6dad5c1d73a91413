#pragma once

// Evaluation: image metrics against the character's references, trainset
// similarity audit, multiple-choice accuracy, the query -> response ->
// instruction -> image pipeline and the two ablation suites.

#include "charforge/encoders.hpp"
#include "charforge/flowgen.hpp"
#include "charforge/grporl.hpp"
#include "charforge/rewards.hpp"
#include "charforge/sft.hpp"
#include "charforge/toyworld.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace charforge {

struct JudgeScores {
    double memorization = 0.0;
    double personality = 0.0;
    double diversity = 0.0;
    bool operator==(const JudgeScores&) const = default;
};

struct MetricsReport {
    double clip_i_analogue = 0.0;
    double clip_t_analogue = 0.0;
    double dino_analogue = 0.0;
    double trainset_sim_sem = 0.0;
    double trainset_sim_struct = 0.0;
    std::optional<double> kqa_accuracy;
    std::optional<double> vqa_accuracy;
    int sample_count = 0;
    int mapping_failures = 0;
    std::string config_hash;
    std::optional<JudgeScores> judge_scores;  // filled by an external judge only

    bool operator==(const MetricsReport&) const = default;
};

nlohmann::json to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
void write_report(const MetricsReport& r, const std::filesystem::path& file);
MetricsReport read_report(const std::filesystem::path& file);

/// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

/// Image metrics of already generated images against the pack's core images
/// (prompts[i] is the prompt image i was generated for).
MetricsReport image_metrics(std::span<const ToyImage> images, std::span<const PromptSpec> prompts,
                            const CharacterPack& pack, const Scorer& scorer);

/// Sampler config for the i-th evaluated sample.
SamplerConfig eval_sampler(const SamplerConfig& base, size_t index);

struct T2iEval {
    MetricsReport report;
    std::vector<ToyImage> images;
};

/// One ODE sample per prompt at eval_steps; throws on an empty prompt list.
T2iEval eval_t2i(const VelocityModel& model, const CharacterPack& pack, std::span<const PromptSpec> prompts,
                 const SamplerConfig& sampler, const Scorer& scorer);

/// Every pose x tone prompt `repeats` times.
std::vector<PromptSpec> eval_prompts(const CharacterPack& pack, int repeats);

struct MultimodalRecord {
    std::string query;
    std::string response;
    std::string thinking;
    std::string instruction;
    std::optional<PromptSpec> prompt;  // empty on a mapping failure
};

struct MultimodalEval {
    MetricsReport report;
    std::vector<MultimodalRecord> records;
    std::vector<ToyImage> images;  // one per mapped record
};

/// Fills "draw <id> facing <pose> in <tone> light" with the first pose and
/// tone words found in `tokens`; missing slots stay empty.
std::string fill_instruction(const std::string& char_id, std::span<const std::string> tokens);

/// Prompt whose canonical instruction shares the most tokens with
/// `instruction`; empty when the best score is tied or zero.
std::optional<PromptSpec> map_instruction(const std::string& instruction, const std::string& char_id);

MultimodalEval eval_multimodal(const VelocityModel& velocity, const LanguageModel& lm, const Vocab& vocab,
                               const CharacterPack& pack, std::span<const std::string> queries,
                               const SamplerConfig& sampler, const Scorer& scorer);

/// Fraction of items whose highest-likelihood option is the keyed one.
double mcq_accuracy(const LanguageModel& lm, const Vocab& vocab, std::span<const McqItem> items);

/// Knowledge and visual MCQ accuracies from the pack's items.
void attach_text_metrics(MetricsReport& report, const LanguageModel& lm, const Vocab& vocab,
                         const CharacterPack& pack);

// ----- experiment pipeline -----

struct ExperimentConfig {
    NetShape shape;
    TinyLMConfig lm;
    SFTConfig sft;
    MixerConfig mixer;
    GRPOConfig grpo;
    SamplerConfig sampler;
    RewardWeights weights;
    Thresholds thresholds;
    RewardOptions reward_options;
    int eval_repeats = 10;
};

struct SftStage {
    VelocityField velocity;
    TinyLM lm;
    std::vector<SftLosses> history;
};

/// Fresh models initialized from `seed`, then Unified-SFT with all seeds
/// (sft, mixer) set to `seed`.
SftStage run_sft_stage(const CharacterPack& pack, const ExperimentConfig& cfg, uint64_t seed, const Scorer& scorer);

/// GRPO from `start` with grpo.seed = seed and the given reward weights.
VelocityField run_grpo_stage(const VelocityField& start, const CharacterPack& pack, const ExperimentConfig& cfg,
                             const RewardWeights& weights, uint64_t seed, const Scorer& scorer,
                             std::vector<IterationStats>* stats = nullptr);

/// eval_t2i over eval_prompts(pack, cfg.eval_repeats) with sampler.seed = seed.
MetricsReport evaluate_stage(const VelocityModel& model, const CharacterPack& pack, const ExperimentConfig& cfg,
                             uint64_t seed, const Scorer& scorer);

enum class AblationSuite { stage, reward };
std::string_view to_string(AblationSuite s);
AblationSuite ablation_suite_from_string(std::string_view s);

struct AblationSetting {
    std::string name;
    bool grpo = true;
    RewardWeights weights;
};
std::vector<AblationSetting> ablation_settings(AblationSuite suite, const RewardWeights& base);

struct AblationRow {
    std::string setting;
    uint64_t seed = 0;
    RewardWeights weights;
    MetricsReport report;
};

std::vector<AblationRow> run_ablation(AblationSuite suite, const CharacterPack& pack, const ExperimentConfig& cfg,
                                      std::span<const uint64_t> seeds, const Scorer& scorer);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& file);

nlohmann::json to_json(const ExperimentConfig& c);

}  // namespace charforge
