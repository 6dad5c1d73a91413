#pragma once

// Character-GRPO: group rollouts from a frozen snapshot, group-normalized
// advantages, clipped importance-ratio surrogate on the stochastic window.

#include "charforge/flowgen.hpp"
#include "charforge/optim.hpp"
#include "charforge/rewards.hpp"

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <vector>

namespace charforge {

struct GRPOConfig {
    int group_size = 8;
    double learning_rate = 1e-5;
    int prompt_batch = 6;
    double eps_lt = 1e-5;
    double eps_gt = 1e-5;
    double beta_kl = 0.0;
    int iterations = 200;
    int inner_epochs = 1;
    double max_grad_norm = 0.0;  // 0 disables clipping
    uint64_t seed = 0;

    /// Rejects beta_kl != 0: no reference-policy term is implemented.
    void validate() const;
    static constexpr double kToyLearningRate = 1e-3;
};

struct Advantages {
    std::vector<double> values;
    bool degenerate = false;
};

/// (R - mean) / population std; all zeros with the degenerate flag when the
/// std falls below 1e-8.
Advantages compute_advantages(std::span<const double> rewards);

/// min(r A, clip(r, 1 - eps_lt, 1 + eps_gt) A)
double clipped_term(double ratio, double advantage, double eps_lt, double eps_gt);

struct GroupRollout {
    PromptSpec prompt;
    CondToken cond;
    int window_start = 0;
    std::vector<FlowTrajectory> trajectories;
    std::vector<ToyImage> images;
    RewardBreakdown rewards;
    Advantages advantages;
};

struct SurrogateResult {
    double loss = 0.0;
    std::vector<std::vector<double>> ratios;  // [sample][window step]
};

/// Clipped surrogate for one group at the current parameters; adds `scale`
/// times its gradient into `grad` when given.
SurrogateResult surrogate_loss(const VelocityField& model, const GroupRollout& group, const GRPOConfig& config,
                               double guidance_scale, Eigen::VectorXd* grad, double scale = 1.0);

/// A training prompt and its condition embedding.
struct GrpoPrompt {
    PromptSpec prompt;
    CondToken cond;
};
std::vector<GrpoPrompt> grpo_prompts(const CharacterPack& pack, const Scorer& scorer);

struct IterationStats {
    int iteration = 0;
    double mean_total_reward = 0.0;
    double mean_r_align = 0.0;
    double mean_r_consist = 0.0;
    double mean_r_div = 0.0;
    double mean_p_sim = 0.0;
    double mean_s_max = 0.0;
    double grad_norm = 0.0;
    double loss = 0.0;
    int degenerate_groups = 0;
};
nlohmann::json to_json(const IterationStats& s);

/// One iteration: snapshot, prompt draw, shared-window group rollouts,
/// scoring, advantages and `inner_epochs` surrogate updates. All randomness
/// derives from (config.seed, iteration). `reference` is accepted for a KL
/// term and is never evaluated while beta_kl = 0.
IterationStats grpo_iteration(VelocityField& model, AdamW& optimizer, const std::vector<GrpoPrompt>& prompts,
                              const GroupRewarder& reward, const GRPOConfig& config, const SamplerConfig& sampler,
                              int iteration, const VelocityModel* reference = nullptr,
                              std::vector<GroupRollout>* groups = nullptr);

AdamW make_grpo_optimizer(const VelocityField& model, const GRPOConfig& config);

struct GrpoRunOptions {
    std::optional<std::filesystem::path> log_file;      // JSON lines, one per iteration
    std::optional<std::filesystem::path> rewards_file;  // JSON lines, one per group sample
    std::string config_hash;
};

/// config.iterations iterations in place; returns the per-iteration stats.
std::vector<IterationStats> grpo_run(VelocityField& model, const std::vector<GrpoPrompt>& prompts,
                                     const GroupRewarder& reward, const GRPOConfig& config,
                                     const SamplerConfig& sampler, const GrpoRunOptions& options = {});

nlohmann::json to_json(const GRPOConfig& c);
GRPOConfig grpo_from_json(const nlohmann::json& j, const std::string& path = "grpo");

}  // namespace charforge
