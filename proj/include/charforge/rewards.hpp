#pragma once

// Character-GRPO reward: prompt alignment, VQA trait consistency, in-group
// diversity and the dual-threshold trainset-similarity penalty.

#include "charforge/encoders.hpp"
#include "charforge/rng.hpp"
#include "charforge/toyworld.hpp"

#include <json.hpp>
#include <map>
#include <span>
#include <vector>

namespace charforge {

struct RewardWeights {
    double alpha = 0.45;     // alignment
    double beta_vqa = 0.30;  // consistency
    double gamma = 0.10;     // diversity
    double delta = 0.15;     // similarity penalty

    void validate() const;
    bool operator==(const RewardWeights&) const = default;
};

struct Thresholds {
    double tau_high = 0.9;
    double tau_low = 0.5;

    void validate() const;
    bool operator==(const Thresholds&) const = default;
};

struct RewardParts {
    double r_align = 0.0;
    double r_consist = 0.0;
    double r_div = 0.0;
    double p_sim = 0.0;
};

double total_reward(const RewardParts& parts, const RewardWeights& w);

/// Cosine between the semantic embeddings of the image and of the prompt.
double alignment_reward(const ToyImage& image, const PromptSpec& prompt, const CharacterPack& pack,
                        const Scorer& scorer);

/// 1 when the oracle's answer on `image` equals the stored answer.
double consistency_reward(const ToyImage& image, const VqaItem& item);

/// Mean pairwise perceptual distance over ordered pairs i != j.
double group_diversity(std::span<const ToyImage> images, const Scorer& scorer);

/// Dual-threshold penalty as a function of the max similarity.
double similarity_penalty(double s_max, const Thresholds& th);

struct TrainsetSimilarity {
    double s_max = 0.0;
    double penalty = 0.0;
};
TrainsetSimilarity trainset_penalty(const ToyImage& image, std::span<const ToyImage> trainset, const Thresholds& th,
                                    const Scorer& scorer);

struct SampleReward {
    double r_align = 0.0;
    double r_consist = 0.0;
    double p_sim = 0.0;
    double s_max = 0.0;
    double total = 0.0;
};

struct RewardBreakdown {
    std::vector<SampleReward> samples;
    double r_div = 0.0;

    std::vector<double> totals() const;
};

nlohmann::json to_json(const SampleReward& s, double r_div);

/// Scores a group of images generated for one prompt.
class GroupRewarder {
public:
    virtual ~GroupRewarder() = default;
    virtual RewardBreakdown score(std::span<const ToyImage> images, const PromptSpec& prompt, Rng& rng) const = 0;
};

struct RewardOptions {
    /// Average consistency over every pack VQA item instead of sampling one.
    bool average_vqa = false;
};

/// The full composite reward for one character, with prompt and trainset
/// embeddings computed once.
class CharacterReward final : public GroupRewarder {
public:
    CharacterReward(const CharacterPack& pack, const Scorer& scorer, RewardWeights weights = {},
                    Thresholds thresholds = {}, RewardOptions options = {});

    RewardBreakdown score(std::span<const ToyImage> images, const PromptSpec& prompt, Rng& rng) const override;

    const RewardWeights& weights() const { return weights_; }

private:
    const EmbedVector& prompt_embedding(const PromptSpec& prompt) const;

    const CharacterPack* pack_;
    const Scorer* scorer_;
    RewardWeights weights_;
    Thresholds thresholds_;
    RewardOptions options_;
    std::vector<EmbedVector> trainset_;
    std::map<std::pair<Pose, Tone>, EmbedVector> prompt_embeddings_;
};

nlohmann::json to_json(const RewardWeights& w);
nlohmann::json to_json(const Thresholds& t);
RewardWeights weights_from_json(const nlohmann::json& j, const std::string& path = "rewards.weights");
Thresholds thresholds_from_json(const nlohmann::json& j, const std::string& path = "rewards.thresholds");

}  // namespace charforge
