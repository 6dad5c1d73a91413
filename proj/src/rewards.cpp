#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/rewards.hpp"

#include <algorithm>
#include <cmath>

namespace charforge {

void RewardWeights::validate() const {
    for (double w : {alpha, beta_vqa, gamma, delta}) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw InvalidArgument("reward weights must be finite and non-negative");
        }
    }
}

void Thresholds::validate() const {
    if (!(tau_low < tau_high)) {
        throw InvalidArgument("thresholds need tau_low < tau_high");
    }
}

double total_reward(const RewardParts& p, const RewardWeights& w) {
    return w.alpha * p.r_align + w.beta_vqa * p.r_consist + w.gamma * p.r_div + w.delta * p.p_sim;
}

double alignment_reward(const ToyImage& image, const PromptSpec& prompt, const CharacterPack& pack,
                        const Scorer& scorer) {
    return cosine(scorer.embed(image, EncoderKind::semantic), encode_prompt(prompt, pack, scorer));
}

double consistency_reward(const ToyImage& image, const VqaItem& item) {
    switch (item.kind) {
        case VqaKind::dominant_color:
        case VqaKind::shape:
        case VqaKind::marker_quadrant:
            return vqa_oracle(image, {item.kind}) == item.answer ? 1.0 : 0.0;
    }
    throw InvalidArgument("unsupported VQA question kind");
}

double group_diversity(std::span<const ToyImage> images, const Scorer& scorer) {
    const size_t g = images.size();
    if (g < 2) {
        throw InvalidArgument("group diversity needs at least 2 images");
    }
    double sum = 0.0;
    for (size_t i = 0; i < g; ++i) {
        for (size_t j = 0; j < g; ++j) {
            if (i != j) {
                sum += scorer.perceptual_distance(images[i], images[j]);
            }
        }
    }
    return sum / static_cast<double>(g * (g - 1));
}

double similarity_penalty(double s_max, const Thresholds& th) {
    if (s_max > th.tau_high) {
        return -(s_max - th.tau_high);
    }
    if (s_max < th.tau_low) {
        return -(th.tau_low - s_max);
    }
    return 0.0;
}

TrainsetSimilarity trainset_penalty(const ToyImage& image, std::span<const ToyImage> trainset, const Thresholds& th,
                                    const Scorer& scorer) {
    if (trainset.empty()) {
        throw InvalidArgument("trainset penalty needs a non-empty trainset");
    }
    const EmbedVector e = scorer.embed(image, EncoderKind::structure);
    double s_max = -1.0;
    for (const auto& t : trainset) {
        s_max = std::max(s_max, cosine(e, scorer.embed(t, EncoderKind::structure)));
    }
    return {s_max, similarity_penalty(s_max, th)};
}

std::vector<double> RewardBreakdown::totals() const {
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        out.push_back(s.total);
    }
    return out;
}

nlohmann::json to_json(const SampleReward& s, double r_div) {
    return {{"r_align", s.r_align}, {"r_consist", s.r_consist}, {"r_div", r_div},
            {"p_sim", s.p_sim},     {"s_max", s.s_max},         {"total", s.total}};
}

CharacterReward::CharacterReward(const CharacterPack& pack, const Scorer& scorer, RewardWeights weights,
                                 Thresholds thresholds, RewardOptions options)
    : pack_(&pack), scorer_(&scorer), weights_(weights), thresholds_(thresholds), options_(options) {
    weights_.validate();
    thresholds_.validate();
    validate(pack);
    if (pack.vqa.empty()) {
        throw InvalidArgument("consistency reward needs at least one VQA item in the pack");
    }
    for (const auto& core : pack.core_images) {
        trainset_.push_back(scorer.embed(core.image, EncoderKind::structure));
    }
    for (const auto& p : all_prompts(pack.spec.char_id)) {
        prompt_embeddings_[{p.pose, p.tone}] = encode_prompt(p, pack, scorer);
    }
}

const EmbedVector& CharacterReward::prompt_embedding(const PromptSpec& prompt) const {
    if (prompt.char_id != pack_->spec.char_id) {
        throw IdentityMismatch("prompt names '" + prompt.char_id + "' but the reward is for '" +
                               pack_->spec.char_id + "'");
    }
    return prompt_embeddings_.at({prompt.pose, prompt.tone});
}

RewardBreakdown CharacterReward::score(std::span<const ToyImage> images, const PromptSpec& prompt, Rng& rng) const {
    const EmbedVector& target = prompt_embedding(prompt);
    RewardBreakdown out;
    out.r_div = group_diversity(images, *scorer_);
    for (const auto& img : images) {
        SampleReward s;
        s.r_align = cosine(scorer_->embed(img, EncoderKind::semantic), target);
        if (options_.average_vqa) {
            double sum = 0.0;
            for (const auto& item : pack_->vqa) {
                sum += consistency_reward(img, item);
            }
            s.r_consist = sum / static_cast<double>(pack_->vqa.size());
        } else {
            s.r_consist = consistency_reward(img, pack_->vqa[rng.below(pack_->vqa.size())]);
        }
        const EmbedVector e = scorer_->embed(img, EncoderKind::structure);
        s.s_max = -1.0;
        for (const auto& t : trainset_) {
            s.s_max = std::max(s.s_max, cosine(e, t));
        }
        s.p_sim = similarity_penalty(s.s_max, thresholds_);
        s.total = total_reward({s.r_align, s.r_consist, out.r_div, s.p_sim}, weights_);
        out.samples.push_back(s);
    }
    return out;
}

nlohmann::json to_json(const RewardWeights& w) {
    return {{"alpha", w.alpha}, {"beta_vqa", w.beta_vqa}, {"gamma", w.gamma}, {"delta", w.delta}};
}

nlohmann::json to_json(const Thresholds& t) { return {{"tau_high", t.tau_high}, {"tau_low", t.tau_low}}; }

RewardWeights weights_from_json(const nlohmann::json& j, const std::string& path) {
    RewardWeights w;
    if (j.is_null()) {
        return w;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    w.alpha = r.number_or("alpha", w.alpha);
    w.beta_vqa = r.number_or("beta_vqa", w.beta_vqa);
    w.gamma = r.number_or("gamma", w.gamma);
    w.delta = r.number_or("delta", w.delta);
    try {
        w.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return w;
}

Thresholds thresholds_from_json(const nlohmann::json& j, const std::string& path) {
    Thresholds t;
    if (j.is_null()) {
        return t;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    t.tau_high = r.number_or("tau_high", t.tau_high);
    t.tau_low = r.number_or("tau_low", t.tau_low);
    try {
        t.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return t;
}

}  // namespace charforge
