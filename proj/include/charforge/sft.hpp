#pragma once

// Unified supervised fine-tuning: a small word-level text model for the four
// text tasks, the two-family batch mixer and the joint update of text and
// image branches.

#include "charforge/encoders.hpp"
#include "charforge/flowgen.hpp"
#include "charforge/toyworld.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace charforge {

/// Whitespace tokenization.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
public:
    static constexpr std::string_view kBos = "<bos>";
    static constexpr std::string_view kEos = "<eos>";
    static constexpr std::string_view kUnk = "<unk>";
    static constexpr std::string_view kChat = "<chat>";
    static constexpr std::string_view kThink = "<think>";
    static constexpr std::string_view kVqa = "<vqa>";
    static constexpr std::string_view kKqa = "<kqa>";
    static constexpr std::string_view kImg = "<img>";

    Vocab();  // specials only
    explicit Vocab(const std::vector<std::string>& words);
    /// Specials plus every word appearing in the pack's texts, sorted.
    static Vocab from_pack(const CharacterPack& pack);

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(std::string_view word) const;
    /// Throws InvalidArgument for words outside the vocabulary.
    int id(std::string_view word) const;
    const std::string& token(int id) const;
    /// Unknown words map to <unk>.
    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

private:
    void add(const std::string& word);
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

/// Next-token distribution over a vocabulary given a token context.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;
    virtual int vocab_size() const = 0;
    virtual Eigen::VectorXd next_token_logprobs(std::span<const int> context) const = 0;
};

struct TinyLMConfig {
    int embed_dim = 32;
    int context = 16;
};

/// Mean of the last `context` token embeddings, then a softmax head.
class TinyLM final : public LanguageModel {
public:
    TinyLM(Vocab vocab, TinyLMConfig config, uint64_t init_seed);

    int vocab_size() const override { return vocab_.size(); }
    Eigen::VectorXd next_token_logprobs(std::span<const int> context) const override;

    /// Mean over target positions of -log p(target | prompt, target prefix);
    /// accumulates `scale` times its gradient into `grad` when given.
    double loss_and_grad(std::span<const int> prompt, std::span<const int> target, Eigen::VectorXd* grad,
                         double scale = 1.0) const;

    const Vocab& vocab() const { return vocab_; }
    const TinyLMConfig& config() const { return config_; }
    Eigen::VectorXd& params() { return params_; }
    const Eigen::VectorXd& params() const { return params_; }

    nlohmann::json to_json() const;
    static TinyLM from_json(const nlohmann::json& j, const std::string& path = "lm");

private:
    Eigen::VectorXd context_vector(std::span<const int> context, int& count, int& first) const;
    Eigen::Map<const Eigen::MatrixXd> embeddings() const;
    Eigen::Map<const Eigen::MatrixXd> head() const;
    Eigen::Map<const Eigen::VectorXd> bias() const;

    Vocab vocab_;
    TinyLMConfig config_;
    Eigen::VectorXd params_;  // [E (d x V) | W (V x d) | b (V)]
};

/// Cross-entropy of `target` after `prompt`, averaged over target positions.
/// Throws InvalidArgument on an empty target or an out-of-vocabulary id.
double ce_loss(const LanguageModel& lm, std::span<const int> prompt, std::span<const int> target);

/// Sum of log-probabilities of `continuation` after `context`.
double sequence_log_likelihood(const LanguageModel& lm, std::span<const int> context,
                               std::span<const int> continuation);

/// Greedy decoding until <eos> or `max_tokens`; the returned ids exclude <eos>.
std::vector<int> generate(const LanguageModel& lm, const Vocab& vocab, std::vector<int> context, int max_tokens = 24);

enum class TaskKind { chat, think, vqa, kqa, t2i };
inline constexpr std::array kTextTasks{TaskKind::chat, TaskKind::think, TaskKind::vqa, TaskKind::kqa};
std::string_view to_string(TaskKind k);

struct TaskSample {
    TaskKind kind = TaskKind::chat;
    std::vector<int> prompt;
    std::vector<int> target;  // ends with <eos>
    // t2i payload
    Eigen::VectorXd image;
    PromptSpec prompt_spec;
    CondToken cond;
};

/// Task prompts, shared by training and evaluation.
std::vector<int> chat_prompt(const Vocab& v, std::string_view user_input);
std::vector<int> think_prompt(const Vocab& v, std::string_view user_input, std::string_view response);
std::vector<int> vqa_prompt(const Vocab& v, std::string_view question);
std::vector<int> kqa_prompt(const Vocab& v, std::string_view question);

struct SftData {
    std::vector<TaskSample> t2i;
    std::vector<TaskSample> vlm;  // chat, think, vqa and kqa samples
};
SftData build_sft_data(const CharacterPack& pack, const Vocab& vocab, const Scorer& scorer);

struct MixerConfig {
    int t2i_ratio = 200;
    int vlm_ratio = 1;
    int batch_size = 256;
    uint64_t seed = 0;

    void validate() const;
    /// Probability that a free slot (beyond the one reserved per family)
    /// holds a VLM sample; 0 when the batch is too small to reach the ratio.
    double vlm_fill_probability() const;
};

struct MixedBatch {
    std::vector<size_t> t2i;
    std::vector<size_t> vlm;
};

/// One reserved slot per family, remaining slots drawn by the ratio.
/// Batch k depends only on (seed, k).
class BatchMixer {
public:
    BatchMixer(size_t t2i_count, size_t vlm_count, MixerConfig config);
    MixedBatch batch(uint64_t index) const;
    MixedBatch next() { return batch(cursor_++); }

private:
    size_t t2i_count_;
    size_t vlm_count_;
    MixerConfig config_;
    uint64_t cursor_ = 0;
};

struct TaskWeights {
    double chat = 1.0;
    double think = 1.0;
    double vqa = 1.0;
    double kqa = 1.0;
    double flow = 1.0;
};

struct SFTConfig {
    double learning_rate = 2e-5;
    int steps = 500;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double p_drop = 0.1;
    TaskWeights weights;
    uint64_t seed = 0;

    void validate() const;
};

/// Per-family means (0 when the family is absent from the batch) and the
/// weighted total.
struct SftLosses {
    int step = 0;
    double chat = 0.0;
    double think = 0.0;
    double vqa = 0.0;
    double kqa = 0.0;
    double flow = 0.0;
    double total = 0.0;
};

/// Loss of one mixed batch at `step` (the flow draws come from a stream
/// derived from (config.seed, step)). Gradients are added when given.
SftLosses sft_losses(const VelocityField& velocity, const TinyLM& lm, const SftData& data, const MixedBatch& batch,
                     const SFTConfig& config, int step, Eigen::VectorXd* grad_velocity, Eigen::VectorXd* grad_lm);

struct SftResult {
    std::vector<SftLosses> history;
    Checkpoint checkpoint;
};

/// Runs config.steps joint updates in place. Throws NumericalDivergence
/// naming the component when a loss turns non-finite.
SftResult unified_sft_run(VelocityField& velocity, TinyLM& lm, const CharacterPack& pack, const SFTConfig& config,
                          const MixerConfig& mixer, const Scorer& scorer, const SamplerConfig& sampler = {});

void write_loss_history(const std::vector<SftLosses>& history, const std::filesystem::path& file);

nlohmann::json to_json(const MixerConfig& c);
nlohmann::json to_json(const SFTConfig& c);
MixerConfig mixer_from_json(const nlohmann::json& j, const std::string& path = "mixer");
SFTConfig sft_from_json(const nlohmann::json& j, const std::string& path = "sft");

}  // namespace charforge
