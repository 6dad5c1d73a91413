#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/optim.hpp"
#include "charforge/rng.hpp"
#include "charforge/sft.hpp"

#include <cmath>
#include <fstream>
#include <map>

namespace charforge {

namespace {

constexpr uint64_t kFlowStream = 0xf10;

std::vector<int> with_specials(const Vocab& v, std::initializer_list<std::string_view> specials,
                               std::initializer_list<std::string_view> texts) {
    std::vector<int> out;
    for (auto s : specials) {
        out.push_back(v.id(s));
    }
    for (auto t : texts) {
        const auto ids = v.encode(t);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::vector<int> target_of(const Vocab& v, std::string_view text) {
    auto ids = v.encode(text);
    ids.push_back(v.id(Vocab::kEos));
    return ids;
}

}  // namespace

std::string_view to_string(TaskKind k) {
    switch (k) {
        case TaskKind::chat:
            return "chat";
        case TaskKind::think:
            return "think";
        case TaskKind::vqa:
            return "vqa";
        case TaskKind::kqa:
            return "kqa";
        case TaskKind::t2i:
            return "t2i";
    }
    return "?";
}

std::vector<int> chat_prompt(const Vocab& v, std::string_view user_input) {
    return with_specials(v, {Vocab::kBos, Vocab::kChat}, {user_input});
}

std::vector<int> think_prompt(const Vocab& v, std::string_view user_input, std::string_view response) {
    return with_specials(v, {Vocab::kBos, Vocab::kThink}, {user_input, response});
}

std::vector<int> vqa_prompt(const Vocab& v, std::string_view question) {
    return with_specials(v, {Vocab::kBos, Vocab::kVqa, Vocab::kImg}, {question});
}

std::vector<int> kqa_prompt(const Vocab& v, std::string_view question) {
    return with_specials(v, {Vocab::kBos, Vocab::kKqa}, {question});
}

SftData build_sft_data(const CharacterPack& pack, const Vocab& vocab, const Scorer& scorer) {
    validate(pack);
    SftData data;
    auto text = [&](TaskKind kind, std::vector<int> prompt, std::string_view answer) {
        TaskSample s;
        s.kind = kind;
        s.prompt = std::move(prompt);
        s.target = target_of(vocab, answer);
        data.vlm.push_back(std::move(s));
    };
    for (const auto& d : pack.dialogues) {
        text(TaskKind::chat, chat_prompt(vocab, d.user_input), d.response);
    }
    for (const auto& m : pack.mm_samples) {
        text(TaskKind::chat, chat_prompt(vocab, m.user_input), m.response);
        text(TaskKind::think, think_prompt(vocab, m.user_input, m.response), m.thinking);
    }
    for (const auto& q : pack.vqa) {
        text(TaskKind::vqa, vqa_prompt(vocab, q.question), q.answer);
    }
    for (const auto& q : pack.kqa) {
        text(TaskKind::kqa, kqa_prompt(vocab, q.question), q.answer);
    }

    std::map<std::pair<Pose, Tone>, CondToken> conds;
    for (const auto& core : pack.core_images) {
        const auto key = std::pair{core.prompt.pose, core.prompt.tone};
        if (!conds.contains(key)) {
            conds[key] = CondToken::from(encode_prompt(core.prompt, pack, scorer));
        }
        TaskSample s;
        s.kind = TaskKind::t2i;
        const auto values = core.image.to_vector();
        s.image = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
        s.prompt_spec = core.prompt;
        s.cond = conds[key];
        data.t2i.push_back(std::move(s));
    }
    return data;
}

void MixerConfig::validate() const {
    if (t2i_ratio < 1 || vlm_ratio < 1) {
        throw InvalidArgument("mixer ratio parts must both be >= 1");
    }
    if (batch_size < 2) {
        throw InvalidArgument("mixer batch_size must be >= 2 (one slot per family)");
    }
}

double MixerConfig::vlm_fill_probability() const {
    if (batch_size == 2) {
        return 0.0;
    }
    const double share = static_cast<double>(vlm_ratio) / static_cast<double>(t2i_ratio + vlm_ratio);
    const double p = (batch_size * share - 1.0) / (batch_size - 2);
    return std::clamp(p, 0.0, 1.0);
}

BatchMixer::BatchMixer(size_t t2i_count, size_t vlm_count, MixerConfig config)
    : t2i_count_(t2i_count), vlm_count_(vlm_count), config_(config) {
    config_.validate();
    if (t2i_count_ == 0 || vlm_count_ == 0) {
        throw InvalidArgument("batch mixer needs non-empty T2I and VLM streams");
    }
}

MixedBatch BatchMixer::batch(uint64_t index) const {
    Rng rng(derive_seed(config_.seed, index));
    const double p = config_.vlm_fill_probability();
    MixedBatch b;
    b.t2i.push_back(rng.below(t2i_count_));
    b.vlm.push_back(rng.below(vlm_count_));
    for (int k = 2; k < config_.batch_size; ++k) {
        if (rng.bernoulli(p)) {
            b.vlm.push_back(rng.below(vlm_count_));
        } else {
            b.t2i.push_back(rng.below(t2i_count_));
        }
    }
    return b;
}

void SFTConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw InvalidArgument("sft.learning_rate must be positive");
    }
    if (steps < 1) {
        throw InvalidArgument("sft.steps must be positive");
    }
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) {
        throw InvalidArgument("sft.p_drop must lie in [0, 1]");
    }
    for (double w : {weights.chat, weights.think, weights.vqa, weights.kqa, weights.flow}) {
        if (!(w >= 0.0)) {
            throw InvalidArgument("sft.weights must be non-negative");
        }
    }
}

SftLosses sft_losses(const VelocityField& velocity, const TinyLM& lm, const SftData& data, const MixedBatch& batch,
                     const SFTConfig& config, int step, Eigen::VectorXd* grad_velocity, Eigen::VectorXd* grad_lm) {
    SftLosses out;
    out.step = step;

    std::map<TaskKind, std::vector<const TaskSample*>> by_kind;
    for (size_t i : batch.vlm) {
        const TaskSample& s = data.vlm.at(i);
        by_kind[s.kind].push_back(&s);
    }
    auto weight_of = [&](TaskKind k) {
        switch (k) {
            case TaskKind::chat:
                return config.weights.chat;
            case TaskKind::think:
                return config.weights.think;
            case TaskKind::vqa:
                return config.weights.vqa;
            case TaskKind::kqa:
                return config.weights.kqa;
            case TaskKind::t2i:
                return config.weights.flow;
        }
        return 0.0;
    };
    auto slot = [&](TaskKind k) -> double& {
        switch (k) {
            case TaskKind::chat:
                return out.chat;
            case TaskKind::think:
                return out.think;
            case TaskKind::vqa:
                return out.vqa;
            case TaskKind::kqa:
                return out.kqa;
            case TaskKind::t2i:
                return out.flow;
        }
        return out.flow;
    };
    for (const auto& [kind, samples] : by_kind) {
        const double n = static_cast<double>(samples.size());
        const double scale = weight_of(kind) / n;
        double sum = 0.0;
        for (const TaskSample* s : samples) {
            sum += lm.loss_and_grad(s->prompt, s->target, grad_lm, scale);
        }
        slot(kind) = sum / n;
    }

    std::vector<FlowExample> examples;
    examples.reserve(batch.t2i.size());
    for (size_t i : batch.t2i) {
        const TaskSample& s = data.t2i.at(i);
        examples.push_back({s.image, s.cond});
    }
    Rng rng(derive_seed(config.seed, static_cast<uint64_t>(step), kFlowStream));
    if (grad_velocity != nullptr && config.weights.flow != 1.0) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(grad_velocity->size());
        out.flow = flow_loss_and_grad(velocity, examples, rng, config.p_drop, &g);
        *grad_velocity += config.weights.flow * g;
    } else {
        out.flow = flow_loss_and_grad(velocity, examples, rng, config.p_drop, grad_velocity);
    }

    out.total = config.weights.chat * out.chat + config.weights.think * out.think + config.weights.vqa * out.vqa +
                config.weights.kqa * out.kqa + config.weights.flow * out.flow;
    return out;
}

SftResult unified_sft_run(VelocityField& velocity, TinyLM& lm, const CharacterPack& pack, const SFTConfig& config,
                          const MixerConfig& mixer_config, const Scorer& scorer, const SamplerConfig& sampler) {
    config.validate();
    const SftData data = build_sft_data(pack, lm.vocab(), scorer);
    const BatchMixer mixer(data.t2i.size(), data.vlm.size(), mixer_config);

    AdamWConfig opt;
    opt.learning_rate = config.learning_rate;
    opt.beta1 = config.beta1;
    opt.beta2 = config.beta2;
    opt.eps = config.adam_eps;
    opt.weight_decay = config.weight_decay;
    AdamW opt_velocity(velocity.param_count(), opt);
    AdamW opt_lm(lm.params().size(), opt);

    SftResult result;
    result.history.reserve(static_cast<size_t>(config.steps));
    for (int step = 0; step < config.steps; ++step) {
        Eigen::VectorXd gv = Eigen::VectorXd::Zero(velocity.param_count());
        Eigen::VectorXd gl = Eigen::VectorXd::Zero(lm.params().size());
        const SftLosses losses =
            sft_losses(velocity, lm, data, mixer.batch(static_cast<uint64_t>(step)), config, step, &gv, &gl);
        const std::pair<const char*, double> parts[] = {{"chat", losses.chat}, {"think", losses.think},
                                                        {"vqa", losses.vqa},   {"kqa", losses.kqa},
                                                        {"flow", losses.flow}, {"total", losses.total}};
        for (const auto& [name, value] : parts) {
            if (!std::isfinite(value)) {
                throw NumericalDivergence("sft loss component '" + std::string(name) + "' is non-finite at step " +
                                          std::to_string(step));
            }
        }
        opt_velocity.step(velocity.params(), std::move(gv));
        opt_lm.step(lm.params(), std::move(gl));
        result.history.push_back(losses);
    }

    result.checkpoint.shape = velocity.shape();
    result.checkpoint.params = velocity.params();
    result.checkpoint.sampler = sampler;
    result.checkpoint.lm = lm.to_json();
    result.checkpoint.meta = {{"stage", "sft"}, {"steps", config.steps}, {"char_id", pack.spec.char_id}};
    return result;
}

void write_loss_history(const std::vector<SftLosses>& history, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    out.precision(17);
    out << "step,l_chat,l_think,l_vqa,l_kqa,l_flow,total\n";
    for (const auto& h : history) {
        out << h.step << ',' << h.chat << ',' << h.think << ',' << h.vqa << ',' << h.kqa << ',' << h.flow << ','
            << h.total << '\n';
    }
    if (!out) {
        throw IoError("write failed for '" + file.string() + "'");
    }
}

nlohmann::json to_json(const MixerConfig& c) {
    return {{"t2i_ratio", c.t2i_ratio}, {"vlm_ratio", c.vlm_ratio}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

nlohmann::json to_json(const SFTConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"steps", c.steps},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"p_drop", c.p_drop},
            {"weights",
             {{"chat", c.weights.chat},
              {"think", c.weights.think},
              {"vqa", c.weights.vqa},
              {"kqa", c.weights.kqa},
              {"flow", c.weights.flow}}},
            {"seed", c.seed}};
}

MixerConfig mixer_from_json(const nlohmann::json& j, const std::string& path) {
    MixerConfig c;
    if (j.is_null()) {
        return c;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    c.t2i_ratio = static_cast<int>(r.integer_or("t2i_ratio", c.t2i_ratio));
    c.vlm_ratio = static_cast<int>(r.integer_or("vlm_ratio", c.vlm_ratio));
    c.batch_size = static_cast<int>(r.integer_or("batch_size", c.batch_size));
    c.seed = r.unsigned_or("seed", c.seed);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return c;
}

SFTConfig sft_from_json(const nlohmann::json& j, const std::string& path) {
    SFTConfig c;
    if (j.is_null()) {
        return c;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    c.learning_rate = r.number_or("learning_rate", c.learning_rate);
    c.steps = static_cast<int>(r.integer_or("steps", c.steps));
    c.beta1 = r.number_or("beta1", c.beta1);
    c.beta2 = r.number_or("beta2", c.beta2);
    c.adam_eps = r.number_or("adam_eps", c.adam_eps);
    c.weight_decay = r.number_or("weight_decay", c.weight_decay);
    c.p_drop = r.number_or("p_drop", c.p_drop);
    if (auto w = r.object_if("weights")) {
        c.weights.chat = w->number_or("chat", c.weights.chat);
        c.weights.think = w->number_or("think", c.weights.think);
        c.weights.vqa = w->number_or("vqa", c.weights.vqa);
        c.weights.kqa = w->number_or("kqa", c.weights.kqa);
        c.weights.flow = w->number_or("flow", c.weights.flow);
    }
    c.seed = r.unsigned_or("seed", c.seed);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return c;
}

}  // namespace charforge
