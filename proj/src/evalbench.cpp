#include "charforge/errors.hpp"
#include "charforge/evalbench.hpp"
#include "charforge/json_util.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace charforge {

namespace {

std::optional<double> optional_number(const JsonReader& r, const std::string& key) {
    if (!r.has(key) || r.raw(key).is_null()) {
        return std::nullopt;
    }
    return r.number(key);
}

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
    nlohmann::json j = {{"clip_i_analogue", r.clip_i_analogue},
                        {"clip_t_analogue", r.clip_t_analogue},
                        {"dino_analogue", r.dino_analogue},
                        {"trainset_sim_sem", r.trainset_sim_sem},
                        {"trainset_sim_struct", r.trainset_sim_struct},
                        {"kqa_accuracy", optional_json(r.kqa_accuracy)},
                        {"vqa_accuracy", optional_json(r.vqa_accuracy)},
                        {"sample_count", r.sample_count},
                        {"mapping_failures", r.mapping_failures},
                        {"config_hash", r.config_hash},
                        {"judge_scores", nullptr}};
    if (r.judge_scores) {
        j["judge_scores"] = {{"memorization", r.judge_scores->memorization},
                             {"personality", r.judge_scores->personality},
                             {"diversity", r.judge_scores->diversity}};
    }
    return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
    JsonReader r(j);
    MetricsReport out;
    out.clip_i_analogue = r.number("clip_i_analogue");
    out.clip_t_analogue = r.number("clip_t_analogue");
    out.dino_analogue = r.number("dino_analogue");
    out.trainset_sim_sem = r.number("trainset_sim_sem");
    out.trainset_sim_struct = r.number("trainset_sim_struct");
    out.kqa_accuracy = optional_number(r, "kqa_accuracy");
    out.vqa_accuracy = optional_number(r, "vqa_accuracy");
    out.sample_count = static_cast<int>(r.integer("sample_count"));
    out.mapping_failures = static_cast<int>(r.integer_or("mapping_failures", 0));
    out.config_hash = r.str_or("config_hash", "");
    if (auto js = r.object_if("judge_scores")) {
        out.judge_scores = JudgeScores{js->number("memorization"), js->number("personality"), js->number("diversity")};
    }
    return out;
}

void write_report(const MetricsReport& r, const std::filesystem::path& file) { write_json_file(to_json(r), file, 2); }

MetricsReport read_report(const std::filesystem::path& file) { return report_from_json(read_json_file(file)); }

std::string config_hash(const nlohmann::json& config) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

MetricsReport image_metrics(std::span<const ToyImage> images, std::span<const PromptSpec> prompts,
                            const CharacterPack& pack, const Scorer& scorer) {
    if (images.empty() || images.size() != prompts.size()) {
        throw InvalidArgument("image metrics need a non-empty image list with one prompt per image");
    }
    std::vector<EmbedVector> core_sem;
    std::vector<EmbedVector> core_str;
    for (const auto& c : pack.core_images) {
        core_sem.push_back(scorer.embed(c.image, EncoderKind::semantic));
        core_str.push_back(scorer.embed(c.image, EncoderKind::structure));
    }
    std::map<std::pair<Pose, Tone>, EmbedVector> prompt_emb;
    MetricsReport r;
    for (size_t i = 0; i < images.size(); ++i) {
        const EmbedVector sem = scorer.embed(images[i], EncoderKind::semantic);
        const EmbedVector str = scorer.embed(images[i], EncoderKind::structure);
        double mean_sem = 0.0;
        double mean_str = 0.0;
        double max_sem = -1.0;
        double max_str = -1.0;
        for (size_t k = 0; k < core_sem.size(); ++k) {
            const double cs = cosine(sem, core_sem[k]);
            const double ct = cosine(str, core_str[k]);
            mean_sem += cs;
            mean_str += ct;
            max_sem = std::max(max_sem, cs);
            max_str = std::max(max_str, ct);
        }
        const auto key = std::pair{prompts[i].pose, prompts[i].tone};
        if (!prompt_emb.contains(key)) {
            prompt_emb[key] = encode_prompt(prompts[i], pack, scorer);
        }
        r.clip_i_analogue += mean_sem / static_cast<double>(core_sem.size());
        r.dino_analogue += mean_str / static_cast<double>(core_str.size());
        r.clip_t_analogue += cosine(sem, prompt_emb[key]);
        r.trainset_sim_sem += max_sem;
        r.trainset_sim_struct += max_str;
    }
    const auto n = static_cast<double>(images.size());
    for (double* f : {&r.clip_i_analogue, &r.clip_t_analogue, &r.dino_analogue, &r.trainset_sim_sem,
                      &r.trainset_sim_struct}) {
        *f /= n;
    }
    r.sample_count = static_cast<int>(images.size());
    return r;
}

SamplerConfig eval_sampler(const SamplerConfig& base, size_t index) {
    SamplerConfig c = base;
    c.seed = derive_seed(base.seed, static_cast<uint64_t>(index));
    return c;
}

T2iEval eval_t2i(const VelocityModel& model, const CharacterPack& pack, std::span<const PromptSpec> prompts,
                 const SamplerConfig& sampler, const Scorer& scorer) {
    if (prompts.empty()) {
        throw InvalidArgument("eval_t2i needs at least one prompt");
    }
    T2iEval out;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const CondToken cond = CondToken::from(encode_prompt(prompts[i], pack, scorer));
        out.images.push_back(sample_ode(model, cond, eval_sampler(sampler, i)));
    }
    out.report = image_metrics(out.images, prompts, pack, scorer);
    return out;
}

std::vector<PromptSpec> eval_prompts(const CharacterPack& pack, int repeats) {
    if (repeats < 1) {
        throw InvalidArgument("eval repeats must be >= 1");
    }
    std::vector<PromptSpec> out;
    const auto base = all_prompts(pack.spec.char_id);
    for (int r = 0; r < repeats; ++r) {
        out.insert(out.end(), base.begin(), base.end());
    }
    return out;
}

std::string fill_instruction(const std::string& char_id, std::span<const std::string> tokens) {
    std::string pose;
    std::string tone;
    for (const auto& t : tokens) {
        if (pose.empty() && (t == "left" || t == "center" || t == "right")) {
            pose = t;
        }
        if (tone.empty() && (t == "bright" || t == "dim")) {
            tone = t;
        }
    }
    std::string out = "draw " + char_id + " facing";
    if (!pose.empty()) {
        out += " " + pose;
    }
    out += " in";
    if (!tone.empty()) {
        out += " " + tone;
    }
    return out + " light";
}

std::optional<PromptSpec> map_instruction(const std::string& instruction, const std::string& char_id) {
    const auto words = tokenize(instruction);
    const std::set<std::string> have(words.begin(), words.end());
    int best = 0;
    int ties = 0;
    std::optional<PromptSpec> choice;
    for (const auto& p : all_prompts(char_id)) {
        const auto canon = tokenize(instruction_text(p));
        const std::set<std::string> want(canon.begin(), canon.end());
        int score = 0;
        for (const auto& w : want) {
            score += have.contains(w) ? 1 : 0;
        }
        if (score > best) {
            best = score;
            ties = 1;
            choice = p;
        } else if (score == best) {
            ++ties;
        }
    }
    if (best == 0 || ties != 1) {
        return std::nullopt;
    }
    return choice;
}

MultimodalEval eval_multimodal(const VelocityModel& velocity, const LanguageModel& lm, const Vocab& vocab,
                               const CharacterPack& pack, std::span<const std::string> queries,
                               const SamplerConfig& sampler, const Scorer& scorer) {
    if (queries.empty()) {
        throw InvalidArgument("eval_multimodal needs at least one query");
    }
    MultimodalEval out;
    std::vector<PromptSpec> mapped;
    for (const auto& q : queries) {
        MultimodalRecord rec;
        rec.query = q;
        rec.response = vocab.decode(generate(lm, vocab, chat_prompt(vocab, q)));
        rec.thinking = vocab.decode(generate(lm, vocab, think_prompt(vocab, q, rec.response)));
        std::vector<std::string> tokens = tokenize(rec.response);
        for (auto& t : tokenize(rec.thinking)) {
            tokens.push_back(std::move(t));
        }
        rec.instruction = fill_instruction(pack.spec.char_id, tokens);
        rec.prompt = map_instruction(rec.instruction, pack.spec.char_id);
        if (rec.prompt) {
            const CondToken cond = CondToken::from(encode_prompt(*rec.prompt, pack, scorer));
            out.images.push_back(sample_ode(velocity, cond, eval_sampler(sampler, mapped.size())));
            mapped.push_back(*rec.prompt);
        }
        out.records.push_back(std::move(rec));
    }
    const int failures = static_cast<int>(queries.size() - mapped.size());
    if (!mapped.empty()) {
        out.report = image_metrics(out.images, mapped, pack, scorer);
    }
    out.report.mapping_failures = failures;
    return out;
}

double mcq_accuracy(const LanguageModel& lm, const Vocab& vocab, std::span<const McqItem> items) {
    if (items.empty()) {
        throw InvalidArgument("mcq accuracy needs at least one item");
    }
    int correct = 0;
    for (const auto& item : items) {
        const auto prompt =
            item.family == McqFamily::knowledge ? kqa_prompt(vocab, item.question) : vqa_prompt(vocab, item.question);
        int best = 0;
        double best_ll = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < 4; ++k) {
            auto option = vocab.encode(item.options[static_cast<size_t>(k)]);
            option.push_back(vocab.id(Vocab::kEos));
            const double ll = sequence_log_likelihood(lm, prompt, option);
            if (ll > best_ll) {
                best_ll = ll;
                best = k;
            }
        }
        correct += ('A' + best == item.answer_key) ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

void attach_text_metrics(MetricsReport& report, const LanguageModel& lm, const Vocab& vocab,
                         const CharacterPack& pack) {
    std::vector<McqItem> knowledge;
    std::vector<McqItem> visual;
    for (const auto& m : pack.mcq) {
        (m.family == McqFamily::knowledge ? knowledge : visual).push_back(m);
    }
    report.kqa_accuracy = knowledge.empty() ? std::nullopt : std::optional(mcq_accuracy(lm, vocab, knowledge));
    report.vqa_accuracy = visual.empty() ? std::nullopt : std::optional(mcq_accuracy(lm, vocab, visual));
}

SftStage run_sft_stage(const CharacterPack& pack, const ExperimentConfig& cfg, uint64_t seed, const Scorer& scorer) {
    SftStage stage{VelocityField(cfg.shape, derive_seed(seed, 0x1)),
                   TinyLM(Vocab::from_pack(pack), cfg.lm, derive_seed(seed, 0x2)),
                   {}};
    SFTConfig sft = cfg.sft;
    sft.seed = seed;
    MixerConfig mixer = cfg.mixer;
    mixer.seed = seed;
    stage.history = unified_sft_run(stage.velocity, stage.lm, pack, sft, mixer, scorer, cfg.sampler).history;
    return stage;
}

VelocityField run_grpo_stage(const VelocityField& start, const CharacterPack& pack, const ExperimentConfig& cfg,
                             const RewardWeights& weights, uint64_t seed, const Scorer& scorer,
                             std::vector<IterationStats>* stats) {
    VelocityField model(start.shape(), start.params());
    GRPOConfig grpo = cfg.grpo;
    grpo.seed = seed;
    const CharacterReward reward(pack, scorer, weights, cfg.thresholds, cfg.reward_options);
    auto history = grpo_run(model, grpo_prompts(pack, scorer), reward, grpo, cfg.sampler);
    if (stats != nullptr) {
        *stats = std::move(history);
    }
    return model;
}

MetricsReport evaluate_stage(const VelocityModel& model, const CharacterPack& pack, const ExperimentConfig& cfg,
                             uint64_t seed, const Scorer& scorer) {
    SamplerConfig sampler = cfg.sampler;
    sampler.seed = seed;
    const auto prompts = eval_prompts(pack, cfg.eval_repeats);
    return eval_t2i(model, pack, prompts, sampler, scorer).report;
}

std::string_view to_string(AblationSuite s) { return s == AblationSuite::stage ? "stage" : "reward"; }

AblationSuite ablation_suite_from_string(std::string_view s) {
    if (s == "stage") {
        return AblationSuite::stage;
    }
    if (s == "reward") {
        return AblationSuite::reward;
    }
    throw InvalidArgument("unknown ablation suite '" + std::string(s) + "' (expected stage or reward)");
}

std::vector<AblationSetting> ablation_settings(AblationSuite suite, const RewardWeights& base) {
    if (suite == AblationSuite::stage) {
        return {{"sft_only", false, base}, {"sft_grpo", true, base}};
    }
    auto without = [&](double RewardWeights::* field) {
        RewardWeights w = base;
        w.*field = 0.0;
        return w;
    };
    return {{"full", true, base},
            {"no_alignment", true, without(&RewardWeights::alpha)},
            {"no_consistency", true, without(&RewardWeights::beta_vqa)},
            {"no_diversity", true, without(&RewardWeights::gamma)},
            {"no_penalty", true, without(&RewardWeights::delta)}};
}

std::vector<AblationRow> run_ablation(AblationSuite suite, const CharacterPack& pack, const ExperimentConfig& cfg,
                                      std::span<const uint64_t> seeds, const Scorer& scorer) {
    const auto settings = ablation_settings(suite, cfg.weights);
    std::vector<AblationRow> rows;
    for (uint64_t seed : seeds) {
        const SftStage sft = run_sft_stage(pack, cfg, seed, scorer);
        for (const auto& setting : settings) {
            AblationRow row;
            row.setting = setting.name;
            row.seed = seed;
            row.weights = setting.weights;
            if (setting.grpo) {
                const VelocityField tuned = run_grpo_stage(sft.velocity, pack, cfg, setting.weights, seed, scorer);
                row.report = evaluate_stage(tuned, pack, cfg, seed, scorer);
            } else {
                row.report = evaluate_stage(sft.velocity, pack, cfg, seed, scorer);
            }
            nlohmann::json id = to_json(cfg);
            id["setting"] = setting.name;
            id["seed"] = seed;
            id["weights"] = to_json(setting.weights);
            row.report.config_hash = config_hash(id);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    out.precision(10);
    out << "setting,seed,alpha,beta_vqa,gamma,delta,clip_i_analogue,clip_t_analogue,dino_analogue,"
           "trainset_sim_sem,trainset_sim_struct,sample_count\n";
    for (const auto& r : rows) {
        out << r.setting << ',' << r.seed << ',' << r.weights.alpha << ',' << r.weights.beta_vqa << ','
            << r.weights.gamma << ',' << r.weights.delta << ',' << r.report.clip_i_analogue << ','
            << r.report.clip_t_analogue << ',' << r.report.dino_analogue << ',' << r.report.trainset_sim_sem << ','
            << r.report.trainset_sim_struct << ',' << r.report.sample_count << '\n';
    }
    if (!out) {
        throw IoError("write failed for '" + file.string() + "'");
    }
}

nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"shape",
             {{"time_dim", c.shape.time_dim}, {"hidden1", c.shape.hidden1}, {"hidden2", c.shape.hidden2}}},
            {"lm", {{"embed_dim", c.lm.embed_dim}, {"context", c.lm.context}}},
            {"sft", to_json(c.sft)},
            {"mixer", to_json(c.mixer)},
            {"grpo", to_json(c.grpo)},
            {"sampler", to_json(c.sampler)},
            {"weights", to_json(c.weights)},
            {"thresholds", to_json(c.thresholds)},
            {"average_vqa", c.reward_options.average_vqa},
            {"eval_repeats", c.eval_repeats}};
}

}  // namespace charforge
