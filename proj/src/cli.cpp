#include "charforge/cli.hpp"
#include "charforge/config.hpp"
#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/rng.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fcntl.h>
#include <unistd.h>

#include <fstream>
#include <iomanip>
#include <sstream>

namespace charforge {

namespace {

namespace fs = std::filesystem;

constexpr const char* kScorerEnv = "CHARFORGE_SCORER";

struct Flags {
    std::string config;
    std::string output;
    std::string preset;
    std::string pack;
    std::string checkpoint;
    std::string sft_checkpoint;
    std::string suite;
    uint64_t seed = 0;
    bool seed_given = false;
    std::vector<uint64_t> seeds;
    int per_prompt = 0;
    bool allow_cold_start = false;
};

class DirLock {
public:
    explicit DirLock(const fs::path& dir) : file_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw IoError("output directory '" + dir.string() + "' is in use (lock file " + file_.string() +
                          " exists)");
        }
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] const auto written = ::write(fd_, pid.data(), pid.size());
    }
    ~DirLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(file_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path file_;
    int fd_ = -1;
};

nlohmann::json load_document(const Flags& f) {
    nlohmann::json doc = nlohmann::json::object();
    if (!f.config.empty()) {
        try {
            doc = read_json_file(f.config);
        } catch (const IoError& e) {
            throw SchemaError("--config", e.what());
        } catch (const ParseError& e) {
            throw SchemaError("--config", e.what());
        }
        if (!doc.is_object()) {
            throw SchemaError("<root>", "expected a JSON object");
        }
    }
    if (!f.preset.empty()) {
        doc["preset"] = f.preset;
    }
    if (f.seed_given) {
        doc["seed"] = f.seed;
    }
    if (!f.output.empty()) {
        doc["output_dir"] = f.output;
    }
    if (!f.pack.empty()) {
        doc["pack"] = f.pack;
    }
    if (!f.checkpoint.empty()) {
        doc["checkpoint"] = f.checkpoint;
    }
    if (!f.sft_checkpoint.empty()) {
        doc["sft_checkpoint"] = f.sft_checkpoint;
    }
    if (!f.suite.empty()) {
        doc["ablate"]["suite"] = f.suite;
    }
    if (!f.seeds.empty()) {
        doc["ablate"]["seeds"] = f.seeds;
    }
    if (f.per_prompt != 0) {
        doc["sample"]["per_prompt"] = f.per_prompt;
    }
    if (const char* scorer = std::getenv(kScorerEnv); scorer != nullptr && *scorer != '\0') {
        doc["encoders"]["scorer_command"] = scorer;
    }
    return doc;
}

const fs::path& require_path(const std::optional<fs::path>& p, const std::string& field) {
    if (!p) {
        throw SchemaError(field, "missing field (required by this subcommand)");
    }
    if (!fs::exists(*p)) {
        throw SchemaError(field, "path '" + p->string() + "' does not exist");
    }
    return *p;
}

void check_optional_path(const std::optional<fs::path>& p, const std::string& field) {
    if (p) {
        require_path(p, field);
    }
}

nlohmann::json hashed_view(const RunConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("output_dir");
    return j;
}

struct Context {
    RunConfig config;
    nlohmann::json resolved;
    std::string hash;
    std::ostream& out;

    fs::path path(const std::string& name) const { return config.output_dir / name; }

    std::unique_ptr<Scorer> scorer() const {
        return make_scorer(config.encoders.scorer_command, config.encoders.semantic_seed,
                           config.encoders.structure_seed);
    }
};

CharacterPack load_run_pack(const Context& ctx) { return load_pack(*ctx.config.pack); }

void check_identity(const Checkpoint& ckpt, const CharacterPack& pack, const std::string& field) {
    if (ckpt.meta.is_object() && ckpt.meta.contains("char_id") &&
        ckpt.meta["char_id"] != nlohmann::json(pack.spec.char_id)) {
        throw IdentityMismatch(field + " was trained for '" + ckpt.meta["char_id"].dump() + "', pack is '" +
                               pack.spec.char_id + "'");
    }
}

void cmd_make_data(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const CharacterPack pack = build_pack(make_character(c.data.character_seed), c.data.character_seed, c.data.sizes);
    write_pack(pack, ctx.path("pack"));
    ctx.out << "pack " << pack.spec.char_id << " -> " << ctx.path("pack").string() << "\n";
}

void cmd_train_sft(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const ExperimentConfig& e = c.experiment;
    const CharacterPack pack = load_run_pack(ctx);
    const auto scorer = ctx.scorer();
    VelocityField velocity(e.shape, derive_seed(c.init_seed, 0x1));
    TinyLM lm(Vocab::from_pack(pack), e.lm, derive_seed(c.init_seed, 0x2));
    SftResult result = unified_sft_run(velocity, lm, pack, e.sft, e.mixer, *scorer, e.sampler);
    result.checkpoint.meta["config_hash"] = ctx.hash;
    write_checkpoint(result.checkpoint, ctx.path("sft_checkpoint.json"));
    write_loss_history(result.history, ctx.path("sft_losses.csv"));
    const SftLosses& last = result.history.back();
    ctx.out << "sft " << e.sft.steps << " steps, final total loss " << last.total << " (flow " << last.flow
            << ") -> " << ctx.path("sft_checkpoint.json").string() << "\n";
}

void cmd_train_grpo(const Context& ctx, bool cold_start) {
    const RunConfig& c = ctx.config;
    const ExperimentConfig& e = c.experiment;
    const CharacterPack pack = load_run_pack(ctx);
    const auto scorer = ctx.scorer();

    std::optional<VelocityField> model;
    nlohmann::json lm;
    if (c.sft_checkpoint) {
        const Checkpoint start = read_checkpoint(*c.sft_checkpoint);
        check_identity(start, pack, "sft_checkpoint");
        model.emplace(start.shape, start.params);
        lm = start.lm;
    } else if (cold_start) {
        model.emplace(e.shape, derive_seed(c.init_seed, 0x1));
    }

    const CharacterReward reward(pack, *scorer, e.weights, e.thresholds, e.reward_options);
    GrpoRunOptions options;
    options.log_file = ctx.path("grpo_log.jsonl");
    options.rewards_file = ctx.path("grpo_rewards.jsonl");
    options.config_hash = ctx.hash;
    const auto stats = grpo_run(*model, grpo_prompts(pack, *scorer), reward, e.grpo, e.sampler, options);

    Checkpoint out{model->shape(), model->params(), e.sampler, lm,
                   {{"stage", "grpo"},
                    {"iterations", e.grpo.iterations},
                    {"char_id", pack.spec.char_id},
                    {"cold_start", !c.sft_checkpoint.has_value()},
                    {"config_hash", ctx.hash}}};
    write_checkpoint(out, ctx.path("grpo_checkpoint.json"));
    ctx.out << "grpo " << e.grpo.iterations << " iterations";
    if (!stats.empty()) {
        ctx.out << ", final mean reward " << stats.back().mean_total_reward;
    }
    ctx.out << " -> " << ctx.path("grpo_checkpoint.json").string() << "\n";
}

std::string sample_name(size_t index, const PromptSpec& p) {
    std::ostringstream s;
    s << std::setw(4) << std::setfill('0') << index << '_' << to_string(p.pose) << '_' << to_string(p.tone);
    return s.str();
}

void cmd_sample(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const CharacterPack pack = load_run_pack(ctx);
    const Checkpoint ckpt = read_checkpoint(*c.checkpoint);
    check_identity(ckpt, pack, "checkpoint");
    const VelocityField model(ckpt.shape, ckpt.params);
    const auto scorer = ctx.scorer();

    const fs::path dir = ctx.path("samples");
    fs::create_directories(dir);
    nlohmann::json index = nlohmann::json::array();
    size_t i = 0;
    for (const PromptSpec& p : all_prompts(pack.spec.char_id)) {
        const CondToken cond = CondToken::from(encode_prompt(p, pack, *scorer));
        for (int r = 0; r < c.samples_per_prompt; ++r, ++i) {
            const SamplerConfig s = eval_sampler(c.experiment.sampler, i);
            const ToyImage img = sample_ode(model, cond, s);
            const std::string name = sample_name(i, p);
            write_raw_f32(img, dir / (name + ".f32"));
            write_ppm(img, dir / (name + ".ppm"));
            index.push_back({{"file", name + ".f32"},
                             {"pose", to_string(p.pose)},
                             {"tone", to_string(p.tone)},
                             {"seed", s.seed}});
        }
    }
    write_json_file({{"char_id", pack.spec.char_id}, {"config_hash", ctx.hash}, {"samples", index}},
                    dir / "index.json", 2);
    ctx.out << "sample " << i << " images -> " << dir.string() << "\n";
}

void print_report(std::ostream& out, const std::string& label, const MetricsReport& r) {
    out << label << ": clip_i " << r.clip_i_analogue << " clip_t " << r.clip_t_analogue << " dino "
        << r.dino_analogue << " trainset_sim_sem " << r.trainset_sim_sem << " trainset_sim_struct "
        << r.trainset_sim_struct << " samples " << r.sample_count;
    if (r.kqa_accuracy) {
        out << " kqa " << *r.kqa_accuracy;
    }
    if (r.vqa_accuracy) {
        out << " vqa " << *r.vqa_accuracy;
    }
    if (r.mapping_failures > 0) {
        out << " mapping_failures " << r.mapping_failures;
    }
    out << "\n";
}

void cmd_eval(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const ExperimentConfig& e = c.experiment;
    const CharacterPack pack = load_run_pack(ctx);
    const Checkpoint ckpt = read_checkpoint(*c.checkpoint);
    check_identity(ckpt, pack, "checkpoint");
    const VelocityField model(ckpt.shape, ckpt.params);
    const auto scorer = ctx.scorer();

    const auto prompts = eval_prompts(pack, e.eval_repeats);
    MetricsReport report = eval_t2i(model, pack, prompts, e.sampler, *scorer).report;
    report.config_hash = ctx.hash;
    if (!ckpt.lm.is_null()) {
        const TinyLM lm = TinyLM::from_json(ckpt.lm, "checkpoint.lm");
        attach_text_metrics(report, lm, lm.vocab(), pack);

        std::vector<std::string> queries;
        for (const auto& m : pack.mm_samples) {
            queries.push_back(m.user_input);
        }
        MultimodalEval mm = eval_multimodal(model, lm, lm.vocab(), pack, queries, e.sampler, *scorer);
        mm.report.config_hash = ctx.hash;
        write_report(mm.report, ctx.path("multimodal_report.json"));
        std::ofstream records(ctx.path("multimodal_records.jsonl"), std::ios::trunc);
        for (const auto& r : mm.records) {
            nlohmann::json j{{"query", r.query},
                             {"response", r.response},
                             {"thinking", r.thinking},
                             {"instruction", r.instruction},
                             {"mapped", r.prompt.has_value()}};
            if (r.prompt) {
                j["pose"] = to_string(r.prompt->pose);
                j["tone"] = to_string(r.prompt->tone);
            }
            records << j.dump() << "\n";
        }
        if (!records) {
            throw IoError("write failed for '" + ctx.path("multimodal_records.jsonl").string() + "'");
        }
        print_report(ctx.out, "multimodal", mm.report);
    }
    write_report(report, ctx.path("report.json"));
    print_report(ctx.out, "t2i", report);
}

void cmd_ablate(const Context& ctx) {
    const RunConfig& c = ctx.config;
    const CharacterPack pack = load_run_pack(ctx);
    const auto scorer = ctx.scorer();
    const auto rows = run_ablation(c.ablation_suite, pack, c.experiment, c.ablation_seeds, *scorer);
    const std::string csv = "ablation_" + std::string(to_string(c.ablation_suite)) + ".csv";
    write_ablation_csv(rows, ctx.path(csv));
    const fs::path reports = ctx.path("reports");
    fs::create_directories(reports);
    for (const auto& row : rows) {
        write_report(row.report, reports / (row.setting + "_seed" + std::to_string(row.seed) + ".json"));
        print_report(ctx.out, row.setting + " seed " + std::to_string(row.seed), row.report);
    }
    ctx.out << "ablation table -> " << ctx.path(csv).string() << "\n";
}

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("-c,--config", f.config, "JSON config file");
    sub->add_option("-o,--output", f.output, "output directory");
    sub->add_option("--seed", f.seed, "global seed (component seeds follow unless set in the config)")
        ->each([&f](const std::string&) { f.seed_given = true; });
    sub->add_option("--preset", f.preset, "reference | toy");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Flags f;
    CLI::App app{"Two-stage character personalization: Unified-SFT then Character-GRPO.", "charforge"};
    app.require_subcommand(1, 1);

    auto* make_data = app.add_subcommand("make-data", "synthesize a character pack");
    add_common(make_data, f);

    auto* train_sft = app.add_subcommand("train-sft", "Unified-SFT from a fresh initialization");
    add_common(train_sft, f);
    train_sft->add_option("--pack", f.pack, "character pack directory");

    auto* train_grpo = app.add_subcommand("train-grpo", "Character-GRPO from an SFT checkpoint");
    add_common(train_grpo, f);
    train_grpo->add_option("--pack", f.pack, "character pack directory");
    train_grpo->add_option("--sft-checkpoint", f.sft_checkpoint, "checkpoint written by train-sft");
    train_grpo->add_flag("--allow-cold-start", f.allow_cold_start, "start from a random initialization");

    auto* sample = app.add_subcommand("sample", "ODE samples for every prompt");
    add_common(sample, f);
    sample->add_option("--pack", f.pack, "character pack directory");
    sample->add_option("--checkpoint", f.checkpoint, "model checkpoint");
    sample->add_option("--per-prompt", f.per_prompt, "samples per prompt")->check(CLI::PositiveNumber);

    auto* eval = app.add_subcommand("eval", "metrics report for a checkpoint");
    add_common(eval, f);
    eval->add_option("--pack", f.pack, "character pack directory");
    eval->add_option("--checkpoint", f.checkpoint, "model checkpoint");

    auto* ablate = app.add_subcommand("ablate", "stage or reward ablation over seeds");
    add_common(ablate, f);
    ablate->add_option("--pack", f.pack, "character pack directory");
    ablate->add_option("--suite", f.suite, "stage | reward");
    ablate->add_option("--seeds", f.seeds, "seeds to run");

    std::vector<std::string> argv_store{"charforge"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& a : argv_store) {
        argv.push_back(a.c_str());
    }
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        out << target->help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (!args.empty() && !args.front().starts_with("-") && app.get_subcommands().empty()) {
            err << "charforge: unknown subcommand '" << args.front() << "'\n\n" << app.help();
            return kExitUsage;
        }
        err << "charforge: " << e.what() << "\n\n" << app.help();
        return kExitUsage;
    }

    std::optional<Context> ctx;
    try {
        RunConfig config = config_from_json(load_document(f));
        const bool needs_pack = !make_data->parsed();
        if (needs_pack) {
            require_path(config.pack, "pack");
        }
        if (train_grpo->parsed()) {
            if (!config.sft_checkpoint && !f.allow_cold_start) {
                throw SchemaError("sft_checkpoint",
                                  "missing field: train-grpo starts from an SFT checkpoint "
                                  "(use --allow-cold-start to train from scratch)");
            }
            check_optional_path(config.sft_checkpoint, "sft_checkpoint");
        }
        if (sample->parsed() || eval->parsed()) {
            require_path(config.checkpoint, "checkpoint");
        }
        nlohmann::json resolved = to_json(config);
        const std::string hash = config_hash(hashed_view(config));
        ctx.emplace(Context{std::move(config), std::move(resolved), hash, out});
    } catch (const Error& e) {
        err << "charforge: config error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        DirLock lock(ctx->config.output_dir);
        write_json_file(ctx->resolved, ctx->path("config.resolved.json"), 2);
        if (make_data->parsed()) {
            cmd_make_data(*ctx);
        } else if (train_sft->parsed()) {
            cmd_train_sft(*ctx);
        } else if (train_grpo->parsed()) {
            cmd_train_grpo(*ctx, f.allow_cold_start);
        } else if (sample->parsed()) {
            cmd_sample(*ctx);
        } else if (eval->parsed()) {
            cmd_eval(*ctx);
        } else {
            cmd_ablate(*ctx);
        }
    } catch (const std::exception& e) {
        err << "charforge: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace charforge
