#include "charforge/config.hpp"
#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"


namespace charforge {

namespace {

const nlohmann::json& section(const nlohmann::json& j, const std::string& key) {
    static const nlohmann::json kNull;
    return j.contains(key) ? j[key] : kNull;
}

bool section_has(const nlohmann::json& j, const std::string& key, const std::string& field) {
    return j.contains(key) && j[key].is_object() && j[key].contains(field);
}

std::optional<std::filesystem::path> optional_path(const JsonReader& r, const std::string& key) {
    if (!r.has(key) || r.raw(key).is_null()) {
        return std::nullopt;
    }
    const std::string s = r.str(key);
    if (s.empty()) {
        throw SchemaError(key, "path must not be empty");
    }
    return std::filesystem::path(s);
}

template <class F>
auto wrap(const std::string& path, F f) {
    try {
        return f();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
}

nlohmann::json path_json(const std::optional<std::filesystem::path>& p) {
    return p ? nlohmann::json(p->string()) : nlohmann::json();
}

// Every key of `doc` must exist in `shape` (the resolved default document).
void check_known(const nlohmann::json& doc, const nlohmann::json& shape, const std::string& prefix) {
    if (!doc.is_object() || !shape.is_object()) {
        return;
    }
    for (const auto& [key, value] : doc.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!shape.contains(key)) {
            throw SchemaError(path, "unknown field");
        }
        check_known(value, shape[key], path);
    }
}

}  // namespace

std::string_view to_string(Preset p) { return p == Preset::reference ? "reference" : "toy"; }

RunConfig config_from_json(const nlohmann::json& j) {
    JsonReader r(j);
    static const nlohmann::json kShape = to_json(RunConfig{});
    check_known(j, kShape, "");
    RunConfig c;
    if (r.has("preset")) {
        c.preset = r.enumerated("preset", [](const std::string& s) {
        if (s == "reference") {
            return Preset::reference;
        }
        if (s == "toy") {
            return Preset::toy;
        }
        throw InvalidArgument("expected 'reference' or 'toy'");
        });
    }
    c.seed = r.unsigned_or("seed", 0);
    c.output_dir = r.str_or("output_dir", c.output_dir.string());
    c.pack = optional_path(r, "pack");
    c.sft_checkpoint = optional_path(r, "sft_checkpoint");
    c.checkpoint = optional_path(r, "checkpoint");

    ExperimentConfig& e = c.experiment;
    c.init_seed = c.seed;
    if (auto m = r.object_if("model")) {
        e.shape.time_dim = static_cast<int>(m->integer_or("time_dim", e.shape.time_dim));
        e.shape.hidden1 = static_cast<int>(m->integer_or("hidden1", e.shape.hidden1));
        e.shape.hidden2 = static_cast<int>(m->integer_or("hidden2", e.shape.hidden2));
        e.lm.embed_dim = static_cast<int>(m->integer_or("lm_embed_dim", e.lm.embed_dim));
        e.lm.context = static_cast<int>(m->integer_or("lm_context", e.lm.context));
        c.init_seed = m->unsigned_or("init_seed", c.seed);
        if (e.shape.time_dim < 2 || e.shape.hidden1 < 1 || e.shape.hidden2 < 1 || e.lm.embed_dim < 1 ||
            e.lm.context < 1) {
            throw SchemaError("model", "dimensions must be positive (time_dim >= 2)");
        }
    }

    e.sft = sft_from_json(section(j, "sft"), "sft");
    if (!section_has(j, "sft", "learning_rate") && c.preset == Preset::toy) {
        e.sft.learning_rate = kToySftLearningRate;
    }
    if (!section_has(j, "sft", "seed")) {
        e.sft.seed = c.seed;
    }
    e.mixer = mixer_from_json(section(j, "mixer"), "mixer");
    if (!section_has(j, "mixer", "seed")) {
        e.mixer.seed = c.seed;
    }
    e.grpo = grpo_from_json(section(j, "grpo"), "grpo");
    if (!section_has(j, "grpo", "learning_rate") && c.preset == Preset::toy) {
        e.grpo.learning_rate = GRPOConfig::kToyLearningRate;
    }
    if (!section_has(j, "grpo", "seed")) {
        e.grpo.seed = c.seed;
    }
    e.sampler = sampler_from_json(section(j, "sampler"), "sampler");
    if (!section_has(j, "sampler", "seed")) {
        e.sampler.seed = c.seed;
    }

    if (auto rw = r.object_if("rewards")) {
        e.weights = weights_from_json(rw->has("weights") ? rw->raw("weights") : nlohmann::json(), "rewards.weights");
        e.thresholds = thresholds_from_json(rw->has("thresholds") ? rw->raw("thresholds") : nlohmann::json(),
                                            "rewards.thresholds");
        e.reward_options.average_vqa = rw->boolean_or("average_vqa", false);
    }

    if (auto enc = r.object_if("encoders")) {
        c.encoders.semantic_seed = enc->unsigned_or("semantic_seed", c.encoders.semantic_seed);
        c.encoders.structure_seed = enc->unsigned_or("structure_seed", c.encoders.structure_seed);
        c.encoders.scorer_command = enc->str_or("scorer_command", "");
    }

    c.data.character_seed = c.seed;
    if (auto d = r.object_if("data")) {
        c.data.character_seed = d->unsigned_or("character_seed", c.seed);
        c.data.sizes.core_images = static_cast<int>(d->integer_or("core_images", c.data.sizes.core_images));
        c.data.sizes.dialogues = static_cast<int>(d->integer_or("dialogues", c.data.sizes.dialogues));
        c.data.sizes.kqa = static_cast<int>(d->integer_or("kqa", c.data.sizes.kqa));
        c.data.sizes.mcq = static_cast<int>(d->integer_or("mcq", c.data.sizes.mcq));
    }

    if (auto ev = r.object_if("eval")) {
        e.eval_repeats = static_cast<int>(ev->integer_or("repeats", e.eval_repeats));
        if (e.eval_repeats < 1) {
            throw SchemaError("eval.repeats", "must be >= 1");
        }
    }
    if (auto s = r.object_if("sample")) {
        c.samples_per_prompt = static_cast<int>(s->integer_or("per_prompt", c.samples_per_prompt));
        if (c.samples_per_prompt < 1) {
            throw SchemaError("sample.per_prompt", "must be >= 1");
        }
    }
    if (auto a = r.object_if("ablate")) {
        if (a->has("suite")) {
            c.ablation_suite = a->enumerated("suite", ablation_suite_from_string);
        }
        if (a->has("seeds")) {
            c.ablation_seeds.clear();
            for (const auto& s : a->array("seeds")) {
                if (!s.value().is_number_unsigned() && !(s.value().is_number_integer() && s.value().get<int64_t>() >= 0)) {
                    throw SchemaError(s.path(), "expected a non-negative integer");
                }
                c.ablation_seeds.push_back(s.value().get<uint64_t>());
            }
            if (c.ablation_seeds.empty()) {
                throw SchemaError("ablate.seeds", "must not be empty");
            }
        }
    }
    wrap("data", [&] {
        if (c.data.sizes.core_images < kMinCoreImages || c.data.sizes.core_images > kMaxCoreImages) {
            throw InvalidArgument("core_images must be in [5, 15]");
        }
        if (c.data.sizes.dialogues < kMinDialogues || c.data.sizes.dialogues > kMaxDialogues) {
            throw InvalidArgument("dialogues must be in [150, 250]");
        }
        return 0;
    });
    return c;
}

nlohmann::json to_json(const RunConfig& c) {
    const ExperimentConfig& e = c.experiment;
    return {{"preset", to_string(c.preset)},
            {"seed", c.seed},
            {"output_dir", c.output_dir.string()},
            {"pack", path_json(c.pack)},
            {"sft_checkpoint", path_json(c.sft_checkpoint)},
            {"checkpoint", path_json(c.checkpoint)},
            {"model",
             {{"time_dim", e.shape.time_dim},
              {"hidden1", e.shape.hidden1},
              {"hidden2", e.shape.hidden2},
              {"lm_embed_dim", e.lm.embed_dim},
              {"lm_context", e.lm.context},
              {"init_seed", c.init_seed}}},
            {"sft", to_json(e.sft)},
            {"mixer", to_json(e.mixer)},
            {"grpo", to_json(e.grpo)},
            {"sampler", to_json(e.sampler)},
            {"rewards",
             {{"weights", to_json(e.weights)},
              {"thresholds", to_json(e.thresholds)},
              {"average_vqa", e.reward_options.average_vqa}}},
            {"encoders",
             {{"semantic_seed", c.encoders.semantic_seed},
              {"structure_seed", c.encoders.structure_seed},
              {"scorer_command", c.encoders.scorer_command}}},
            {"data",
             {{"character_seed", c.data.character_seed},
              {"core_images", c.data.sizes.core_images},
              {"dialogues", c.data.sizes.dialogues},
              {"kqa", c.data.sizes.kqa},
              {"mcq", c.data.sizes.mcq}}},
            {"eval", {{"repeats", e.eval_repeats}}},
            {"sample", {{"per_prompt", c.samples_per_prompt}}},
            {"ablate", {{"suite", to_string(c.ablation_suite)}, {"seeds", c.ablation_seeds}}}};
}

}  // namespace charforge
