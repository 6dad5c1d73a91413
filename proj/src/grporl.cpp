#include "charforge/errors.hpp"
#include "charforge/grporl.hpp"
#include "charforge/json_util.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace charforge {

namespace {

constexpr uint64_t kRewardStream = 0x5c0e;
constexpr uint64_t kSampleStream = 0x5a3b;

std::ofstream open_log(const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    return out;
}

}  // namespace

void GRPOConfig::validate() const {
    if (group_size < 2) {
        throw InvalidArgument("grpo.group_size must be >= 2");
    }
    if (!(learning_rate > 0.0)) {
        throw InvalidArgument("grpo.learning_rate must be positive");
    }
    if (prompt_batch < 1) {
        throw InvalidArgument("grpo.prompt_batch must be >= 1");
    }
    if (!(eps_lt > 0.0) || !(eps_gt > 0.0)) {
        throw InvalidArgument("grpo.eps_lt and grpo.eps_gt must be positive");
    }
    if (beta_kl != 0.0) {
        throw InvalidArgument("grpo.beta_kl must be 0: the KL-regularized variant is not implemented");
    }
    if (iterations < 0) {
        throw InvalidArgument("grpo.iterations must be >= 0");
    }
    if (inner_epochs < 1) {
        throw InvalidArgument("grpo.inner_epochs must be >= 1");
    }
    if (!(max_grad_norm >= 0.0)) {
        throw InvalidArgument("grpo.max_grad_norm must be >= 0");
    }
}

Advantages compute_advantages(std::span<const double> rewards) {
    const size_t g = rewards.size();
    if (g < 2) {
        throw InvalidArgument("advantages need a group of at least 2");
    }
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(g);
    double var = 0.0;
    for (double r : rewards) {
        var += (r - mean) * (r - mean);
    }
    const double std = std::sqrt(var / static_cast<double>(g));
    Advantages a;
    a.values.assign(g, 0.0);
    if (!(std >= 1e-8)) {
        a.degenerate = true;
        return a;
    }
    for (size_t i = 0; i < g; ++i) {
        a.values[i] = (rewards[i] - mean) / std;
    }
    return a;
}

double clipped_term(double ratio, double advantage, double eps_lt, double eps_gt) {
    const double clipped = std::clamp(ratio, 1.0 - eps_lt, 1.0 + eps_gt);
    return std::min(ratio * advantage, clipped * advantage);
}

SurrogateResult surrogate_loss(const VelocityField& model, const GroupRollout& group, const GRPOConfig& config,
                               double guidance_scale, Eigen::VectorXd* grad, double scale) {
    const auto g = static_cast<Eigen::Index>(group.trajectories.size());
    if (g == 0 || group.advantages.values.size() != static_cast<size_t>(g)) {
        throw InvalidArgument("group has no trajectories or mismatched advantages");
    }
    const std::vector<int> window = group.trajectories.front().window_indices();
    const auto t_count = static_cast<double>(window.size());
    const NetShape s = model.shape();
    const double norm = 1.0 / (static_cast<double>(g) * t_count);

    SurrogateResult out;
    out.ratios.assign(static_cast<size_t>(g), {});
    for (int k : window) {
        const auto& first = group.trajectories.front().steps[static_cast<size_t>(k)];
        Eigen::MatrixXd x(s.data_dim, g);
        Eigen::MatrixXd x_next(s.data_dim, g);
        for (Eigen::Index i = 0; i < g; ++i) {
            const auto& rec = group.trajectories[static_cast<size_t>(i)].steps[static_cast<size_t>(k)];
            if (!rec.in_window || rec.t != first.t) {
                throw InvalidArgument("trajectories in a group must share the stochastic window");
            }
            x.col(i) = rec.x;
            x_next.col(i) = rec.x_next;
        }
        const GuidanceBatch gb = make_guidance_batch(s, x, first.t, group.cond, guidance_scale);
        VelocityField::Tape tape;
        const Eigen::MatrixXd v = combine_guidance(gb, model.forward(gb.batch, tape), guidance_scale);
        const Eigen::MatrixXd mean = x - v * first.dt;
        const double var = first.std * first.std;

        Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(s.data_dim, g);
        for (Eigen::Index i = 0; i < g; ++i) {
            const auto& rec = group.trajectories[static_cast<size_t>(i)].steps[static_cast<size_t>(k)];
            const double logp = gaussian_logp(x_next.col(i), mean.col(i), first.std);
            const double ratio = std::exp(logp - rec.logp);
            if (!std::isfinite(ratio)) {
                throw NumericalDivergence("non-finite importance ratio at window step " + std::to_string(k) +
                                          ", sample " + std::to_string(i));
            }
            out.ratios[static_cast<size_t>(i)].push_back(ratio);
            const double adv = group.advantages.values[static_cast<size_t>(i)];
            const double term = clipped_term(ratio, adv, config.eps_lt, config.eps_gt);
            out.loss -= norm * term;
            // the unclipped branch carries the gradient; a binding clip has none
            const bool unclipped = ratio * adv <= std::clamp(ratio, 1.0 - config.eps_lt, 1.0 + config.eps_gt) * adv;
            if (grad != nullptr && unclipped && adv != 0.0) {
                const double dloss_dlogp = -norm * ratio * adv;
                upstream.col(i) = (-first.dt * dloss_dlogp / var) * (x_next.col(i) - mean.col(i));
            }
        }
        if (grad != nullptr) {
            model.backward(tape, scale * guidance_upstream(gb, upstream, guidance_scale), *grad);
        }
    }
    out.loss *= scale;
    return out;
}

std::vector<GrpoPrompt> grpo_prompts(const CharacterPack& pack, const Scorer& scorer) {
    std::vector<GrpoPrompt> out;
    for (const auto& p : all_prompts(pack.spec.char_id)) {
        out.push_back({p, CondToken::from(encode_prompt(p, pack, scorer))});
    }
    return out;
}

nlohmann::json to_json(const IterationStats& s) {
    return {{"iteration", s.iteration},
            {"mean_total_reward", s.mean_total_reward},
            {"mean_r_align", s.mean_r_align},
            {"mean_r_consist", s.mean_r_consist},
            {"mean_r_div", s.mean_r_div},
            {"mean_p_sim", s.mean_p_sim},
            {"mean_s_max", s.mean_s_max},
            {"grad_norm", s.grad_norm},
            {"loss", s.loss},
            {"degenerate_groups", s.degenerate_groups}};
}

AdamW make_grpo_optimizer(const VelocityField& model, const GRPOConfig& config) {
    AdamWConfig opt;
    opt.learning_rate = config.learning_rate;
    opt.max_grad_norm = config.max_grad_norm;
    return AdamW(model.param_count(), opt);
}

IterationStats grpo_iteration(VelocityField& model, AdamW& optimizer, const std::vector<GrpoPrompt>& prompts,
                              const GroupRewarder& reward, const GRPOConfig& config, const SamplerConfig& sampler,
                              int iteration, const VelocityModel* reference, std::vector<GroupRollout>* groups_out) {
    config.validate();
    sampler.validate();
    if (prompts.empty()) {
        throw InvalidArgument("GRPO needs at least one prompt");
    }
    (void)reference;  // only a KL term would evaluate it, and beta_kl is 0

    const uint64_t iter_seed = derive_seed(config.seed, static_cast<uint64_t>(iteration));
    Rng rng(iter_seed);
    const VelocityField snapshot(model.shape(), model.params());

    IterationStats stats;
    stats.iteration = iteration;
    std::vector<GroupRollout> groups;
    groups.reserve(static_cast<size_t>(config.prompt_batch));
    double n_samples = 0.0;
    for (int p = 0; p < config.prompt_batch; ++p) {
        const GrpoPrompt& prompt = prompts[rng.below(prompts.size())];
        GroupRollout group;
        group.prompt = prompt.prompt;
        group.cond = prompt.cond;
        group.window_start = rng.range(0, sampler.max_window_start(sampler.train_steps));
        std::vector<uint64_t> seeds;
        for (int i = 0; i < config.group_size; ++i) {
            seeds.push_back(derive_seed(iter_seed, kSampleStream + static_cast<uint64_t>(p),
                                        static_cast<uint64_t>(i)));
        }
        group.trajectories = rollout_group(snapshot, group.cond, sampler, seeds, group.window_start);
        for (const auto& tr : group.trajectories) {
            const auto& fs = tr.final_state;
            group.images.push_back(ToyImage::clamped(std::span<const double>(fs.data(), static_cast<size_t>(fs.size()))));
        }
        Rng reward_rng(derive_seed(iter_seed, kRewardStream, static_cast<uint64_t>(p)));
        group.rewards = reward.score(group.images, group.prompt, reward_rng);
        group.advantages = compute_advantages(group.rewards.totals());
        stats.degenerate_groups += group.advantages.degenerate ? 1 : 0;
        for (const auto& s : group.rewards.samples) {
            stats.mean_total_reward += s.total;
            stats.mean_r_align += s.r_align;
            stats.mean_r_consist += s.r_consist;
            stats.mean_r_div += group.rewards.r_div;
            stats.mean_p_sim += s.p_sim;
            stats.mean_s_max += s.s_max;
            n_samples += 1.0;
        }
        groups.push_back(std::move(group));
    }
    for (double* f : {&stats.mean_total_reward, &stats.mean_r_align, &stats.mean_r_consist, &stats.mean_r_div,
                      &stats.mean_p_sim, &stats.mean_s_max}) {
        *f /= n_samples;
    }

    const double per_group = 1.0 / static_cast<double>(groups.size());
    for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.param_count());
        double loss = 0.0;
        for (const auto& group : groups) {
            loss += surrogate_loss(model, group, config, sampler.guidance_scale, &grad, per_group).loss;
        }
        stats.loss = loss;
        stats.grad_norm = optimizer.step(model.params(), std::move(grad));
        if (!model.params().allFinite()) {
            throw NumericalDivergence("non-finite parameters after GRPO update at iteration " +
                                      std::to_string(iteration));
        }
    }
    if (groups_out != nullptr) {
        *groups_out = std::move(groups);
    }
    return stats;
}

std::vector<IterationStats> grpo_run(VelocityField& model, const std::vector<GrpoPrompt>& prompts,
                                     const GroupRewarder& reward, const GRPOConfig& config,
                                     const SamplerConfig& sampler, const GrpoRunOptions& options) {
    config.validate();
    AdamW optimizer = make_grpo_optimizer(model, config);
    std::optional<std::ofstream> log;
    std::optional<std::ofstream> reward_log;
    if (options.log_file) {
        log = open_log(*options.log_file);
    }
    if (options.rewards_file) {
        reward_log = open_log(*options.rewards_file);
    }
    std::vector<IterationStats> history;
    history.reserve(static_cast<size_t>(config.iterations));
    for (int it = 0; it < config.iterations; ++it) {
        std::vector<GroupRollout> groups;
        const IterationStats stats =
            grpo_iteration(model, optimizer, prompts, reward, config, sampler, it, nullptr, &groups);
        if (log) {
            nlohmann::json j = to_json(stats);
            j["config_hash"] = options.config_hash;
            *log << j.dump() << '\n';
        }
        if (reward_log) {
            for (size_t p = 0; p < groups.size(); ++p) {
                const auto& g = groups[p];
                for (size_t i = 0; i < g.rewards.samples.size(); ++i) {
                    nlohmann::json j = to_json(g.rewards.samples[i], g.rewards.r_div);
                    j["iteration"] = it;
                    j["group"] = p;
                    j["sample"] = i;
                    j["pose"] = to_string(g.prompt.pose);
                    j["tone"] = to_string(g.prompt.tone);
                    j["window_start"] = g.window_start;
                    j["advantage"] = g.advantages.values[i];
                    *reward_log << j.dump() << '\n';
                }
            }
        }
        history.push_back(stats);
    }
    return history;
}

nlohmann::json to_json(const GRPOConfig& c) {
    return {{"group_size", c.group_size}, {"learning_rate", c.learning_rate}, {"prompt_batch", c.prompt_batch},
            {"eps_lt", c.eps_lt},         {"eps_gt", c.eps_gt},               {"beta_kl", c.beta_kl},
            {"iterations", c.iterations}, {"inner_epochs", c.inner_epochs},   {"max_grad_norm", c.max_grad_norm},
            {"seed", c.seed}};
}

GRPOConfig grpo_from_json(const nlohmann::json& j, const std::string& path) {
    GRPOConfig c;
    if (j.is_null()) {
        return c;
    }
    if (!j.is_object()) {
        throw SchemaError(path, "expected an object");
    }
    JsonReader r(j, path);
    c.group_size = static_cast<int>(r.integer_or("group_size", c.group_size));
    c.learning_rate = r.number_or("learning_rate", c.learning_rate);
    c.prompt_batch = static_cast<int>(r.integer_or("prompt_batch", c.prompt_batch));
    c.eps_lt = r.number_or("eps_lt", c.eps_lt);
    c.eps_gt = r.number_or("eps_gt", c.eps_gt);
    c.beta_kl = r.number_or("beta_kl", c.beta_kl);
    c.iterations = static_cast<int>(r.integer_or("iterations", c.iterations));
    c.inner_epochs = static_cast<int>(r.integer_or("inner_epochs", c.inner_epochs));
    c.max_grad_norm = r.number_or("max_grad_norm", c.max_grad_norm);
    c.seed = r.unsigned_or("seed", c.seed);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw SchemaError(path, e.what());
    }
    return c;
}

}  // namespace charforge
