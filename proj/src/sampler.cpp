#include "charforge/errors.hpp"
#include "charforge/flowgen.hpp"

#include <cmath>
#include <numbers>

namespace charforge {

namespace {

constexpr uint64_t kInitStream = 0x1417;
constexpr uint64_t kWindowStream = 0x5de0;

Eigen::VectorXd standard_normal(Rng& rng, int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) {
        v[i] = rng.normal();
    }
    return v;
}

void check_finite(const Eigen::MatrixXd& x, int step) {
    if (!x.allFinite()) {
        throw NumericalDivergence("non-finite sampler state at step " + std::to_string(step));
    }
}

}  // namespace

Eigen::VectorXd initial_noise(uint64_t seed, int data_dim) {
    Rng rng(derive_seed(seed, kInitStream));
    return standard_normal(rng, data_dim);
}

FlowDraw draw_flow_noise(int data_dim, Rng& rng, double p_drop) {
    FlowDraw d;
    d.t = rng.uniform();
    d.eps = standard_normal(rng, data_dim);
    d.dropped = rng.bernoulli(p_drop);
    return d;
}

namespace {

VelocityBatch flow_batch(const NetShape& s, const std::vector<FlowExample>& examples,
                         const std::vector<FlowDraw>& draws, Eigen::MatrixXd& target) {
    const auto n = static_cast<Eigen::Index>(examples.size());
    VelocityBatch batch;
    batch.x.resize(s.data_dim, n);
    batch.t.resize(n);
    batch.cond.resize(s.cond_dim, n);
    batch.uncond.assign(examples.size(), 0);
    target.resize(s.data_dim, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& ex = examples[static_cast<size_t>(j)];
        const auto& d = draws[static_cast<size_t>(j)];
        if (ex.x0.size() != s.data_dim) {
            throw InvalidArgument("flow example has the wrong dimension");
        }
        batch.x.col(j) = (1.0 - d.t) * ex.x0 + d.t * d.eps;
        batch.t[j] = d.t;
        const bool uncond = d.dropped || ex.cond.uncond;
        batch.uncond[static_cast<size_t>(j)] = uncond ? 1 : 0;
        if (uncond) {
            batch.cond.col(j).setZero();
        } else {
            batch.cond.col(j) = ex.cond.embedding;
        }
        target.col(j) = d.eps - ex.x0;
    }
    return batch;
}

}  // namespace

double flow_sft_loss(const VelocityModel& model, const Eigen::VectorXd& x0, const CondToken& cond, Rng& rng,
                     double p_drop) {
    const NetShape s = model.shape();
    std::vector<FlowExample> ex{{x0, cond}};
    std::vector<FlowDraw> draws{draw_flow_noise(s.data_dim, rng, p_drop)};
    Eigen::MatrixXd target;
    const VelocityBatch batch = flow_batch(s, ex, draws, target);
    const Eigen::MatrixXd v = model.velocity(batch);
    return (v - target).squaredNorm() / static_cast<double>(s.data_dim);
}

double flow_sft_loss(const VelocityModel& model, const ToyImage& x0, const CondToken& cond, Rng& rng,
                     double p_drop) {
    const auto values = x0.to_vector();
    return flow_sft_loss(model, Eigen::Map<const Eigen::VectorXd>(values.data(), ToyImage::kSize), cond, rng, p_drop);
}

double flow_loss_and_grad(const VelocityField& model, const std::vector<FlowExample>& examples, Rng& rng,
                          double p_drop, Eigen::VectorXd* grad) {
    if (examples.empty()) {
        return 0.0;
    }
    const NetShape s = model.shape();
    std::vector<FlowDraw> draws;
    draws.reserve(examples.size());
    for (size_t i = 0; i < examples.size(); ++i) {
        draws.push_back(draw_flow_noise(s.data_dim, rng, p_drop));
    }
    Eigen::MatrixXd target;
    const VelocityBatch batch = flow_batch(s, examples, draws, target);
    VelocityField::Tape tape;
    const Eigen::MatrixXd residual = model.forward(batch, tape) - target;
    const double scale = 1.0 / (static_cast<double>(s.data_dim) * static_cast<double>(examples.size()));
    if (grad != nullptr) {
        model.backward(tape, (2.0 * scale) * residual, *grad);
    }
    return residual.squaredNorm() * scale;
}

Eigen::VectorXd sample_ode_state(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config,
                                 int steps) {
    if (steps < 2) {
        throw InvalidArgument("sampler needs at least 2 steps");
    }
    const NetShape s = model.shape();
    Eigen::MatrixXd x = initial_noise(config.seed, s.data_dim);
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - k * dt;
        x -= guided_velocity(model, x, t, cond, config.guidance_scale) * dt;
        check_finite(x, k);
    }
    return x.col(0);
}

ToyImage sample_ode(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config) {
    const Eigen::VectorXd x = sample_ode_state(model, cond, config, config.eval_steps);
    return ToyImage::clamped(std::span<const double>(x.data(), static_cast<size_t>(x.size())));
}

double sde_std(double noise_level, double t, double dt) { return noise_level * std::sqrt(dt) * std::sqrt(t); }

double gaussian_logp(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, double std) {
    const double var = std * std;
    const auto n = static_cast<double>(x.size());
    return -(x - mean).squaredNorm() / (2.0 * var) - 0.5 * n * std::log(2.0 * std::numbers::pi * var);
}

SdeStep sde_step(const VelocityModel& model, const Eigen::VectorXd& x, double t, double dt, const CondToken& cond,
                 const SamplerConfig& config, Rng& rng, const Eigen::VectorXd* noise) {
    if (!(config.noise_level > 0.0)) {
        throw InvalidArgument("stochastic step needs noise_level > 0; use the deterministic step instead");
    }
    if (!(t > 0.0 && t <= 1.0)) {
        throw InvalidArgument("stochastic step needs t in (0, 1]");
    }
    SdeStep out;
    out.mean = x - guided_velocity(model, x, t, cond, config.guidance_scale).col(0) * dt;
    out.std = sde_std(config.noise_level, t, dt);
    const Eigen::VectorXd xi = noise != nullptr ? *noise : standard_normal(rng, static_cast<int>(x.size()));
    out.x_next = out.mean + out.std * xi;
    out.logp = gaussian_logp(out.x_next, out.mean, out.std);
    return out;
}

std::vector<int> FlowTrajectory::window_indices() const {
    std::vector<int> out;
    for (size_t k = 0; k < steps.size(); ++k) {
        if (steps[k].in_window) {
            out.push_back(static_cast<int>(k));
        }
    }
    return out;
}

std::vector<FlowTrajectory> rollout_group(const VelocityModel& model, const CondToken& cond,
                                          const SamplerConfig& config, const std::vector<uint64_t>& seeds,
                                          int window_start) {
    config.validate();
    const int steps = config.train_steps;
    if (window_start < 0 || window_start > config.max_window_start(steps)) {
        throw InvalidArgument("window [" + std::to_string(window_start) + ", " +
                              std::to_string(window_start + config.window_size) + ") must lie inside [0, " +
                              std::to_string(steps / 2) + "]");
    }
    if (!(config.noise_level > 0.0)) {
        throw InvalidArgument("rollout needs noise_level > 0");
    }
    const NetShape s = model.shape();
    const auto g = static_cast<Eigen::Index>(seeds.size());
    Eigen::MatrixXd x(s.data_dim, g);
    std::vector<Rng> streams;
    streams.reserve(seeds.size());
    for (Eigen::Index i = 0; i < g; ++i) {
        x.col(i) = initial_noise(seeds[static_cast<size_t>(i)], s.data_dim);
        streams.emplace_back(derive_seed(seeds[static_cast<size_t>(i)], kWindowStream));
    }

    std::vector<FlowTrajectory> trajs(seeds.size());
    for (auto& tr : trajs) {
        tr.window_start = window_start;
        tr.window_size = config.window_size;
        tr.steps.reserve(static_cast<size_t>(steps));
    }
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        const double t = 1.0 - k * dt;
        const bool in_window = k >= window_start && k < window_start + config.window_size;
        const Eigen::MatrixXd mean = x - guided_velocity(model, x, t, cond, config.guidance_scale) * dt;
        Eigen::MatrixXd next = mean;
        const double std = in_window ? sde_std(config.noise_level, t, dt) : 0.0;
        for (Eigen::Index i = 0; i < g; ++i) {
            StepRecord rec;
            rec.t = t;
            rec.dt = dt;
            rec.in_window = in_window;
            rec.x = x.col(i);
            rec.mean = mean.col(i);
            if (in_window) {
                next.col(i) += std * standard_normal(streams[static_cast<size_t>(i)], s.data_dim);
                rec.std = std;
                rec.logp = gaussian_logp(next.col(i), rec.mean, std);
            }
            rec.x_next = next.col(i);
            trajs[static_cast<size_t>(i)].steps.push_back(std::move(rec));
        }
        check_finite(next, k);
        x = std::move(next);
    }
    for (Eigen::Index i = 0; i < g; ++i) {
        trajs[static_cast<size_t>(i)].final_state = x.col(i);
    }
    return trajs;
}

Rollout rollout(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config, uint64_t seed,
                int window_start) {
    auto trajs = rollout_group(model, cond, config, {seed}, window_start);
    Rollout r;
    r.trajectory = std::move(trajs.front());
    const auto& fs = r.trajectory.final_state;
    r.image = ToyImage::clamped(std::span<const double>(fs.data(), static_cast<size_t>(fs.size())));
    return r;
}

}  // namespace charforge
