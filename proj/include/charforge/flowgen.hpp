#pragma once

// Conditional rectified-flow generator.
//
// Time convention: data at t = 0, noise at t = 1,
//   x_t = (1 - t) x0 + t eps,   target velocity v* = eps - x0,
// and sampling integrates x <- x - v dt from t = 1 down to t = 0.

#include "charforge/encoders.hpp"
#include "charforge/rng.hpp"
#include "charforge/toyworld.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <vector>

namespace charforge {

struct NetShape {
    int data_dim = ToyImage::kSize;
    int time_dim = 8;
    int cond_dim = kEmbedDim;
    int hidden1 = 128;
    int hidden2 = 128;

    int input_dim() const { return data_dim + time_dim + cond_dim + 1; }
    bool operator==(const NetShape&) const = default;
};

/// Sinusoidal time features: sin/cos(pi 2^k t) for k < time_dim / 2.
Eigen::VectorXd time_embedding(double t, int time_dim);

/// Condition: a prompt embedding, or the unconditional sentinel.
struct CondToken {
    Eigen::VectorXd embedding;
    bool uncond = false;

    static CondToken from(const EmbedVector& e);
    static CondToken none(int cond_dim);
};

/// Column-batched velocity query. Column b is (x_b, t_b, cond_b).
struct VelocityBatch {
    Eigen::MatrixXd x;       // data_dim x B
    Eigen::VectorXd t;       // B
    Eigen::MatrixXd cond;    // cond_dim x B (zero columns for uncond)
    std::vector<char> uncond;

    int size() const { return static_cast<int>(t.size()); }
};

/// Anything that can answer velocity queries. Samplers and losses only
/// need this; training additionally needs VelocityField.
class VelocityModel {
public:
    virtual ~VelocityModel() = default;
    virtual NetShape shape() const = 0;
    virtual Eigen::MatrixXd velocity(const VelocityBatch& batch) const = 0;
};

/// Two-hidden-layer SiLU perceptron with a time-gated identity skip:
///   v = W3 silu(W2 silu(W1 [x; temb(t); c; u] + b1) + b2) + b3 + (s0 + s . temb(t)) x
class VelocityField final : public VelocityModel {
public:
    VelocityField(NetShape shape, uint64_t init_seed);
    VelocityField(NetShape shape, Eigen::VectorXd params);

    NetShape shape() const override { return shape_; }
    Eigen::MatrixXd velocity(const VelocityBatch& batch) const override;

    /// Forward pass that keeps activations, then accumulates
    /// d(loss)/d(params) into `grad` given d(loss)/d(output).
    struct Tape;
    Eigen::MatrixXd forward(const VelocityBatch& batch, Tape& tape) const;
    void backward(const Tape& tape, const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad) const;

    Eigen::VectorXd& params() { return params_; }
    const Eigen::VectorXd& params() const { return params_; }
    Eigen::Index param_count() const { return params_.size(); }
    static Eigen::Index param_count(const NetShape& s);

    struct Tape {
        Eigen::MatrixXd input;  // input_dim x B
        Eigen::MatrixXd z1, h1, z2, h2;
        Eigen::MatrixXd temb;   // time_dim x B
    };

private:
    struct Layout {
        Eigen::Index w1, b1, w2, b2, w3, b3, skip, total;
    };
    static Layout layout(const NetShape& s);
    Eigen::MatrixXd assemble_input(const VelocityBatch& batch, Eigen::MatrixXd& temb) const;

    NetShape shape_;
    Layout layout_;
    Eigen::VectorXd params_;
};

/// Guidance combine v_u + s (v_c - v_u), written so s = 0 and s = 1 are exact.
Eigen::MatrixXd guide(const Eigen::MatrixXd& v_uncond, const Eigen::MatrixXd& v_cond, double scale);

/// Query layout behind guided_velocity: conditional columns first, then
/// unconditional ones; a block is left out when its guidance weight is 0.
struct GuidanceBatch {
    VelocityBatch batch;
    Eigen::Index width = 0;
    bool need_cond = true;
    bool need_uncond = true;
};
GuidanceBatch make_guidance_batch(const NetShape& s, const Eigen::MatrixXd& x, double t, const CondToken& cond,
                                  double guidance_scale);
Eigen::MatrixXd combine_guidance(const GuidanceBatch& g, const Eigen::MatrixXd& v, double guidance_scale);
/// Pulls d(loss)/d(guided velocity) back onto the batch columns.
Eigen::MatrixXd guidance_upstream(const GuidanceBatch& g, const Eigen::MatrixXd& upstream, double guidance_scale);

/// Guided velocity for a batch of states sharing one condition and one time.
Eigen::MatrixXd guided_velocity(const VelocityModel& model, const Eigen::MatrixXd& x, double t,
                                const CondToken& cond, double guidance_scale);

struct SamplerConfig {
    int train_steps = 15;
    int eval_steps = 50;
    double guidance_scale = 4.0;
    double noise_level = 1.3;
    int window_size = 3;
    uint64_t seed = 0;

    /// Throws InvalidArgument naming the bad field.
    void validate() const;
    /// Largest admissible window start for `steps` (window must lie in the first half).
    int max_window_start(int steps) const { return steps / 2 - window_size; }
};

/// One training draw of the flow-matching loss. With probability p_drop the
/// condition is replaced by the unconditional sentinel.
struct FlowDraw {
    double t = 0.0;
    Eigen::VectorXd eps;
    bool dropped = false;
};
FlowDraw draw_flow_noise(int data_dim, Rng& rng, double p_drop);

double flow_sft_loss(const VelocityModel& model, const Eigen::VectorXd& x0, const CondToken& cond, Rng& rng,
                     double p_drop = 0.1);
double flow_sft_loss(const VelocityModel& model, const ToyImage& x0, const CondToken& cond, Rng& rng,
                     double p_drop = 0.1);

/// Batched loss and gradient: returns the mean over examples of the
/// per-example loss, adds its gradient into `grad`. Draws happen in
/// example order from `rng`.
struct FlowExample {
    Eigen::VectorXd x0;
    CondToken cond;
};
double flow_loss_and_grad(const VelocityField& model, const std::vector<FlowExample>& examples, Rng& rng,
                          double p_drop, Eigen::VectorXd* grad);

/// Standard-normal starting state for a sampler seed (shared by the ODE
/// sampler and rollouts so both start from the same point).
Eigen::VectorXd initial_noise(uint64_t seed, int data_dim);

/// Deterministic Euler sampling over `steps`, unclamped state.
Eigen::VectorXd sample_ode_state(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config,
                                 int steps);
ToyImage sample_ode(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config);

struct SdeStep {
    Eigen::VectorXd x_next;
    Eigen::VectorXd mean;
    double std = 0.0;
    double logp = 0.0;
};

double sde_std(double noise_level, double t, double dt);

/// Isotropic Gaussian log-density summed over components.
double gaussian_logp(const Eigen::VectorXd& x, const Eigen::VectorXd& mean, double std);

/// One stochastic step. `noise` overrides the standard-normal draw when given.
SdeStep sde_step(const VelocityModel& model, const Eigen::VectorXd& x, double t, double dt, const CondToken& cond,
                 const SamplerConfig& config, Rng& rng, const Eigen::VectorXd* noise = nullptr);

struct StepRecord {
    double t = 0.0;
    double dt = 0.0;
    bool in_window = false;
    Eigen::VectorXd x;       // state entering the step
    Eigen::VectorXd x_next;  // state leaving the step
    Eigen::VectorXd mean;    // transition mean (equals x_next off-window)
    double std = 0.0;        // 0 off-window
    double logp = 0.0;       // 0 off-window
};

struct FlowTrajectory {
    std::vector<StepRecord> steps;
    int window_start = 0;
    int window_size = 0;
    Eigen::VectorXd final_state;

    std::vector<int> window_indices() const;
};

/// Rolls `seeds.size()` trajectories together (one independent noise stream
/// per seed) over `config.train_steps`, with the stochastic window at
/// [window_start, window_start + window_size).
std::vector<FlowTrajectory> rollout_group(const VelocityModel& model, const CondToken& cond,
                                          const SamplerConfig& config, const std::vector<uint64_t>& seeds,
                                          int window_start);

struct Rollout {
    ToyImage image;
    FlowTrajectory trajectory;
};
Rollout rollout(const VelocityModel& model, const CondToken& cond, const SamplerConfig& config, uint64_t seed,
                int window_start);

/// Checkpoint: velocity parameters (+ optional text model state, stored
/// opaquely as JSON) and sampler defaults.
struct Checkpoint {
    NetShape shape;
    Eigen::VectorXd params;
    SamplerConfig sampler;
    nlohmann::json lm;  // null when absent
    nlohmann::json meta;
};
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint read_checkpoint(const std::filesystem::path& file);

nlohmann::json to_json(const SamplerConfig& c);
SamplerConfig sampler_from_json(const nlohmann::json& j, const std::string& path = "sampler");

}  // namespace charforge
