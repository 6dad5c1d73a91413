#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace charforge {

struct AdamWConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

/// AdamW with decoupled weight decay and optional global-norm clipping.
class AdamW {
public:
    AdamW(Eigen::Index n, AdamWConfig config)
        : config_(config), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

    /// Returns the gradient norm before clipping.
    double step(Eigen::VectorXd& params, Eigen::VectorXd grad) {
        const double norm = grad.norm();
        if (config_.max_grad_norm > 0.0 && norm > config_.max_grad_norm) {
            grad *= config_.max_grad_norm / norm;
        }
        ++t_;
        m_ = config_.beta1 * m_ + (1.0 - config_.beta1) * grad;
        v_ = config_.beta2 * v_ + (1.0 - config_.beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        if (config_.weight_decay > 0.0) {
            params *= 1.0 - config_.learning_rate * config_.weight_decay;
        }
        params.array() -= config_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + config_.eps);
        return norm;
    }

    long steps_taken() const { return t_; }
    const AdamWConfig& config() const { return config_; }

private:
    AdamWConfig config_;
    Eigen::VectorXd m_;
    Eigen::VectorXd v_;
    long t_ = 0;
};

}  // namespace charforge
