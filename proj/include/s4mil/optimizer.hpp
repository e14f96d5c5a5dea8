#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "s4mil/error.hpp"
#include "s4mil/tensor.hpp"

namespace s4mil {

struct OptimizerConfig {
    double learning_rate = 2e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t lookahead_k = 5;
    double lookahead_alpha = 0.5;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("adam betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
        if (lookahead_k == 0) throw ConfigError("lookahead_k must be at least 1");
        if (!(lookahead_alpha >= 0.0 && lookahead_alpha <= 1.0)) throw ConfigError("lookahead_alpha must lie in [0, 1]");
    }
};

/// Adam with decoupled weight decay as the inner optimizer, wrapped by
/// lookahead: every k inner steps the slow weights move toward the fast
/// weights by alpha and the fast weights restart from them.
template <typename Scalar>
class AdamLookahead {
public:
    AdamLookahead(std::vector<Parameter<Scalar>*> params, OptimizerConfig config)
        : params_(std::move(params)), config_(config) {
        config_.validate();
        for (auto* p : params_) {
            first_.push_back(Tensor<Scalar>::Zero(p->value.rows(), p->value.cols()));
            second_.push_back(Tensor<Scalar>::Zero(p->value.rows(), p->value.cols()));
            slow_.push_back(p->value);
        }
    }

    const OptimizerConfig& config() const noexcept { return config_; }
    std::size_t steps() const noexcept { return steps_; }
    const std::vector<Tensor<Scalar>>& slow_weights() const noexcept { return slow_; }

    /// Applies one update from the accumulated gradients. A non-finite
    /// gradient aborts the step before any parameter changes.
    void step() {
        for (auto* p : params_)
            if (!p->grad.allFinite()) throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
        ++steps_;
        const double t = static_cast<double>(steps_);
        const double c1 = 1.0 - std::pow(config_.beta1, t);
        const double c2 = 1.0 - std::pow(config_.beta2, t);
        const double lr = config_.learning_rate;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& w = params_[i]->value;
            const auto& g = params_[i]->grad;
            auto& m = first_[i];
            auto& v = second_[i];
            for (Eigen::Index j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g.data()[j]);
                const double mj = config_.beta1 * static_cast<double>(m.data()[j]) + (1.0 - config_.beta1) * gj;
                const double vj = config_.beta2 * static_cast<double>(v.data()[j]) + (1.0 - config_.beta2) * gj * gj;
                m.data()[j] = static_cast<Scalar>(mj);
                v.data()[j] = static_cast<Scalar>(vj);
                const double wj = static_cast<double>(w.data()[j]);
                const double update = (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
                w.data()[j] = static_cast<Scalar>(wj - lr * config_.weight_decay * wj - lr * update);
            }
        }
        if (steps_ % config_.lookahead_k == 0) synchronize();
    }

private:
    void synchronize() {
        const auto alpha = static_cast<Scalar>(config_.lookahead_alpha);
        const auto keep = static_cast<Scalar>(1.0 - config_.lookahead_alpha);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            slow_[i] = slow_[i] * keep + params_[i]->value * alpha;
            params_[i]->value = slow_[i];
        }
    }

    std::vector<Parameter<Scalar>*> params_;
    OptimizerConfig config_;
    std::vector<Tensor<Scalar>> first_, second_, slow_;
    std::size_t steps_ = 0;
};

}  // namespace s4mil
