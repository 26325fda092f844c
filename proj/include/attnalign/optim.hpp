#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "attnalign/errors.hpp"
#include "attnalign/nn.hpp"
#include "attnalign/tensor.hpp"

namespace attnalign {

struct SgdConfig {
    double initial_lr = 1e-3;
    double momentum = 0.98;
    double weight_decay = 1e-4;
    double decay_factor = 0.1;
    std::size_t decay_every_epochs = 7;
};

/// currentLr always equals initialLr * decayFactor^floor(epochsSinceReset/7),
/// so the step schedule restarts whenever epochsSinceReset is zeroed.
inline double scheduled_lr(const SgdConfig& cfg, std::size_t epochs_since_reset) {
    const auto steps = static_cast<double>(epochs_since_reset / cfg.decay_every_epochs);
    return cfg.initial_lr * std::pow(cfg.decay_factor, steps);
}

struct SgdState {
    std::vector<Tensor> velocity; // one per parameter tensor, fixed param order
    std::size_t epochs_since_reset = 0;
    double current_lr = 0.0;

    static SgdState init(const ModelParams& params, const SgdConfig& cfg) {
        SgdState s;
        for (const Tensor* t : param_tensors(params)) s.velocity.emplace_back(t->shape());
        s.epochs_since_reset = 0;
        s.current_lr = scheduled_lr(cfg, 0);
        return s;
    }
};

/// Classical momentum with coupled weight decay on every parameter
/// (biases included): g' = g + wd*theta; v = mu*v + g'; theta -= lr*v.
inline void sgd_step(ModelParams& params, const ModelGrads& grads, SgdState& state,
                     const SgdConfig& cfg) {
    auto thetas = param_tensors(params);
    auto gs = grad_tensors(grads);
    if (state.velocity.size() != thetas.size()) {
        throw DimensionError("sgd_step: velocity count does not match parameter count");
    }
    for (std::size_t t = 0; t < thetas.size(); ++t) {
        Tensor& theta = *thetas[t];
        const Tensor& g = *gs[t];
        Tensor& v = state.velocity[t];
        require_same_shape(theta, g, "sgd_step");
        require_same_shape(theta, v, "sgd_step");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double g_eff = g[i] + cfg.weight_decay * theta[i];
            v[i] = cfg.momentum * v[i] + g_eff;
            theta[i] -= state.current_lr * v[i];
        }
    }
}

/// Call exactly once per completed epoch.
inline void epoch_tick(SgdState& state, const SgdConfig& cfg) {
    state.epochs_since_reset += 1;
    state.current_lr = scheduled_lr(cfg, state.epochs_since_reset);
}

/// The mid-training reset: zero momentum, restart the LR schedule,
/// parameters untouched.
inline void reset(SgdState& state, const SgdConfig& cfg) {
    for (Tensor& v : state.velocity)
        std::fill(v.values().begin(), v.values().end(), 0.0);
    state.epochs_since_reset = 0;
    state.current_lr = scheduled_lr(cfg, 0);
}

} // namespace attnalign
