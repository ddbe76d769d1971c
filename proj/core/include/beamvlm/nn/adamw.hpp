// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/param.hpp"

#include <cmath>
#include <vector>

namespace beamvlm::nn {

/// AdamW with decoupled weight decay: the decay term never enters the
/// moment accumulators.
struct OptimizerState {
    long step = 0;
    float learning_rate = 3e-4f;
    float weight_decay = 1e-2f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
inline double clip_global_norm(std::vector<MatF>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const auto s = static_cast<float>(max_norm / norm);
        for (auto& g : grads) g *= s;
    }
    return norm;
}

inline void adamw_step(OptimizerState& state, const std::vector<ParamPtr>& params,
                       const std::vector<MatF>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adamw_step: param/grad count mismatch");
    ++state.step;
    const float bc1 = 1.0f - std::pow(state.beta1, static_cast<float>(state.step));
    const float bc2 = 1.0f - std::pow(state.beta2, static_cast<float>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        if (!p.trainable) continue;
        const MatF& g = grads[i];
        if (g.rows() != p.value.rows() || g.cols() != p.value.cols())
            throw ShapeError("adamw_step: gradient shape mismatch for " + p.name);
        p.m = state.beta1 * p.m + (1.0f - state.beta1) * g;
        p.v = (state.beta2 * p.v.array() + (1.0f - state.beta2) * g.array().square()).matrix();
        const MatF m_hat = p.m / bc1;
        const MatF v_hat = p.v / bc2;
        const MatF decay = state.learning_rate * state.weight_decay * p.value;
        p.value.array() -=
            state.learning_rate * m_hat.array() / (v_hat.array().sqrt() + state.eps);
        p.value -= decay;
    }
}

}  // namespace beamvlm::nn
