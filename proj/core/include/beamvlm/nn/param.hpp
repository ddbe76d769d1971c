// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/autograd.hpp"
#include "beamvlm/nn/tensor.hpp"

#include <memory>
#include <random>
#include <string>
#include <vector>

namespace beamvlm::nn {

/// Named trainable array with its optimizer moments (f32 storage).
struct Param {
    std::string name;
    MatF value;
    MatF m;  // first moment
    MatF v;  // second moment
    bool trainable = true;

    Param() = default;
    Param(std::string n, MatF val, bool train = true)
        : name(std::move(n)), value(std::move(val)), trainable(train) {
        m = MatF::Zero(value.rows(), value.cols());
        v = MatF::Zero(value.rows(), value.cols());
    }
};

using ParamPtr = std::shared_ptr<Param>;

inline MatF gaussian_init(int rows, int cols, float stddev, std::mt19937_64& rng) {
    std::normal_distribution<float> dist(0.0f, stddev);
    MatF m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

/// Tape leaves for a parameter list, cast to the tape's scalar type.
template <typename S>
struct BoundParams {
    std::vector<NodePtr<S>> leaves;

    BoundParams(Tape<S>& tape, const std::vector<ParamPtr>& params, bool trainable_only_grads) {
        leaves.reserve(params.size());
        for (const auto& p : params) {
            const bool rg = !trainable_only_grads || p->trainable;
            leaves.push_back(tape.leaf(p->value.template cast<S>(), rg));
        }
    }

    /// Gradients in f32, zero matrices for parameters the loss never touched.
    std::vector<MatF> gradients(const std::vector<ParamPtr>& params) const {
        std::vector<MatF> out;
        out.reserve(leaves.size());
        for (std::size_t i = 0; i < leaves.size(); ++i) {
            if (leaves[i]->has_grad())
                out.push_back(leaves[i]->grad.template cast<float>());
            else
                out.push_back(MatF::Zero(params[i]->value.rows(), params[i]->value.cols()));
        }
        return out;
    }
};

}  // namespace beamvlm::nn
