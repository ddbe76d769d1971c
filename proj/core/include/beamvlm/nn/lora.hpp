// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/autograd.hpp"
#include "beamvlm/nn/param.hpp"

#include <random>

namespace beamvlm::nn {

/// Low-rank update W = W0 + (alpha/r) * B * A attached to a frozen weight.
/// B starts at zero so the adapted model equals the base model exactly.
struct LoraAdapter {
    MatF a;  // r x d_in, Gaussian init
    MatF b;  // d_out x r, zero init
    int rank = 0;
    float alpha = 16.0f;

    static LoraAdapter init(int d_out, int d_in, int rank, float alpha, std::mt19937_64& rng) {
        if (rank > d_in || rank > d_out) throw ShapeError("LoraAdapter: rank exceeds dimension");
        LoraAdapter ad;
        ad.rank = rank;
        ad.alpha = alpha;
        ad.a = gaussian_init(rank, d_in, 0.02f, rng);
        ad.b = MatF::Zero(d_out, rank);
        return ad;
    }

    float scaling() const { return alpha / static_cast<float>(rank); }
};

inline MatF lora_merge(const MatF& w0, const LoraAdapter& ad) {
    if (ad.b.rows() != w0.rows() || ad.a.cols() != w0.cols() || ad.b.cols() != ad.a.rows())
        throw ShapeError("lora_merge: adapter/base shape mismatch");
    return w0 + ad.scaling() * (ad.b * ad.a);
}

/// x * (W0 + (alpha/r) B A)^T, without materializing the merged weight.
inline MatF lora_forward(const MatF& x, const MatF& w0, const LoraAdapter* ad) {
    if (x.cols() != w0.cols()) throw ShapeError("lora_forward: feature dimension mismatch");
    MatF y = x * w0.transpose();
    if (ad != nullptr) {
        if (ad->a.cols() != w0.cols() || ad->b.rows() != w0.rows())
            throw ShapeError("lora_forward: adapter/base shape mismatch");
        y.noalias() += ad->scaling() * ((x * ad->a.transpose()) * ad->b.transpose());
    }
    return y;
}

/// Graph version: the low-rank path stays separate so gradients flow into A
/// and B while W0 can stay frozen.
template <typename S>
NodePtr<S> lora_linear(Tape<S>& tape, const NodePtr<S>& x, const NodePtr<S>& w0,
                       const NodePtr<S>& a, const NodePtr<S>& b, S scaling) {
    auto base = linear(tape, x, w0);
    auto low = linear(tape, linear(tape, x, a), b);
    return add(tape, base, scale(tape, low, scaling));
}

}  // namespace beamvlm::nn
