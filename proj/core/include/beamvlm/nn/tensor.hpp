// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace beamvlm::nn {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GraphError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyMask : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

/// Contiguous f32 storage with an explicit shape; the graph works on 2-D
/// Eigen views of this data.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel(), 0.0f);
    }

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const {
        int c = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
        return c;
    }

    Eigen::Map<MatF> matrix() {
        return Eigen::Map<MatF>(data.data(), rows(), cols());
    }
    Eigen::Map<const MatF> matrix() const {
        return Eigen::Map<const MatF>(data.data(), rows(), cols());
    }

    static Tensor from_matrix(const MatF& m) {
        Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
        Eigen::Map<MatF>(t.data.data(), m.rows(), m.cols()) = m;
        return t;
    }
};

}  // namespace beamvlm::nn
