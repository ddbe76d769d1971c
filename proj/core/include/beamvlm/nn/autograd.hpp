// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

namespace beamvlm::nn {

// Reverse-mode tape over 2-D matrices. Nodes are created in forward order;
// backward walks the tape in reverse creation order, so any graph built by a
// single thread is topologically sorted for free.

template <typename S>
struct Node {
    Mat<S> value;
    Mat<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::function<void()> backward_fn;  // adds into parents' grads

    void accumulate(const Mat<S>& g) {
        if (!requires_grad) return;
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
    bool has_grad() const { return grad.size() != 0; }
};

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
class Tape {
public:
    NodePtr<S> leaf(Mat<S> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        nodes_.push_back(n);
        return n;
    }

    NodePtr<S> make(Mat<S> value, bool requires_grad, std::function<void()> backward_fn) {
        auto n = std::make_shared<Node<S>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->backward_fn = std::move(backward_fn);
        nodes_.push_back(n);
        return n;
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates through the tape.
    void backward(const NodePtr<S>& loss) {
        if (loss->value.rows() != 1 || loss->value.cols() != 1)
            throw GraphError("backward: loss must be a 1x1 scalar");
        if (!loss->requires_grad)
            throw GraphError("backward: loss is detached from all trainable parameters");
        Mat<S> one(1, 1);
        one(0, 0) = S(1);
        loss->accumulate(one);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto& n = **it;
            if (n.backward_fn && n.has_grad()) n.backward_fn();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<NodePtr<S>> nodes_;
};

// ---------------------------------------------------------------------------
// Ops

template <typename S>
NodePtr<S> matmul(Tape<S>& tape, const NodePtr<S>& a, const NodePtr<S>& b) {
    if (a->value.cols() != b->value.rows()) throw ShapeError("matmul: inner dimensions differ");
    const bool rg = a->requires_grad || b->requires_grad;
    auto out = tape.make(a->value * b->value, rg, nullptr);
    if (rg) {
        out->backward_fn = [a, b, out] {
            if (a->requires_grad) a->accumulate(out->grad * b->value.transpose());
            if (b->requires_grad) b->accumulate(a->value.transpose() * out->grad);
        };
    }
    return out;
}

/// y = x * W^T for a weight stored as (out x in).
template <typename S>
NodePtr<S> linear(Tape<S>& tape, const NodePtr<S>& x, const NodePtr<S>& w) {
    if (x->value.cols() != w->value.cols()) throw ShapeError("linear: feature dimension differs");
    const bool rg = x->requires_grad || w->requires_grad;
    auto out = tape.make(x->value * w->value.transpose(), rg, nullptr);
    if (rg) {
        out->backward_fn = [x, w, out] {
            if (x->requires_grad) x->accumulate(out->grad * w->value);
            if (w->requires_grad) w->accumulate(out->grad.transpose() * x->value);
        };
    }
    return out;
}

template <typename S>
NodePtr<S> add(Tape<S>& tape, const NodePtr<S>& a, const NodePtr<S>& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("add: shape mismatch");
    const bool rg = a->requires_grad || b->requires_grad;
    auto out = tape.make(a->value + b->value, rg, nullptr);
    if (rg) {
        out->backward_fn = [a, b, out] {
            if (a->requires_grad) a->accumulate(out->grad);
            if (b->requires_grad) b->accumulate(out->grad);
        };
    }
    return out;
}

/// Adds a 1-row parameter to every row of x.
template <typename S>
NodePtr<S> add_row(Tape<S>& tape, const NodePtr<S>& x, const NodePtr<S>& row) {
    if (row->value.rows() != 1 || row->value.cols() != x->value.cols())
        throw ShapeError("add_row: expected a 1-row vector matching x's width");
    const bool rg = x->requires_grad || row->requires_grad;
    Mat<S> v = x->value;
    v.rowwise() += row->value.row(0);
    auto out = tape.make(std::move(v), rg, nullptr);
    if (rg) {
        out->backward_fn = [x, row, out] {
            if (x->requires_grad) x->accumulate(out->grad);
            if (row->requires_grad) row->accumulate(out->grad.colwise().sum());
        };
    }
    return out;
}

template <typename S>
NodePtr<S> scale(Tape<S>& tape, const NodePtr<S>& x, S factor) {
    auto out = tape.make(x->value * factor, x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, factor] { x->accumulate(out->grad * factor); };
    }
    return out;
}

template <typename S>
NodePtr<S> silu(Tape<S>& tape, const NodePtr<S>& x) {
    Mat<S> sig = (S(1) / (S(1) + (-x->value.array()).exp())).matrix();
    auto out = tape.make((x->value.array() * sig.array()).matrix(), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, sig = std::move(sig)] {
            Mat<S> d = (sig.array() * (S(1) + x->value.array() * (S(1) - sig.array()))).matrix();
            x->accumulate((out->grad.array() * d.array()).matrix());
        };
    }
    return out;
}

template <typename S>
NodePtr<S> tanh_op(Tape<S>& tape, const NodePtr<S>& x) {
    Mat<S> v = x->value.array().tanh().matrix();
    auto out = tape.make(v, x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out] {
            x->accumulate(
                (out->grad.array() * (S(1) - out->value.array().square())).matrix());
        };
    }
    return out;
}

template <typename S>
NodePtr<S> sigmoid_op(Tape<S>& tape, const NodePtr<S>& x) {
    Mat<S> v = (S(1) / (S(1) + (-x->value.array()).exp())).matrix();
    auto out = tape.make(v, x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out] {
            x->accumulate(
                (out->grad.array() * out->value.array() * (S(1) - out->value.array())).matrix());
        };
    }
    return out;
}

template <typename S>
NodePtr<S> hadamard(Tape<S>& tape, const NodePtr<S>& a, const NodePtr<S>& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw ShapeError("hadamard: shape mismatch");
    const bool rg = a->requires_grad || b->requires_grad;
    auto out = tape.make((a->value.array() * b->value.array()).matrix(), rg, nullptr);
    if (rg) {
        out->backward_fn = [a, b, out] {
            if (a->requires_grad) a->accumulate((out->grad.array() * b->value.array()).matrix());
            if (b->requires_grad) b->accumulate((out->grad.array() * a->value.array()).matrix());
        };
    }
    return out;
}

template <typename S>
NodePtr<S> slice_cols(Tape<S>& tape, const NodePtr<S>& x, int first, int count) {
    if (first < 0 || first + count > x->value.cols()) throw ShapeError("slice_cols: out of range");
    auto out = tape.make(x->value.middleCols(first, count), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, first, count] {
            Mat<S> g = Mat<S>::Zero(x->value.rows(), x->value.cols());
            g.middleCols(first, count) = out->grad;
            x->accumulate(g);
        };
    }
    return out;
}

/// Mean over rows -> a single row.
template <typename S>
NodePtr<S> mean_rows(Tape<S>& tape, const NodePtr<S>& x) {
    const auto n = x->value.rows();
    if (n == 0) throw ShapeError("mean_rows: empty input");
    Mat<S> v = x->value.colwise().mean();
    auto out = tape.make(std::move(v), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, n] {
            Mat<S> g(x->value.rows(), x->value.cols());
            g.rowwise() = out->grad.row(0) / S(n);
            x->accumulate(g);
        };
    }
    return out;
}

/// Reshape a 1 x (r*c) row into an r x c matrix (row-major).
template <typename S>
NodePtr<S> reshape_row(Tape<S>& tape, const NodePtr<S>& x, int rows, int cols) {
    if (x->value.rows() != 1 || x->value.cols() != rows * cols)
        throw ShapeError("reshape_row: size mismatch");
    Mat<S> v(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) v(r, c) = x->value(0, r * cols + c);
    auto out = tape.make(std::move(v), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, rows, cols] {
            Mat<S> g(1, rows * cols);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) g(0, r * cols + c) = out->grad(r, c);
            x->accumulate(g);
        };
    }
    return out;
}

/// Row-wise RMS normalization with a learned gain vector (1 x d).
template <typename S>
NodePtr<S> rmsnorm(Tape<S>& tape, const NodePtr<S>& x, const NodePtr<S>& gain,
                   S eps = S(1e-6)) {
    const auto d = x->value.cols();
    if (gain->value.rows() != 1 || gain->value.cols() != d)
        throw ShapeError("rmsnorm: gain must be 1 x d");
    Eigen::Array<S, Eigen::Dynamic, 1> inv_rms =
        (x->value.array().square().rowwise().mean() + eps).rsqrt();
    Mat<S> normed = (x->value.array().colwise() * inv_rms).matrix();
    Mat<S> v = (normed.array().rowwise() * gain->value.row(0).array()).matrix();
    const bool rg = x->requires_grad || gain->requires_grad;
    auto out = tape.make(std::move(v), rg, nullptr);
    if (rg) {
        out->backward_fn = [x, gain, out, inv_rms = std::move(inv_rms),
                            normed = std::move(normed), d] {
            Mat<S> gdy = out->grad.array().rowwise() * gain->value.row(0).array();
            if (gain->requires_grad)
                gain->accumulate((out->grad.array() * normed.array()).colwise().sum().matrix());
            if (x->requires_grad) {
                // dx = inv_rms * (gdy - normed * mean(gdy .* normed, per row))
                Eigen::Array<S, Eigen::Dynamic, 1> rowdot =
                    (gdy.array() * normed.array()).rowwise().sum() / S(d);
                Mat<S> dx =
                    ((gdy.array() - normed.array().colwise() * rowdot).colwise() * inv_rms)
                        .matrix();
                x->accumulate(dx);
            }
        };
    }
    return out;
}

namespace detail {

/// In-place rotary rotation of rows of x (L x d), pairs within each head
/// block; sign = -1 applies the inverse rotation.
template <typename S>
void rope_rotate(Mat<S>& x, const std::vector<int>& positions, int head_dim, S sign,
                 S base = S(10000)) {
    const auto d = x.cols();
    const int half = head_dim / 2;
    std::vector<S> theta(half);
    for (int k = 0; k < half; ++k)
        theta[k] = std::pow(base, -S(2 * k) / S(head_dim));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const S p = S(positions[i]);
        for (Eigen::Index h0 = 0; h0 + head_dim <= d; h0 += head_dim) {
            for (int k = 0; k < half; ++k) {
                const S ang = sign * p * theta[k];
                const S c = std::cos(ang);
                const S s = std::sin(ang);
                const S a = x(i, h0 + 2 * k);
                const S b = x(i, h0 + 2 * k + 1);
                x(i, h0 + 2 * k) = a * c - b * s;
                x(i, h0 + 2 * k + 1) = a * s + b * c;
            }
        }
    }
}

}  // namespace detail

/// Rotary positional embedding applied independently to every head block of
/// each row. Norm-preserving; backward is the inverse rotation.
template <typename S>
NodePtr<S> rope_apply(Tape<S>& tape, const NodePtr<S>& x, const std::vector<int>& positions,
                      int head_dim) {
    if (head_dim % 2 != 0) throw ShapeError("rope_apply: head_dim must be even");
    if (x->value.cols() % head_dim != 0)
        throw ShapeError("rope_apply: width not a multiple of head_dim");
    if (static_cast<Eigen::Index>(positions.size()) != x->value.rows())
        throw ShapeError("rope_apply: positions length != rows");
    Mat<S> v = x->value;
    detail::rope_rotate(v, positions, head_dim, S(1));
    auto out = tape.make(std::move(v), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, positions, head_dim] {
            Mat<S> g = out->grad;
            detail::rope_rotate(g, positions, head_dim, S(-1));
            x->accumulate(g);
        };
    }
    return out;
}

/// Fused multi-head scaled-dot-product attention over rotary-transformed
/// q and k. Rows are sequence positions; causal masking zeroes attention to
/// future positions. Scale is 1/sqrt(d_h) by default (1/sqrt(d_m) available
/// for exact-equation mode).
template <typename S>
NodePtr<S> multihead_attention(Tape<S>& tape, const NodePtr<S>& q, const NodePtr<S>& k,
                               const NodePtr<S>& v, int heads, bool causal, S scale_factor) {
    const auto L = q->value.rows();
    const auto d = q->value.cols();
    if (k->value.rows() != L || v->value.rows() != L || k->value.cols() != d ||
        v->value.cols() != d)
        throw ShapeError("attention: q/k/v shape mismatch");
    if (d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const auto dh = d / heads;

    auto probs = std::make_shared<std::vector<Mat<S>>>();
    probs->reserve(heads);
    Mat<S> out_v(L, d);
    for (int h = 0; h < heads; ++h) {
        auto Qh = q->value.middleCols(h * dh, dh);
        auto Kh = k->value.middleCols(h * dh, dh);
        auto Vh = v->value.middleCols(h * dh, dh);
        Mat<S> s = (Qh * Kh.transpose()) * scale_factor;
        if (causal) {
            for (Eigen::Index i = 0; i < L; ++i)
                for (Eigen::Index j = i + 1; j < L; ++j)
                    s(i, j) = -std::numeric_limits<S>::infinity();
        }
        // Row-wise softmax with max subtraction.
        Mat<S> p(L, s.cols());
        for (Eigen::Index i = 0; i < L; ++i) {
            const S mx = s.row(i).maxCoeff();
            p.row(i) = (s.row(i).array() - mx).exp();
            p.row(i) /= p.row(i).sum();
        }
        out_v.middleCols(h * dh, dh) = p * Vh;
        probs->push_back(std::move(p));
    }
    const bool rg = q->requires_grad || k->requires_grad || v->requires_grad;
    auto out = tape.make(std::move(out_v), rg, nullptr);
    if (rg) {
        out->backward_fn = [q, k, v, out, probs, heads, dh, scale_factor] {
            const auto L2 = q->value.rows();
            const auto d2 = q->value.cols();
            Mat<S> dq = Mat<S>::Zero(L2, d2);
            Mat<S> dk = Mat<S>::Zero(L2, d2);
            Mat<S> dv = Mat<S>::Zero(L2, d2);
            for (int h = 0; h < heads; ++h) {
                const Mat<S>& p = (*probs)[h];
                auto dOh = out->grad.middleCols(h * dh, dh);
                auto Vh = v->value.middleCols(h * dh, dh);
                auto Qh = q->value.middleCols(h * dh, dh);
                auto Kh = k->value.middleCols(h * dh, dh);
                dv.middleCols(h * dh, dh) = p.transpose() * dOh;
                Mat<S> dp = dOh * Vh.transpose();
                Eigen::Array<S, Eigen::Dynamic, 1> rowdot =
                    (dp.array() * p.array()).rowwise().sum();
                Mat<S> ds =
                    (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale_factor;
                dq.middleCols(h * dh, dh) = ds * Kh;
                dk.middleCols(h * dh, dh) = ds.transpose() * Qh;
            }
            if (q->requires_grad) q->accumulate(dq);
            if (k->requires_grad) k->accumulate(dk);
            if (v->requires_grad) v->accumulate(dv);
        };
    }
    return out;
}

/// Vertical concatenation of parts into one sequence.
template <typename S>
NodePtr<S> vconcat(Tape<S>& tape, const std::vector<NodePtr<S>>& parts) {
    if (parts.empty()) throw ShapeError("vconcat: empty part list");
    Eigen::Index rows = 0;
    const auto cols = parts[0]->value.cols();
    for (const auto& p : parts) {
        if (p->value.cols() != cols) throw ShapeError("vconcat: width mismatch");
        rows += p->value.rows();
    }
    Mat<S> v(rows, cols);
    Eigen::Index at = 0;
    bool rg = false;
    for (const auto& p : parts) {
        v.middleRows(at, p->value.rows()) = p->value;
        at += p->value.rows();
        rg = rg || p->requires_grad;
    }
    auto out = tape.make(std::move(v), rg, nullptr);
    if (rg) {
        out->backward_fn = [parts, out] {
            Eigen::Index at2 = 0;
            for (const auto& p : parts) {
                if (p->requires_grad)
                    p->accumulate(out->grad.middleRows(at2, p->value.rows()));
                at2 += p->value.rows();
            }
        };
    }
    return out;
}

template <typename S>
NodePtr<S> select_rows(Tape<S>& tape, const NodePtr<S>& x, const std::vector<int>& idx) {
    Mat<S> v(static_cast<Eigen::Index>(idx.size()), x->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x->value.rows()) throw ShapeError("select_rows: out of range");
        v.row(static_cast<Eigen::Index>(i)) = x->value.row(idx[i]);
    }
    auto out = tape.make(std::move(v), x->requires_grad, nullptr);
    if (x->requires_grad) {
        out->backward_fn = [x, out, idx] {
            Mat<S> g = Mat<S>::Zero(x->value.rows(), x->value.cols());
            for (std::size_t i = 0; i < idx.size(); ++i)
                g.row(idx[i]) += out->grad.row(static_cast<Eigen::Index>(i));
            x->accumulate(g);
        };
    }
    return out;
}

/// Embedding lookup: rows of `table` (V x d) selected by token id.
template <typename S>
NodePtr<S> gather(Tape<S>& tape, const NodePtr<S>& table, const std::vector<int>& ids) {
    return select_rows(tape, table, ids);
}

/// Mean over rows of -log softmax(logits_i)[target_i]. Every row counts; the
/// caller selects the unmasked rows first.
template <typename S>
NodePtr<S> cross_entropy(Tape<S>& tape, const NodePtr<S>& logits, const std::vector<int>& targets) {
    const auto n = logits->value.rows();
    if (n == 0) throw EmptyMask("cross_entropy: no target positions");
    if (static_cast<Eigen::Index>(targets.size()) != n)
        throw ShapeError("cross_entropy: targets length != rows");
    auto softmax = std::make_shared<Mat<S>>(n, logits->value.cols());
    S total = S(0);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (targets[i] < 0 || targets[i] >= logits->value.cols())
            throw ShapeError("cross_entropy: target id out of range");
        const S mx = logits->value.row(i).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (logits->value.row(i).array() - mx).exp();
        const S z = e.sum();
        softmax->row(i) = (e / z).matrix();
        total += -(logits->value(i, targets[i]) - mx - std::log(z));
    }
    Mat<S> v(1, 1);
    v(0, 0) = total / S(n);
    auto out = tape.make(std::move(v), logits->requires_grad, nullptr);
    if (logits->requires_grad) {
        out->backward_fn = [logits, out, softmax, targets, n] {
            Mat<S> g = *softmax;
            for (Eigen::Index i = 0; i < n; ++i) g(i, targets[i]) -= S(1);
            g *= out->grad(0, 0) / S(n);
            logits->accumulate(g);
        };
    }
    return out;
}

/// Mean of a list of scalar nodes (per-sample losses -> batch loss).
template <typename S>
NodePtr<S> mean_scalar(Tape<S>& tape, const std::vector<NodePtr<S>>& xs) {
    if (xs.empty()) throw ShapeError("mean_scalar: empty list");
    S total = S(0);
    bool rg = false;
    for (const auto& x : xs) {
        if (x->value.rows() != 1 || x->value.cols() != 1)
            throw ShapeError("mean_scalar: non-scalar input");
        total += x->value(0, 0);
        rg = rg || x->requires_grad;
    }
    Mat<S> v(1, 1);
    v(0, 0) = total / S(xs.size());
    auto out = tape.make(std::move(v), rg, nullptr);
    if (rg) {
        out->backward_fn = [xs, out] {
            Mat<S> g = out->grad / S(xs.size());
            for (const auto& x : xs)
                if (x->requires_grad) x->accumulate(g);
        };
    }
    return out;
}

}  // namespace beamvlm::nn
