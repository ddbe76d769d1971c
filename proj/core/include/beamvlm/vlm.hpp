// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/adamw.hpp"
#include "beamvlm/nn/autograd.hpp"
#include "beamvlm/nn/lora.hpp"
#include "beamvlm/nn/param.hpp"
#include "beamvlm/scene.hpp"
#include "beamvlm/text.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace beamvlm::vlm {

struct ContextOverflow : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VlmConfig {
    int d_m = 128;
    int layers = 4;
    int heads = 4;
    int vocab_size = text::kVocabSize;
    int image_size = 32;
    int patch_size = 8;
    int n_frames = 8;
    int horizon = 5;
    int max_answer_tokens = 24;
    int ffn_dim = 256;
    int max_context = 2048;
    // Eq-exact mode scales attention by 1/sqrt(d_m) instead of 1/sqrt(d_h).
    bool scale_by_model_dim = false;

    int patches_per_frame() const {
        const int g = image_size / patch_size;
        return g * g;
    }
    int visual_tokens() const { return n_frames * patches_per_frame(); }
    int head_dim() const { return d_m / heads; }
    float attn_scale() const;
    void validate() const;
};

/// Per-layer parameter indices into the model's flat parameter list.
struct LayerRefs {
    int wq = -1, wk = -1, wv = -1, wo = -1;
    int norm1 = -1, norm2 = -1;
    int ffn_w1 = -1, ffn_w2 = -1;
    int lora_qa = -1, lora_qb = -1;
    int lora_ka = -1, lora_kb = -1;
    int lora_va = -1, lora_vb = -1;
};

struct ModelRefs {
    int tok_embed = -1;
    int patch_proj = -1, patch_pos = -1, patch_frame = -1;
    int final_norm = -1, out_proj = -1;
    std::vector<LayerRefs> layers;
};

struct BeamVlmModel {
    VlmConfig cfg;
    std::vector<nn::ParamPtr> params;
    ModelRefs refs;
    bool lora_enabled = false;
    int lora_rank = 0;
    float lora_alpha = 16.0f;

    static BeamVlmModel init(const VlmConfig& cfg, std::uint64_t seed);

    /// Attaches zero-initialized Q/K/V adapters to every layer.
    void add_lora(int rank, float alpha, std::uint64_t seed);

    /// Marks base parameters frozen so only adapters train.
    void freeze_base();

    nn::ParamPtr find(const std::string& name) const;
    std::size_t total_parameters() const;
    std::size_t trainable_parameters() const;
};

/// Resize by area-averaging to out_size x out_size, then map to [-1, 1].
nn::MatF normalize_image(const scene::Image& raw, int out_size);

/// Non-overlapping patches flattened row-major: one (n_patches x patch^2)
/// matrix per frame, in chronological order.
std::vector<nn::MatF> frames_to_patches(const std::vector<scene::Image>& frames,
                                        const VlmConfig& cfg);

/// Token layout of one assembled sequence.
struct SequenceLayout {
    std::vector<int> token_ids;    // full sequence incl. BOS/IMG placeholders/EOS
    std::vector<int> positions;    // 0..L-1
    std::vector<int> loss_rows;    // hidden rows whose next-token target is scored
    std::vector<int> loss_targets; // the answer+EOS token ids at those rows
    int prefix_len = 0;            // BOS + visual + prompt
};

/// [BOS][visual][prompt][answer][EOS]; loss covers answer+EOS predictions.
SequenceLayout assemble_sequence(const VlmConfig& cfg, const std::string& prompt,
                                 const std::string& answer, bool with_answer);

// ---------------------------------------------------------------------------
// Graph forward (templated so the f64 shadow mode can gradcheck it).

template <typename S>
nn::NodePtr<S> embed_frames_graph(nn::Tape<S>& tape, const BeamVlmModel& model,
                                  const nn::BoundParams<S>& bound,
                                  const std::vector<nn::MatF>& frame_patches) {
    const auto& r = model.refs;
    if (static_cast<int>(frame_patches.size()) != model.cfg.n_frames)
        throw nn::ShapeError("embed_frames: expected " + std::to_string(model.cfg.n_frames) +
                             " frames");
    std::vector<nn::NodePtr<S>> parts;
    const int np = model.cfg.patches_per_frame();
    for (int f = 0; f < model.cfg.n_frames; ++f) {
        if (frame_patches[f].rows() != np ||
            frame_patches[f].cols() != model.cfg.patch_size * model.cfg.patch_size)
            throw nn::ShapeError("embed_frames: patch matrix shape mismatch");
        auto patches = tape.leaf(frame_patches[f].template cast<S>(), false);
        auto proj = nn::linear(tape, patches, bound.leaves[r.patch_proj]);
        auto with_pos = nn::add(tape, proj, bound.leaves[r.patch_pos]);
        auto frame_row = nn::gather(tape, bound.leaves[r.patch_frame], std::vector<int>{f});
        parts.push_back(nn::add_row(tape, with_pos, frame_row));
    }
    return nn::vconcat(tape, parts);
}

template <typename S>
nn::NodePtr<S> decoder_forward(nn::Tape<S>& tape, const BeamVlmModel& model,
                               const nn::BoundParams<S>& bound, const nn::NodePtr<S>& input,
                               const std::vector<int>& positions) {
    const auto& cfg = model.cfg;
    const S scaling = model.lora_enabled ? S(model.lora_alpha / model.lora_rank) : S(0);
    auto x = input;
    for (const auto& lr : model.refs.layers) {
        auto xn = nn::rmsnorm(tape, x, bound.leaves[lr.norm1]);
        nn::NodePtr<S> q, k, v;
        if (model.lora_enabled) {
            q = nn::lora_linear(tape, xn, bound.leaves[lr.wq], bound.leaves[lr.lora_qa],
                                bound.leaves[lr.lora_qb], scaling);
            k = nn::lora_linear(tape, xn, bound.leaves[lr.wk], bound.leaves[lr.lora_ka],
                                bound.leaves[lr.lora_kb], scaling);
            v = nn::lora_linear(tape, xn, bound.leaves[lr.wv], bound.leaves[lr.lora_va],
                                bound.leaves[lr.lora_vb], scaling);
        } else {
            q = nn::linear(tape, xn, bound.leaves[lr.wq]);
            k = nn::linear(tape, xn, bound.leaves[lr.wk]);
            v = nn::linear(tape, xn, bound.leaves[lr.wv]);
        }
        q = nn::rope_apply(tape, q, positions, cfg.head_dim());
        k = nn::rope_apply(tape, k, positions, cfg.head_dim());
        auto att = nn::multihead_attention(tape, q, k, v, cfg.heads, /*causal=*/true,
                                           S(cfg.attn_scale()));
        x = nn::add(tape, x, nn::linear(tape, att, bound.leaves[lr.wo]));

        auto yn = nn::rmsnorm(tape, x, bound.leaves[lr.norm2]);
        auto h = nn::silu(tape, nn::linear(tape, yn, bound.leaves[lr.ffn_w1]));
        x = nn::add(tape, x, nn::linear(tape, h, bound.leaves[lr.ffn_w2]));
    }
    return nn::rmsnorm(tape, x, bound.leaves[model.refs.final_norm]);
}

/// Full teacher-forced graph: returns the scalar loss for one sample.
template <typename S>
nn::NodePtr<S> sample_loss_graph(nn::Tape<S>& tape, const BeamVlmModel& model,
                                 const nn::BoundParams<S>& bound,
                                 const std::vector<nn::MatF>& frame_patches,
                                 const SequenceLayout& layout) {
    const auto& r = model.refs;
    auto visual = embed_frames_graph(tape, model, bound, frame_patches);

    // Text token ids excluding the IMG placeholders.
    std::vector<int> bos{text::kBos};
    std::vector<int> tail_ids(layout.token_ids.begin() + 1 + model.cfg.visual_tokens(),
                              layout.token_ids.end());
    std::vector<nn::NodePtr<S>> parts{nn::gather(tape, bound.leaves[r.tok_embed], bos), visual,
                                      nn::gather(tape, bound.leaves[r.tok_embed], tail_ids)};
    auto seq = nn::vconcat(tape, parts);
    auto hidden = decoder_forward(tape, model, bound, seq, layout.positions);
    auto picked = nn::select_rows(tape, hidden, layout.loss_rows);
    auto logits = nn::linear(tape, picked, bound.leaves[r.out_proj]);
    return nn::cross_entropy(tape, logits, layout.loss_targets);
}

// ---------------------------------------------------------------------------
// Inference (float only, KV cache).

struct Prediction {
    std::vector<int> beams;
    bool valid = false;
    std::string raw;
};

/// Per-request decode state; owns layer K/V caches that can be truncated to
/// roll back speculative candidate tokens.
class InferenceSession {
public:
    explicit InferenceSession(const BeamVlmModel& model);

    /// Appends embedding rows to the sequence and runs the decoder over them.
    /// Returns the output logits for each appended row.
    nn::MatF feed_rows(const nn::MatF& rows);

    /// Embeds byte/special tokens and feeds them.
    nn::MatF feed_tokens(const std::vector<int>& ids);

    int length() const { return length_; }
    void truncate(int len);

    struct Snapshot {
        int len = 0;
        Eigen::RowVectorXf logits;
    };
    Snapshot snapshot() const { return {length_, last_logits_}; }
    void restore(const Snapshot& s) {
        truncate(s.len);
        last_logits_ = s.logits;
    }

    const Eigen::RowVectorXf& last_logits() const { return last_logits_; }

private:
    const BeamVlmModel& model_;
    std::vector<nn::MatF> k_cache_;
    std::vector<nn::MatF> v_cache_;
    int length_ = 0;
    Eigen::RowVectorXf last_logits_;
};

/// Prefix = BOS + visual tokens + prompt, fed through a fresh session.
InferenceSession make_prefix_session(const BeamVlmModel& model,
                                     const std::vector<scene::Image>& frames,
                                     const std::string& prompt);

/// Greedy decode until EOS or the answer-token budget; returns answer bytes.
std::string generate(const BeamVlmModel& model, const std::vector<scene::Image>& frames,
                     const std::string& prompt);
std::string generate(const BeamVlmModel& model, InferenceSession& session);

/// generate + strict parse, falling back to repeating the last input beam.
Prediction predict_beams(const BeamVlmModel& model, const std::vector<scene::Image>& frames,
                         const std::string& prompt, const std::vector<int>& input_beam_history,
                         int codebook_size);

/// Summed log-probability of each candidate index's canonical digit tokens
/// (plus separator, or EOS at the last step), conditioned on the prefix and
/// the canonical greedy answer up to step_j. The session must be positioned
/// at the end of that conditioning text; its state is restored on return.
std::vector<float> score_candidates(const BeamVlmModel& model, InferenceSession& session,
                                    int step_j, int codebook_size);

/// Round-trippable JSON form used by checkpoints and run configs.
std::string config_to_json(const VlmConfig& cfg);
VlmConfig config_from_json(const std::string& body);

}  // namespace beamvlm::vlm
