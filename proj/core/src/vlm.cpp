// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/vlm.hpp"

#include <json.hpp>

#include <cmath>

namespace beamvlm::vlm {

using nn::MatF;
using nlohmann::json;

float VlmConfig::attn_scale() const {
    return 1.0f / std::sqrt(static_cast<float>(scale_by_model_dim ? d_m : head_dim()));
}

void VlmConfig::validate() const {
    if (image_size % patch_size != 0)
        throw nn::ShapeError("VlmConfig: image_size not divisible by patch_size");
    if (d_m % heads != 0) throw nn::ShapeError("VlmConfig: d_m not divisible by heads");
    if (head_dim() % 2 != 0) throw nn::ShapeError("VlmConfig: head_dim must be even");
    if (vocab_size != text::kVocabSize)
        throw nn::ShapeError("VlmConfig: vocab_size must be " + std::to_string(text::kVocabSize));
}

BeamVlmModel BeamVlmModel::init(const VlmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    BeamVlmModel m;
    m.cfg = cfg;
    auto add = [&](const std::string& name, MatF value) {
        m.params.push_back(std::make_shared<nn::Param>(name, std::move(value)));
        return static_cast<int>(m.params.size()) - 1;
    };
    const float std_init = 0.02f;
    const float std_resid = 0.02f / std::sqrt(2.0f * cfg.layers);
    m.refs.tok_embed = add("tok_embed", nn::gaussian_init(cfg.vocab_size, cfg.d_m, std_init, rng));
    m.refs.patch_proj = add("patch.proj",
                            nn::gaussian_init(cfg.d_m, cfg.patch_size * cfg.patch_size, std_init, rng));
    m.refs.patch_pos = add("patch.pos",
                           nn::gaussian_init(cfg.patches_per_frame(), cfg.d_m, std_init, rng));
    m.refs.patch_frame = add("patch.frame", nn::gaussian_init(cfg.n_frames, cfg.d_m, std_init, rng));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerRefs lr;
        lr.wq = add(p + "wq", nn::gaussian_init(cfg.d_m, cfg.d_m, std_init, rng));
        lr.wk = add(p + "wk", nn::gaussian_init(cfg.d_m, cfg.d_m, std_init, rng));
        lr.wv = add(p + "wv", nn::gaussian_init(cfg.d_m, cfg.d_m, std_init, rng));
        lr.wo = add(p + "wo", nn::gaussian_init(cfg.d_m, cfg.d_m, std_resid, rng));
        lr.norm1 = add(p + "norm1", MatF::Ones(1, cfg.d_m));
        lr.norm2 = add(p + "norm2", MatF::Ones(1, cfg.d_m));
        lr.ffn_w1 = add(p + "ffn.w1", nn::gaussian_init(cfg.ffn_dim, cfg.d_m, std_init, rng));
        lr.ffn_w2 = add(p + "ffn.w2", nn::gaussian_init(cfg.d_m, cfg.ffn_dim, std_resid, rng));
        m.refs.layers.push_back(lr);
    }
    m.refs.final_norm = add("final_norm", MatF::Ones(1, cfg.d_m));
    m.refs.out_proj = add("out_proj", nn::gaussian_init(cfg.vocab_size, cfg.d_m, std_init, rng));
    return m;
}

void BeamVlmModel::add_lora(int rank, float alpha, std::uint64_t seed) {
    if (lora_enabled) throw nn::GraphError("add_lora: adapters already attached");
    std::mt19937_64 rng(seed);
    lora_enabled = true;
    lora_rank = rank;
    lora_alpha = alpha;
    auto add = [&](const std::string& name, MatF value) {
        params.push_back(std::make_shared<nn::Param>(name, std::move(value)));
        return static_cast<int>(params.size()) - 1;
    };
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        auto& lr = refs.layers[l];
        lr.lora_qa = add(p + "wq.lora_a", nn::gaussian_init(rank, cfg.d_m, 0.02f, rng));
        lr.lora_qb = add(p + "wq.lora_b", MatF::Zero(cfg.d_m, rank));
        lr.lora_ka = add(p + "wk.lora_a", nn::gaussian_init(rank, cfg.d_m, 0.02f, rng));
        lr.lora_kb = add(p + "wk.lora_b", MatF::Zero(cfg.d_m, rank));
        lr.lora_va = add(p + "wv.lora_a", nn::gaussian_init(rank, cfg.d_m, 0.02f, rng));
        lr.lora_vb = add(p + "wv.lora_b", MatF::Zero(cfg.d_m, rank));
    }
}

void BeamVlmModel::freeze_base() {
    for (auto& p : params) {
        const bool is_lora = p->name.find(".lora_") != std::string::npos;
        p->trainable = is_lora;
    }
}

nn::ParamPtr BeamVlmModel::find(const std::string& name) const {
    for (const auto& p : params)
        if (p->name == name) return p;
    throw nn::GraphError("BeamVlmModel::find: no parameter named " + name);
}

std::size_t BeamVlmModel::total_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p->value.size());
    return n;
}

std::size_t BeamVlmModel::trainable_parameters() const {
    std::size_t n = 0;
    for (const auto& p : params)
        if (p->trainable) n += static_cast<std::size_t>(p->value.size());
    return n;
}

MatF normalize_image(const scene::Image& raw, int out_size) {
    if (raw.width <= 0 || raw.height <= 0 || raw.pixels.empty())
        throw FormatError("normalize_image: empty image");
    MatF out(out_size, out_size);
    for (int i = 0; i < out_size; ++i) {
        int r0 = i * raw.height / out_size;
        int r1 = std::max(r0 + 1, (i + 1) * raw.height / out_size);
        r1 = std::min(r1, raw.height);
        for (int j = 0; j < out_size; ++j) {
            int c0 = j * raw.width / out_size;
            int c1 = std::max(c0 + 1, (j + 1) * raw.width / out_size);
            c1 = std::min(c1, raw.width);
            double acc = 0.0;
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c) acc += raw.at(r, c);
            const double mean = acc / ((r1 - r0) * (c1 - c0));
            out(i, j) = static_cast<float>((mean / 255.0 - 0.5) / 0.5);
        }
    }
    return out;
}

std::vector<MatF> frames_to_patches(const std::vector<scene::Image>& frames,
                                    const VlmConfig& cfg) {
    std::vector<MatF> out;
    out.reserve(frames.size());
    const int grid = cfg.image_size / cfg.patch_size;
    const int ps = cfg.patch_size;
    for (const auto& frame : frames) {
        const MatF img = normalize_image(frame, cfg.image_size);
        MatF patches(grid * grid, ps * ps);
        for (int gr = 0; gr < grid; ++gr) {
            for (int gc = 0; gc < grid; ++gc) {
                const int p = gr * grid + gc;
                for (int r = 0; r < ps; ++r)
                    for (int c = 0; c < ps; ++c)
                        patches(p, r * ps + c) = img(gr * ps + r, gc * ps + c);
            }
        }
        out.push_back(std::move(patches));
    }
    return out;
}

SequenceLayout assemble_sequence(const VlmConfig& cfg, const std::string& prompt,
                                 const std::string& answer, bool with_answer) {
    SequenceLayout s;
    s.token_ids.push_back(text::kBos);
    s.token_ids.insert(s.token_ids.end(), cfg.visual_tokens(), text::kImg);
    const auto prompt_ids = text::tokenize(prompt);
    s.token_ids.insert(s.token_ids.end(), prompt_ids.begin(), prompt_ids.end());
    s.prefix_len = static_cast<int>(s.token_ids.size());
    if (with_answer) {
        const auto answer_ids = text::tokenize(answer);
        const int ans_start = s.prefix_len;
        s.token_ids.insert(s.token_ids.end(), answer_ids.begin(), answer_ids.end());
        s.token_ids.push_back(text::kEos);
        for (std::size_t i = 0; i < answer_ids.size() + 1; ++i) {
            s.loss_rows.push_back(ans_start - 1 + static_cast<int>(i));
            s.loss_targets.push_back(s.token_ids[ans_start + i]);
        }
    }
    const int L = static_cast<int>(s.token_ids.size());
    if (L > cfg.max_context)
        throw ContextOverflow("assemble_sequence: length " + std::to_string(L) + " exceeds " +
                              std::to_string(cfg.max_context));
    s.positions.resize(L);
    for (int i = 0; i < L; ++i) s.positions[i] = i;
    return s;
}

// ---------------------------------------------------------------------------
// Inference

namespace {

MatF rmsnorm_rows(const MatF& x, const MatF& gain, float eps = 1e-6f) {
    Eigen::ArrayXf inv_rms = (x.array().square().rowwise().mean() + eps).rsqrt();
    return (((x.array().colwise() * inv_rms).rowwise()) * gain.row(0).array()).matrix();
}

MatF silu_mat(const MatF& x) {
    Eigen::ArrayXXf sig = 1.0f / (1.0f + (-x.array()).exp());
    return (x.array() * sig).matrix();
}

void rope_rows_inplace(MatF& x, int first_pos, int head_dim) {
    std::vector<int> positions(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) positions[i] = first_pos + static_cast<int>(i);
    nn::detail::rope_rotate<float>(x, positions, head_dim, 1.0f);
}

float log_softmax_at(const Eigen::RowVectorXf& logits, int id) {
    const float mx = logits.maxCoeff();
    const float lse = std::log((logits.array() - mx).exp().sum()) + mx;
    return logits(id) - lse;
}

}  // namespace

InferenceSession::InferenceSession(const BeamVlmModel& model) : model_(model) {
    const auto& cfg = model.cfg;
    k_cache_.assign(cfg.layers, MatF::Zero(cfg.max_context, cfg.d_m));
    v_cache_.assign(cfg.layers, MatF::Zero(cfg.max_context, cfg.d_m));
}

void InferenceSession::truncate(int len) {
    if (len < 0 || len > length_) throw nn::GraphError("InferenceSession::truncate: bad length");
    length_ = len;
}

nn::MatF InferenceSession::feed_rows(const MatF& rows) {
    const auto& cfg = model_.cfg;
    const auto& refs = model_.refs;
    const int n = static_cast<int>(rows.rows());
    if (length_ + n > cfg.max_context) throw ContextOverflow("InferenceSession: context full");
    const int dh = cfg.head_dim();
    const float scale = cfg.attn_scale();
    const float lora_scaling =
        model_.lora_enabled ? model_.lora_alpha / static_cast<float>(model_.lora_rank) : 0.0f;

    auto project = [&](const MatF& xn, int w_idx, int a_idx, int b_idx) {
        MatF y = xn * model_.params[w_idx]->value.transpose();
        if (model_.lora_enabled) {
            y.noalias() += lora_scaling * ((xn * model_.params[a_idx]->value.transpose()) *
                                           model_.params[b_idx]->value.transpose());
        }
        return y;
    };

    MatF x = rows;
    for (int l = 0; l < cfg.layers; ++l) {
        const auto& lr = refs.layers[l];
        const MatF xn = rmsnorm_rows(x, model_.params[lr.norm1]->value);
        MatF q = project(xn, lr.wq, lr.lora_qa, lr.lora_qb);
        MatF k = project(xn, lr.wk, lr.lora_ka, lr.lora_kb);
        const MatF v = project(xn, lr.wv, lr.lora_va, lr.lora_vb);
        rope_rows_inplace(q, length_, dh);
        rope_rows_inplace(k, length_, dh);
        k_cache_[l].middleRows(length_, n) = k;
        v_cache_[l].middleRows(length_, n) = v;
        const int total = length_ + n;

        MatF att(n, cfg.d_m);
        for (int h = 0; h < cfg.heads; ++h) {
            auto Kh = k_cache_[l].block(0, h * dh, total, dh);
            auto Vh = v_cache_[l].block(0, h * dh, total, dh);
            MatF s = (q.middleCols(h * dh, dh) * Kh.transpose()) * scale;
            for (int i = 0; i < n; ++i)
                for (int j = length_ + i + 1; j < total; ++j)
                    s(i, j) = -std::numeric_limits<float>::infinity();
            for (int i = 0; i < n; ++i) {
                const float mx = s.row(i).maxCoeff();
                Eigen::RowVectorXf p = (s.row(i).array() - mx).exp();
                p /= p.sum();
                att.block(i, h * dh, 1, dh) = p * Vh;
            }
        }
        x.noalias() += att * model_.params[lr.wo]->value.transpose();
        const MatF yn = rmsnorm_rows(x, model_.params[lr.norm2]->value);
        x.noalias() +=
            silu_mat(yn * model_.params[lr.ffn_w1]->value.transpose()) *
            model_.params[lr.ffn_w2]->value.transpose();
    }
    length_ += n;
    const MatF hidden = rmsnorm_rows(x, model_.params[refs.final_norm]->value);
    MatF logits = hidden * model_.params[refs.out_proj]->value.transpose();
    last_logits_ = logits.row(logits.rows() - 1);
    return logits;
}

nn::MatF InferenceSession::feed_tokens(const std::vector<int>& ids) {
    const auto& tok = model_.params[model_.refs.tok_embed]->value;
    MatF rows(static_cast<Eigen::Index>(ids.size()), model_.cfg.d_m);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= model_.cfg.vocab_size)
            throw nn::ShapeError("feed_tokens: id out of range");
        rows.row(static_cast<Eigen::Index>(i)) = tok.row(ids[i]);
    }
    return feed_rows(rows);
}

InferenceSession make_prefix_session(const BeamVlmModel& model,
                                     const std::vector<scene::Image>& frames,
                                     const std::string& prompt) {
    const auto& cfg = model.cfg;
    const auto patches = frames_to_patches(frames, cfg);
    const auto& refs = model.refs;
    const auto& tok = model.params[refs.tok_embed]->value;

    const int nv = cfg.visual_tokens();
    const auto prompt_ids = text::tokenize(prompt);
    MatF rows(1 + nv + static_cast<int>(prompt_ids.size()), cfg.d_m);
    rows.row(0) = tok.row(text::kBos);
    const int np = cfg.patches_per_frame();
    for (int f = 0; f < cfg.n_frames; ++f) {
        MatF vis = patches[f] * model.params[refs.patch_proj]->value.transpose();
        vis += model.params[refs.patch_pos]->value;
        vis.rowwise() += model.params[refs.patch_frame]->value.row(f);
        rows.middleRows(1 + f * np, np) = vis;
    }
    for (std::size_t i = 0; i < prompt_ids.size(); ++i)
        rows.row(1 + nv + static_cast<Eigen::Index>(i)) = tok.row(prompt_ids[i]);

    InferenceSession session(model);
    session.feed_rows(rows);
    return session;
}

std::string generate(const BeamVlmModel& model, InferenceSession& session) {
    std::string out;
    for (int step = 0; step < model.cfg.max_answer_tokens; ++step) {
        int best = 0;
        session.last_logits().maxCoeff(&best);
        if (best == text::kEos) break;
        if (best < 256) out.push_back(static_cast<char>(best));
        session.feed_tokens({best});
    }
    return out;
}

std::string generate(const BeamVlmModel& model, const std::vector<scene::Image>& frames,
                     const std::string& prompt) {
    auto session = make_prefix_session(model, frames, prompt);
    return generate(model, session);
}

Prediction predict_beams(const BeamVlmModel& model, const std::vector<scene::Image>& frames,
                         const std::string& prompt, const std::vector<int>& input_beam_history,
                         int codebook_size) {
    Prediction pred;
    pred.raw = generate(model, frames, prompt);
    try {
        pred.beams = text::parse_answer(pred.raw, codebook_size, model.cfg.horizon).beams;
        pred.valid = true;
    } catch (const std::runtime_error&) {
        pred.valid = false;
        if (!input_beam_history.empty())
            pred.beams = text::fallback_answer(input_beam_history, model.cfg.horizon).beams;
        else
            pred.beams.assign(model.cfg.horizon, 1);
    }
    return pred;
}

std::vector<float> score_candidates(const BeamVlmModel& model, InferenceSession& session,
                                    int step_j, int codebook_size) {
    if (step_j < 1 || step_j > model.cfg.horizon)
        throw nn::ShapeError("score_candidates: step out of range");
    const auto base = session.snapshot();
    std::vector<float> scores;
    scores.reserve(codebook_size);
    for (int m = 1; m <= codebook_size; ++m) {
        std::vector<int> toks = text::tokenize(std::to_string(m));
        if (step_j < model.cfg.horizon) {
            toks.push_back(',');
            toks.push_back(' ');
        } else {
            toks.push_back(text::kEos);
        }
        float lp = log_softmax_at(base.logits, toks[0]);
        if (toks.size() > 1) {
            // Feed all but the last; returned row i predicts toks[i+1].
            std::vector<int> feed(toks.begin(), toks.end() - 1);
            const MatF logits = session.feed_tokens(feed);
            for (std::size_t i = 0; i + 1 < toks.size(); ++i)
                lp += log_softmax_at(logits.row(static_cast<Eigen::Index>(i)), toks[i + 1]);
            session.restore(base);
        }
        scores.push_back(lp);
    }
    session.restore(base);
    return scores;
}

std::string config_to_json(const VlmConfig& cfg) {
    json j = {{"d_m", cfg.d_m},
              {"layers", cfg.layers},
              {"heads", cfg.heads},
              {"vocab_size", cfg.vocab_size},
              {"image_size", cfg.image_size},
              {"patch_size", cfg.patch_size},
              {"n_frames", cfg.n_frames},
              {"horizon", cfg.horizon},
              {"max_answer_tokens", cfg.max_answer_tokens},
              {"ffn_dim", cfg.ffn_dim},
              {"max_context", cfg.max_context},
              {"scale_by_model_dim", cfg.scale_by_model_dim}};
    return j.dump();
}

VlmConfig config_from_json(const std::string& body) {
    const json j = json::parse(body);
    VlmConfig cfg;
    cfg.d_m = j.at("d_m");
    cfg.layers = j.at("layers");
    cfg.heads = j.at("heads");
    cfg.vocab_size = j.at("vocab_size");
    cfg.image_size = j.at("image_size");
    cfg.patch_size = j.at("patch_size");
    cfg.n_frames = j.at("n_frames");
    cfg.horizon = j.at("horizon");
    cfg.max_answer_tokens = j.at("max_answer_tokens");
    cfg.ffn_dim = j.at("ffn_dim");
    cfg.max_context = j.at("max_context");
    cfg.scale_by_model_dim = j.at("scale_by_model_dim");
    cfg.validate();
    return cfg;
}

}  // namespace beamvlm::vlm
