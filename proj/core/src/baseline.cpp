// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/baseline.hpp"

#include "beamvlm/vlm.hpp"

#include <json.hpp>

#include <cmath>

namespace beamvlm::baseline {

using nn::MatF;
using nlohmann::json;

namespace {

vlm::VlmConfig patch_view(const BaselineConfig& cfg) {
    vlm::VlmConfig v;
    v.d_m = cfg.d_m;
    v.image_size = cfg.image_size;
    v.patch_size = cfg.patch_size;
    v.n_frames = cfg.n_frames;
    v.horizon = cfg.horizon;
    return v;
}

struct Refs {
    int patch_proj, patch_pos, patch_frame, cell_wx, cell_wh, head;
};

Refs refs_of(const RecurrentClassifier& clf) {
    Refs r{};
    for (int i = 0; i < static_cast<int>(clf.params.size()); ++i) {
        const auto& n = clf.params[i]->name;
        if (n == "patch.proj") r.patch_proj = i;
        else if (n == "patch.pos") r.patch_pos = i;
        else if (n == "patch.frame") r.patch_frame = i;
        else if (n == "cell.wx") r.cell_wx = i;
        else if (n == "cell.wh") r.cell_wh = i;
        else if (n == "head") r.head = i;
    }
    return r;
}

/// horizon x num_beams logits for one sample.
nn::NodePtr<float> logits_graph(nn::Tape<float>& tape, const RecurrentClassifier& clf,
                                const nn::BoundParams<float>& bound,
                                const std::vector<MatF>& frame_patches) {
    const auto& cfg = clf.cfg;
    const Refs r = refs_of(clf);
    const int H = cfg.hidden_size;

    auto h = tape.leaf(MatF::Zero(1, H), false);
    auto c = tape.leaf(MatF::Zero(1, H), false);
    for (int f = 0; f < cfg.n_frames; ++f) {
        auto patches = tape.leaf(frame_patches[f], false);
        auto emb = nn::add(tape, nn::linear(tape, patches, bound.leaves[r.patch_proj]),
                           bound.leaves[r.patch_pos]);
        auto frame_row = nn::gather(tape, bound.leaves[r.patch_frame], std::vector<int>{f});
        auto x = nn::mean_rows(tape, nn::add_row(tape, emb, frame_row));

        auto pre = nn::add(tape, nn::linear(tape, x, bound.leaves[r.cell_wx]),
                           nn::linear(tape, h, bound.leaves[r.cell_wh]));
        if (cfg.cell_type == CellType::kElman) {
            h = nn::tanh_op(tape, pre);
        } else {
            auto i_g = nn::sigmoid_op(tape, nn::slice_cols(tape, pre, 0, H));
            auto f_g = nn::sigmoid_op(tape, nn::slice_cols(tape, pre, H, H));
            auto g_g = nn::tanh_op(tape, nn::slice_cols(tape, pre, 2 * H, H));
            auto o_g = nn::sigmoid_op(tape, nn::slice_cols(tape, pre, 3 * H, H));
            c = nn::add(tape, nn::hadamard(tape, f_g, c), nn::hadamard(tape, i_g, g_g));
            h = nn::hadamard(tape, o_g, nn::tanh_op(tape, c));
        }
    }
    auto flat = nn::linear(tape, h, bound.leaves[r.head]);
    return nn::reshape_row(tape, flat, cfg.horizon, cfg.num_beams);
}

}  // namespace

RecurrentClassifier RecurrentClassifier::init(const BaselineConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    RecurrentClassifier clf;
    clf.cfg = cfg;
    auto add = [&](const std::string& name, MatF value) {
        clf.params.push_back(std::make_shared<nn::Param>(name, std::move(value)));
    };
    const float si = 0.02f;
    const int gates = cfg.cell_type == CellType::kLstm ? 4 : 1;
    add("patch.proj", nn::gaussian_init(cfg.d_m, cfg.patch_size * cfg.patch_size, si, rng));
    add("patch.pos", nn::gaussian_init(cfg.patches_per_frame(), cfg.d_m, si, rng));
    add("patch.frame", nn::gaussian_init(cfg.n_frames, cfg.d_m, si, rng));
    add("cell.wx", nn::gaussian_init(gates * cfg.hidden_size, cfg.d_m, si, rng));
    add("cell.wh", nn::gaussian_init(gates * cfg.hidden_size, cfg.hidden_size, si, rng));
    add("head", nn::gaussian_init(cfg.horizon * cfg.num_beams, cfg.hidden_size, si, rng));
    return clf;
}

nn::ParamPtr RecurrentClassifier::find(const std::string& name) const {
    for (const auto& p : params)
        if (p->name == name) return p;
    throw nn::GraphError("RecurrentClassifier::find: no parameter named " + name);
}

nn::MatF baseline_forward(const RecurrentClassifier& clf,
                          const std::vector<scene::Image>& frames) {
    const auto patches = vlm::frames_to_patches(frames, patch_view(clf.cfg));
    nn::Tape<float> tape;
    nn::BoundParams<float> bound(tape, clf.params, true);
    auto logits = logits_graph(tape, clf, bound, patches);
    MatF probs(clf.cfg.horizon, clf.cfg.num_beams);
    for (int r = 0; r < probs.rows(); ++r) {
        const float mx = logits->value.row(r).maxCoeff();
        Eigen::RowVectorXf e = (logits->value.row(r).array() - mx).exp();
        probs.row(r) = e / e.sum();
    }
    return probs;
}

train::TrainResult train_baseline(RecurrentClassifier& clf, const scene::Dataset& dataset,
                                  const BaselineTrainConfig& cfg) {
    auto train_idx = dataset.indices(scene::Split::kTrain);
    if (train_idx.empty() && dataset.manifest().split.empty()) {
        train_idx.resize(dataset.size());
        for (int i = 0; i < dataset.size(); ++i) train_idx[i] = i;
    }
    if (train_idx.empty()) throw train::IoError("train_baseline: no train samples");

    struct Prepared {
        std::vector<MatF> patches;
        std::vector<int> targets;  // 0-based beam classes
    };
    std::vector<Prepared> prepared;
    prepared.reserve(train_idx.size());
    for (int idx : train_idx) {
        const auto s = dataset.load_sample(idx);
        Prepared p;
        p.patches = vlm::frames_to_patches(s.frames, patch_view(clf.cfg));
        for (int b : s.target_beams) p.targets.push_back(b - 1);
        prepared.push_back(std::move(p));
    }

    nn::OptimizerState opt;
    opt.learning_rate = cfg.learning_rate;
    opt.weight_decay = cfg.weight_decay;

    train::TrainResult result;
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5bd1e995ULL);
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng() % i]);
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), at + cfg.batch_size);
            nn::Tape<float> tape;
            nn::BoundParams<float> bound(tape, clf.params, true);
            std::vector<nn::NodePtr<float>> losses;
            for (std::size_t i = at; i < end; ++i) {
                const auto& p = prepared[order[i]];
                auto logits = logits_graph(tape, clf, bound, p.patches);
                losses.push_back(nn::cross_entropy(tape, logits, p.targets));
            }
            auto loss = nn::mean_scalar(tape, losses);
            tape.backward(loss);
            auto grads = bound.gradients(clf.params);
            if (!std::isfinite(loss->value(0, 0)))
                throw train::DivergenceError("train_baseline: non-finite loss");
            if (cfg.grad_clip) nn::clip_global_norm(grads, *cfg.grad_clip);
            nn::adamw_step(opt, clf.params, grads);
            ++step;
            result.curve.push_back({step, loss->value(0, 0), opt.learning_rate, std::nullopt});
        }
    }
    result.steps = step;
    result.final_loss = result.curve.empty() ? 0.0f : result.curve.back().loss;
    return result;
}

std::vector<int> oracle_pixel_baseline(const std::vector<scene::Image>& frames,
                                       const phy::BeamCodebook& cb,
                                       const scene::WorldConfig& world, int detection_threshold,
                                       int horizon) {
    // Column centroid of above-threshold pixels per frame.
    std::vector<double> ts;
    std::vector<double> azimuths;
    for (std::size_t f = 0; f < frames.size(); ++f) {
        const auto& img = frames[f];
        double sum_c = 0.0;
        long count = 0;
        for (int r = 0; r < img.height; ++r) {
            for (int c = 0; c < img.width; ++c) {
                if (img.at(r, c) >= detection_threshold) {
                    sum_c += c;
                    ++count;
                }
            }
        }
        if (count == 0) continue;
        ts.push_back(static_cast<double>(f));
        azimuths.push_back(scene::column_to_azimuth(sum_c / count, world));
    }
    if (ts.empty() || ts.back() != static_cast<double>(frames.size() - 1))
        throw UavNotFound("oracle_pixel_baseline: no UAV pixels in the final frame");

    // Constant-velocity least-squares fit over the detected track.
    double vel = 0.0;
    const double t_last = ts.back();
    const double az_last = azimuths.back();
    if (ts.size() >= 2) {
        double mt = 0.0, ma = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            mt += ts[i];
            ma += azimuths[i];
        }
        mt /= ts.size();
        ma /= ts.size();
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            num += (ts[i] - mt) * (azimuths[i] - ma);
            den += (ts[i] - mt) * (ts[i] - mt);
        }
        if (den > 0.0) vel = num / den;
    }

    constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
    const double az_lo = cb.beam_angles.front() / kDegToRad;
    const double az_hi = cb.beam_angles.back() / kDegToRad;
    std::vector<int> beams;
    for (int k = 1; k <= horizon; ++k) {
        double az = az_last + vel * ((t_last + k) - t_last);
        az = std::max(az_lo, std::min(az_hi, az));
        const auto h = phy::make_channel({{std::complex<double>{1.0, 0.0}, az * kDegToRad}},
                                         cb.num_antennas, cb.spacing_ratio);
        beams.push_back(phy::optimal_beam(h, cb));
    }
    return beams;
}

namespace {

std::string baseline_config_json(const BaselineConfig& cfg) {
    json j = {{"cell_type", cfg.cell_type == CellType::kLstm ? "lstm" : "elman"},
              {"d_m", cfg.d_m},
              {"hidden_size", cfg.hidden_size},
              {"image_size", cfg.image_size},
              {"patch_size", cfg.patch_size},
              {"n_frames", cfg.n_frames},
              {"horizon", cfg.horizon},
              {"num_beams", cfg.num_beams}};
    return j.dump();
}

BaselineConfig baseline_config_from_json(const std::string& body) {
    const json j = json::parse(body);
    BaselineConfig cfg;
    cfg.cell_type = j.at("cell_type") == "lstm" ? CellType::kLstm : CellType::kElman;
    cfg.d_m = j.at("d_m");
    cfg.hidden_size = j.at("hidden_size");
    cfg.image_size = j.at("image_size");
    cfg.patch_size = j.at("patch_size");
    cfg.n_frames = j.at("n_frames");
    cfg.horizon = j.at("horizon");
    cfg.num_beams = j.at("num_beams");
    return cfg;
}

}  // namespace

void store_baseline(const RecurrentClassifier& clf, const std::string& path) {
    train::RawCheckpoint ckpt;
    ckpt.model_kind =
        clf.cfg.cell_type == CellType::kLstm ? "baseline-lstm" : "baseline-elman";
    ckpt.config_json = baseline_config_json(clf.cfg);
    for (const auto& p : clf.params) ckpt.arrays.push_back({p->name, p->value, p->trainable});
    train::store_raw_checkpoint(ckpt, path);
}

RecurrentClassifier load_baseline(const std::string& path) {
    const auto ckpt = train::load_raw_checkpoint(path);
    if (ckpt.model_kind != "baseline-lstm" && ckpt.model_kind != "baseline-elman")
        throw train::CorruptionError("load_baseline: model_kind is " + ckpt.model_kind);
    auto clf = RecurrentClassifier::init(baseline_config_from_json(ckpt.config_json), 0);
    if (clf.params.size() != ckpt.arrays.size())
        throw train::CorruptionError("load_baseline: parameter count mismatch");
    for (std::size_t i = 0; i < clf.params.size(); ++i) {
        if (clf.params[i]->name != ckpt.arrays[i].name)
            throw train::CorruptionError("load_baseline: parameter order mismatch");
        clf.params[i]->value = ckpt.arrays[i].value;
    }
    return clf;
}

}  // namespace beamvlm::baseline
