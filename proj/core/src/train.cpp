// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/train.hpp"

#include <json.hpp>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

namespace beamvlm::train {

using nn::MatF;
using nlohmann::json;
using vlm::BeamVlmModel;

namespace {

struct PreparedSample {
    std::vector<MatF> patches;
    vlm::SequenceLayout layout;
    std::vector<int> input_beams;
    std::vector<int> target_beams;
};

PreparedSample prepare_sample(const BeamVlmModel& model, const scene::Sample& s,
                              const std::string& prompt, int codebook_size) {
    PreparedSample p;
    p.patches = vlm::frames_to_patches(s.frames, model.cfg);
    const std::string answer = text::format_answer(s.target_beams, codebook_size);
    p.layout = vlm::assemble_sequence(model.cfg, prompt, answer, /*with_answer=*/true);
    p.input_beams = s.input_beams;
    p.target_beams = s.target_beams;
    return p;
}

float batch_loss_and_grads(const BeamVlmModel& model, const std::vector<const PreparedSample*>& batch,
                           std::vector<MatF>& grads_out) {
    nn::Tape<float> tape;
    nn::BoundParams<float> bound(tape, model.params, /*trainable_only_grads=*/true);
    std::vector<nn::NodePtr<float>> losses;
    losses.reserve(batch.size());
    for (const auto* s : batch)
        losses.push_back(vlm::sample_loss_graph(tape, model, bound, s->patches, s->layout));
    auto loss = nn::mean_scalar(tape, losses);
    tape.backward(loss);
    grads_out = bound.gradients(model.params);
    return loss->value(0, 0);
}

float holdout_top1(const BeamVlmModel& model, const scene::Dataset& dataset,
                   const std::vector<int>& test_idx, const std::string& prompt, int codebook_size,
                   std::size_t max_samples = 32) {
    if (test_idx.empty()) return 0.0f;
    std::size_t n = std::min(max_samples, test_idx.size());
    int hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = dataset.load_sample(test_idx[i]);
        const auto pred =
            vlm::predict_beams(model, s.frames, prompt, s.input_beams, codebook_size);
        if (pred.beams[0] == s.target_beams[0]) ++hits;
    }
    return static_cast<float>(hits) / static_cast<float>(n);
}

}  // namespace

float teacher_forcing_loss(const BeamVlmModel& model, const std::vector<scene::Sample>& batch,
                           const std::string& prompt) {
    if (batch.empty()) throw nn::EmptyMask("teacher_forcing_loss: empty batch");
    // Codebook size is implied by the largest representable target; use the
    // max over the batch so canonical formatting never rejects a label.
    int m = 2;
    for (const auto& s : batch)
        for (int b : s.target_beams) m = std::max(m, b);
    nn::Tape<float> tape;
    nn::BoundParams<float> bound(tape, model.params, true);
    std::vector<nn::NodePtr<float>> losses;
    for (const auto& s : batch) {
        const auto p = prepare_sample(model, s, prompt, m);
        losses.push_back(vlm::sample_loss_graph(tape, model, bound, p.patches, p.layout));
    }
    return nn::mean_scalar(tape, losses)->value(0, 0);
}

TrainResult train(BeamVlmModel& model, const scene::Dataset& dataset, const TrainConfig& cfg,
                  const std::string& log_path) {
    const int m = dataset.manifest().codebook.num_beams;
    const std::string prompt =
        text::build_prompt(m, model.cfg.n_frames, model.cfg.horizon, cfg.scenario_tag);

    auto train_idx = dataset.indices(scene::Split::kTrain);
    if (train_idx.empty() && dataset.manifest().split.empty()) {
        train_idx.resize(dataset.size());
        for (int i = 0; i < dataset.size(); ++i) train_idx[i] = i;
    }
    if (train_idx.empty()) throw IoError("train: dataset has no train samples");
    const auto test_idx = dataset.indices(scene::Split::kTest);

    // Patch matrices and layouts are precomputed once; they are read-only
    // during the epoch loop.
    std::vector<PreparedSample> prepared;
    prepared.reserve(train_idx.size());
    for (int idx : train_idx)
        prepared.push_back(prepare_sample(model, dataset.load_sample(idx), prompt, m));

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path);
        if (!log) throw IoError("train: cannot open log " + log_path);
    }

    nn::OptimizerState opt;
    opt.learning_rate = cfg.learning_rate;
    opt.weight_decay = cfg.weight_decay;

    TrainResult result;
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(prepared.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const int threads = std::max(1, cfg.threads);
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng() % i]);
        for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), at + cfg.batch_size);
            std::vector<const PreparedSample*> batch;
            for (std::size_t i = at; i < end; ++i) batch.push_back(&prepared[order[i]]);

            float loss_value = 0.0f;
            std::vector<MatF> grads;
            if (threads == 1 || batch.size() == 1) {
                loss_value = batch_loss_and_grads(model, batch, grads);
            } else {
                // Shard the batch; shard losses/grads merge in index order so
                // the reduction is reproducible for a fixed thread count.
                const int n_shards = std::min<int>(threads, static_cast<int>(batch.size()));
                std::vector<std::vector<const PreparedSample*>> shards(n_shards);
                for (std::size_t i = 0; i < batch.size(); ++i)
                    shards[i % n_shards].push_back(batch[i]);
                std::vector<float> shard_loss(n_shards, 0.0f);
                std::vector<std::vector<MatF>> shard_grads(n_shards);
                std::vector<std::thread> pool;
                for (int t = 0; t < n_shards; ++t) {
                    pool.emplace_back([&, t] {
                        shard_loss[t] =
                            batch_loss_and_grads(model, shards[t], shard_grads[t]);
                    });
                }
                for (auto& th : pool) th.join();
                grads = std::move(shard_grads[0]);
                const float w0 = static_cast<float>(shards[0].size()) / batch.size();
                for (auto& g : grads) g *= w0;
                loss_value = shard_loss[0] * w0;
                for (int t = 1; t < n_shards; ++t) {
                    const float w = static_cast<float>(shards[t].size()) / batch.size();
                    loss_value += shard_loss[t] * w;
                    for (std::size_t i = 0; i < grads.size(); ++i)
                        grads[i] += w * shard_grads[t][i];
                }
            }

            if (!std::isfinite(loss_value))
                throw DivergenceError("train: non-finite loss at step " + std::to_string(step));
            if (cfg.grad_clip) nn::clip_global_norm(grads, *cfg.grad_clip);
            nn::adamw_step(opt, model.params, grads);
            ++step;

            StepLog entry{step, loss_value, opt.learning_rate, std::nullopt};
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0)
                entry.top1_holdout = holdout_top1(model, dataset, test_idx, prompt, m);
            result.curve.push_back(entry);
            if (log) {
                json j = {{"step", entry.step}, {"loss", entry.loss}, {"lr", entry.lr}};
                if (entry.top1_holdout) j["top1_holdout"] = *entry.top1_holdout;
                log << j.dump() << "\n";
            }
        }
    }
    result.steps = step;
    result.final_loss = result.curve.empty() ? 0.0f : result.curve.back().loss;
    return result;
}

TrainResult finetune_lora(BeamVlmModel& model, const scene::Dataset& dataset, TrainConfig cfg,
                          int rank, float alpha, const std::string& log_path) {
    if (!model.lora_enabled) model.add_lora(rank, alpha, cfg.seed ^ 0xa5a5a5a5ULL);
    model.freeze_base();
    cfg.mode = TrainMode::kLoraOnly;
    return train(model, dataset, cfg, log_path);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'B', 'V', 'L', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const std::string& buf, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

std::uint64_t read_u64(const std::string& buf, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

void append_matrix(std::string& buf, const MatF& m) {
    // Row-major storage is contiguous; stream the floats little-endian.
    static_assert(sizeof(float) == 4);
    const auto* bytes = reinterpret_cast<const char*>(m.data());
    buf.append(bytes, static_cast<std::size_t>(m.size()) * 4);
}

MatF read_matrix(const std::string& buf, std::size_t& at, int rows, int cols) {
    MatF m(rows, cols);
    const std::size_t n = static_cast<std::size_t>(m.size()) * 4;
    if (at + n > buf.size()) throw CorruptionError("checkpoint: truncated array data");
    std::memcpy(m.data(), buf.data() + at, n);
    at += n;
    return m;
}

}  // namespace

void store_raw_checkpoint(const RawCheckpoint& ckpt, const std::string& path) {
    json header;
    header["format_version"] = ckpt.format_version;
    header["model_kind"] = ckpt.model_kind;
    header["config"] = json::parse(ckpt.config_json);
    header["lora"] = {{"enabled", ckpt.lora_enabled},
                      {"rank", ckpt.lora_rank},
                      {"alpha", ckpt.lora_alpha}};
    header["metadata"] = {{"seed", ckpt.seed}, {"step", ckpt.step}, {"loss", ckpt.loss}};
    header["arrays"] = json::array();
    for (const auto& e : ckpt.arrays)
        header["arrays"].push_back({{"name", e.name},
                                    {"rows", static_cast<int>(e.value.rows())},
                                    {"cols", static_cast<int>(e.value.cols())},
                                    {"trainable", e.trainable}});
    if (ckpt.opt_state) {
        const auto& o = *ckpt.opt_state;
        header["optimizer"] = {{"step", o.step},       {"learning_rate", o.learning_rate},
                               {"weight_decay", o.weight_decay}, {"beta1", o.beta1},
                               {"beta2", o.beta2},     {"eps", o.eps}};
    }
    const std::string hdr = header.dump();

    std::string buf;
    buf.append(kMagic, 4);
    append_u32(buf, kFormatVersion);
    append_u64(buf, hdr.size());
    buf += hdr;
    for (const auto& e : ckpt.arrays) append_matrix(buf, e.value);
    if (ckpt.opt_state) {
        for (const auto& m : ckpt.opt_m) append_matrix(buf, m);
        for (const auto& m : ckpt.opt_v) append_matrix(buf, m);
    }
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    append_u32(buf, crc);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("store_checkpoint: cannot open " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("store_checkpoint: write failed for " + path);
}

RawCheckpoint load_raw_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 20) throw CorruptionError("load_checkpoint: file too small");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw CorruptionError("load_checkpoint: bad magic");
    const std::uint32_t version = read_u32(buf, 4);
    if (version != kFormatVersion)
        throw VersionError("load_checkpoint: unsupported version " + std::to_string(version));

    const std::uint32_t stored_crc = read_u32(buf, buf.size() - 4);
    const auto computed_crc = static_cast<std::uint32_t>(crc32(
        0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (stored_crc != computed_crc) throw CorruptionError("load_checkpoint: CRC mismatch");

    const std::uint64_t hdr_len = read_u64(buf, 8);
    if (16 + hdr_len + 4 > buf.size()) throw CorruptionError("load_checkpoint: truncated header");
    json header;
    try {
        header = json::parse(buf.substr(16, hdr_len));
    } catch (const json::parse_error& e) {
        throw CorruptionError(std::string("load_checkpoint: header parse: ") + e.what());
    }

    RawCheckpoint ckpt;
    ckpt.format_version = header.at("format_version");
    ckpt.model_kind = header.at("model_kind");
    ckpt.config_json = header.at("config").dump();
    ckpt.lora_enabled = header.at("lora").at("enabled");
    ckpt.lora_rank = header.at("lora").at("rank");
    ckpt.lora_alpha = header.at("lora").at("alpha");
    ckpt.seed = header.at("metadata").at("seed");
    ckpt.step = header.at("metadata").at("step");
    ckpt.loss = header.at("metadata").at("loss");

    std::size_t at = 16 + hdr_len;
    for (const auto& a : header.at("arrays")) {
        RawCheckpoint::Entry e;
        e.name = a.at("name");
        e.trainable = a.at("trainable");
        e.value = read_matrix(buf, at, a.at("rows"), a.at("cols"));
        ckpt.arrays.push_back(std::move(e));
    }
    if (header.contains("optimizer")) {
        nn::OptimizerState o;
        o.step = header["optimizer"].at("step");
        o.learning_rate = header["optimizer"].at("learning_rate");
        o.weight_decay = header["optimizer"].at("weight_decay");
        o.beta1 = header["optimizer"].at("beta1");
        o.beta2 = header["optimizer"].at("beta2");
        o.eps = header["optimizer"].at("eps");
        ckpt.opt_state = o;
        for (const auto& e : ckpt.arrays) {
            ckpt.opt_m.push_back(read_matrix(buf, at, static_cast<int>(e.value.rows()),
                                             static_cast<int>(e.value.cols())));
        }
        for (const auto& e : ckpt.arrays) {
            ckpt.opt_v.push_back(read_matrix(buf, at, static_cast<int>(e.value.rows()),
                                             static_cast<int>(e.value.cols())));
        }
    }
    if (at != buf.size() - 4) throw CorruptionError("load_checkpoint: trailing bytes");
    return ckpt;
}

RawCheckpoint checkpoint_from_model(const BeamVlmModel& model,
                                    const std::optional<nn::OptimizerState>& opt) {
    RawCheckpoint ckpt;
    ckpt.model_kind = "vlm";
    ckpt.config_json = vlm::config_to_json(model.cfg);
    ckpt.lora_enabled = model.lora_enabled;
    ckpt.lora_rank = model.lora_rank;
    ckpt.lora_alpha = model.lora_alpha;
    for (const auto& p : model.params)
        ckpt.arrays.push_back({p->name, p->value, p->trainable});
    if (opt) {
        ckpt.opt_state = opt;
        for (const auto& p : model.params) {
            ckpt.opt_m.push_back(p->m);
            ckpt.opt_v.push_back(p->v);
        }
    }
    return ckpt;
}

vlm::BeamVlmModel model_from_checkpoint(const RawCheckpoint& ckpt) {
    if (ckpt.model_kind != "vlm")
        throw CorruptionError("model_from_checkpoint: model_kind is " + ckpt.model_kind);
    const auto cfg = vlm::config_from_json(ckpt.config_json);
    auto model = BeamVlmModel::init(cfg, /*seed=*/0);
    if (ckpt.lora_enabled) model.add_lora(ckpt.lora_rank, ckpt.lora_alpha, 0);
    if (model.params.size() != ckpt.arrays.size())
        throw CorruptionError("model_from_checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& e = ckpt.arrays[i];
        auto& p = *model.params[i];
        if (p.name != e.name)
            throw CorruptionError("model_from_checkpoint: parameter order mismatch at " + e.name);
        if (p.value.rows() != e.value.rows() || p.value.cols() != e.value.cols())
            throw CorruptionError("model_from_checkpoint: shape mismatch for " + e.name);
        p.value = e.value;
        p.trainable = e.trainable;
        if (ckpt.opt_state) {
            p.m = ckpt.opt_m[i];
            p.v = ckpt.opt_v[i];
        }
    }
    return model;
}

void store_checkpoint(const BeamVlmModel& model, const std::string& path) {
    store_raw_checkpoint(checkpoint_from_model(model), path);
}

vlm::BeamVlmModel load_checkpoint(const std::string& path) {
    return model_from_checkpoint(load_raw_checkpoint(path));
}

std::uint64_t base_weight_hash(const BeamVlmModel& model) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : model.params) {
        if (p->name.find(".lora_") != std::string::npos) continue;
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
        const std::size_t n = static_cast<std::size_t>(p->value.size()) * sizeof(float);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace beamvlm::train
