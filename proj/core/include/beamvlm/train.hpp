// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/adamw.hpp"
#include "beamvlm/scene.hpp"
#include "beamvlm/vlm.hpp"

#include <optional>
#include <string>
#include <vector>

namespace beamvlm::train {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TrainMode { kFull, kLoraOnly };

struct TrainConfig {
    int epochs = 30;
    int batch_size = 16;
    float learning_rate = 3e-4f;  // Table-style fine-tuning preset: 1e-5
    float weight_decay = 1e-2f;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::kFull;
    std::optional<float> grad_clip = 1.0f;  // global norm
    int eval_every = 0;                     // steps between held-out Top-1 probes; 0 = off
    int threads = 1;
    std::string scenario_tag = "UAV";
};

struct StepLog {
    long step = 0;
    float loss = 0.0f;
    float lr = 0.0f;
    std::optional<float> top1_holdout;
};

struct TrainResult {
    std::vector<StepLog> curve;
    long steps = 0;
    float final_loss = 0.0f;
};

/// Batch-mean teacher-forced cross-entropy over answer+EOS positions only.
/// Targets are the canonical renderings of the ground-truth beams; the model
/// never conditions on its own outputs.
float teacher_forcing_loss(const vlm::BeamVlmModel& model,
                           const std::vector<scene::Sample>& batch, const std::string& prompt);

TrainResult train(vlm::BeamVlmModel& model, const scene::Dataset& dataset,
                  const TrainConfig& cfg, const std::string& log_path = "");

/// LoRA-only fine-tuning: attaches adapters when absent, freezes the base,
/// and trains A/B matrices only.
TrainResult finetune_lora(vlm::BeamVlmModel& model, const scene::Dataset& dataset,
                          TrainConfig cfg, int rank = 8, float alpha = 16.0f,
                          const std::string& log_path = "");

// ---------------------------------------------------------------------------
// Checkpoint format: magic + JSON header + little-endian f32 arrays + CRC32.

struct RawCheckpoint {
    int format_version = 1;
    std::string model_kind = "vlm";
    std::string config_json;
    bool lora_enabled = false;
    int lora_rank = 0;
    float lora_alpha = 16.0f;

    struct Entry {
        std::string name;
        nn::MatF value;
        bool trainable = true;
    };
    std::vector<Entry> arrays;

    std::optional<nn::OptimizerState> opt_state;
    std::vector<nn::MatF> opt_m;  // aligned with arrays when opt_state is set
    std::vector<nn::MatF> opt_v;

    std::uint64_t seed = 0;
    long step = 0;
    float loss = 0.0f;
};

void store_raw_checkpoint(const RawCheckpoint& ckpt, const std::string& path);
RawCheckpoint load_raw_checkpoint(const std::string& path);

RawCheckpoint checkpoint_from_model(const vlm::BeamVlmModel& model,
                                    const std::optional<nn::OptimizerState>& opt = std::nullopt);
vlm::BeamVlmModel model_from_checkpoint(const RawCheckpoint& ckpt);

void store_checkpoint(const vlm::BeamVlmModel& model, const std::string& path);
vlm::BeamVlmModel load_checkpoint(const std::string& path);

/// FNV-1a over the base (non-LoRA) parameter bytes; unchanged across
/// LoRA-only fine-tuning.
std::uint64_t base_weight_hash(const vlm::BeamVlmModel& model);

}  // namespace beamvlm::train
