// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/nn/adamw.hpp"
#include "beamvlm/nn/autograd.hpp"
#include "beamvlm/nn/param.hpp"
#include "beamvlm/phy.hpp"
#include "beamvlm/scene.hpp"
#include "beamvlm/train.hpp"

#include <string>
#include <vector>

namespace beamvlm::baseline {

struct UavNotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class CellType { kElman, kLstm };

struct BaselineConfig {
    CellType cell_type = CellType::kLstm;
    int d_m = 128;  // feature width from the shared patch-embedder design
    int hidden_size = 128;
    int image_size = 32;
    int patch_size = 8;
    int n_frames = 8;
    int horizon = 5;
    int num_beams = 32;

    int patches_per_frame() const {
        const int g = image_size / patch_size;
        return g * g;
    }
};

/// Discriminative recurrent classifier: per-frame patch embedding mean-pooled
/// to one feature vector, consumed chronologically, with a
/// (horizon x num_beams) classification head on the final hidden state.
struct RecurrentClassifier {
    BaselineConfig cfg;
    std::vector<nn::ParamPtr> params;

    static RecurrentClassifier init(const BaselineConfig& cfg, std::uint64_t seed);
    nn::ParamPtr find(const std::string& name) const;
};

/// horizon x num_beams probability matrix; each row sums to 1.
nn::MatF baseline_forward(const RecurrentClassifier& clf,
                          const std::vector<scene::Image>& frames);

struct BaselineTrainConfig {
    int epochs = 30;
    int batch_size = 16;
    float learning_rate = 1e-3f;
    float weight_decay = 1e-2f;
    std::uint64_t seed = 0;
    std::optional<float> grad_clip = 1.0f;
};

train::TrainResult train_baseline(RecurrentClassifier& clf, const scene::Dataset& dataset,
                                  const BaselineTrainConfig& cfg);

/// Geometry upper bound: recovers the UAV azimuth track from pixel centroids
/// of the input frames, fits a constant-velocity line, extrapolates over the
/// horizon and maps each azimuth to its optimal codebook beam.
std::vector<int> oracle_pixel_baseline(const std::vector<scene::Image>& frames,
                                       const phy::BeamCodebook& cb,
                                       const scene::WorldConfig& world,
                                       int detection_threshold = 200, int horizon = 5);

void store_baseline(const RecurrentClassifier& clf, const std::string& path);
RecurrentClassifier load_baseline(const std::string& path);

}  // namespace beamvlm::baseline
