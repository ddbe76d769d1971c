// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/baseline.hpp"
#include "beamvlm/scene.hpp"
#include "beamvlm/vlm.hpp"

#include <array>
#include <functional>
#include <string>
#include <vector>

namespace beamvlm::eval {

struct LengthMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyReport : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Full candidate ordering per horizon step, best first. Each step lists every
/// beam index exactly once so Top-K is defined for any K up to the codebook
/// size.
struct RankedPrediction {
    std::vector<std::vector<int>> steps;
    bool valid = true;
};

inline constexpr std::array<int, 4> kReportKs{1, 2, 3, 5};

struct MetricsTable {
    std::string predictor;
    int horizon = 0;
    // topk[step][i] is the Top-kReportKs[i] accuracy at horizon step+1.
    std::vector<std::array<double, 4>> topk;
    long n = 0;
    double invalid_rate = 0.0;
};

/// Fraction of samples whose label at the given step (0-based) appears among
/// the first k candidates.
double topk_accuracy(const std::vector<RankedPrediction>& preds,
                     const std::vector<std::vector<int>>& labels, int k, int horizon_step);

/// Deterministic full ranking used for malformed outputs and point
/// predictions: the given beam first, then neighbours outward (lower index
/// before higher at equal distance).
std::vector<int> fallback_ranking(int beam, int num_beams);

using RankFn = std::function<RankedPrediction(const scene::Sample&)>;

RankFn vlm_predictor(const vlm::BeamVlmModel& model, const std::string& prompt,
                     int codebook_size = 32);
RankFn baseline_predictor(const baseline::RecurrentClassifier& clf);
RankFn oracle_predictor(const phy::BeamCodebook& cb, const scene::WorldConfig& world,
                        int detection_threshold = 200);

/// Runs the predictor over the test split and accumulates Top-K counts.
/// Fallback predictions are scored like any other, never dropped.
MetricsTable evaluate(const std::string& name, const RankFn& predictor,
                      const scene::Dataset& dataset);

struct AblationReport {
    std::vector<std::string> names;  // names[0] is the full prompt
    std::vector<MetricsTable> tables;
};

/// Same weights and test split under each rendered prompt variant; the first
/// variant must be the full prompt (delta reference).
AblationReport ablate_prompt(const vlm::BeamVlmModel& model, const scene::Dataset& dataset,
                             const std::vector<std::pair<std::string, std::string>>& variants);

// Header: predictor,horizon,top1,top2,top3,top5,n,invalid_rate
void emit_csv(const std::vector<MetricsTable>& tables, const std::string& path);
// Header: variant,horizon,top1,delta_top1_vs_full
void emit_ablation_csv(const AblationReport& report, const std::string& path);
// Self-contained 800x500 line chart, one series per table, x = horizon,
// y = Top-k accuracy with labels at 0.1 intervals.
void emit_svg(const std::vector<MetricsTable>& tables, const std::string& path, int k = 1);

std::vector<MetricsTable> parse_csv(const std::string& path);

}  // namespace beamvlm::eval
