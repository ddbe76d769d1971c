// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "beamvlm/phy.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace beamvlm::scene {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OutOfView : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major

    std::uint8_t at(int row, int col) const { return pixels[row * width + col]; }
    std::uint8_t& at(int row, int col) { return pixels[row * width + col]; }
};

struct DegInterval {
    double lo = 0.0;
    double hi = 0.0;
};

struct Obstacle {
    DegInterval azimuth_span;
    DegInterval elevation_span;
    double brightness = 0.3;  // 0..1
};

struct WorldConfig {
    double camera_fov_deg = 90.0;  // fixed azimuth field of view
    int image_width = 64;
    int image_height = 64;
    std::vector<Obstacle> obstacles;
    double uav_brightness = 1.0;
    double uav_size_k = 2.0;  // disc radius = max(1, round(width * k / range))
    DegInterval elevation_range{10.0, 60.0};
    DegInterval range_range{30.0, 80.0};
};

enum class MotionModel { kLinearPass, kArc, kWaypointSpline };

struct TrajectoryConfig {
    MotionModel motion_model = MotionModel::kLinearPass;
    double speed_deg = 1.0;  // azimuth degrees per timestep
    double jitter_std_deg = 0.0;
    int length = 13;  // >= 13: one full sliding window
    std::uint64_t seed = 0;
    std::optional<double> start_azimuth_deg;  // random within sector when unset
    std::optional<double> direction;          // +1 / -1, random when unset
};

struct UavState {
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
    double range_m = 50.0;
};

inline constexpr int kInputFrames = 8;
inline constexpr int kHorizon = 5;
inline constexpr int kWindow = kInputFrames + kHorizon;

/// 8 input frames plus the next 5 ground-truth beam indices.
struct Sample {
    std::vector<Image> frames;
    std::vector<int> target_beams;
    std::vector<int> input_beams;  // beams of the 8 input timesteps (fallback history)
    int sequence_id = 0;
    int offset = 0;
};

struct LabelRecord {
    int seq = 0;
    int t = 0;
    int beam = 0;
    double azimuth_deg = 0.0;
    double elevation_deg = 0.0;
    double range_m = 0.0;
};

enum class Split { kTrain, kTest };

struct SampleRef {
    int seq = 0;
    int offset = 0;
};

struct CodebookParams {
    int num_antennas = 16;
    int num_beams = 32;
    double sector_lo_deg = -45.0;
    double sector_hi_deg = 45.0;
    double spacing_ratio = 0.5;
};

struct DatasetManifest {
    int format_version = 1;
    std::string scenario_name;
    int channels = 1;  // reserved for converted RGB data
    CodebookParams codebook;
    WorldConfig world;
    std::vector<TrajectoryConfig> trajectories;
    std::vector<std::pair<int, int>> sequences;  // (id, length)
    std::vector<SampleRef> samples;
    std::vector<Split> split;  // aligned with samples; empty before split_dataset
};

std::vector<UavState> simulate_trajectory(const TrajectoryConfig& cfg, const WorldConfig& world);

Image render_frame(const UavState& state, const WorldConfig& world);

/// Azimuth-to-column map used by the renderer (and inverted by the pixel
/// oracle baseline): -fov/2 -> 0, +fov/2 -> width-1.
double azimuth_to_column(double azimuth_deg, const WorldConfig& world);
double column_to_azimuth(double column, const WorldConfig& world);

std::vector<int> label_sequence(const std::vector<UavState>& states, const phy::BeamCodebook& cb);

DatasetManifest build_dataset(const WorldConfig& world,
                              const std::vector<TrajectoryConfig>& traj_cfgs,
                              const phy::BeamCodebook& cb, const std::string& out_dir,
                              const std::string& scenario_name = "scenario");

DatasetManifest split_dataset(DatasetManifest manifest, double train_fraction,
                              std::uint64_t seed);

void store_manifest(const DatasetManifest& m, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);

void write_pgm(const Image& img, const std::string& path);
Image read_pgm(const std::string& path);

phy::BeamCodebook codebook_from_params(const CodebookParams& p);

/// Read-only dataset view with cached labels; safe to share across threads.
class Dataset {
public:
    Dataset(DatasetManifest manifest, std::string root_dir);

    const DatasetManifest& manifest() const { return manifest_; }
    int size() const { return static_cast<int>(manifest_.samples.size()); }
    Sample load_sample(int index) const;
    const LabelRecord& label(int seq, int t) const;
    std::vector<int> indices(Split split) const;

private:
    DatasetManifest manifest_;
    std::string root_;
    std::vector<std::vector<LabelRecord>> labels_;  // [seq][t]
};

Sample load_sample(const DatasetManifest& manifest, const std::string& root_dir, int index);

}  // namespace beamvlm::scene
