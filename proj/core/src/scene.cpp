// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/scene.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

namespace beamvlm::scene {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDegToRad = 3.14159265358979323846 / 180.0;

double clamp(double v, double lo, double hi) { return std::max(lo, std::min(hi, v)); }

// Reflect v into [lo, hi].
double reflect(double v, double lo, double hi) {
    while (v < lo || v > hi) {
        if (v < lo) v = 2.0 * lo - v;
        if (v > hi) v = 2.0 * hi - v;
    }
    return v;
}

bool inside(double v, const DegInterval& iv) { return v >= iv.lo && v <= iv.hi; }

}  // namespace

std::vector<UavState> simulate_trajectory(const TrajectoryConfig& cfg, const WorldConfig& world) {
    if (cfg.length <= 0) throw ConfigError("simulate_trajectory: non-positive length");
    const double half_fov = world.camera_fov_deg / 2.0;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const double az_lo = -half_fov;
    const double az_hi = half_fov;
    double az = cfg.start_azimuth_deg
                    ? *cfg.start_azimuth_deg
                    : az_lo + (az_hi - az_lo) * uni(rng);
    double dir = cfg.direction ? *cfg.direction : (uni(rng) < 0.5 ? -1.0 : 1.0);

    double el = world.elevation_range.lo +
                (world.elevation_range.hi - world.elevation_range.lo) * uni(rng);
    double el_rate = (uni(rng) - 0.5) * 0.4;  // deg per step
    double range = world.range_range.lo +
                   (world.range_range.hi - world.range_range.lo) * uni(rng);
    double range_rate = (uni(rng) - 0.5) * 0.01 * range;

    // Arc parameters (unused by the other models but drawn unconditionally so
    // the stream position is model-independent).
    const double arc_amp = 10.0 + 30.0 * uni(rng);
    const double arc_phase = 2.0 * 3.14159265358979323846 * uni(rng);
    const double arc_center = clamp(az, az_lo + arc_amp, az_hi - arc_amp);
    const double arc_rate = cfg.speed_deg / arc_amp;  // max per-step delta = amp*rate

    // Waypoints for the spline model.
    std::vector<double> waypoints;
    for (int i = 0; i < 8; ++i) waypoints.push_back(az_lo + (az_hi - az_lo) * uni(rng));
    size_t wp = 0;

    std::vector<UavState> states;
    states.reserve(cfg.length);
    for (int t = 0; t < cfg.length; ++t) {
        double jitter = 0.0;
        if (cfg.jitter_std_deg > 0.0) {
            jitter = gauss(rng) * cfg.jitter_std_deg;
            jitter = clamp(jitter, -3.0 * cfg.jitter_std_deg, 3.0 * cfg.jitter_std_deg);
        }
        if (t > 0) {
            switch (cfg.motion_model) {
                case MotionModel::kLinearPass: {
                    double next = az + dir * cfg.speed_deg + jitter;
                    if (next < az_lo || next > az_hi) {
                        dir = -dir;
                        next = reflect(next, az_lo, az_hi);
                    }
                    az = next;
                    break;
                }
                case MotionModel::kArc: {
                    az = arc_center + arc_amp * std::sin(arc_phase + arc_rate * t) + jitter;
                    az = reflect(az, az_lo, az_hi);
                    break;
                }
                case MotionModel::kWaypointSpline: {
                    const double target = waypoints[wp];
                    const double delta = clamp(target - az, -cfg.speed_deg, cfg.speed_deg);
                    az = reflect(az + delta + jitter, az_lo, az_hi);
                    if (std::abs(target - az) < cfg.speed_deg && wp + 1 < waypoints.size()) ++wp;
                    break;
                }
            }
            el = clamp(el + el_rate, world.elevation_range.lo, world.elevation_range.hi);
            range = clamp(range + range_rate, world.range_range.lo, world.range_range.hi);
        }
        states.push_back(UavState{az, el, range});
    }
    return states;
}

double azimuth_to_column(double azimuth_deg, const WorldConfig& world) {
    const double half_fov = world.camera_fov_deg / 2.0;
    return (azimuth_deg + half_fov) / world.camera_fov_deg * (world.image_width - 1);
}

double column_to_azimuth(double column, const WorldConfig& world) {
    const double half_fov = world.camera_fov_deg / 2.0;
    return column / (world.image_width - 1) * world.camera_fov_deg - half_fov;
}

namespace {

int elevation_to_row(double elevation_deg, const WorldConfig& world) {
    const double lo = world.elevation_range.lo;
    const double hi = world.elevation_range.hi;
    const double frac = (hi > lo) ? clamp((elevation_deg - lo) / (hi - lo), 0.0, 1.0) : 0.5;
    return static_cast<int>(std::lround((1.0 - frac) * (world.image_height - 1)));
}

}  // namespace

Image render_frame(const UavState& state, const WorldConfig& world) {
    const double half_fov = world.camera_fov_deg / 2.0;
    if (state.azimuth_deg < -half_fov || state.azimuth_deg > half_fov)
        throw OutOfView("render_frame: azimuth outside the camera field of view");

    Image img;
    img.width = world.image_width;
    img.height = world.image_height;
    img.pixels.assign(static_cast<size_t>(img.width) * img.height, 0);

    // Obstacles first, as filled rectangles.
    for (const auto& ob : world.obstacles) {
        const int c0 = static_cast<int>(std::lround(azimuth_to_column(ob.azimuth_span.lo, world)));
        const int c1 = static_cast<int>(std::lround(azimuth_to_column(ob.azimuth_span.hi, world)));
        const int r1 = elevation_to_row(ob.elevation_span.lo, world);
        const int r0 = elevation_to_row(ob.elevation_span.hi, world);
        const auto value = static_cast<std::uint8_t>(std::lround(255.0 * ob.brightness));
        for (int r = std::max(0, r0); r <= std::min(img.height - 1, r1); ++r)
            for (int c = std::max(0, c0); c <= std::min(img.width - 1, c1); ++c)
                img.at(r, c) = value;
    }

    // UAV is fully occluded when its center sits inside an obstacle span.
    for (const auto& ob : world.obstacles) {
        if (inside(state.azimuth_deg, ob.azimuth_span) &&
            inside(state.elevation_deg, ob.elevation_span))
            return img;
    }

    const int cc = static_cast<int>(std::lround(azimuth_to_column(state.azimuth_deg, world)));
    const int cr = elevation_to_row(state.elevation_deg, world);
    const int radius = std::max(
        1, static_cast<int>(std::lround(img.width * world.uav_size_k / state.range_m)));
    const auto value = static_cast<std::uint8_t>(std::lround(255.0 * world.uav_brightness));
    for (int r = std::max(0, cr - radius); r <= std::min(img.height - 1, cr + radius); ++r) {
        for (int c = std::max(0, cc - radius); c <= std::min(img.width - 1, cc + radius); ++c) {
            const int dr = r - cr;
            const int dc = c - cc;
            if (dr * dr + dc * dc <= radius * radius) img.at(r, c) = value;
        }
    }
    return img;
}

std::vector<int> label_sequence(const std::vector<UavState>& states,
                                const phy::BeamCodebook& cb) {
    if (states.empty()) throw ConfigError("label_sequence: empty state list");
    std::vector<int> labels;
    labels.reserve(states.size());
    for (const auto& s : states) {
        const auto h = phy::make_channel({{std::complex<double>{1.0, 0.0},
                                           s.azimuth_deg * kDegToRad}},
                                         cb.num_antennas, cb.spacing_ratio);
        labels.push_back(phy::optimal_beam(h, cb));
    }
    return labels;
}

void write_pgm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IoError("write_pgm: write failed for " + path);
}

Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw FormatError("read_pgm: bad magic in " + path);
    int w = 0;
    int h = 0;
    int maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw FormatError("read_pgm: bad header in " + path);
    in.get();  // single whitespace after maxval
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw FormatError("read_pgm: truncated pixel data in " + path);
    return img;
}

namespace {

json world_to_json(const WorldConfig& w) {
    json obstacles = json::array();
    for (const auto& ob : w.obstacles) {
        obstacles.push_back({{"azimuth_span", {ob.azimuth_span.lo, ob.azimuth_span.hi}},
                             {"elevation_span", {ob.elevation_span.lo, ob.elevation_span.hi}},
                             {"brightness", ob.brightness}});
    }
    return {{"camera_fov_deg", w.camera_fov_deg},
            {"image_width", w.image_width},
            {"image_height", w.image_height},
            {"obstacles", obstacles},
            {"uav_brightness", w.uav_brightness},
            {"uav_size_k", w.uav_size_k},
            {"elevation_range", {w.elevation_range.lo, w.elevation_range.hi}},
            {"range_range", {w.range_range.lo, w.range_range.hi}}};
}

WorldConfig world_from_json(const json& j) {
    WorldConfig w;
    w.camera_fov_deg = j.at("camera_fov_deg");
    w.image_width = j.at("image_width");
    w.image_height = j.at("image_height");
    for (const auto& ob : j.at("obstacles")) {
        Obstacle o;
        o.azimuth_span = {ob.at("azimuth_span")[0], ob.at("azimuth_span")[1]};
        o.elevation_span = {ob.at("elevation_span")[0], ob.at("elevation_span")[1]};
        o.brightness = ob.at("brightness");
        w.obstacles.push_back(o);
    }
    w.uav_brightness = j.at("uav_brightness");
    w.uav_size_k = j.at("uav_size_k");
    w.elevation_range = {j.at("elevation_range")[0], j.at("elevation_range")[1]};
    w.range_range = {j.at("range_range")[0], j.at("range_range")[1]};
    return w;
}

std::string motion_name(MotionModel m) {
    switch (m) {
        case MotionModel::kLinearPass: return "linear-pass";
        case MotionModel::kArc: return "arc";
        case MotionModel::kWaypointSpline: return "waypoint-spline";
    }
    return "linear-pass";
}

MotionModel motion_from_name(const std::string& s) {
    if (s == "linear-pass") return MotionModel::kLinearPass;
    if (s == "arc") return MotionModel::kArc;
    if (s == "waypoint-spline") return MotionModel::kWaypointSpline;
    throw FormatError("unknown motion model: " + s);
}

json traj_to_json(const TrajectoryConfig& t) {
    json j = {{"motion_model", motion_name(t.motion_model)},
              {"speed_deg", t.speed_deg},
              {"jitter_std_deg", t.jitter_std_deg},
              {"length", t.length},
              {"seed", t.seed}};
    if (t.start_azimuth_deg) j["start_azimuth_deg"] = *t.start_azimuth_deg;
    if (t.direction) j["direction"] = *t.direction;
    return j;
}

TrajectoryConfig traj_from_json(const json& j) {
    TrajectoryConfig t;
    t.motion_model = motion_from_name(j.at("motion_model"));
    t.speed_deg = j.at("speed_deg");
    t.jitter_std_deg = j.at("jitter_std_deg");
    t.length = j.at("length");
    t.seed = j.at("seed");
    if (j.contains("start_azimuth_deg")) t.start_azimuth_deg = j.at("start_azimuth_deg");
    if (j.contains("direction")) t.direction = j.at("direction");
    return t;
}

}  // namespace

phy::BeamCodebook codebook_from_params(const CodebookParams& p) {
    return phy::build_codebook(p.num_antennas, p.num_beams,
                               {p.sector_lo_deg * kDegToRad, p.sector_hi_deg * kDegToRad},
                               p.spacing_ratio);
}

DatasetManifest build_dataset(const WorldConfig& world,
                              const std::vector<TrajectoryConfig>& traj_cfgs,
                              const phy::BeamCodebook& cb, const std::string& out_dir,
                              const std::string& scenario_name) {
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "frames", ec);
    if (ec) throw IoError("build_dataset: cannot create " + out_dir);

    DatasetManifest m;
    m.scenario_name = scenario_name;
    m.world = world;
    m.trajectories = traj_cfgs;
    m.codebook.num_antennas = cb.num_antennas;
    m.codebook.num_beams = cb.num_beams;
    m.codebook.sector_lo_deg = cb.beam_angles.front() / kDegToRad;
    m.codebook.sector_hi_deg = cb.beam_angles.back() / kDegToRad;
    m.codebook.spacing_ratio = cb.spacing_ratio;

    std::ofstream labels_out(fs::path(out_dir) / "labels.jsonl");
    if (!labels_out) throw IoError("build_dataset: cannot open labels.jsonl");

    for (size_t seq = 0; seq < traj_cfgs.size(); ++seq) {
        const auto states = simulate_trajectory(traj_cfgs[seq], world);
        const auto labels = label_sequence(states, cb);
        const int seq_id = static_cast<int>(seq);
        const fs::path seq_dir = fs::path(out_dir) / "frames" / std::to_string(seq_id);
        fs::create_directories(seq_dir);
        for (size_t t = 0; t < states.size(); ++t) {
            write_pgm(render_frame(states[t], world),
                      (seq_dir / (std::to_string(t) + ".pgm")).string());
            json rec = {{"seq", seq_id},
                        {"t", static_cast<int>(t)},
                        {"beam", labels[t]},
                        {"azimuth_deg", states[t].azimuth_deg},
                        {"elevation_deg", states[t].elevation_deg},
                        {"range_m", states[t].range_m}};
            labels_out << rec.dump() << "\n";
        }
        m.sequences.emplace_back(seq_id, static_cast<int>(states.size()));
        const int n_windows = static_cast<int>(states.size()) - (kWindow - 1);
        for (int o = 0; o < n_windows; ++o) m.samples.push_back(SampleRef{seq_id, o});
    }
    store_manifest(m, out_dir);
    return m;
}

DatasetManifest split_dataset(DatasetManifest manifest, double train_fraction,
                              std::uint64_t seed) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw ConfigError("split_dataset: fraction must be in (0, 1)");
    const size_t n = manifest.samples.size();
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = n; i > 1; --i) {
        const size_t j = rng() % i;
        std::swap(perm[i - 1], perm[j]);
    }
    const auto n_train = static_cast<size_t>(std::ceil(train_fraction * static_cast<double>(n)));
    manifest.split.assign(n, Split::kTest);
    for (size_t i = 0; i < n_train && i < n; ++i) manifest.split[perm[i]] = Split::kTrain;
    return manifest;
}

void store_manifest(const DatasetManifest& m, const std::string& dir) {
    json j;
    j["format_version"] = m.format_version;
    j["scenario_name"] = m.scenario_name;
    j["channels"] = m.channels;
    j["codebook"] = {{"num_antennas", m.codebook.num_antennas},
                     {"num_beams", m.codebook.num_beams},
                     {"sector_lo_deg", m.codebook.sector_lo_deg},
                     {"sector_hi_deg", m.codebook.sector_hi_deg},
                     {"spacing_ratio", m.codebook.spacing_ratio}};
    j["world"] = world_to_json(m.world);
    j["trajectories"] = json::array();
    for (const auto& t : m.trajectories) j["trajectories"].push_back(traj_to_json(t));
    j["sequences"] = json::array();
    for (const auto& [id, len] : m.sequences) j["sequences"].push_back({{"id", id}, {"length", len}});
    j["samples"] = json::array();
    for (const auto& s : m.samples) j["samples"].push_back({{"seq", s.seq}, {"offset", s.offset}});
    if (!m.split.empty()) {
        json split = json::array();
        for (auto s : m.split) split.push_back(s == Split::kTrain ? "train" : "test");
        j["split"] = split;
    }
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw IoError("store_manifest: cannot open manifest.json in " + dir);
    out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw IoError("load_manifest: cannot open manifest.json in " + dir);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("load_manifest: ") + e.what());
    }
    DatasetManifest m;
    m.format_version = j.at("format_version");
    if (m.format_version != 1)
        throw FormatError("load_manifest: unsupported format_version " +
                          std::to_string(m.format_version));
    m.scenario_name = j.at("scenario_name");
    m.channels = j.at("channels");
    const auto& cj = j.at("codebook");
    m.codebook = {cj.at("num_antennas"), cj.at("num_beams"), cj.at("sector_lo_deg"),
                  cj.at("sector_hi_deg"), cj.at("spacing_ratio")};
    m.world = world_from_json(j.at("world"));
    for (const auto& t : j.at("trajectories")) m.trajectories.push_back(traj_from_json(t));
    for (const auto& s : j.at("sequences")) m.sequences.emplace_back(s.at("id"), s.at("length"));
    for (const auto& s : j.at("samples"))
        m.samples.push_back(SampleRef{s.at("seq"), s.at("offset")});
    if (j.contains("split")) {
        for (const auto& s : j.at("split"))
            m.split.push_back(s == "train" ? Split::kTrain : Split::kTest);
    }
    return m;
}

Dataset::Dataset(DatasetManifest manifest, std::string root_dir)
    : manifest_(std::move(manifest)), root_(std::move(root_dir)) {
    labels_.resize(manifest_.sequences.size());
    for (const auto& [id, len] : manifest_.sequences)
        labels_[id].resize(len);
    std::ifstream in(fs::path(root_) / "labels.jsonl");
    if (!in) throw IoError("Dataset: cannot open labels.jsonl in " + root_);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError(std::string("labels.jsonl: ") + e.what());
        }
        LabelRecord rec{j.at("seq"), j.at("t"), j.at("beam"), j.at("azimuth_deg"),
                        j.at("elevation_deg"), j.at("range_m")};
        if (rec.seq < 0 || rec.seq >= static_cast<int>(labels_.size()) || rec.t < 0 ||
            rec.t >= static_cast<int>(labels_[rec.seq].size()))
            throw FormatError("labels.jsonl: record outside manifest sequences");
        labels_[rec.seq][rec.t] = rec;
    }
}

const LabelRecord& Dataset::label(int seq, int t) const {
    if (seq < 0 || seq >= static_cast<int>(labels_.size()) || t < 0 ||
        t >= static_cast<int>(labels_[seq].size()))
        throw IndexError("Dataset::label: out of range");
    return labels_[seq][t];
}

Sample Dataset::load_sample(int index) const {
    if (index < 0 || index >= size()) throw IndexError("Dataset::load_sample: index out of range");
    const SampleRef ref = manifest_.samples[index];
    Sample s;
    s.sequence_id = ref.seq;
    s.offset = ref.offset;
    const fs::path seq_dir = fs::path(root_) / "frames" / std::to_string(ref.seq);
    for (int i = 0; i < kInputFrames; ++i) {
        s.frames.push_back(
            read_pgm((seq_dir / (std::to_string(ref.offset + i) + ".pgm")).string()));
        s.input_beams.push_back(label(ref.seq, ref.offset + i).beam);
    }
    for (int i = 0; i < kHorizon; ++i)
        s.target_beams.push_back(label(ref.seq, ref.offset + kInputFrames + i).beam);
    return s;
}

std::vector<int> Dataset::indices(Split split) const {
    std::vector<int> out;
    for (size_t i = 0; i < manifest_.split.size(); ++i)
        if (manifest_.split[i] == split) out.push_back(static_cast<int>(i));
    return out;
}

Sample load_sample(const DatasetManifest& manifest, const std::string& root_dir, int index) {
    return Dataset(manifest, root_dir).load_sample(index);
}

}  // namespace beamvlm::scene
