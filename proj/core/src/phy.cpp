// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#include "beamvlm/phy.hpp"

#include <cmath>

namespace beamvlm::phy {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

CVec steering_vector(double phi, int n_antennas, double spacing_ratio) {
    if (n_antennas < 1) throw InvalidSize("steering_vector: n_antennas must be >= 1");
    if (spacing_ratio <= 0.0) throw InvalidSize("steering_vector: spacing_ratio must be > 0");
    CVec v(n_antennas);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_antennas));
    const double omega = 2.0 * kPi * spacing_ratio * std::sin(phi);
    for (int k = 0; k < n_antennas; ++k) {
        v(k) = std::polar(scale, omega * k);
    }
    return v;
}

BeamCodebook build_codebook(int n_antennas, int n_beams, AngleInterval sector,
                            double spacing_ratio) {
    if (sector.lo >= sector.hi) throw InvalidSector("build_codebook: sector.lo >= sector.hi");
    if (n_beams < n_antennas) throw InvalidSize("build_codebook: n_beams < n_antennas");
    BeamCodebook cb;
    cb.num_antennas = n_antennas;
    cb.num_beams = n_beams;
    cb.spacing_ratio = spacing_ratio;
    cb.beam_angles.resize(n_beams);
    cb.beams.resize(n_antennas, n_beams);
    const double s_lo = std::sin(sector.lo);
    const double s_hi = std::sin(sector.hi);
    for (int m = 0; m < n_beams; ++m) {
        const double s = (n_beams == 1)
                             ? s_lo
                             : s_lo + (s_hi - s_lo) * static_cast<double>(m) / (n_beams - 1);
        cb.beam_angles[m] = std::asin(s);
        cb.beams.col(m) = steering_vector(cb.beam_angles[m], n_antennas, spacing_ratio);
    }
    return cb;
}

ChannelRealization make_channel(const std::vector<PathComponent>& paths, int n_antennas,
                                double spacing_ratio) {
    ChannelRealization h;
    h.paths = paths;
    h.vector = CVec::Zero(n_antennas);
    for (const auto& p : paths) {
        h.vector += p.gain * steering_vector(p.azimuth, n_antennas, spacing_ratio);
    }
    return h;
}

double received_power(const CVec& h, const CVec& f) {
    if (h.size() != f.size()) throw DimensionMismatch("received_power: length mismatch");
    const std::complex<double> inner = h.adjoint() * f;
    return std::norm(inner);
}

int optimal_beam(const ChannelRealization& h, const BeamCodebook& cb) {
    if (h.vector.size() != cb.num_antennas)
        throw DimensionMismatch("optimal_beam: channel/codebook length mismatch");
    int best = 0;
    double best_power = -1.0;
    for (int m = 0; m < cb.num_beams; ++m) {
        const double p = received_power(h.vector, cb.beams.col(m));
        if (p > best_power) {
            best_power = p;
            best = m;
        }
    }
    return best + 1;
}

RxSample simulate_rx(const ChannelRealization& h, const CVec& w, std::complex<double> symbol,
                     double noise_power, std::mt19937_64& rng) {
    if (h.vector.size() != w.size()) throw DimensionMismatch("simulate_rx: length mismatch");
    if (noise_power < 0.0) throw InvalidSize("simulate_rx: negative noise power");
    std::normal_distribution<double> gauss(0.0, std::sqrt(noise_power / 2.0));
    const std::complex<double> inner = h.vector.adjoint() * w;
    std::complex<double> z{0.0, 0.0};
    if (noise_power > 0.0) z = {gauss(rng), gauss(rng)};
    return RxSample{inner * symbol + z, noise_power};
}

}  // namespace beamvlm::phy
