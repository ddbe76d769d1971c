// Copyright (c) 2026 BeamVLM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <complex>
#include <random>
#include <stdexcept>
#include <vector>

namespace beamvlm::phy {

using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

struct DimensionMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidSector : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidSize : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Closed azimuth interval in radians.
struct AngleInterval {
    double lo = 0.0;
    double hi = 0.0;
};

/// Oversampled DFT codebook over an azimuth sector. Column m holds the m-th
/// unit-norm beamforming vector; beam indices are 1-based throughout.
struct BeamCodebook {
    int num_antennas = 0;
    int num_beams = 0;
    double spacing_ratio = 0.5;  // d/lambda
    std::vector<double> beam_angles;
    CMat beams;
};

struct PathComponent {
    std::complex<double> gain;
    double azimuth = 0.0;
};

/// Geometric multipath channel: vector = sum of gain * steering_vector(azimuth).
struct ChannelRealization {
    std::vector<PathComponent> paths;
    CVec vector;
};

struct RxSample {
    std::complex<double> value;
    double noise_power = 0.0;
};

/// ULA steering vector: element k = (1/sqrt(N)) * exp(j*2*pi*ratio*k*sin(phi)).
CVec steering_vector(double phi, int n_antennas, double spacing_ratio);

/// Beam angles equispaced in sin(phi) over the sector, endpoints included.
BeamCodebook build_codebook(int n_antennas, int n_beams, AngleInterval sector,
                            double spacing_ratio = 0.5);

ChannelRealization make_channel(const std::vector<PathComponent>& paths, int n_antennas,
                                double spacing_ratio = 0.5);

/// |h^H f|^2
double received_power(const CVec& h, const CVec& f);

/// Exhaustive-search oracle: 1-based argmax of received power over the
/// codebook, ties broken toward the smallest index.
int optimal_beam(const ChannelRealization& h, const BeamCodebook& cb);

/// y = h^H w x + z, with z circularly-symmetric complex Gaussian of variance
/// noise_power.
RxSample simulate_rx(const ChannelRealization& h, const CVec& w, std::complex<double> symbol,
                     double noise_power, std::mt19937_64& rng);

}  // namespace beamvlm::phy
