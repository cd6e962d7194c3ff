#pragma once

#include "spo2/stmap.hpp"

#include <complex>
#include <span>
#include <vector>

namespace spo2 {

enum class FilterKind { lowpass, bandpass };

/// Digital Butterworth filter as a rational transfer function b(z)/a(z),
/// with a[0] == 1.
struct FilterSpec {
    FilterKind kind = FilterKind::lowpass;
    std::vector<double> cutoffs;  // Hz; one for lowpass, (low, high) for bandpass
    int order = 4;                // prototype order; bandpass doubles the degree
    double sample_rate = 30.0;
    std::vector<double> b;
    std::vector<double> a;
    std::vector<std::complex<double>> poles;

    /// |H(e^{j 2 pi f / fs})| for a single pass.
    double magnitude(double freq_hz) const;
    bool is_stable() const;
};

struct FilteredMaps {
    SpatioTemporalMap dc;
    SpatioTemporalMap ac;
};

constexpr double kDcCutoffHz = 0.3;
constexpr double kAcLowHz = 0.75;
constexpr double kAcHighHz = 2.5;
constexpr int kFilterOrder = 4;

FilterSpec design_lowpass(double cutoff_hz = kDcCutoffHz, double fs = 30.0,
                          int order = kFilterOrder);
FilterSpec design_bandpass(double low_hz = kAcLowHz, double high_hz = kAcHighHz,
                           double fs = 30.0, int order = kFilterOrder);

/// Single forward pass from steady-state initial conditions scaled by x[0].
std::vector<double> lfilter_steady(const FilterSpec& spec, std::span<const double> x);

/// Zero-phase forward-backward filtering. The series is extended at both ends
/// by odd reflection of length 3 * order; the extension is stripped from the
/// result. Each pass starts from the filter's steady state for its first
/// sample, so a constant input is passed through unchanged.
std::vector<double> filtfilt(const FilterSpec& spec, std::span<const double> x);

/// Low-pass (DC) and band-pass (AC) components of every (channel, ROI) trace.
FilteredMaps split_dc_ac(const SpatioTemporalMap& map, const FilterSpec& lowpass,
                         const FilterSpec& bandpass);
FilteredMaps split_dc_ac(const SpatioTemporalMap& map);

} // namespace spo2
