#pragma once

#include "spo2/stmap.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace spo2 {

/// Parameters of the synthetic subject generator. Every trace follows
///   x_{c,n}(t) = d_{c,n} (1 + drift_n(t)) + d_{c,n} rho_c(t) p(t) + noise_sigma eta(t)
/// with p(t) a pulse waveform shared by all channels and
/// rho_R(t) = rho_blue * (spo2(t) - b_star) / a_star, so that the
/// ratio-of-ratios of a clean window inverts exactly to the SpO2 label.
struct SynthParams {
    double duration_s = 180.0;
    double fps = 30.0;
    std::size_t n_rois = 224;
    double hr_min_hz = 0.9;
    double hr_max_hz = 2.3;
    double spo2_baseline = 98.0;
    double dip_depth = 6.0;
    double hold_s = 30.0;
    double rest_s = 30.0;
    int cycles = 3;
    double a_star = -30.0;
    double b_star = 110.0;
    double rho_blue = 0.002;
    double rho_green = 0.004;
    double drift_amp = 0.01;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const SynthParams&) const = default;
};

/// Throws ParameterError if the parameters violate the generator's invariants.
void validate(const SynthParams& params);

void to_json(nlohmann::json& j, const SynthParams& p);
/// Strict: unknown keys are rejected, missing keys keep their defaults.
void from_json(const nlohmann::json& j, SynthParams& p);

/// SpO2 at 1 Hz; values[k] is the value at t0 + k seconds.
struct Spo2Trace {
    std::vector<double> values;
    double t0 = 0.0;
};

struct SubjectRecord {
    std::string subject_id;
    SpatioTemporalMap map;
    Spo2Trace spo2;
    SynthParams meta;
};

/// Breath-hold SpO2 profile. Each cycle is a rest period followed by a hold.
/// SpO2 falls from baseline to baseline - dip_depth over the hold along a
/// raised cosine and recovers along a raised cosine over the first half of
/// the next rest.
double spo2_profile(const SynthParams& params, double t_s);

/// splitmix64 of master + (index + 1) * golden-ratio increment.
std::uint64_t subject_seed(std::uint64_t master, std::size_t index);

/// Deterministic in (params, subject_id): params.seed drives all randomness.
SubjectRecord gen_subject(const SynthParams& params, const std::string& subject_id);

/// Renders each ROI block as a flat colour equal to its trace value; pixels
/// outside the grid are zero.
FrameSequence render_frames(const SpatioTemporalMap& map, const RoiGrid& grid,
                            std::size_t width, std::size_t height);

} // namespace spo2
