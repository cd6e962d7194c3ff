#include "spo2/synth.hpp"

#include "spo2/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace spo2 {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kHarmonicAmp = 0.3;
// Slow heart-rate wander: +/- kHrWander Hz with period kHrWanderPeriod s.
constexpr double kHrWander = 0.05;
constexpr double kHrWanderPeriod = 45.0;
constexpr int kDriftTones = 3;
constexpr double kDriftMinHz = 0.01;
constexpr double kDriftMaxHz = 0.25;

double raised_cosine(double u) { return 0.5 * (1.0 - std::cos(std::numbers::pi * u)); }

} // namespace

void validate(const SynthParams& p) {
    if (!(p.duration_s > 0.0) || !(p.fps > 0.0) || p.n_rois == 0) {
        throw ParameterError("duration, fps and ROI count must be positive");
    }
    if (!(p.hr_min_hz > 0.75) || !(p.hr_max_hz < 2.5) || !(p.hr_min_hz <= p.hr_max_hz)) {
        throw ParameterError("heart-rate range must lie inside (0.75, 2.5) Hz");
    }
    if (!(p.rho_blue > 0.0) || !(p.rho_green > 0.0)) {
        throw ParameterError("pulsatile ratios must be positive");
    }
    if (p.dip_depth < 0.0 || p.hold_s < 0.0 || p.rest_s < 0.0 || p.cycles < 0) {
        throw ParameterError("breath-hold protocol values must be non-negative");
    }
    const double lo = p.spo2_baseline - p.dip_depth;
    const double hi = p.spo2_baseline;
    if (lo < 85.0 || hi > 100.0) {
        throw ParameterError("SpO2 profile must stay inside [85, 100]");
    }
    if (p.a_star == 0.0 || (lo - p.b_star) / p.a_star <= 0.0 ||
        (hi - p.b_star) / p.a_star <= 0.0) {
        throw ParameterError("calibration (a*, b*) maps the SpO2 profile to RoR <= 0");
    }
    if (p.noise_sigma < 0.0 || p.drift_amp < 0.0) {
        throw ParameterError("noise and drift amplitudes must be non-negative");
    }
}

void to_json(nlohmann::json& j, const SynthParams& p) {
    j = {{"duration_s", p.duration_s},       {"fps", p.fps},
         {"n_rois", p.n_rois},               {"hr_min_hz", p.hr_min_hz},
         {"hr_max_hz", p.hr_max_hz},         {"spo2_baseline", p.spo2_baseline},
         {"dip_depth", p.dip_depth},         {"hold_s", p.hold_s},
         {"rest_s", p.rest_s},               {"cycles", p.cycles},
         {"a_star", p.a_star},               {"b_star", p.b_star},
         {"rho_blue", p.rho_blue},           {"rho_green", p.rho_green},
         {"drift_amp", p.drift_amp},         {"noise_sigma", p.noise_sigma},
         {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, SynthParams& p) {
    if (!j.is_object()) {
        throw ConfigError("synth params must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "duration_s") value.get_to(p.duration_s);
        else if (key == "fps") value.get_to(p.fps);
        else if (key == "n_rois") value.get_to(p.n_rois);
        else if (key == "hr_min_hz") value.get_to(p.hr_min_hz);
        else if (key == "hr_max_hz") value.get_to(p.hr_max_hz);
        else if (key == "spo2_baseline") value.get_to(p.spo2_baseline);
        else if (key == "dip_depth") value.get_to(p.dip_depth);
        else if (key == "hold_s") value.get_to(p.hold_s);
        else if (key == "rest_s") value.get_to(p.rest_s);
        else if (key == "cycles") value.get_to(p.cycles);
        else if (key == "a_star") value.get_to(p.a_star);
        else if (key == "b_star") value.get_to(p.b_star);
        else if (key == "rho_blue") value.get_to(p.rho_blue);
        else if (key == "rho_green") value.get_to(p.rho_green);
        else if (key == "drift_amp") value.get_to(p.drift_amp);
        else if (key == "noise_sigma") value.get_to(p.noise_sigma);
        else if (key == "seed") value.get_to(p.seed);
        else throw ConfigError("unknown synth parameter '" + key + "'");
    }
}

double spo2_profile(const SynthParams& p, double t) {
    const double period = p.rest_s + p.hold_s;
    const double low = p.spo2_baseline - p.dip_depth;
    if (period <= 0.0 || p.cycles == 0 || t < 0.0) {
        return p.spo2_baseline;
    }
    const double cycle_f = std::floor(t / period);
    const int cycle = static_cast<int>(cycle_f);
    const double in_cycle = t - cycle_f * period;
    const double recovery = p.rest_s / 2.0;
    if (cycle >= p.cycles) {
        // Recovery after the final hold.
        const double since = t - p.cycles * period;
        if (since < recovery && p.hold_s > 0.0) {
            return low + p.dip_depth * raised_cosine(since / recovery);
        }
        return p.spo2_baseline;
    }
    if (in_cycle < p.rest_s) {
        if (cycle > 0 && in_cycle < recovery && p.hold_s > 0.0) {
            return low + p.dip_depth * raised_cosine(in_cycle / recovery);
        }
        return p.spo2_baseline;
    }
    const double u = (in_cycle - p.rest_s) / p.hold_s;
    return p.spo2_baseline - p.dip_depth * raised_cosine(u);
}

std::uint64_t subject_seed(std::uint64_t master, std::size_t index) {
    std::uint64_t z = master + (static_cast<std::uint64_t>(index) + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

SubjectRecord gen_subject(const SynthParams& params, const std::string& subject_id) {
    validate(params);
    std::mt19937_64 rng(params.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const std::size_t n_frames =
        static_cast<std::size_t>(std::llround(params.duration_s * params.fps));
    const std::size_t n_rois = params.n_rois;

    // Subject-level physiology.
    const double wander = std::min(kHrWander, (params.hr_max_hz - params.hr_min_hz) / 2.0);
    const double hr0 = uniform(params.hr_min_hz + wander, params.hr_max_hz - wander);
    const double wander_phase = uniform(0.0, kTwoPi);
    const double harmonic_phase = uniform(0.0, kTwoPi);
    const double pulse_phase = uniform(0.0, kTwoPi);
    const double skin = uniform(0.8, 1.2);

    std::vector<double> pulse(n_frames);
    std::vector<double> rho_red(n_frames);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const double ts = static_cast<double>(t) / params.fps;
        // Phase is the closed-form integral of hr(t) = hr0 + wander sin(.).
        const double w = kTwoPi / kHrWanderPeriod;
        const double phase = pulse_phase + kTwoPi * (hr0 * ts - wander / w *
                                                     (std::cos(w * ts + wander_phase) -
                                                      std::cos(wander_phase)));
        pulse[t] = std::sin(phase) + kHarmonicAmp * std::sin(2.0 * phase + harmonic_phase);
        const double ror = (spo2_profile(params, ts) - params.b_star) / params.a_star;
        rho_red[t] = ror * params.rho_blue;
    }
    const double rho[3] = {0.0, params.rho_green, params.rho_blue};

    SubjectRecord rec;
    rec.subject_id = subject_id;
    rec.meta = params;
    rec.map = SpatioTemporalMap(n_rois, n_frames, params.fps, subject_id);

    std::normal_distribution<double> gauss(0.0, 1.0);
    const double base[3] = {0.60, 0.42, 0.30};
    std::vector<double> drift(n_frames);
    for (std::size_t n = 0; n < n_rois; ++n) {
        const double roi_gain = uniform(0.9, 1.1);
        double level[3];
        for (std::size_t c = 0; c < 3; ++c) {
            level[c] = skin * base[c] * roi_gain * uniform(0.97, 1.03);
        }
        double freq[kDriftTones], phase[kDriftTones], weight[kDriftTones];
        for (int k = 0; k < kDriftTones; ++k) {
            freq[k] = uniform(kDriftMinHz, kDriftMaxHz);
            phase[k] = uniform(0.0, kTwoPi);
            weight[k] = uniform(0.5, 1.0);
        }
        double peak = 0.0;
        for (std::size_t t = 0; t < n_frames; ++t) {
            const double ts = static_cast<double>(t) / params.fps;
            double v = 0.0;
            for (int k = 0; k < kDriftTones; ++k) {
                v += weight[k] * std::sin(kTwoPi * freq[k] * ts + phase[k]);
            }
            drift[t] = v;
            peak = std::max(peak, std::abs(v));
        }
        const double drift_scale = peak > 0.0 ? params.drift_amp / peak : 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            auto out = rec.map.trace(c, n);
            for (std::size_t t = 0; t < n_frames; ++t) {
                const double r = c == 0 ? rho_red[t] : rho[c];
                double v = level[c] * (1.0 + drift_scale * drift[t]) + level[c] * r * pulse[t];
                if (params.noise_sigma > 0.0) {
                    v += params.noise_sigma * gauss(rng);
                }
                out[t] = static_cast<float>(v);
            }
        }
    }

    const std::size_t seconds = static_cast<std::size_t>(std::floor(params.duration_s));
    rec.spo2.t0 = 0.0;
    rec.spo2.values.resize(seconds);
    for (std::size_t k = 0; k < seconds; ++k) {
        rec.spo2.values[k] = spo2_profile(params, static_cast<double>(k));
    }
    return rec;
}

FrameSequence render_frames(const SpatioTemporalMap& map, const RoiGrid& grid, std::size_t width,
                            std::size_t height) {
    if (grid.size() != map.n_rois()) {
        throw DimensionError("grid has " + std::to_string(grid.size()) + " ROIs, map has " +
                             std::to_string(map.n_rois()));
    }
    for (const auto& r : grid.rects) {
        if (r.x0 < 0 || r.y0 < 0 || static_cast<std::size_t>(r.x0 + r.width) > width ||
            static_cast<std::size_t>(r.y0 + r.height) > height) {
            throw BoundsError("grid does not fit a " + std::to_string(width) + "x" +
                              std::to_string(height) + " frame");
        }
    }
    FrameSequence seq;
    seq.fps = map.fps();
    seq.frames.resize(map.n_frames());
    for (std::size_t t = 0; t < map.n_frames(); ++t) {
        Frame& f = seq.frames[t];
        f.width = width;
        f.height = height;
        f.rgb.assign(width * height * 3, 0.0f);
        for (std::size_t n = 0; n < grid.size(); ++n) {
            const PixelRect& r = grid.rects[n];
            for (int y = r.y0; y < r.y0 + r.height; ++y) {
                for (int x = r.x0; x < r.x0 + r.width; ++x) {
                    for (std::size_t c = 0; c < 3; ++c) {
                        f.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
                            map.at(c, n, t);
                    }
                }
            }
        }
    }
    return seq;
}

} // namespace spo2
