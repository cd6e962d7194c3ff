#include "spo2/filters.hpp"

#include "spo2/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace spo2 {

namespace {

using cplx = std::complex<double>;

std::vector<cplx> poly_from_roots(const std::vector<cplx>& roots) {
    std::vector<cplx> coeffs{1.0};
    for (const cplx& r : roots) {
        std::vector<cplx> next(coeffs.size() + 1, 0.0);
        for (std::size_t i = 0; i < coeffs.size(); ++i) {
            next[i] += coeffs[i];
            next[i + 1] -= coeffs[i] * r;
        }
        coeffs = std::move(next);
    }
    return coeffs;
}

std::vector<cplx> butterworth_prototype_poles(int order) {
    std::vector<cplx> poles;
    for (int k = 0; k < order; ++k) {
        const double theta =
            std::numbers::pi * static_cast<double>(2 * k + order + 1) / (2.0 * order);
        poles.push_back(std::polar(1.0, theta));
    }
    return poles;
}

double prewarp(double freq_hz, double fs) {
    return 2.0 * fs * std::tan(std::numbers::pi * freq_hz / fs);
}

// Bilinear transform of an analog zpk system into b/a coefficients.
FilterSpec bilinear(const std::vector<cplx>& zeros, const std::vector<cplx>& poles, double gain,
                    double fs) {
    const double fs2 = 2.0 * fs;
    std::vector<cplx> zd, pd;
    cplx num = 1.0, den = 1.0;
    for (const cplx& z : zeros) {
        zd.push_back((fs2 + z) / (fs2 - z));
        num *= fs2 - z;
    }
    for (const cplx& p : poles) {
        pd.push_back((fs2 + p) / (fs2 - p));
        den *= fs2 - p;
    }
    for (std::size_t i = zeros.size(); i < poles.size(); ++i) {
        zd.push_back(-1.0);
    }
    const double kd = gain * (num / den).real();
    FilterSpec spec;
    for (const cplx& c : poly_from_roots(zd)) {
        spec.b.push_back(kd * c.real());
    }
    for (const cplx& c : poly_from_roots(pd)) {
        spec.a.push_back(c.real());
    }
    spec.poles = std::move(pd);
    spec.sample_rate = fs;
    return spec;
}

void check_band(double freq, double fs, const char* what) {
    if (!(freq > 0.0) || !(freq < fs / 2.0)) {
        throw ParameterError(std::string(what) + " " + std::to_string(freq) +
                             " Hz must lie strictly inside (0, " + std::to_string(fs / 2.0) +
                             ") Hz");
    }
}

std::vector<double> steady_state(const FilterSpec& spec) {
    const std::size_t n = spec.a.size();
    // Solve (I - A^T) zi = b[1:] - a[1:] b[0] for the transposed direct form II.
    const int m = static_cast<int>(n) - 1;
    Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(m, m);
    for (int i = 0; i < m; ++i) {
        lhs(i, 0) += spec.a[i + 1];
        if (i + 1 < m) {
            lhs(i, i + 1) -= 1.0;
        }
    }
    Eigen::VectorXd rhs(m);
    for (int i = 0; i < m; ++i) {
        rhs(i) = spec.b[i + 1] - spec.a[i + 1] * spec.b[0];
    }
    const Eigen::VectorXd zi = lhs.partialPivLu().solve(rhs);
    return {zi.data(), zi.data() + m};
}

std::vector<double> run_filter(const FilterSpec& spec, std::span<const double> x,
                               const std::vector<double>& zi) {
    const std::size_t n = spec.a.size();
    std::vector<double> z(n - 1);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        z[i] = zi[i] * x[0];
    }
    std::vector<double> y(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        const double xt = x[t];
        const double yt = spec.b[0] * xt + z[0];
        for (std::size_t k = 0; k + 2 < n; ++k) {
            z[k] = spec.b[k + 1] * xt + z[k + 1] - spec.a[k + 1] * yt;
        }
        z[n - 2] = spec.b[n - 1] * xt - spec.a[n - 1] * yt;
        y[t] = yt;
    }
    return y;
}

} // namespace

double FilterSpec::magnitude(double freq_hz) const {
    const double w = 2.0 * std::numbers::pi * freq_hz / sample_rate;
    cplx num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < b.size(); ++k) {
        num += b[k] * std::polar(1.0, -w * static_cast<double>(k));
    }
    for (std::size_t k = 0; k < a.size(); ++k) {
        den += a[k] * std::polar(1.0, -w * static_cast<double>(k));
    }
    return std::abs(num / den);
}

bool FilterSpec::is_stable() const {
    for (const cplx& p : poles) {
        if (!(std::abs(p) < 1.0)) {
            return false;
        }
    }
    return !poles.empty();
}

FilterSpec design_lowpass(double cutoff_hz, double fs, int order) {
    if (!(fs > 0.0)) {
        throw ParameterError("sample rate must be positive");
    }
    if (order < 1) {
        throw ParameterError("filter order must be at least 1");
    }
    check_band(cutoff_hz, fs, "low-pass cutoff");
    const double wc = prewarp(cutoff_hz, fs);
    std::vector<cplx> poles;
    for (const cplx& p : butterworth_prototype_poles(order)) {
        poles.push_back(p * wc);
    }
    FilterSpec spec = bilinear({}, poles, std::pow(wc, order), fs);
    // Pin the DC gain to exactly one.
    double sb = 0.0, sa = 0.0;
    for (double v : spec.b) sb += v;
    for (double v : spec.a) sa += v;
    for (double& v : spec.b) v *= sa / sb;
    spec.kind = FilterKind::lowpass;
    spec.cutoffs = {cutoff_hz};
    spec.order = order;
    return spec;
}

FilterSpec design_bandpass(double low_hz, double high_hz, double fs, int order) {
    if (!(fs > 0.0)) {
        throw ParameterError("sample rate must be positive");
    }
    if (order < 1) {
        throw ParameterError("filter order must be at least 1");
    }
    check_band(low_hz, fs, "band-pass low edge");
    check_band(high_hz, fs, "band-pass high edge");
    if (!(low_hz < high_hz)) {
        throw ParameterError("band-pass low edge must be below the high edge");
    }
    const double wl = prewarp(low_hz, fs);
    const double wh = prewarp(high_hz, fs);
    const double bw = wh - wl;
    const double w0sq = wl * wh;
    std::vector<cplx> poles;
    for (const cplx& p : butterworth_prototype_poles(order)) {
        const cplx half = p * bw / 2.0;
        const cplx root = std::sqrt(half * half - w0sq);
        poles.push_back(half + root);
        poles.push_back(half - root);
    }
    const std::vector<cplx> zeros(static_cast<std::size_t>(order), 0.0);
    FilterSpec spec = bilinear(zeros, poles, std::pow(bw, order), fs);
    spec.kind = FilterKind::bandpass;
    spec.cutoffs = {low_hz, high_hz};
    spec.order = order;
    return spec;
}

std::vector<double> lfilter_steady(const FilterSpec& spec, std::span<const double> x) {
    if (x.empty()) {
        return {};
    }
    return run_filter(spec, x, steady_state(spec));
}

std::vector<double> filtfilt(const FilterSpec& spec, std::span<const double> x) {
    const std::size_t pad = 3 * static_cast<std::size_t>(spec.order);
    if (x.size() <= pad) {
        throw LengthError("filtfilt needs more than " + std::to_string(pad) +
                          " samples, got " + std::to_string(x.size()));
    }
    const std::size_t n = x.size();
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = pad; i >= 1; --i) {
        ext.push_back(2.0 * x[0] - x[i]);
    }
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= pad; ++i) {
        ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    const std::vector<double> zi = steady_state(spec);
    std::vector<double> fwd = run_filter(spec, ext, zi);
    std::reverse(fwd.begin(), fwd.end());
    std::vector<double> bwd = run_filter(spec, fwd, zi);
    std::reverse(bwd.begin(), bwd.end());
    return {bwd.begin() + static_cast<std::ptrdiff_t>(pad),
            bwd.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

FilteredMaps split_dc_ac(const SpatioTemporalMap& map, const FilterSpec& lowpass,
                         const FilterSpec& bandpass) {
    const std::size_t min_len = 12 * static_cast<std::size_t>(std::max(lowpass.order, bandpass.order));
    if (map.n_frames() <= min_len) {
        throw LengthError("split_dc_ac needs more than " + std::to_string(min_len) +
                          " frames, got " + std::to_string(map.n_frames()));
    }
    FilteredMaps out{map, map};
    std::vector<double> trace(map.n_frames());
    for (std::size_t c = 0; c < SpatioTemporalMap::kChannels; ++c) {
        for (std::size_t n = 0; n < map.n_rois(); ++n) {
            const auto src = map.trace(c, n);
            std::copy(src.begin(), src.end(), trace.begin());
            const auto dc = filtfilt(lowpass, trace);
            const auto ac = filtfilt(bandpass, trace);
            auto dst_dc = out.dc.trace(c, n);
            auto dst_ac = out.ac.trace(c, n);
            for (std::size_t t = 0; t < trace.size(); ++t) {
                dst_dc[t] = static_cast<float>(dc[t]);
                dst_ac[t] = static_cast<float>(ac[t]);
            }
        }
    }
    return out;
}

FilteredMaps split_dc_ac(const SpatioTemporalMap& map) {
    return split_dc_ac(map, design_lowpass(kDcCutoffHz, map.fps()),
                       design_bandpass(kAcLowHz, kAcHighHz, map.fps()));
}

} // namespace spo2
