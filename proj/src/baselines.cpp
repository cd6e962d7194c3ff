#include "spo2/baselines.hpp"

#include "spo2/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace spo2 {

DcAc window_dc_ac(std::span<const double> trace) {
    if (trace.size() < 2) {
        throw LengthError("DC/AC needs at least 2 samples, got " + std::to_string(trace.size()));
    }
    double mean = 0.0;
    for (const double v : trace) {
        mean += v;
    }
    mean /= static_cast<double>(trace.size());
    double var = 0.0;
    for (const double v : trace) {
        var += (v - mean) * (v - mean);
    }
    var /= static_cast<double>(trace.size());
    return {mean, std::sqrt(var)};
}

double compute_ror(std::span<const double> red, std::span<const double> blue) {
    if (red.size() != blue.size()) {
        throw LengthError("red and blue traces differ in length (" + std::to_string(red.size()) +
                          " vs " + std::to_string(blue.size()) + ")");
    }
    const DcAc r = window_dc_ac(red);
    const DcAc b = window_dc_ac(blue);
    if (b.dc == 0.0 || b.ac == 0.0) {
        throw DegenerateSignalError("blue channel has zero DC or AC component");
    }
    if (r.dc == 0.0) {
        throw DegenerateSignalError("red channel has zero DC component");
    }
    return (r.ac / r.dc) / (b.ac / b.dc);
}

RorCalibration fit_calibration(std::span<const double> rors, std::span<const double> spo2) {
    if (rors.size() != spo2.size()) {
        throw LengthError("calibration needs one SpO2 value per RoR");
    }
    if (rors.size() < 2) {
        throw RankError("calibration needs at least two points");
    }
    const double n = static_cast<double>(rors.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rors.size(); ++i) {
        mx += rors[i];
        my += spo2[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < rors.size(); ++i) {
        sxx += (rors[i] - mx) * (rors[i] - mx);
        sxy += (rors[i] - mx) * (spo2[i] - my);
    }
    if (sxx == 0.0) {
        throw RankError("all RoR values are identical; slope is undetermined");
    }
    const double a = sxy / sxx;
    return {a, my - a * mx};
}

RoiMask default_roi_mask(std::size_t n_rois) {
    RoiMask mask;
    for (std::size_t n = n_rois / 2; n < n_rois; ++n) {
        mask.push_back(n);
    }
    return mask;
}

std::vector<double> pooled_trace(const SpatioTemporalMap& window, std::size_t channel,
                                 const RoiMask& mask) {
    if (mask.empty()) {
        throw DimensionError("ROI mask is empty");
    }
    std::vector<double> out(window.n_frames(), 0.0);
    for (const std::size_t n : mask) {
        if (n >= window.n_rois()) {
            throw DimensionError("ROI index " + std::to_string(n) + " outside map of " +
                                 std::to_string(window.n_rois()) + " ROIs");
        }
        const auto src = window.trace(channel, n);
        for (std::size_t t = 0; t < out.size(); ++t) {
            out[t] += src[t];
        }
    }
    for (double& v : out) {
        v /= static_cast<double>(mask.size());
    }
    return out;
}

double window_ror(const SpatioTemporalMap& window, const RoiMask& mask) {
    return compute_ror(pooled_trace(window, 0, mask), pooled_trace(window, 2, mask));
}

double predict_ror(const RorCalibration& cal, const SpatioTemporalMap& window,
                   const RoiMask& mask) {
    if (window.n_frames() < 2) {
        throw LengthError("RoR window needs at least 2 frames");
    }
    return cal.predict(window_ror(window, mask));
}

RatioFeatures ratio_features(const SpatioTemporalMap& window, const RoiMask& mask) {
    RatioFeatures f{};
    for (std::size_t c = 0; c < 3; ++c) {
        const DcAc d = window_dc_ac(pooled_trace(window, c, mask));
        if (d.dc == 0.0) {
            throw DegenerateSignalError("channel " + std::to_string(c) + " has zero DC component");
        }
        f[c] = d.ac / d.dc;
    }
    return f;
}

double LinearModel::predict(std::span<const double> features) const {
    if (features.size() != weights.size()) {
        throw DimensionError("model expects " + std::to_string(weights.size()) +
                             " features, got " + std::to_string(features.size()));
    }
    double y = bias;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        y += weights[i] * features[i];
    }
    return clamp_spo2(y);
}

LinearModel fit_lr(std::span<const RatioFeatures> features, std::span<const double> spo2) {
    if (features.size() != spo2.size()) {
        throw LengthError("LR fit needs one SpO2 value per feature row");
    }
    if (features.size() < 4) {
        throw LengthError("LR fit needs at least 4 windows, got " +
                          std::to_string(features.size()));
    }
    const Eigen::Index rows = static_cast<Eigen::Index>(features.size());
    Eigen::MatrixXd design(rows, 4);
    Eigen::VectorXd target(rows);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (int c = 0; c < 3; ++c) {
            design(i, c) = features[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
        }
        design(i, 3) = 1.0;
        target(i) = spo2[static_cast<std::size_t>(i)];
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < 4) {
        throw RankError("LR design matrix is singular (rank " + std::to_string(qr.rank()) +
                        " < 4)");
    }
    const Eigen::VectorXd coef = qr.solve(target);
    return {{coef(0), coef(1), coef(2)}, coef(3), {"ac_dc_red", "ac_dc_green", "ac_dc_blue"}};
}

double predict_lr(const LinearModel& model, const RatioFeatures& features) {
    return model.predict(features);
}

void to_json(nlohmann::json& j, const RorCalibration& cal) {
    j = {{"kind", "ror"}, {"a", cal.a}, {"b", cal.b}};
}

void from_json(const nlohmann::json& j, RorCalibration& cal) {
    if (j.at("kind") != "ror") {
        throw FormatError("expected a calibration document of kind 'ror'");
    }
    cal.a = j.at("a").get<double>();
    cal.b = j.at("b").get<double>();
}

void to_json(nlohmann::json& j, const LinearModel& model) {
    j = {{"kind", "lr"},
         {"weights", model.weights},
         {"bias", model.bias},
         {"feature_names", model.feature_names}};
}

void from_json(const nlohmann::json& j, LinearModel& model) {
    if (j.at("kind") != "lr") {
        throw FormatError("expected a model document of kind 'lr'");
    }
    model.weights = j.at("weights").get<std::vector<double>>();
    model.bias = j.at("bias").get<double>();
    model.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    if (model.weights.size() != model.feature_names.size()) {
        throw FormatError("LR weights and feature names differ in count");
    }
}

} // namespace spo2
