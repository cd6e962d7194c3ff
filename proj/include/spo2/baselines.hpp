#pragma once

#include "spo2/stmap.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <span>
#include <string>
#include <vector>

namespace spo2 {

/// Physiological window used for clamping and label scaling, in % SpO2.
constexpr double kSpo2Min = 85.0;
constexpr double kSpo2Max = 100.0;

inline double clamp_spo2(double pct) { return std::clamp(pct, kSpo2Min, kSpo2Max); }

struct DcAc {
    double dc = 0.0;
    double ac = 0.0;
};

/// dc = mean, ac = population standard deviation.
DcAc window_dc_ac(std::span<const double> trace);

/// (ac_R / dc_R) / (ac_B / dc_B).
double compute_ror(std::span<const double> red, std::span<const double> blue);

/// SpO2 ~= a * RoR + b.
struct RorCalibration {
    double a = 0.0;
    double b = 0.0;

    double predict(double ror) const { return clamp_spo2(a * ror + b); }
};

/// Least-squares line through (ror, spo2).
RorCalibration fit_calibration(std::span<const double> rors, std::span<const double> spo2);

/// ROI indices pooled into the single baseline ROI.
using RoiMask = std::vector<std::size_t>;

/// Bottom half of a row-major grid: ROIs [N/2, N).
RoiMask default_roi_mask(std::size_t n_rois);

/// Mean over the ROIs in `mask` of one channel, per frame.
std::vector<double> pooled_trace(const SpatioTemporalMap& window, std::size_t channel,
                                 const RoiMask& mask);

double window_ror(const SpatioTemporalMap& window, const RoiMask& mask);

/// Calibrated, clamped SpO2 estimate for one window.
double predict_ror(const RorCalibration& cal, const SpatioTemporalMap& window,
                   const RoiMask& mask);

using RatioFeatures = std::array<double, 3>;

/// AC/DC of the pooled R, G and B traces.
RatioFeatures ratio_features(const SpatioTemporalMap& window, const RoiMask& mask);

struct LinearModel {
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<std::string> feature_names;

    double predict(std::span<const double> features) const;
};

/// Ordinary least squares with intercept on the three ratio features.
LinearModel fit_lr(std::span<const RatioFeatures> features, std::span<const double> spo2);

double predict_lr(const LinearModel& model, const RatioFeatures& features);

void to_json(nlohmann::json& j, const RorCalibration& cal);
void from_json(const nlohmann::json& j, RorCalibration& cal);
void to_json(nlohmann::json& j, const LinearModel& model);
void from_json(const nlohmann::json& j, LinearModel& model);

} // namespace spo2
