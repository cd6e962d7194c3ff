#pragma once

#include "spo2/baselines.hpp"
#include "spo2/model.hpp"
#include "spo2/stmap.hpp"
#include "spo2/synth.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spo2 {

inline constexpr double kWindowSeconds = 10.0;
inline constexpr double kTrainStepSeconds = 2.0;
inline constexpr double kTestStepSeconds = 10.0;

struct TimedSample {
    double t_s = 0.0;
    double pct = 0.0;
};

/// Linear interpolation onto the integer seconds inside [t_first, t_last].
Spo2Trace interpolate_spo2(std::span<const TimedSample> samples);

/// Value of a 1 Hz trace at integer second `t_s`; RangeError outside it.
double spo2_at(const Spo2Trace& trace, double t_s);

/// (pct - 85) / 15.
inline double scale_spo2(double pct) { return (pct - kSpo2Min) / (kSpo2Max - kSpo2Min); }
/// Inverse of scale_spo2, clamped to [85, 100].
inline double unscale_spo2(double s) { return clamp_spo2(kSpo2Min + s * (kSpo2Max - kSpo2Min)); }

enum class WindowMode { train, test };

struct WindowSample {
    SpatioTemporalMap map;          // normalized (3, N, 10 s x fps)
    std::vector<double> target;     // scaled SpO2 at t_start .. t_start + 9
    std::string subject_id;
    double t_start = 0.0;
};

/// Train windows come from the whole-recording z-score, test windows from
/// the causal accumulator fed window by window in time order.
std::vector<WindowSample> window_dataset(const SubjectRecord& record, double step_s,
                                         WindowMode mode);

/// Raw (un-normalized) windows for the ratio baselines, same placement rule.
std::vector<SpatioTemporalMap> raw_windows(const SpatioTemporalMap& map, double step_s);

struct Fold {
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;
};

struct FoldPlan {
    std::size_t k = 5;
    std::uint64_t seed = 0;
    std::vector<Fold> folds;
};

/// Seeded shuffle into k contiguous near-equal test folds. The rest of each
/// fold is training data, of which round(val_fraction * size) subjects are
/// moved to validation.
FoldPlan kfold_split(const std::vector<std::string>& subject_ids, std::size_t k = 5,
                     std::uint64_t seed = 0, double val_fraction = 0.2);

/// A window ready for the network: float (3, N, W) buffers for the raw,
/// low-passed and band-passed maps and the scaled target.
struct PreparedWindow {
    std::vector<float> x;
    std::vector<float> dc;
    std::vector<float> ac;
    std::vector<float> target;
    std::vector<double> gt_pct;
    std::string subject_id;
    double t_start = 0.0;
};

struct PreparedSet {
    std::size_t n_rois = 0;
    std::size_t n_frames = 0;
    std::vector<PreparedWindow> windows;

    bool empty() const { return windows.empty(); }
    std::size_t size() const { return windows.size(); }
};

/// Splits every window into DC and AC maps with the fixed filters.
PreparedSet prepare_windows(const std::vector<WindowSample>& windows);

/// Windows of all `records` in `mode`, prepared.
PreparedSet prepare_subjects(std::span<const SubjectRecord> records, WindowMode mode,
                             double step_s);

/// Stacks windows `idx` into a batch carrying the inputs `variant` reads
/// (plus the DC/AC targets for end2end) and the (B, d) label tensor.
ModelInput<float> make_batch(const PreparedSet& set, std::span<const std::size_t> idx,
                             Variant variant, tn::Tensor<float>* labels);

struct TrainOptions {
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    std::uint64_t shuffle_seed = 0;
    /// Called after every epoch; may be empty.
    std::function<void(std::size_t epoch, double train_loss, double val_loss)> on_epoch;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    std::unique_ptr<Spo2Net<float>> model;  // weights of the best epoch
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
};

/// Adam training with per-epoch validation; the returned model holds the
/// weights of the epoch with the lowest validation loss.
TrainResult train(const ModelConfig& cfg, const PreparedSet& train_set,
                  const PreparedSet& val_set, const TrainOptions& opts = {});

/// Mean variant loss over `set` in eval mode.
double dataset_loss(Spo2Net<float>& model, const PreparedSet& set, std::size_t batch_size);

struct Metrics {
    double mae = 0.0;
    double rmse = 0.0;
    double corrcoef = 0.0;
};

struct PredictionRow {
    std::string subject_id;
    double t_s = 0.0;
    double pred_pct = 0.0;
    double gt_pct = 0.0;
};

struct Evaluation {
    Metrics metrics;
    std::vector<PredictionRow> rows;
};

/// Pearson r; 0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

/// MAE and RMSE over all rows; CorrCoef per subject (rows in time order),
/// then averaged over subjects.
Metrics compute_metrics(std::span<const PredictionRow> rows);

/// Per-second predictions clamped to [0, 1] scaled and unscaled to percent.
Evaluation evaluate(Spo2Net<float>& model, const PreparedSet& test_set,
                    std::size_t batch_size = 16);

enum class BaselineMethod { ror, lr };

BaselineMethod parse_baseline(const std::string& name);

struct BaselineResult {
    nlohmann::json model;
    Evaluation evaluation;
    /// Windows skipped because their blue AC or DC was zero.
    std::size_t flagged_windows = 0;
};

/// Fits on 10-s windows of `train` at `train_step_s` against the window-mean
/// SpO2, then predicts every 10-s test window (10-s step) and repeats the
/// window estimate over its 10 seconds.
BaselineResult run_baseline(BaselineMethod method, std::span<const SubjectRecord> train,
                            std::span<const SubjectRecord> test, const RoiMask& mask,
                            double train_step_s = kTrainStepSeconds);

void to_json(nlohmann::json& j, const Metrics& m);
void to_json(nlohmann::json& j, const EpochRecord& e);
void to_json(nlohmann::json& j, const Fold& f);

void write_predictions_csv(const std::string& path, std::span<const PredictionRow> rows);

} // namespace spo2
