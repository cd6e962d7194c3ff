#include "spo2/harness.hpp"

#include "spo2/errors.hpp"
#include "spo2/filters.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace spo2 {

using tn::Tensor;

Spo2Trace interpolate_spo2(std::span<const TimedSample> samples) {
    if (samples.size() < 2) {
        throw LengthError("interpolation needs at least 2 SpO2 samples, got " +
                          std::to_string(samples.size()));
    }
    for (std::size_t i = 1; i < samples.size(); ++i) {
        if (!(samples[i].t_s > samples[i - 1].t_s)) {
            throw OrderingError("SpO2 sample times must increase strictly (row " +
                                std::to_string(i) + ")");
        }
    }
    const double first = std::ceil(samples.front().t_s);
    const double last = std::floor(samples.back().t_s);
    Spo2Trace trace;
    trace.t0 = first;
    std::size_t seg = 0;
    for (double t = first; t <= last; t += 1.0) {
        while (seg + 2 < samples.size() && samples[seg + 1].t_s < t) {
            ++seg;
        }
        const auto& a = samples[seg];
        const auto& b = samples[seg + 1];
        const double u = (t - a.t_s) / (b.t_s - a.t_s);
        trace.values.push_back(a.pct + u * (b.pct - a.pct));
    }
    return trace;
}

double spo2_at(const Spo2Trace& trace, double t_s) {
    const double pos = t_s - trace.t0;
    const double last = static_cast<double>(trace.values.size()) - 1.0;
    if (trace.values.empty() || pos < 0.0 || pos > last) {
        throw RangeError("t = " + std::to_string(t_s) + " s is outside the SpO2 trace");
    }
    const auto k = static_cast<std::size_t>(std::floor(pos));
    const double u = pos - static_cast<double>(k);
    if (u == 0.0) {
        return trace.values[k];
    }
    return trace.values[k] + u * (trace.values[k + 1] - trace.values[k]);
}

namespace {

struct Placement {
    std::size_t window = 0;
    std::size_t step = 0;
    std::size_t count = 0;
};

Placement place_windows(const SpatioTemporalMap& map, double step_s) {
    Placement p;
    p.window = static_cast<std::size_t>(std::llround(kWindowSeconds * map.fps()));
    p.step = static_cast<std::size_t>(std::llround(step_s * map.fps()));
    if (p.step == 0) {
        throw ParameterError("window step must be at least one frame");
    }
    if (map.n_frames() < p.window) {
        throw LengthError("record of " + std::to_string(map.duration_s()) +
                          " s is shorter than one 10-s window");
    }
    p.count = (map.n_frames() - p.window) / p.step + 1;
    return p;
}

} // namespace

std::vector<WindowSample> window_dataset(const SubjectRecord& record, double step_s,
                                         WindowMode mode) {
    const Placement p = place_windows(record.map, step_s);
    const auto seconds = static_cast<std::size_t>(kWindowSeconds);
    std::vector<WindowSample> out;
    out.reserve(p.count);

    SpatioTemporalMap train_norm;
    CausalStats history;
    if (mode == WindowMode::train) {
        train_norm = normalize_train(record.map);
    } else {
        history = CausalStats(record.map.subject_id(), record.map.n_rois());
    }
    std::size_t seen = 0;

    for (std::size_t i = 0; i < p.count; ++i) {
        const std::size_t start = i * p.step;
        WindowSample w;
        w.subject_id = record.subject_id;
        w.t_start = static_cast<double>(start) / record.map.fps();
        if (mode == WindowMode::train) {
            w.map = train_norm.slice(start, p.window);
        } else if (start == seen) {
            w.map = normalize_test_causal(record.map.slice(start, p.window), history);
            seen = start + p.window;
        } else {
            // Overlapping or gapped placement: feed only unseen frames.
            const std::size_t end = start + p.window;
            if (end > seen) {
                history.update(record.map.slice(seen, end - seen));
                seen = end;
            }
            w.map = zscore_with(record.map.slice(start, p.window), history);
        }
        w.target.reserve(seconds);
        for (std::size_t k = 0; k < seconds; ++k) {
            w.target.push_back(scale_spo2(spo2_at(record.spo2, w.t_start + static_cast<double>(k))));
        }
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<SpatioTemporalMap> raw_windows(const SpatioTemporalMap& map, double step_s) {
    const Placement p = place_windows(map, step_s);
    std::vector<SpatioTemporalMap> out;
    out.reserve(p.count);
    for (std::size_t i = 0; i < p.count; ++i) {
        out.push_back(map.slice(i * p.step, p.window));
    }
    return out;
}

FoldPlan kfold_split(const std::vector<std::string>& subject_ids, std::size_t k,
                     std::uint64_t seed, double val_fraction) {
    const std::size_t n = subject_ids.size();
    if (k < 2 || k > n) {
        throw ParameterError("k must lie in [2, " + std::to_string(n) + "], got " +
                             std::to_string(k));
    }
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
        throw ParameterError("validation fraction must lie in [0, 1)");
    }
    std::vector<std::string> order = subject_ids;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    std::size_t begin = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        Fold fold;
        std::vector<std::string> rest;
        for (std::size_t i = 0; i < n; ++i) {
            (i >= begin && i < begin + size ? fold.test : rest).push_back(order[i]);
        }
        begin += size;

        std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(rest.size())));
        n_val = std::min(n_val, rest.size() - 1);
        std::vector<std::size_t> pick(rest.size());
        std::iota(pick.begin(), pick.end(), 0);
        std::shuffle(pick.begin(), pick.end(), rng);
        std::vector<bool> is_val(rest.size(), false);
        for (std::size_t i = 0; i < n_val; ++i) {
            is_val[pick[i]] = true;
        }
        for (std::size_t i = 0; i < rest.size(); ++i) {
            (is_val[i] ? fold.validation : fold.train).push_back(rest[i]);
        }
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

PreparedSet prepare_windows(const std::vector<WindowSample>& windows) {
    PreparedSet set;
    if (windows.empty()) {
        return set;
    }
    set.n_rois = windows.front().map.n_rois();
    set.n_frames = windows.front().map.n_frames();
    const FilterSpec lp = design_lowpass(kDcCutoffHz, windows.front().map.fps());
    const FilterSpec bp = design_bandpass(kAcLowHz, kAcHighHz, windows.front().map.fps());
    set.windows.reserve(windows.size());
    for (const auto& w : windows) {
        if (w.map.n_rois() != set.n_rois || w.map.n_frames() != set.n_frames) {
            throw ShapeError("all windows of a dataset must share (N, T)");
        }
        const FilteredMaps parts = split_dc_ac(w.map, lp, bp);
        PreparedWindow pw;
        pw.x = w.map.data();
        pw.dc = parts.dc.data();
        pw.ac = parts.ac.data();
        pw.target.assign(w.target.begin(), w.target.end());
        for (const double s : w.target) {
            pw.gt_pct.push_back(kSpo2Min + s * (kSpo2Max - kSpo2Min));
        }
        pw.subject_id = w.subject_id;
        pw.t_start = w.t_start;
        set.windows.push_back(std::move(pw));
    }
    return set;
}

PreparedSet prepare_subjects(std::span<const SubjectRecord> records, WindowMode mode,
                             double step_s) {
    std::vector<WindowSample> all;
    for (const auto& rec : records) {
        auto w = window_dataset(rec, step_s, mode);
        std::move(w.begin(), w.end(), std::back_inserter(all));
    }
    return prepare_windows(all);
}

ModelInput<float> make_batch(const PreparedSet& set, std::span<const std::size_t> idx,
                             Variant variant, Tensor<float>* labels) {
    const std::size_t per = 3 * set.n_rois * set.n_frames;
    const tn::Shape shape{idx.size(), 3, set.n_rois, set.n_frames};
    auto stack = [&](auto member) {
        std::vector<float> buf;
        buf.reserve(per * idx.size());
        for (const std::size_t i : idx) {
            const auto& src = set.windows.at(i).*member;
            buf.insert(buf.end(), src.begin(), src.end());
        }
        return Tensor<float>::from(shape, std::move(buf));
    };
    ModelInput<float> in;
    if (variant == Variant::plain || variant == Variant::end2end) {
        in.x = stack(&PreparedWindow::x);
    }
    if (variant != Variant::plain) {
        in.x_dc = stack(&PreparedWindow::dc);
        in.x_ac = stack(&PreparedWindow::ac);
    }
    if (labels) {
        const std::size_t d = set.windows.at(idx.front()).target.size();
        std::vector<float> y;
        y.reserve(d * idx.size());
        for (const std::size_t i : idx) {
            const auto& t = set.windows[i].target;
            y.insert(y.end(), t.begin(), t.end());
        }
        *labels = Tensor<float>::from({idx.size(), d}, std::move(y));
    }
    return in;
}

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                   std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    // Batch norm needs two samples per batch in training mode.
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back().front());
        batches.pop_back();
    }
    return batches;
}

std::vector<std::vector<float>> snapshot(const Spo2Net<float>& model) {
    std::vector<std::vector<float>> out;
    for (const auto& p : model.parameters()) out.push_back(p.tensor.values());
    for (const auto& b : model.buffers()) out.push_back(b.tensor.values());
    return out;
}

void restore(Spo2Net<float>& model, const std::vector<std::vector<float>>& state) {
    std::size_t i = 0;
    for (auto p : model.parameters()) p.tensor.values() = state[i++];
    for (auto b : model.buffers()) b.tensor.values() = state[i++];
}

} // namespace

double dataset_loss(Spo2Net<float>& model, const PreparedSet& set, std::size_t batch_size) {
    if (set.empty()) {
        throw DataError("cannot compute a loss over an empty set");
    }
    tn::NoGradGuard no_grad;
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), 0);
    double total = 0.0;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        const std::span<const std::size_t> idx(order.data() + i, end - i);
        Tensor<float> y;
        const auto input = make_batch(set, idx, model.config().variant, &y);
        const auto pred = model.forward(input, false);
        total += static_cast<double>(variant_loss(model.config(), pred, y, input).item()) *
                 static_cast<double>(idx.size());
    }
    return total / static_cast<double>(set.size());
}

TrainResult train(const ModelConfig& cfg, const PreparedSet& train_set, const PreparedSet& val_set,
                  const TrainOptions& opts) {
    if (train_set.empty()) {
        throw DataError("training split is empty");
    }
    if (val_set.empty()) {
        throw DataError("validation split is empty");
    }
    if (train_set.size() < 2) {
        throw DataError("training needs at least 2 windows (batch norm)");
    }
    if (train_set.windows.front().target.size() != cfg.d_spo2) {
        throw ConfigError("d_spo2 = " + std::to_string(cfg.d_spo2) + " but windows carry " +
                          std::to_string(train_set.windows.front().target.size()) + " targets");
    }
    if (opts.batch_size < 2) {
        throw ConfigError("batch size must be at least 2");
    }

    TrainResult result;
    result.model = std::make_unique<Spo2Net<float>>(cfg);
    Spo2Net<float>& model = *result.model;
    tn::Adam<float> adam(model.parameters(), tn::AdamOptions{opts.lr});
    std::mt19937_64 rng(opts.shuffle_seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<std::vector<float>> best;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (const auto& batch : make_batches(order, opts.batch_size)) {
            Tensor<float> y;
            const auto input = make_batch(train_set, batch, cfg.variant, &y);
            adam.zero_grad();
            const auto pred = model.forward(input, true);
            Tensor<float> loss = variant_loss(cfg, pred, y, input);
            loss.backward();
            adam.step();
            total += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = total / static_cast<double>(train_set.size());
        rec.val_loss = dataset_loss(model, val_set, opts.batch_size);
        result.history.push_back(rec);
        if (rec.val_loss < result.best_val_loss) {
            result.best_val_loss = rec.val_loss;
            result.best_epoch = epoch;
            best = snapshot(model);
        }
        if (opts.on_epoch) {
            opts.on_epoch(epoch, rec.train_loss, rec.val_loss);
        }
    }
    if (!best.empty()) {
        restore(model, best);
    }
    return result;
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw LengthError("pearson needs equal-length inputs");
    }
    const std::size_t n = a.size();
    if (n < 2) {
        return 0.0;
    }
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0.0 || sbb <= 0.0 || std::sqrt(saa * sbb) <= 1e-12) {
        return 0.0;
    }
    return sab / std::sqrt(saa * sbb);
}

Metrics compute_metrics(std::span<const PredictionRow> rows) {
    if (rows.empty()) {
        throw DataError("no predictions to score");
    }
    std::map<std::string, std::vector<const PredictionRow*>> by_subject;
    for (const auto& r : rows) {
        by_subject[r.subject_id].push_back(&r);
    }
    Metrics m;
    double abs_sum = 0.0, sq_sum = 0.0, corr_sum = 0.0;
    for (auto& [id, list] : by_subject) {
        std::stable_sort(list.begin(), list.end(),
                         [](const PredictionRow* a, const PredictionRow* b) { return a->t_s < b->t_s; });
        std::vector<double> pred, gt;
        for (const auto* r : list) {
            const double e = r->pred_pct - r->gt_pct;
            abs_sum += std::abs(e);
            sq_sum += e * e;
            pred.push_back(r->pred_pct);
            gt.push_back(r->gt_pct);
        }
        corr_sum += pearson(pred, gt);
    }
    const double n = static_cast<double>(rows.size());
    m.mae = abs_sum / n;
    m.rmse = std::sqrt(sq_sum / n);
    m.corrcoef = corr_sum / static_cast<double>(by_subject.size());
    return m;
}

Evaluation evaluate(Spo2Net<float>& model, const PreparedSet& test_set, std::size_t batch_size) {
    if (test_set.empty()) {
        throw DataError("test split is empty");
    }
    tn::NoGradGuard no_grad;
    Evaluation ev;
    std::vector<std::size_t> order(test_set.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        const std::size_t end = std::min(order.size(), i + batch_size);
        const std::span<const std::size_t> idx(order.data() + i, end - i);
        const auto input = make_batch(test_set, idx, model.config().variant, nullptr);
        const auto pred = model.forward(input, false);
        const auto& y = pred.y_out.values();
        const std::size_t d = pred.y_out.dim(1);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto& w = test_set.windows[idx[b]];
            for (std::size_t k = 0; k < d && k < w.gt_pct.size(); ++k) {
                const double s = std::clamp(static_cast<double>(y[b * d + k]), 0.0, 1.0);
                ev.rows.push_back({w.subject_id, w.t_start + static_cast<double>(k),
                                   unscale_spo2(s), w.gt_pct[k]});
            }
        }
    }
    ev.metrics = compute_metrics(ev.rows);
    return ev;
}

BaselineMethod parse_baseline(const std::string& name) {
    if (name == "ror") return BaselineMethod::ror;
    if (name == "lr") return BaselineMethod::lr;
    throw UsageError("unknown baseline method '" + name + "' (expected ror|lr)");
}

namespace {

double window_mean_spo2(const Spo2Trace& trace, double t_start) {
    const auto seconds = static_cast<std::size_t>(kWindowSeconds);
    double sum = 0.0;
    for (std::size_t k = 0; k < seconds; ++k) {
        sum += spo2_at(trace, t_start + static_cast<double>(k));
    }
    return sum / kWindowSeconds;
}

double window_start(const SpatioTemporalMap& map, std::size_t i, double step_s) {
    return static_cast<double>(i * static_cast<std::size_t>(std::llround(step_s * map.fps()))) /
           map.fps();
}

} // namespace

BaselineResult run_baseline(BaselineMethod method, std::span<const SubjectRecord> train,
                            std::span<const SubjectRecord> test, const RoiMask& mask,
                            double train_step_s) {
    if (train.empty()) {
        throw DataError("baseline training split is empty");
    }
    if (test.empty()) {
        throw DataError("baseline test split is empty");
    }
    std::vector<double> rors, targets;
    std::vector<RatioFeatures> features;
    std::size_t flagged = 0;
    for (const auto& rec : train) {
        const auto windows = raw_windows(rec.map, train_step_s);
        for (std::size_t i = 0; i < windows.size(); ++i) {
            const double y = window_mean_spo2(rec.spo2, window_start(rec.map, i, train_step_s));
            try {
                if (method == BaselineMethod::ror) {
                    rors.push_back(window_ror(windows[i], mask));
                } else {
                    features.push_back(ratio_features(windows[i], mask));
                }
                targets.push_back(y);
            } catch (const DegenerateSignalError&) {
                ++flagged;
            }
        }
    }

    BaselineResult result;
    RorCalibration cal;
    LinearModel lin;
    if (method == BaselineMethod::ror) {
        cal = fit_calibration(rors, targets);
        result.model = cal;
    } else {
        lin = fit_lr(features, targets);
        result.model = lin;
    }

    for (const auto& rec : test) {
        const auto windows = raw_windows(rec.map, kTestStepSeconds);
        for (std::size_t i = 0; i < windows.size(); ++i) {
            const double t0 = window_start(rec.map, i, kTestStepSeconds);
            double pred = 0.0;
            try {
                pred = method == BaselineMethod::ror
                           ? predict_ror(cal, windows[i], mask)
                           : predict_lr(lin, ratio_features(windows[i], mask));
            } catch (const DegenerateSignalError&) {
                ++flagged;
                continue;
            }
            for (std::size_t k = 0; k < static_cast<std::size_t>(kWindowSeconds); ++k) {
                const double t = t0 + static_cast<double>(k);
                result.evaluation.rows.push_back({rec.subject_id, t, pred, spo2_at(rec.spo2, t)});
            }
        }
    }
    result.flagged_windows = flagged;
    result.evaluation.metrics = compute_metrics(result.evaluation.rows);
    return result;
}

void to_json(nlohmann::json& j, const Metrics& m) {
    j = {{"mae", m.mae}, {"rmse", m.rmse}, {"corrcoef", m.corrcoef}};
}

void to_json(nlohmann::json& j, const EpochRecord& e) {
    j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}};
}

void to_json(nlohmann::json& j, const Fold& f) {
    j = {{"train", f.train}, {"validation", f.validation}, {"test", f.test}};
}

void write_predictions_csv(const std::string& path, std::span<const PredictionRow> rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot open '" + path + "' for writing");
    }
    out.precision(10);
    out << "subject_id,t_s,pred_pct,gt_pct\n";
    for (const auto& r : rows) {
        out << r.subject_id << ',' << r.t_s << ',' << r.pred_pct << ',' << r.gt_pct << '\n';
    }
}

} // namespace spo2
