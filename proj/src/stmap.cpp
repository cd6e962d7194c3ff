#include "spo2/stmap.hpp"

#include "spo2/errors.hpp"

#include <cmath>

namespace spo2 {

namespace {

// Variance at or below this marks a dead (constant) ROI trace.
constexpr double kZeroVariance = 1e-20;

void check_grid_inside(const Frame& frame, const RoiGrid& grid, std::size_t index) {
    for (const auto& r : grid.rects) {
        if (r.x0 < 0 || r.y0 < 0 || r.width < 1 || r.height < 1 ||
            static_cast<std::size_t>(r.x0 + r.width) > frame.width ||
            static_cast<std::size_t>(r.y0 + r.height) > frame.height) {
            throw BoundsError("ROI (" + std::to_string(r.x0) + "," + std::to_string(r.y0) + "," +
                              std::to_string(r.width) + "," + std::to_string(r.height) +
                              ") lies outside frame " + std::to_string(index) + " of size " +
                              std::to_string(frame.width) + "x" + std::to_string(frame.height));
        }
    }
}

void fill_frame_column(const Frame& frame, const RoiGrid& grid, std::size_t t,
                       SpatioTemporalMap& map) {
    for (std::size_t n = 0; n < grid.rects.size(); ++n) {
        const PixelRect& r = grid.rects[n];
        double sum[3] = {0.0, 0.0, 0.0};
        for (int y = r.y0; y < r.y0 + r.height; ++y) {
            const float* row = frame.rgb.data() + (static_cast<std::size_t>(y) * frame.width +
                                                   static_cast<std::size_t>(r.x0)) * 3;
            for (int x = 0; x < r.width; ++x) {
                sum[0] += row[3 * x + 0];
                sum[1] += row[3 * x + 1];
                sum[2] += row[3 * x + 2];
            }
        }
        const double area = static_cast<double>(r.width) * static_cast<double>(r.height);
        for (std::size_t c = 0; c < 3; ++c) {
            map.at(c, n, t) = static_cast<float>(sum[c] / area);
        }
    }
}

} // namespace

SpatioTemporalMap::SpatioTemporalMap(std::size_t n_rois, std::size_t n_frames, double fps,
                                     std::string subject_id)
    : n_rois_(n_rois), n_frames_(n_frames), fps_(fps), subject_id_(std::move(subject_id)),
      data_(kChannels * n_rois * n_frames, 0.0f) {
    if (!(fps > 0.0)) {
        throw ParameterError("fps must be positive");
    }
}

SpatioTemporalMap SpatioTemporalMap::slice(std::size_t start, std::size_t length) const {
    if (start + length > n_frames_) {
        throw RangeError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds " +
                         std::to_string(n_frames_) + " frames");
    }
    SpatioTemporalMap out(n_rois_, length, fps_, subject_id_);
    for (std::size_t c = 0; c < kChannels; ++c) {
        for (std::size_t n = 0; n < n_rois_; ++n) {
            const auto src = trace(c, n);
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(start), length,
                        out.trace(c, n).begin());
        }
    }
    return out;
}

RoiGrid make_grid(const FaceRect& rect, std::size_t rows, std::size_t cols) {
    if (rows == 0 || cols == 0) {
        throw DimensionError("grid needs at least one row and one column");
    }
    if (rect.width < 0 || static_cast<std::size_t>(rect.width) < cols) {
        throw DimensionError("rectangle width " + std::to_string(rect.width) +
                             " px cannot hold " + std::to_string(cols) + " columns (x axis)");
    }
    if (rect.height < 0 || static_cast<std::size_t>(rect.height) < rows) {
        throw DimensionError("rectangle height " + std::to_string(rect.height) +
                             " px cannot hold " + std::to_string(rows) + " rows (y axis)");
    }
    const int bw = rect.width / static_cast<int>(cols);
    const int bh = rect.height / static_cast<int>(rows);
    RoiGrid grid;
    grid.rows = rows;
    grid.cols = cols;
    grid.rects.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const int y0 = rect.y0 + static_cast<int>(r) * bh;
        const int h = (r + 1 == rows) ? rect.y0 + rect.height - y0 : bh;
        for (std::size_t c = 0; c < cols; ++c) {
            const int x0 = rect.x0 + static_cast<int>(c) * bw;
            const int w = (c + 1 == cols) ? rect.x0 + rect.width - x0 : bw;
            grid.rects.push_back({x0, y0, w, h});
        }
    }
    return grid;
}

SpatioTemporalMap build_map(const FrameSequence& frames, const RoiGrid& grid) {
    if (frames.frames.empty()) {
        throw LengthError("frame sequence is empty");
    }
    SpatioTemporalMap map(grid.size(), frames.frames.size(), frames.fps);
    for (std::size_t t = 0; t < frames.frames.size(); ++t) {
        const Frame& f = frames.frames[t];
        check_grid_inside(f, grid, t);
        fill_frame_column(f, grid, t, map);
    }
    return map;
}

SpatioTemporalMap build_map(const FrameSequence& frames, std::span<const RoiGrid> per_frame) {
    if (frames.frames.empty()) {
        throw LengthError("frame sequence is empty");
    }
    if (per_frame.size() != frames.frames.size()) {
        throw LengthError("got " + std::to_string(per_frame.size()) + " grids for " +
                          std::to_string(frames.frames.size()) + " frames");
    }
    const std::size_t n_rois = per_frame.front().size();
    SpatioTemporalMap map(n_rois, frames.frames.size(), frames.fps);
    for (std::size_t t = 0; t < frames.frames.size(); ++t) {
        if (per_frame[t].size() != n_rois) {
            throw DimensionError("grid of frame " + std::to_string(t) + " has " +
                                 std::to_string(per_frame[t].size()) + " ROIs, expected " +
                                 std::to_string(n_rois));
        }
        check_grid_inside(frames.frames[t], per_frame[t], t);
        fill_frame_column(frames.frames[t], per_frame[t], t, map);
    }
    return map;
}

SpatioTemporalMap normalize_train(const SpatioTemporalMap& map) {
    if (map.n_frames() < 2) {
        throw LengthError("normalize_train needs at least 2 frames");
    }
    SpatioTemporalMap out = map;
    const double len = static_cast<double>(map.n_frames());
    for (std::size_t c = 0; c < SpatioTemporalMap::kChannels; ++c) {
        for (std::size_t n = 0; n < map.n_rois(); ++n) {
            const auto src = map.trace(c, n);
            double mean = 0.0;
            for (const float v : src) {
                mean += v;
            }
            mean /= len;
            double var = 0.0;
            for (const float v : src) {
                var += (v - mean) * (v - mean);
            }
            var /= len;
            auto dst = out.trace(c, n);
            if (var <= kZeroVariance) {
                std::fill(dst.begin(), dst.end(), 0.0f);
                continue;
            }
            const double inv = 1.0 / std::sqrt(var);
            for (std::size_t t = 0; t < src.size(); ++t) {
                dst[t] = static_cast<float>((src[t] - mean) * inv);
            }
        }
    }
    return out;
}

CausalStats::CausalStats(std::string subject_id, std::size_t n_rois)
    : subject_id_(std::move(subject_id)), n_rois_(n_rois),
      mean_(SpatioTemporalMap::kChannels * n_rois, 0.0),
      m2_(SpatioTemporalMap::kChannels * n_rois, 0.0) {}

double CausalStats::stddev(std::size_t c, std::size_t n) const {
    if (count_ == 0) {
        return 0.0;
    }
    return std::sqrt(m2_[c * n_rois_ + n] / static_cast<double>(count_));
}

void CausalStats::update(const SpatioTemporalMap& window) {
    if (window.subject_id() != subject_id_) {
        throw IdentityError("causal statistics belong to subject '" + subject_id_ +
                            "', window belongs to '" + window.subject_id() + "'");
    }
    if (window.n_rois() != n_rois_) {
        throw DimensionError("window has " + std::to_string(window.n_rois()) +
                             " ROIs, statistics track " + std::to_string(n_rois_));
    }
    // Chan et al. pairwise merge of the window's moments into the history.
    const double nb = static_cast<double>(window.n_frames());
    const double na = static_cast<double>(count_);
    for (std::size_t c = 0; c < SpatioTemporalMap::kChannels; ++c) {
        for (std::size_t n = 0; n < n_rois_; ++n) {
            const auto src = window.trace(c, n);
            double mb = 0.0;
            for (const float v : src) {
                mb += v;
            }
            mb /= nb;
            double m2b = 0.0;
            for (const float v : src) {
                m2b += (v - mb) * (v - mb);
            }
            const std::size_t k = c * n_rois_ + n;
            const double delta = mb - mean_[k];
            mean_[k] += delta * nb / (na + nb);
            m2_[k] += m2b + delta * delta * na * nb / (na + nb);
        }
    }
    count_ += window.n_frames();
}

SpatioTemporalMap zscore_with(const SpatioTemporalMap& window, const CausalStats& history) {
    if (window.n_rois() != history.n_rois()) {
        throw DimensionError("window has " + std::to_string(window.n_rois()) +
                             " ROIs, accumulator has " + std::to_string(history.n_rois()));
    }
    SpatioTemporalMap out = window;
    for (std::size_t c = 0; c < SpatioTemporalMap::kChannels; ++c) {
        for (std::size_t n = 0; n < window.n_rois(); ++n) {
            const double mean = history.mean(c, n);
            const double sd = history.stddev(c, n);
            const auto src = window.trace(c, n);
            auto dst = out.trace(c, n);
            if (sd * sd <= kZeroVariance) {
                std::fill(dst.begin(), dst.end(), 0.0f);
                continue;
            }
            for (std::size_t t = 0; t < src.size(); ++t) {
                dst[t] = static_cast<float>((src[t] - mean) / sd);
            }
        }
    }
    return out;
}

SpatioTemporalMap normalize_test_causal(const SpatioTemporalMap& window, CausalStats& history) {
    history.update(window);
    return zscore_with(window, history);
}

} // namespace spo2
