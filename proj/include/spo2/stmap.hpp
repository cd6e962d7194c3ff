#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace spo2 {

/// Axis-aligned pixel rectangle.
struct PixelRect {
    int x0 = 0;
    int y0 = 0;
    int width = 0;
    int height = 0;

    bool operator==(const PixelRect&) const = default;
};

/// The facial rectangle below the eyes that the ROI grid tiles.
using FaceRect = PixelRect;

/// Row-major tiling of a FaceRect into rows x cols blocks.
struct RoiGrid {
    std::vector<PixelRect> rects;
    std::size_t rows = 14;
    std::size_t cols = 16;

    std::size_t size() const { return rects.size(); }
};

/// One RGB image, height x width x 3 interleaved, values in [0, 1].
struct Frame {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> rgb;

    float at(std::size_t y, std::size_t x, std::size_t c) const {
        return rgb[(y * width + x) * 3 + c];
    }
    float& at(std::size_t y, std::size_t x, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
};

struct FrameSequence {
    std::vector<Frame> frames;
    double fps = 30.0;
};

/// (3, N, T) tensor of per-ROI mean colour traces, channel order R, G, B.
class SpatioTemporalMap {
public:
    static constexpr std::size_t kChannels = 3;

    SpatioTemporalMap() = default;
    SpatioTemporalMap(std::size_t n_rois, std::size_t n_frames, double fps,
                      std::string subject_id = {});

    std::size_t n_rois() const { return n_rois_; }
    std::size_t n_frames() const { return n_frames_; }
    double fps() const { return fps_; }
    double duration_s() const { return static_cast<double>(n_frames_) / fps_; }
    const std::string& subject_id() const { return subject_id_; }
    void set_subject_id(std::string id) { subject_id_ = std::move(id); }

    float& at(std::size_t c, std::size_t n, std::size_t t) {
        return data_[(c * n_rois_ + n) * n_frames_ + t];
    }
    float at(std::size_t c, std::size_t n, std::size_t t) const {
        return data_[(c * n_rois_ + n) * n_frames_ + t];
    }

    std::span<float> trace(std::size_t c, std::size_t n) {
        return {data_.data() + (c * n_rois_ + n) * n_frames_, n_frames_};
    }
    std::span<const float> trace(std::size_t c, std::size_t n) const {
        return {data_.data() + (c * n_rois_ + n) * n_frames_, n_frames_};
    }

    std::vector<float>& data() { return data_; }
    const std::vector<float>& data() const { return data_; }

    /// Frames [start, start + length) as a new map with the same metadata.
    SpatioTemporalMap slice(std::size_t start, std::size_t length) const;

    bool same_layout(const SpatioTemporalMap& other) const {
        return n_rois_ == other.n_rois_ && n_frames_ == other.n_frames_ && fps_ == other.fps_;
    }

private:
    std::size_t n_rois_ = 0;
    std::size_t n_frames_ = 0;
    double fps_ = 30.0;
    std::string subject_id_;
    std::vector<float> data_;
};

/// Splits `rect` into rows x cols blocks. Each axis is partitioned into equal
/// integer blocks; the remainder goes to the last block of that axis.
RoiGrid make_grid(const FaceRect& rect, std::size_t rows = 14, std::size_t cols = 16);

/// Spatial mean of each channel over each ROI in every frame.
SpatioTemporalMap build_map(const FrameSequence& frames, const RoiGrid& grid);

/// Same, with a separately detected grid for every frame.
SpatioTemporalMap build_map(const FrameSequence& frames, std::span<const RoiGrid> per_frame);

/// Z-scores every (channel, ROI) trace over the whole recording using the
/// population variance. Zero-variance traces become all zeros.
SpatioTemporalMap normalize_train(const SpatioTemporalMap& map);

/// Running per-(channel, ROI) count / mean / M2 (Welford) for one subject.
class CausalStats {
public:
    CausalStats() = default;
    CausalStats(std::string subject_id, std::size_t n_rois);

    const std::string& subject_id() const { return subject_id_; }
    std::size_t n_rois() const { return n_rois_; }
    std::size_t count() const { return count_; }
    double mean(std::size_t c, std::size_t n) const { return mean_[c * n_rois_ + n]; }
    /// Population standard deviation of everything seen so far.
    double stddev(std::size_t c, std::size_t n) const;

    void update(const SpatioTemporalMap& window);

private:
    std::string subject_id_;
    std::size_t n_rois_ = 0;
    std::size_t count_ = 0;
    std::vector<double> mean_;
    std::vector<double> m2_;
};

/// Z-scores `window` with the accumulator's current statistics, unchanged.
SpatioTemporalMap zscore_with(const SpatioTemporalMap& window, const CausalStats& history);

/// Extends `history` with `window` and z-scores the window using the updated
/// statistics, so only current and past samples are used.
SpatioTemporalMap normalize_test_causal(const SpatioTemporalMap& window, CausalStats& history);

} // namespace spo2
