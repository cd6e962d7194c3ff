#pragma once

#include "spo2/stmap.hpp"
#include "spo2/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace spo2::test {

inline std::vector<double> randn(std::size_t n, std::uint64_t seed, double sigma = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

inline tn::Tensor<double> random_tensor(tn::Shape shape, std::uint64_t seed, double sigma = 1.0,
                                        bool requires_grad = true) {
    const std::size_t n = tn::shape_numel(shape);
    return tn::Tensor<double>::from(std::move(shape), randn(n, seed, sigma), requires_grad);
}

inline SpatioTemporalMap random_map(std::size_t n_rois, std::size_t n_frames, std::uint64_t seed,
                                    double offset = 0.0, std::string id = "r") {
    SpatioTemporalMap map(n_rois, n_frames, 30.0, std::move(id));
    const auto v = randn(map.data().size(), seed);
    for (std::size_t i = 0; i < v.size(); ++i) map.data()[i] = static_cast<float>(offset + v[i]);
    return map;
}

inline std::vector<double> sine(std::size_t n, double freq_hz, double fs, double amp = 1.0,
                                double offset = 0.0) {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = offset + amp * std::sin(2.0 * M_PI * freq_hz * static_cast<double>(i) / fs);
    }
    return x;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double rms_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += v[i] * v[i];
    return std::sqrt(s / static_cast<double>(hi - lo));
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("spo2_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace spo2::test
