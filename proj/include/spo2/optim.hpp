#pragma once

#include "spo2/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace spo2::tn {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
    std::vector<T> m;
    std::vector<T> v;
};

/// Adam with bias correction. Holds handles to the parameters it updates
/// plus their first/second moment estimates.
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<NamedTensor<T>> params, AdamOptions options = {});

    /// Applies one update from the gradients currently stored on the
    /// parameters. Parameters without a gradient buffer are left unchanged.
    void step();
    void zero_grad();

    std::size_t step_count() const { return steps_; }
    const AdamOptions& options() const { return options_; }
    const std::vector<NamedTensor<T>>& params() const { return params_; }
    const std::vector<AdamMoments<T>>& moments() const { return moments_; }

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<AdamMoments<T>> moments_;
    AdamOptions options_;
    std::size_t steps_ = 0;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const;
    bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

struct GradCheckOptions {
    double step = 1e-5;
    // When positive, every element is also differenced with this step and the
    // closer of the two estimates is kept. A piecewise-linear function (ReLU)
    // with a kink inside one step still agrees at the other.
    double refine_step = 0.0;
    // Checks at most this many evenly strided elements per tensor; 0 = all.
    std::size_t max_elements = 0;
};

/// Compares reverse-mode gradients of the scalar `fn` against central finite
/// differences for every element of `inputs`. The per-element relative error
/// is |a - n| / max(|a|, |n|, floor), with floor the largest of 1e-3 times
/// the largest finite-difference magnitude in that tensor, 1e-6 times the
/// largest over all inputs, and 1e-7. Entries that are negligible relative
/// to their tensor, or zero up to finite-difference roundoff, do not dominate
/// the report.
GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           const std::vector<NamedTensor<double>>& inputs,
                           GradCheckOptions options = {});

} // namespace spo2::tn
