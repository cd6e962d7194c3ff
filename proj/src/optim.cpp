#include "spo2/optim.hpp"

#include "spo2/errors.hpp"

#include <algorithm>
#include <cmath>

namespace spo2::tn {

template <typename T>
Adam<T>::Adam(std::vector<NamedTensor<T>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
    moments_.reserve(params_.size());
    for (const auto& p : params_) {
        moments_.push_back({std::vector<T>(p.tensor.numel(), T(0)),
                            std::vector<T>(p.tensor.numel(), T(0))});
    }
}

template <typename T>
void Adam<T>::step() {
    ++steps_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor<T>& param = params_[k].tensor;
        if (!param.has_grad()) {
            continue;
        }
        auto grad = param.grad();
        auto value = param.data();
        auto& m = moments_[k].m;
        auto& v = moments_[k].v;
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            value[i] -= static_cast<T>(options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps));
        }
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (auto& p : params_) {
        p.tensor.zero_grad();
    }
}

template class Adam<float>;
template class Adam<double>;

double GradCheckReport::max_rel_error() const {
    double worst = 0.0;
    for (const auto& e : entries) {
        worst = std::max(worst, e.max_rel_error);
    }
    return worst;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& fn,
                           const std::vector<NamedTensor<double>>& inputs,
                           GradCheckOptions options) {
    std::vector<Tensor<double>> handles;
    for (const auto& in : inputs) {
        handles.push_back(in.tensor);
        handles.back().set_requires_grad(true);
        handles.back().zero_grad();
    }
    Tensor<double> out = fn();
    if (out.numel() != 1) {
        throw ShapeError("grad_check: function must return a scalar, got " +
                         shape_str(out.shape()));
    }
    out.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& h : handles) {
        analytic.emplace_back(h.grad().begin(), h.grad().end());
    }

    GradCheckReport report;
    NoGradGuard no_grad;
    std::vector<std::vector<std::size_t>> all_indices;
    std::vector<std::vector<double>> all_numeric;
    double global_scale = 0.0;
    for (std::size_t k = 0; k < handles.size(); ++k) {
        auto values = handles[k].data();
        const std::size_t n = values.size();
        const std::size_t stride =
            (options.max_elements == 0 || n <= options.max_elements) ? 1
                                                                      : n / options.max_elements;
        std::vector<std::size_t> indices;
        for (std::size_t i = 0; i < n; i += stride) {
            indices.push_back(i);
        }
        auto difference = [&](std::size_t i, double h) {
            const double saved = values[i];
            values[i] = saved + h;
            const double plus = fn().item();
            values[i] = saved - h;
            const double minus = fn().item();
            values[i] = saved;
            return (plus - minus) / (2.0 * h);
        };
        std::vector<double> numeric(indices.size());
        for (std::size_t j = 0; j < indices.size(); ++j) {
            const std::size_t i = indices[j];
            numeric[j] = difference(i, options.step);
            if (options.refine_step > 0.0) {
                const double fine = difference(i, options.refine_step);
                if (std::abs(fine - analytic[k][i]) < std::abs(numeric[j] - analytic[k][i])) {
                    numeric[j] = fine;
                }
            }
            global_scale = std::max(global_scale, std::abs(numeric[j]));
        }
        all_indices.push_back(std::move(indices));
        all_numeric.push_back(std::move(numeric));
    }
    for (std::size_t k = 0; k < handles.size(); ++k) {
        const auto& indices = all_indices[k];
        const auto& numeric = all_numeric[k];
        double scale = 0.0;
        for (const double v : numeric) {
            scale = std::max(scale, std::abs(v));
        }
        const double floor = std::max({1e-3 * scale, 1e-6 * global_scale, 1e-7});
        GradCheckEntry entry{inputs[k].name, 0.0, 0.0, indices.size()};
        for (std::size_t j = 0; j < indices.size(); ++j) {
            const double a = analytic[k][indices[j]];
            const double d = std::abs(a - numeric[j]);
            const double denom = std::max({std::abs(a), std::abs(numeric[j]), floor});
            entry.max_abs_error = std::max(entry.max_abs_error, d);
            entry.max_rel_error = std::max(entry.max_rel_error, d / denom);
        }
        report.entries.push_back(entry);
    }
    return report;
}

} // namespace spo2::tn
