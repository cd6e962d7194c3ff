#pragma once

#include "spo2/ops.hpp"
#include "spo2/optim.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace spo2 {

enum class Variant { plain, early, filter, end2end };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
    Variant variant = Variant::filter;
    std::vector<std::size_t> stage_channels{8, 16, 32, 64};
    std::size_t stem_stride = 2;
    std::size_t d_spo2 = 10;
    double alpha = 0.1;
    std::size_t dcac_kernel = 31;
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

/// Throws ConfigError on invariant violations.
void validate(const ModelConfig& cfg);

void to_json(nlohmann::json& j, const ModelConfig& cfg);
/// Strict: unknown keys are rejected, missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// Batched (B, 3, N, T) maps. Which fields are read depends on the variant:
/// plain and end2end use `x`; early and filter use `x_dc` and `x_ac`.
template <typename T>
struct ModelInput {
    tn::Tensor<T> x;
    tn::Tensor<T> x_dc;
    tn::Tensor<T> x_ac;
};

template <typename T>
struct SpO2Prediction {
    tn::Tensor<T> y_out;     // (B, d_spo2), scaled units
    tn::Tensor<T> x_dc_hat;  // end2end only
    tn::Tensor<T> x_ac_hat;  // end2end only
};

namespace detail {

template <typename T>
struct ConvBn {
    tn::Tensor<T> weight;
    tn::Tensor<T> gamma;
    tn::Tensor<T> beta;
    tn::BatchNormState<T> bn;
    tn::Conv2dOptions opts;

    tn::Tensor<T> forward(const tn::Tensor<T>& x, bool train, bool activate);
};

template <typename T>
struct ResidualBlock {
    ConvBn<T> conv1;
    ConvBn<T> conv2;
    std::optional<ConvBn<T>> shortcut;

    tn::Tensor<T> forward(const tn::Tensor<T>& x, bool train);
};

template <typename T>
struct Branch {
    ConvBn<T> stem;
    std::array<ResidualBlock<T>, 4> stages;
};

/// depthwise (1 x k) -> BN -> ReLU -> depthwise (1 x k) with bias.
template <typename T>
struct DcAcHead {
    tn::Tensor<T> weight1;
    tn::Tensor<T> gamma;
    tn::Tensor<T> beta;
    tn::BatchNormState<T> bn;
    tn::Tensor<T> weight2;
    tn::Tensor<T> bias2;
    std::size_t kernel = 31;

    tn::Tensor<T> forward(const tn::Tensor<T>& x, bool train);
};

} // namespace detail

/// Residual-network SpO2 regressor in one of four variants. Each branch is a
/// stride-2 3x3 stem followed by four single-block residual stages; the dual
/// branch variants exchange information through MMTM after every stage and
/// concatenate the pooled features of both branches before a linear head.
template <typename T>
class Spo2Net {
public:
    explicit Spo2Net(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }

    SpO2Prediction<T> forward(const ModelInput<T>& input, bool train);

    /// Trainable tensors, in a fixed order, with stable dotted names.
    std::vector<tn::NamedTensor<T>> parameters() const;
    /// Batch-norm running statistics.
    std::vector<tn::NamedTensor<T>> buffers() const;
    std::size_t parameter_count() const;

    /// With fusion disabled the MMTM blocks are skipped entirely.
    void set_fusion_enabled(bool enabled) { fusion_enabled_ = enabled; }

    detail::DcAcHead<T>& dc_head() { return *dc_head_; }
    detail::DcAcHead<T>& ac_head() { return *ac_head_; }

private:
    tn::Tensor<T> run_dual(const tn::Tensor<T>& dc_in, const tn::Tensor<T>& ac_in, bool train);

    ModelConfig cfg_;
    bool fusion_enabled_ = true;
    std::vector<detail::Branch<T>> branches_;
    std::vector<tn::MmtmParams<T>> mmtm_;
    std::optional<detail::DcAcHead<T>> dc_head_;
    std::optional<detail::DcAcHead<T>> ac_head_;
    tn::Tensor<T> head_weight_;
    tn::Tensor<T> head_bias_;
};

/// MSE + (1 - Pearson r), each averaged over the batch.
template <typename T>
tn::Tensor<T> loss_spo2(const tn::Tensor<T>& y_out, const tn::Tensor<T>& y_gt);

/// loss_spo2 + alpha * (MSE(x_dc_hat, x_dc) + MSE(x_ac_hat, x_ac)).
template <typename T>
tn::Tensor<T> loss_end_to_end(const SpO2Prediction<T>& pred, const tn::Tensor<T>& y_gt,
                              const tn::Tensor<T>& x_dc, const tn::Tensor<T>& x_ac, double alpha);

/// Whichever of the two losses applies to the configured variant.
template <typename T>
tn::Tensor<T> variant_loss(const ModelConfig& cfg, const SpO2Prediction<T>& pred,
                           const tn::Tensor<T>& y_gt, const ModelInput<T>& input);

} // namespace spo2
