#pragma once

#include "spo2/tensor.hpp"

#include <utility>

namespace spo2::tn {

// All spatial ops take batched (B, C, H, W) tensors. A single map is a batch
// of one.

struct Conv2dOptions {
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    std::size_t pad_h = 0;
    std::size_t pad_w = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Cross-correlation. x: (B, C_in, H, W), weight: (C_out, C_in, kh, kw),
/// bias: (C_out) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opts);

/// Per-channel cross-correlation. x: (B, C, H, W), weight: (C, 1, kh, kw),
/// bias: (C) or undefined.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           Conv2dOptions opts);

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(Tensor<T>::zeros({channels})),
          running_var(Tensor<T>::full({channels}, T(1))) {}
};

/// Per-channel normalization over (B, H, W). Train mode uses batch statistics
/// (population variance) and updates the running estimates; eval mode uses
/// the running estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormState<T>& state, bool train);

/// y = x W^T + b. x: (B, F), weight: (O, F), bias: (O).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Global average pooling (B, C, H, W) -> (B, C).
template <typename T>
Tensor<T> gap(const Tensor<T>& x);

/// Concatenation along axis 1; all other axes must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// x: (B, C, H, W) scaled by gate: (B, C) broadcast over H, W.
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& gate);

/// Mean over all elements of (pred - target)^2.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// Mean over windows of 1 - r, r the Pearson coefficient along the last axis.
/// A window where either side has (near) zero spread contributes r = 0.
/// Gradients flow to `pred` only.
template <typename T>
Tensor<T> negcorr_loss(const Tensor<T>& pred, const Tensor<T>& target);

/// Squeeze-and-excitation style exchange between two feature maps.
template <typename T>
struct MmtmParams {
    Tensor<T> w_z;  // (C_z, C_a + C_b)
    Tensor<T> b_z;  // (C_z)
    Tensor<T> w_a;  // (C_a, C_z)
    Tensor<T> b_a;  // (C_a)
    Tensor<T> w_b;  // (C_b, C_z)
    Tensor<T> b_b;  // (C_b)
};

inline std::size_t mmtm_joint_dim(std::size_t c_a, std::size_t c_b) {
    return (c_a + c_b + 3) / 4;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> mmtm_fuse(const Tensor<T>& a, const Tensor<T>& b,
                                          const MmtmParams<T>& params);

/// The gates 2*sigmoid(.) that mmtm_fuse applies, exposed for inspection.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> mmtm_gates(const Tensor<T>& a, const Tensor<T>& b,
                                           const MmtmParams<T>& params);

} // namespace spo2::tn
