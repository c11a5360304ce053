// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable layers over batch x height x width x channels tensors.

#pragma once

#include <cstddef>

#include "wpod/tensor.hpp"

namespace wpod::nn {

enum class Padding {
  kValid,      // no padding
  kSame,       // zero padding, output = ceil(input / stride)
  kReplicate,  // clamp-to-edge padding, output = ceil(input / stride)
};

enum class Mode { kTrain, kInfer };

/// Cross-correlation. kernel is kh x kw x Cin x Cout; bias (Cout) may be an
/// undefined Tensor.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride = 1, Padding padding = Padding::kSame);

/// 2x2 window, stride 2. Ties send the gradient to the first element in
/// row-major window order.
Tensor maxpool2d(const Tensor& input);

/// Subgradient at 0 is 0.
Tensor relu(const Tensor& input);

struct BatchNormOptions {
  double momentum = 0.99;
  double epsilon = 1e-5;
};

/// Per-channel normalization. Train mode uses batch statistics and folds them
/// into running_mean / running_var; infer mode reads the running statistics.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, Mode mode,
                 const BatchNormOptions& options = {});

Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Max-subtracted softmax over a trailing dimension of size 2.
Tensor softmax_pair(const Tensor& logits);

/// sqrt(a^2 + b^2 + epsilon), elementwise.
Tensor magnitude(const Tensor& a, const Tensor& b, double epsilon = 1e-12);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);

namespace debug {

/// Multiplies every conv2d kernel gradient on this thread by `factor` while
/// alive. Negative control for gradient checking only.
class ScopedKernelGradCorruption {
 public:
  explicit ScopedKernelGradCorruption(double factor);
  ~ScopedKernelGradCorruption();
  ScopedKernelGradCorruption(const ScopedKernelGradCorruption&) = delete;
  ScopedKernelGradCorruption& operator=(const ScopedKernelGradCorruption&) = delete;

 private:
  double previous_;
};

}  // namespace debug
}  // namespace wpod::nn
