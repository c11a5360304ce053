// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wpod/tensor.hpp"

namespace wpod::nn {

/// A named leaf tensor plus its optimizer state.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor adam_m;
  Tensor adam_v;
  bool trainable = true;

  Parameter(std::string name, Tensor initial, bool trainable);
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step_count = 0;

  /// Throws std::invalid_argument on out-of-range hyperparameters.
  void validate() const;
};

/// One bias-corrected Adam update over every trainable parameter that has a
/// gradient. Frozen parameters are never written. Increments step_count.
void adam_step(std::span<Parameter> params, AdamConfig& config);

void zero_grad(std::span<Parameter> params);

struct GradCheckOptions {
  double perturbation = 1e-4;
  /// Entries checked per tensor; tensors at or below this size are checked
  /// exhaustively, larger ones are sampled.
  std::size_t samples_per_tensor = 8;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::size_t tensor = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  /// Worst error per checked tensor, in input order.
  std::vector<double> per_tensor;
  std::vector<GradCheckEntry> entries;
};

/// |a - n| / max(1e-8, |a| + |n|).
double relative_error(double analytic, double numeric);

/// Compares reverse-mode gradients of loss() w.r.t. each leaf against central
/// finite differences. loss() must rebuild its graph on every call and be
/// deterministic.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                           const GradCheckOptions& options = {});

}  // namespace wpod::nn
