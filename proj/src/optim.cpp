// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace wpod::nn {

Parameter::Parameter(std::string name_in, Tensor initial, bool trainable_in)
    : name(std::move(name_in)),
      value(initial.shape(), std::vector<double>(initial.data().begin(), initial.data().end()),
            trainable_in),
      adam_m(initial.shape(), 0.0),
      adam_v(initial.shape(), 0.0),
      trainable(trainable_in) {}

void AdamConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("adam learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam beta1 must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam beta2 must be in [0,1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("adam epsilon must be > 0");
}

void adam_step(std::span<Parameter> params, AdamConfig& config) {
  ++config.step_count;
  const double t = static_cast<double>(config.step_count);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (auto& p : params) {
    if (!p.trainable) continue;
    const auto g = p.value.grad();
    auto w = p.value.mutable_data();
    auto m = p.adam_m.mutable_data();
    auto v = p.adam_v.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

void zero_grad(std::span<Parameter> params) {
  for (auto& p : params) p.value.zero_grad();
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<Tensor> leaves,
                           const GradCheckOptions& options) {
  for (auto& leaf : leaves) leaf.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    const auto g = leaf.grad();
    analytic.emplace_back(g.empty() ? std::vector<double>(leaf.size(), 0.0)
                                    : std::vector<double>(g.begin(), g.end()));
  }

  GradCheckResult result;
  result.per_tensor.assign(leaves.size(), 0.0);
  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  const double h = options.perturbation;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    auto values = leaves[t].mutable_data();
    std::vector<std::size_t> indices(values.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (indices.size() > options.samples_per_tensor) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(options.samples_per_tensor);
      std::sort(indices.begin(), indices.end());
    }
    for (std::size_t idx : indices) {
      const double saved = values[idx];
      values[idx] = saved + h;
      const double plus = loss().item();
      values[idx] = saved - h;
      const double minus = loss().item();
      values[idx] = saved;
      GradCheckEntry e;
      e.tensor = t;
      e.index = idx;
      e.analytic = analytic[t][idx];
      e.numeric = (plus - minus) / (2.0 * h);
      e.relative_error = relative_error(e.analytic, e.numeric);
      result.per_tensor[t] = std::max(result.per_tensor[t], e.relative_error);
      result.max_relative_error = std::max(result.max_relative_error, e.relative_error);
      result.entries.push_back(e);
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

}  // namespace wpod::nn
