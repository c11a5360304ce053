// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace wpod::nn {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutableMap = Eigen::Map<RowMatrix>;

thread_local double g_kernel_grad_factor = 1.0;

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " expects a rank-4 BxHxWxC tensor, got " +
                     to_string(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t batch, in_h, in_w, in_c;
  std::size_t k_h, k_w, out_c;
  std::size_t out_h, out_w;
  std::size_t stride;
  long pad_top, pad_left;
  Padding padding;

  std::size_t rows() const { return batch * out_h * out_w; }
  std::size_t cols() const { return k_h * k_w * in_c; }
  bool is_pointwise() const { return k_h == 1 && k_w == 1 && stride == 1; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, std::size_t stride,
                           Padding padding) {
  require_rank4(input, "conv2d");
  if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be kh x kw x Cin x Cout");
  if (stride == 0) throw ShapeError("conv2d stride must be >= 1");
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_h = input.dim(1);
  g.in_w = input.dim(2);
  g.in_c = input.dim(3);
  g.k_h = kernel.dim(0);
  g.k_w = kernel.dim(1);
  g.out_c = kernel.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (kernel.dim(2) != g.in_c) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) +
                     ", kernel " + to_string(kernel.shape()));
  }
  if (padding == Padding::kValid) {
    if (g.in_h < g.k_h || g.in_w < g.k_w) throw ShapeError("conv2d input smaller than kernel");
    g.out_h = (g.in_h - g.k_h) / stride + 1;
    g.out_w = (g.in_w - g.k_w) / stride + 1;
    g.pad_top = g.pad_left = 0;
  } else {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const long total_h = std::max<long>(
        0, static_cast<long>((g.out_h - 1) * stride + g.k_h) - static_cast<long>(g.in_h));
    const long total_w = std::max<long>(
        0, static_cast<long>((g.out_w - 1) * stride + g.k_w) - static_cast<long>(g.in_w));
    g.pad_top = total_h / 2;
    g.pad_left = total_w / 2;
  }
  return g;
}

// Maps an output tap to a source index, or -1 for a zero-padded tap.
long source_index(long pos, long extent, Padding padding) {
  if (pos >= 0 && pos < extent) return pos;
  if (padding == Padding::kReplicate) return std::clamp<long>(pos, 0, extent - 1);
  return -1;
}

void im2col(const ConvGeometry& g, const double* in, double* cols) {
  const std::size_t ncols = g.cols();
  const std::size_t span = g.k_w * g.in_c;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        const long iy = source_index(static_cast<long>(oy * g.stride + ky) - g.pad_top,
                                     static_cast<long>(g.in_h), g.padding);
        const double* src_row = iy < 0 ? nullptr : in + (b * g.in_h + iy) * g.in_w * g.in_c;
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double* dst = cols + ((b * g.out_h + oy) * g.out_w + ox) * ncols + ky * span;
          if (!src_row) {
            std::fill(dst, dst + span, 0.0);
            continue;
          }
          const long x0 = static_cast<long>(ox * g.stride) - g.pad_left;
          if (x0 >= 0 && x0 + static_cast<long>(g.k_w) <= static_cast<long>(g.in_w)) {
            // Taps along a row are contiguous in HWC layout.
            std::copy(src_row + x0 * g.in_c, src_row + x0 * g.in_c + span, dst);
            continue;
          }
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = source_index(x0 + static_cast<long>(kx), static_cast<long>(g.in_w),
                                         g.padding);
            double* tap = dst + kx * g.in_c;
            if (ix < 0) {
              std::fill(tap, tap + g.in_c, 0.0);
            } else {
              std::copy(src_row + ix * g.in_c, src_row + (ix + 1) * g.in_c, tap);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* in_grad) {
  const std::size_t ncols = g.cols();
  const std::size_t span = g.k_w * g.in_c;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ky = 0; ky < g.k_h; ++ky) {
        const long iy = source_index(static_cast<long>(oy * g.stride + ky) - g.pad_top,
                                     static_cast<long>(g.in_h), g.padding);
        if (iy < 0) continue;
        double* dst_row = in_grad + (b * g.in_h + iy) * g.in_w * g.in_c;
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          const double* src = cols + ((b * g.out_h + oy) * g.out_w + ox) * ncols + ky * span;
          const long x0 = static_cast<long>(ox * g.stride) - g.pad_left;
          if (x0 >= 0 && x0 + static_cast<long>(g.k_w) <= static_cast<long>(g.in_w)) {
            double* dst = dst_row + x0 * g.in_c;
            for (std::size_t k = 0; k < span; ++k) dst[k] += src[k];
            continue;
          }
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = source_index(x0 + static_cast<long>(kx), static_cast<long>(g.in_w),
                                         g.padding);
            if (ix < 0) continue;
            const double* tap = src + kx * g.in_c;
            double* dst = dst_row + ix * g.in_c;
            for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += tap[c];
          }
        }
      }
    }
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + " shape mismatch: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              Padding padding) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != g.out_c) {
    throw ShapeError("conv2d bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(g.out_c));
  }

  std::vector<double> out(g.rows() * g.out_c);
  MutableMap out_m(out.data(), g.rows(), g.out_c);
  ConstMap k_m(kernel.data().data(), g.cols(), g.out_c);
  if (g.is_pointwise()) {
    out_m.noalias() = ConstMap(input.data().data(), g.rows(), g.cols()) * k_m;
  } else {
    std::vector<double> cols(g.rows() * g.cols());
    im2col(g, input.data().data(), cols.data());
    out_m.noalias() = ConstMap(cols.data(), g.rows(), g.cols()) * k_m;
  }
  if (has_bias) {
    out_m.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), g.out_c);
  }

  std::vector<Tensor> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return Tensor::make_result(
      {g.batch, g.out_h, g.out_w, g.out_c}, std::move(out), std::move(inputs),
      [g, has_bias](detail::Node& self) {
        detail::Node& in = *self.inputs[0];
        detail::Node& k = *self.inputs[1];
        ConstMap grad_out(self.grad.data(), g.rows(), g.out_c);

        std::vector<double> cols_storage;
        const double* cols = in.value.data();
        if (!g.is_pointwise() && k.requires_grad) {
          cols_storage.resize(g.rows() * g.cols());
          im2col(g, in.value.data(), cols_storage.data());
          cols = cols_storage.data();
        }
        if (k.requires_grad) {
          MutableMap k_grad(k.ensure_grad().data(), g.cols(), g.out_c);
          RowMatrix delta = ConstMap(cols, g.rows(), g.cols()).transpose() * grad_out;
          if (g_kernel_grad_factor != 1.0) delta *= g_kernel_grad_factor;
          k_grad += delta;
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          // Plain row loop: Eigen's vectorized reduction peels to the buffer's
          // alignment, which would make the sum order depend on the heap.
          double* b_grad = self.inputs[2]->ensure_grad().data();
          for (std::size_t r = 0; r < g.rows(); ++r) {
            const double* row = self.grad.data() + r * g.out_c;
            for (std::size_t c = 0; c < g.out_c; ++c) b_grad[c] += row[c];
          }
        }
        if (in.requires_grad) {
          const ConstMap k_val(k.value.data(), g.cols(), g.out_c);
          if (g.is_pointwise()) {
            MutableMap in_grad(in.ensure_grad().data(), g.rows(), g.cols());
            in_grad.noalias() += grad_out * k_val.transpose();
          } else {
            std::vector<double> dcols(g.rows() * g.cols());
            MutableMap(dcols.data(), g.rows(), g.cols()).noalias() = grad_out * k_val.transpose();
            col2im_add(g, dcols.data(), in.ensure_grad().data());
          }
        }
      });
}

Tensor maxpool2d(const Tensor& input) {
  require_rank4(input, "maxpool2d");
  const std::size_t b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2d needs even spatial dims, got " + to_string(input.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(b * oh * ow * c);
  std::vector<std::size_t> argmax(out.size());
  const auto in = input.data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t o = ((n * oh + y) * ow + x) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((n * h + 2 * y) * w + 2 * x) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
              if (in[idx] > in[best]) best = idx;
            }
          }
          out[o + ch] = in[best];
          argmax[o + ch] = best;
        }
      }
    }
  }
  return Tensor::make_result({b, oh, ow, c}, std::move(out), {input},
                             [argmax = std::move(argmax)](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < argmax.size(); ++i) {
                                 g[argmax[i]] += self.grad[i];
                               }
                             });
}

Tensor relu(const Tensor& input) {
  std::vector<double> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_result(input.shape(), std::move(out), {input}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, Mode mode,
                 const BatchNormOptions& options) {
  require_rank4(input, "batchnorm");
  const std::size_t c = input.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->size() != c) {
      throw ShapeError("batchnorm parameter has " + std::to_string(t->size()) +
                       " entries for " + std::to_string(c) + " channels");
    }
  }
  const std::size_t count = input.size() / std::max<std::size_t>(c, 1);
  const auto x = input.data();

  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (mode == Mode::kTrain) {
    std::vector<double> var(c, 0.0);
    for (std::size_t p = 0; p < count; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[p * c + ch];
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t p = 0; p < count; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = x[p * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] /= static_cast<double>(count);
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + options.epsilon);
      rm[ch] = options.momentum * rm[ch] + (1.0 - options.momentum) * mean[ch];
      rv[ch] = options.momentum * rv[ch] + (1.0 - options.momentum) * var[ch];
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0 / std::sqrt(running_var.data()[ch] + options.epsilon);
    }
  }

  std::vector<double> xhat(x.size()), out(x.size());
  const auto gm = gamma.data();
  const auto bt = beta.data();
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = p * c + ch;
      xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
      out[i] = gm[ch] * xhat[i] + bt[ch];
    }
  }

  const bool batch_stats = mode == Mode::kTrain;
  return Tensor::make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [c, count, batch_stats, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node& self) {
        auto& in = *self.inputs[0];
        auto& gam = *self.inputs[1];
        auto& bet = *self.inputs[2];
        const auto& dy = self.grad;
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t p = 0; p < count; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            sum_dy[ch] += dy[p * c + ch];
            sum_dy_xhat[ch] += dy[p * c + ch] * xhat[p * c + ch];
          }
        }
        if (gam.requires_grad) {
          auto& g = gam.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
        }
        if (bet.requires_grad) {
          auto& g = bet.ensure_grad();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
        }
        if (!in.requires_grad) return;
        auto& g = in.ensure_grad();
        const double n = static_cast<double>(count);
        std::vector<double> scale(c), shift(c), slope(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
          scale[ch] = gam.value[ch] * inv_std[ch];
          shift[ch] = batch_stats ? sum_dy[ch] / n : 0.0;
          slope[ch] = batch_stats ? sum_dy_xhat[ch] / n : 0.0;
        }
        for (std::size_t p = 0; p < count; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t i = p * c + ch;
            g[i] += scale[ch] * (dy[i] - shift[ch] - xhat[i] * slope[ch]);
          }
        }
      });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels spatial mismatch: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t ca = a.dim(3), cb = b.dim(3), cc = ca + cb;
  const std::size_t pixels = a.dim(0) * a.dim(1) * a.dim(2);
  std::vector<double> out(pixels * cc);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(av.begin() + p * ca, ca, out.begin() + p * cc);
    std::copy_n(bv.begin() + p * cb, cb, out.begin() + p * cc + ca);
  }
  return Tensor::make_result({a.dim(0), a.dim(1), a.dim(2), cc}, std::move(out), {a, b},
                             [pixels, ca, cb, cc](detail::Node& self) {
                               auto& na = *self.inputs[0];
                               auto& nb = *self.inputs[1];
                               if (na.requires_grad && ca > 0) {
                                 auto& g = na.ensure_grad();
                                 for (std::size_t p = 0; p < pixels; ++p)
                                   for (std::size_t k = 0; k < ca; ++k)
                                     g[p * ca + k] += self.grad[p * cc + k];
                               }
                               if (nb.requires_grad && cb > 0) {
                                 auto& g = nb.ensure_grad();
                                 for (std::size_t p = 0; p < pixels; ++p)
                                   for (std::size_t k = 0; k < cb; ++k)
                                     g[p * cb + k] += self.grad[p * cc + ca + k];
                               }
                             });
}

Tensor softmax_pair(const Tensor& logits) {
  if (logits.rank() == 0 || logits.shape().back() != 2) {
    throw ShapeError("softmax_pair needs a trailing dimension of 2, got " +
                     to_string(logits.shape()));
  }
  const auto z = logits.data();
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); i += 2) {
    const double m = std::max(z[i], z[i + 1]);
    const double e0 = std::exp(z[i] - m);
    const double e1 = std::exp(z[i + 1] - m);
    out[i] = e0 / (e0 + e1);
    out[i + 1] = e1 / (e0 + e1);
  }
  std::vector<double> probs = out;
  return Tensor::make_result(logits.shape(), std::move(out), {logits},
                             [probs = std::move(probs)](detail::Node& self) {
                               auto& g = self.inputs[0]->ensure_grad();
                               for (std::size_t i = 0; i < probs.size(); i += 2) {
                                 const double p0 = probs[i], p1 = probs[i + 1];
                                 const double dot = self.grad[i] * p0 + self.grad[i + 1] * p1;
                                 g[i] += p0 * (self.grad[i] - dot);
                                 g[i + 1] += p1 * (self.grad[i + 1] - dot);
                               }
                             });
}

Tensor magnitude(const Tensor& a, const Tensor& b, double epsilon) {
  require_same_shape(a, b, "magnitude");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::sqrt(av[i] * av[i] + bv[i] * bv[i] + epsilon);
  }
  std::vector<double> mag = out;
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [mag = std::move(mag)](detail::Node& self) {
                               for (std::size_t k = 0; k < 2; ++k) {
                                 auto& in = *self.inputs[k];
                                 if (!in.requires_grad) continue;
                                 auto& g = in.ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   g[i] += self.grad[i] * in.value[i] / mag[i];
                                 }
                               }
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return Tensor::make_result({1}, {total}, {a}, [](detail::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

namespace debug {

ScopedKernelGradCorruption::ScopedKernelGradCorruption(double factor)
    : previous_(g_kernel_grad_factor) {
  g_kernel_grad_factor = factor;
}

ScopedKernelGradCorruption::~ScopedKernelGradCorruption() { g_kernel_grad_factor = previous_; }

}  // namespace debug
}  // namespace wpod::nn
