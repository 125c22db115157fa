#include "fedseg/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedseg {

namespace {

void check_conv_shapes(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                       int padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw std::invalid_argument("conv2d: expected 4-D input and kernel, got input " +
                                input.shape_str() + " kernel " + kernel.shape_str());
  }
  if (kernel.extent(2) != kernel.extent(3)) {
    throw std::invalid_argument("conv2d: kernel must be square, got " + kernel.shape_str());
  }
  if (input.extent(1) != kernel.extent(1)) {
    throw std::invalid_argument("conv2d: channel mismatch between input " +
                                input.shape_str() + " and kernel " + kernel.shape_str());
  }
  if (bias.rank() != 1 || bias.extent(0) != kernel.extent(0)) {
    throw std::invalid_argument("conv2d: bias " + bias.shape_str() +
                                " does not match kernel " + kernel.shape_str());
  }
  if (padding < 0) {
    throw std::invalid_argument("conv2d: negative padding");
  }
  const long k = static_cast<long>(kernel.extent(2));
  const long ho = static_cast<long>(input.extent(2)) + 2 * padding - k + 1;
  const long wo = static_cast<long>(input.extent(3)) + 2 * padding - k + 1;
  if (ho < 1 || wo < 1) {
    throw std::invalid_argument("conv2d: input " + input.shape_str() +
                                " too small for kernel " + kernel.shape_str() +
                                " with padding " + std::to_string(padding));
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      int padding) {
  check_conv_shapes(input, kernel, bias, padding);
  const std::size_t B = input.extent(0), Ci = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t Co = kernel.extent(0), K = kernel.extent(2);
  const std::size_t Ho = H + 2 * padding - K + 1;
  const std::size_t Wo = W + 2 * padding - K + 1;

  Tensor out({B, Co, Ho, Wo});
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  double* o = out.data().data();

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* out_ch = o + (b * Co + co) * Ho * Wo;
      const double bval = bias[co];
      for (std::size_t i = 0; i < Ho * Wo; ++i) out_ch[i] = bval;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in_ch = in + (b * Ci + ci) * H * W;
        for (std::size_t ky = 0; ky < K; ++ky) {
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double kv = ker[((co * Ci + ci) * K + ky) * K + kx];
            const long dy = static_cast<long>(ky) - padding;
            const long dx = static_cast<long>(kx) - padding;
            const std::size_t oy_lo = static_cast<std::size_t>(std::max(0L, -dy));
            const std::size_t oy_hi =
                static_cast<std::size_t>(std::min<long>(Ho, static_cast<long>(H) - dy));
            const std::size_t ox_lo = static_cast<std::size_t>(std::max(0L, -dx));
            const std::size_t ox_hi =
                static_cast<std::size_t>(std::min<long>(Wo, static_cast<long>(W) - dx));
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              double* orow = out_ch + oy * Wo;
              const double* irow = in_ch + (oy + dy) * W + dx;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                orow[ox] += kv * irow[ox];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel,
                            const Tensor& grad_out, int padding) {
  const std::size_t B = input.extent(0), Ci = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  const std::size_t Co = kernel.extent(0), K = kernel.extent(2);
  const std::size_t Ho = H + 2 * padding - K + 1;
  const std::size_t Wo = W + 2 * padding - K + 1;
  if (grad_out.shape() != std::vector<std::size_t>{B, Co, Ho, Wo}) {
    throw std::invalid_argument("conv2d_backward: grad_out " + grad_out.shape_str() +
                                " does not match expected " +
                                Tensor::shape_str({B, Co, Ho, Wo}));
  }

  Conv2dGrads g{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({Co})};
  const double* in = input.data().data();
  const double* ker = kernel.data().data();
  const double* go = grad_out.data().data();
  double* din = g.input.data().data();
  double* dker = g.kernel.data().data();
  double* dbias = g.bias.data().data();

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      const double* go_ch = go + (b * Co + co) * Ho * Wo;
      double acc = 0.0;
      for (std::size_t i = 0; i < Ho * Wo; ++i) acc += go_ch[i];
      dbias[co] += acc;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in_ch = in + (b * Ci + ci) * H * W;
        double* din_ch = din + (b * Ci + ci) * H * W;
        for (std::size_t ky = 0; ky < K; ++ky) {
          for (std::size_t kx = 0; kx < K; ++kx) {
            const double kv = ker[((co * Ci + ci) * K + ky) * K + kx];
            double ksum = 0.0;
            const long dy = static_cast<long>(ky) - padding;
            const long dx = static_cast<long>(kx) - padding;
            const std::size_t oy_lo = static_cast<std::size_t>(std::max(0L, -dy));
            const std::size_t oy_hi =
                static_cast<std::size_t>(std::min<long>(Ho, static_cast<long>(H) - dy));
            const std::size_t ox_lo = static_cast<std::size_t>(std::max(0L, -dx));
            const std::size_t ox_hi =
                static_cast<std::size_t>(std::min<long>(Wo, static_cast<long>(W) - dx));
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const double* gorow = go_ch + oy * Wo;
              const double* irow = in_ch + (oy + dy) * W + dx;
              double* dirow = din_ch + (oy + dy) * W + dx;
              for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                ksum += gorow[ox] * irow[ox];
                dirow[ox] += gorow[ox] * kv;
              }
            }
            dker[((co * Ci + ci) * K + ky) * K + kx] += ksum;
          }
        }
      }
    }
  }
  return g;
}

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor({channels}, 1.0);
  s.beta = Tensor({channels}, 0.0);
  s.running_mean = Tensor({channels}, 0.0);
  s.running_var = Tensor({channels}, 1.0);
  return s;
}

Tensor batchnorm_forward(const Tensor& input, BatchNormState& state, BnMode mode,
                         BnCache* cache) {
  if (input.rank() != 4) {
    throw std::invalid_argument("batchnorm: expected 4-D input, got " + input.shape_str());
  }
  const std::size_t B = input.extent(0), C = input.extent(1);
  const std::size_t H = input.extent(2), W = input.extent(3);
  if (state.gamma.size() != C) {
    throw std::invalid_argument("batchnorm: state has " +
                                std::to_string(state.gamma.size()) +
                                " channels, input " + input.shape_str());
  }
  const std::size_t n = B * H * W;
  if (mode == BnMode::Train && n < 2) {
    throw std::invalid_argument(
        "batchnorm: train mode needs at least 2 elements per channel, got " +
        std::to_string(n));
  }

  Tensor out(input.shape());
  if (cache) {
    cache->mode = mode;
    cache->xhat = Tensor(input.shape());
    cache->inv_std.assign(C, 0.0);
  }

  const double* in = input.data().data();
  double* o = out.data().data();

  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == BnMode::Train) {
      for (std::size_t b = 0; b < B; ++b) {
        const double* ch = in + (b * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) mean += ch[i];
      }
      mean /= static_cast<double>(n);
      for (std::size_t b = 0; b < B; ++b) {
        const double* ch = in + (b * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          const double d = ch[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(n);
      state.running_mean[c] =
          (1.0 - state.stat_momentum) * state.running_mean[c] + state.stat_momentum * mean;
      state.running_var[c] =
          (1.0 - state.stat_momentum) * state.running_var[c] + state.stat_momentum * var;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + state.eps);
    const double gamma = state.gamma[c], beta = state.beta[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* ch = in + (b * C + c) * H * W;
      double* och = o + (b * C + c) * H * W;
      double* xch = cache ? cache->xhat.data().data() + (b * C + c) * H * W : nullptr;
      for (std::size_t i = 0; i < H * W; ++i) {
        const double xhat = (ch[i] - mean) * inv_std;
        och[i] = gamma * xhat + beta;
        if (xch) xch[i] = xhat;
      }
    }
    if (cache) cache->inv_std[c] = inv_std;
  }
  return out;
}

BnGrads batchnorm_backward(const Tensor& grad_out, const BnCache& cache,
                           const BatchNormState& state) {
  const std::size_t B = grad_out.extent(0), C = grad_out.extent(1);
  const std::size_t H = grad_out.extent(2), W = grad_out.extent(3);
  const double n = static_cast<double>(B * H * W);

  BnGrads g{Tensor(grad_out.shape()), Tensor({C}), Tensor({C})};
  const double* go = grad_out.data().data();
  const double* xh = cache.xhat.data().data();
  double* din = g.input.data().data();

  for (std::size_t c = 0; c < C; ++c) {
    double sum_go = 0.0, sum_go_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* goch = go + (b * C + c) * H * W;
      const double* xch = xh + (b * C + c) * H * W;
      for (std::size_t i = 0; i < H * W; ++i) {
        sum_go += goch[i];
        sum_go_xhat += goch[i] * xch[i];
      }
    }
    g.beta[c] = sum_go;
    g.gamma[c] = sum_go_xhat;

    const double gamma = state.gamma[c];
    const double inv_std = cache.inv_std[c];
    if (cache.mode == BnMode::Train) {
      // d/dx of batch-statistics normalization; mean and var both depend on x.
      for (std::size_t b = 0; b < B; ++b) {
        const double* goch = go + (b * C + c) * H * W;
        const double* xch = xh + (b * C + c) * H * W;
        double* dich = din + (b * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          dich[i] = gamma * inv_std / n *
                    (n * goch[i] - sum_go - xch[i] * sum_go_xhat);
        }
      }
    } else {
      for (std::size_t b = 0; b < B; ++b) {
        const double* goch = go + (b * C + c) * H * W;
        double* dich = din + (b * C + c) * H * W;
        for (std::size_t i = 0; i < H * W; ++i) {
          dich[i] = gamma * inv_std * goch[i];
        }
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // split on sign so exp never overflows
    const double v = x[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
  }
  return out;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
  Tensor g(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_out[i] * y[i] * (1.0 - y[i]);
  return g;
}

}  // namespace fedseg
