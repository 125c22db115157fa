#pragma once

#include <cstddef>
#include <vector>

#include "fedseg/tensor.hpp"

namespace fedseg {

/// 2-D cross-correlation ("convolution" in the deep-learning sense) over
/// [B,Cin,H,W] with kernel [Cout,Cin,k,k] and zero padding. Output spatial
/// extent is H + 2*padding - k + 1.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                      int padding);

struct Conv2dGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel,
                            const Tensor& grad_out, int padding);

enum class BnMode { Train, Eval };

/// Per-channel batch normalization state. running_var must stay strictly
/// positive; eps stabilizes the inverse square root.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double stat_momentum = 0.1;

  static BatchNormState identity(std::size_t channels);
};

struct BnCache {
  BnMode mode = BnMode::Train;
  Tensor xhat;  // normalized input, reused by backward
  std::vector<double> inv_std;
};

/// Train mode normalizes by batch statistics (biased variance, divide by N)
/// and updates running statistics in-place:
///   running <- (1 - stat_momentum) * running + stat_momentum * batch.
/// Eval mode uses running statistics and mutates nothing.
Tensor batchnorm_forward(const Tensor& input, BatchNormState& state, BnMode mode,
                         BnCache* cache = nullptr);

struct BnGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

BnGrads batchnorm_backward(const Tensor& grad_out, const BnCache& cache,
                           const BatchNormState& state);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);

Tensor sigmoid(const Tensor& x);
/// Takes the forward *output* y = sigmoid(x); dx = dy * y * (1 - y).
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);

}  // namespace fedseg
