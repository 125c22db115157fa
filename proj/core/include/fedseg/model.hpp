#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedseg/nn_ops.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

/// Norm marks parameters that belong to a batch-normalization layer (the
/// affine pair plus running statistics); Rest is everything else. Federated
/// aggregation filters on this tag.
enum class ParamTag : std::uint8_t { Rest = 0, Norm = 1 };

struct ParamEntry {
  std::string name;
  ParamTag tag = ParamTag::Rest;
  bool trainable = true;  // false for running statistics and the batch counter
  Tensor value;
  Tensor grad;
  Tensor momentum;
};

/// Ordered, uniquely-named collection of parameter tensors with paired
/// gradient and momentum buffers. Two ParamSets built from the same
/// ModelConfig have identical (name, shape, tag) sequences.
class ParamSet {
 public:
  ParamEntry& add(std::string name, ParamTag tag, bool trainable, Tensor value);

  std::size_t size() const { return entries_.size(); }
  ParamEntry& entry(std::size_t i) { return entries_[i]; }
  const ParamEntry& entry(std::size_t i) const { return entries_[i]; }

  bool has(const std::string& name) const;
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;

  void zero_grad();

  /// Total number of scalar values across trainable entries.
  std::size_t trainable_scalars() const;

  /// True when (name, shape, tag) sequences match; on mismatch and when
  /// `first_mismatch` is given, describes the first differing entry.
  bool same_structure(const ParamSet& other, std::string* first_mismatch = nullptr) const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<ParamEntry> entries_;
};

struct PartitionView {
  std::vector<std::size_t> norm;  // indices into the ParamSet, order preserved
  std::vector<std::size_t> rest;
};

/// Disjoint, exhaustive index views by tag.
PartitionView partition(const ParamSet& params);

struct ModelConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> blocks = {8, 16, 16};  // channel width per conv block
  std::size_t kernel = 3;
};

struct OptimizerConfig {
  double learning_rate = 0.0002;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

std::uint64_t model_config_digest(const ModelConfig& config);

/// Small conv/BN segmentation network: each block is conv(k x k, spatial-size
/// preserving padding) -> batchnorm -> relu; the head is a 1x1 conv followed
/// by sigmoid, so outputs live in (0,1).
class SegNet {
 public:
  explicit SegNet(ModelConfig config);

  /// Seeded He-style init: conv kernels ~ N(0, sqrt(2/fan_in)), biases 0,
  /// gamma 1, beta 0, running_mean 0, running_var 1, batches 0.
  static ParamSet build_params(const ModelConfig& config, std::uint64_t seed);

  /// Recovers the architecture from a ParamSet's entry names and shapes.
  static ModelConfig config_from_params(const ParamSet& params);

  const ModelConfig& config() const { return config_; }

  struct Tape {
    struct Block {
      Tensor conv_in;
      Tensor conv_out;
      BnCache bn_cache;
      Tensor bn_out;
    };
    std::vector<Block> blocks;
    Tensor head_in;
    Tensor pred;
  };

  /// Train mode updates each block's running statistics (and batch counter)
  /// inside `params`; eval mode mutates nothing.
  Tensor forward(ParamSet& params, const Tensor& input, BnMode mode,
                 Tape* tape = nullptr) const;

  /// Accumulates parameter gradients from dLoss/dpred; returns dLoss/dinput.
  Tensor backward(ParamSet& params, const Tape& tape, const Tensor& grad_pred) const;

 private:
  ModelConfig config_;
};

/// One SGD-with-momentum step over trainable entries:
///   buf <- momentum * buf + grad + weight_decay * theta;  theta <- theta - lr * buf.
/// Running statistics are never touched. Throws on non-finite gradients,
/// naming the parameter.
void sgd_step(ParamSet& params, const OptimizerConfig& opt);

/// Max over trainable scalars of |analytic - central difference| /
/// max(|analytic|, |central|, 1e-12). The callable is f(params, want_grad):
/// it returns the loss and fills gradients when want_grad is true; grad_check
/// copies `params` for every evaluation, so f may freely mutate its argument.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

GradCheckReport grad_check(const std::function<double(ParamSet&, bool)>& f,
                           const ParamSet& params, double h);

}  // namespace fedseg
