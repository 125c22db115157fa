#pragma once

#include <cstdint>
#include <vector>

#include "fedseg/tensor.hpp"

namespace fedseg {

struct SoftDiceResult {
  double loss = 0.0;
  Tensor grad;  // dLoss/dpred
};

/// Soft Dice loss for probabilistic binary segmentation:
///   loss = 1 - 2*sum(p*y) / (sum(p^2) + sum(y^2)).
/// The both-empty degenerate case (zero denominator) returns loss 0 with zero
/// gradient. Throws if pred leaves [0,1] or label is not binary.
SoftDiceResult soft_dice_loss(const Tensor& pred, const Tensor& label);

/// Voxel counts at a binarization threshold (>= maps to positive).
struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;
};

ConfusionCounts confusion(const Tensor& pred, const Tensor& label, double threshold = 0.5);

/// dice = 2tp / (fn + 2tp + fp); both-empty counts as a correct 1.0.
double dice(const ConfusionCounts& c);
/// tpr = tp / (tp + fn); with no positive labels: 1.0 if also no false
/// positives, else 0.0.
double tpr(const ConfusionCounts& c);
/// As printed in the reference tables, "FPR" is fp / (tp + fp) - the false
/// discovery rate, not the classical FP/(FP+TN). Kept verbatim so reported
/// numbers line up. Zero denominator returns 0.0.
double fpr(const ConfusionCounts& c);

struct MetricsReport {
  double c_dice = 0.0;  // mean of per-case dice
  double v_dice = 0.0;  // dice on summed counts
  double v_tpr = 0.0;
  double v_fpr = 0.0;
  std::vector<double> case_dice;
};

/// Throws on an empty case list.
MetricsReport aggregate_metrics(const std::vector<ConfusionCounts>& per_case);

}  // namespace fedseg
