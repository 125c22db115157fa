#include "fedseg/objectives.hpp"

#include <stdexcept>
#include <string>

namespace fedseg {

namespace {

void check_pair(const Tensor& pred, const Tensor& label, const char* op) {
  if (!pred.same_shape(label)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch, pred " +
                                pred.shape_str() + " vs label " + label.shape_str());
  }
}

void check_binary(const Tensor& label, const char* op) {
  for (double v : label.data()) {
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument(std::string(op) + ": label values must be 0 or 1");
    }
  }
}

}  // namespace

SoftDiceResult soft_dice_loss(const Tensor& pred, const Tensor& label) {
  check_pair(pred, label, "soft_dice_loss");
  check_binary(label, "soft_dice_loss");
  for (double v : pred.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("soft_dice_loss: pred values must lie in [0,1]");
    }
  }

  double inter = 0.0, p2 = 0.0, y2 = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * label[i];
    p2 += pred[i] * pred[i];
    y2 += label[i] * label[i];
  }
  const double denom = p2 + y2;

  SoftDiceResult r;
  r.grad = Tensor(pred.shape());
  if (denom == 0.0) {
    r.loss = 0.0;  // nothing predicted, nothing labeled
    return r;
  }
  r.loss = 1.0 - 2.0 * inter / denom;
  // d/dp_k [ -2*inter/denom ] = -2*(y_k*denom - inter*2*p_k) / denom^2
  const double inv_d2 = 1.0 / (denom * denom);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    r.grad[i] = -2.0 * (label[i] * denom - 2.0 * inter * pred[i]) * inv_d2;
  }
  return r;
}

ConfusionCounts confusion(const Tensor& pred, const Tensor& label, double threshold) {
  check_pair(pred, label, "confusion");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool y = label[i] != 0.0;
    if (p && y)
      ++c.tp;
    else if (p && !y)
      ++c.fp;
    else if (!p && y)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dice(const ConfusionCounts& c) {
  const double denom = static_cast<double>(c.fn + 2 * c.tp + c.fp);
  if (denom == 0.0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / denom;
}

double tpr(const ConfusionCounts& c) {
  const double denom = static_cast<double>(c.tp + c.fn);
  if (denom == 0.0) return c.fp == 0 ? 1.0 : 0.0;
  return static_cast<double>(c.tp) / denom;
}

double fpr(const ConfusionCounts& c) {
  const double denom = static_cast<double>(c.tp + c.fp);
  if (denom == 0.0) return 0.0;
  return static_cast<double>(c.fp) / denom;
}

MetricsReport aggregate_metrics(const std::vector<ConfusionCounts>& per_case) {
  if (per_case.empty()) {
    throw std::invalid_argument("aggregate_metrics: no cases");
  }
  MetricsReport r;
  ConfusionCounts total;
  for (const auto& c : per_case) {
    r.case_dice.push_back(dice(c));
    r.c_dice += r.case_dice.back();
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    total.tn += c.tn;
  }
  r.c_dice /= static_cast<double>(per_case.size());
  r.v_dice = dice(total);
  r.v_tpr = tpr(total);
  r.v_fpr = fpr(total);
  return r;
}

}  // namespace fedseg
