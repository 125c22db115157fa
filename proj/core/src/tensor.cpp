#include "fedseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace fedseg {

std::size_t Tensor::numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    throw std::invalid_argument("Tensor::from_data: shape " + shape_str(shape) +
                                " wants " + std::to_string(numel(shape)) +
                                " values, got " + std::to_string(data.size()));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::min() const {
  double m = std::numeric_limits<double>::infinity();
  for (double v : data_) m = std::min(m, v);
  return m;
}

double Tensor::max() const {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : data_) m = std::max(m, v);
  return m;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::ensure_finite(const std::string& context) const {
  if (!all_finite()) {
    throw std::runtime_error(context + ": tensor contains non-finite values");
  }
}

std::string Tensor::shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace fedseg
