#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedseg {

/// Dense row-major double tensor. Shapes are small vectors of extents, e.g.
/// [batch, channels, height, width] for images. Invariant: numel(shape) equals
/// data().size(). Values are owned; operations in this library return fresh
/// tensors rather than mutating inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t dim) const { return shape_[dim]; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  // 4-D accessor for [B,C,H,W] layouts.
  double at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double& at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double sum() const;
  double min() const;
  double max() const;
  bool all_finite() const;

  /// Throws std::runtime_error naming `context` if any value is NaN/Inf.
  void ensure_finite(const std::string& context) const;

  /// "[2, 1, 32, 32]" - for error messages.
  static std::string shape_str(const std::vector<std::size_t>& shape);
  std::string shape_str() const { return shape_str(shape_); }

  static std::size_t numel(const std::vector<std::size_t>& shape);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace fedseg
