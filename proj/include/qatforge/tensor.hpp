#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qatforge {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense float32 tensor, row-major. Rank 0 is a scalar holding one element.
// Values are immutable by convention once an op has produced them; all ops
// below are pure functions and safe to call concurrently.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor(Shape{}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t dim(int axis) const;

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& values() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

enum class EwKind { add, sub, mul, div };

// c[i,j] = sum_k a[i,k]*b[k,j]. Accumulation is float32 in ascending-k
// order with no FMA, so results are bit-reproducible across runs.
Tensor matmul(const Tensor& a, const Tensor& b);

// Max of |x| over the given axes; the result keeps the complementary axes
// (reduced axes are removed). An empty axis set returns |t| elementwise;
// reducing every axis yields a rank-0 scalar.
Tensor reduce_abs_max(const Tensor& t, const std::vector<int>& axes);

// Elementwise op. b must have the same shape as a, be a scalar, or have
// the same rank with size-1 dims stretched (covers broadcasting a scale
// vector along the quantization axis).
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b);
Tensor elementwise(EwKind kind, const Tensor& a, float b);

// Explicit-copy transpose of a rank-2 tensor.
Tensor transpose2d(const Tensor& t);

}  // namespace qatforge
