#include "qatforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace qatforge {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  for (int64_t d : shape_) {
    if (d <= 0)
      throw std::invalid_argument("Tensor: non-positive dim in shape " +
                                  shape_str(shape_));
  }
  data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (int64_t d : shape_) {
    if (d <= 0)
      throw std::invalid_argument("Tensor: non-positive dim in shape " +
                                  shape_str(shape_));
  }
  if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
    throw std::invalid_argument(
        "Tensor: data length " + std::to_string(data_.size()) +
        " does not match shape " + shape_str(shape_));
}

int64_t Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank())
    throw std::invalid_argument("Tensor: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(shape_));
  return shape_[static_cast<size_t>(axis)];
}

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expected rank-2 operands, got " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor c(Shape{m, n});
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int64_t kk = 0; kk < k; ++kk)
        acc += pa[i * k + kk] * pb[kk * n + j];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

Tensor reduce_abs_max(const Tensor& t, const std::vector<int>& axes) {
  const int r = t.rank();
  std::vector<char> reduced(static_cast<size_t>(r), 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= r)
      throw std::invalid_argument("reduce_abs_max: axis " +
                                  std::to_string(ax) +
                                  " out of range for shape " +
                                  shape_str(t.shape()));
    reduced[static_cast<size_t>(ax)] = 1;
  }

  if (axes.empty()) {
    Tensor out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out.at(i) = std::fabs(t.at(i));
    return out;
  }

  Shape out_shape;
  for (int ax = 0; ax < r; ++ax)
    if (!reduced[static_cast<size_t>(ax)]) out_shape.push_back(t.dim(ax));

  // Row-major strides of the input and of the kept axes within the output.
  std::vector<int64_t> in_stride(static_cast<size_t>(r), 1);
  for (int ax = r - 2; ax >= 0; --ax)
    in_stride[static_cast<size_t>(ax)] =
        in_stride[static_cast<size_t>(ax + 1)] * t.dim(ax + 1);

  Tensor out(out_shape, 0.0f);
  std::vector<int64_t> out_stride_per_axis(static_cast<size_t>(r), 0);
  {
    int64_t s = 1;
    for (int ax = r - 1; ax >= 0; --ax) {
      if (!reduced[static_cast<size_t>(ax)]) {
        out_stride_per_axis[static_cast<size_t>(ax)] = s;
        s *= t.dim(ax);
      }
    }
  }

  for (int64_t flat = 0; flat < t.numel(); ++flat) {
    int64_t rem = flat, out_idx = 0;
    for (int ax = 0; ax < r; ++ax) {
      int64_t coord = rem / in_stride[static_cast<size_t>(ax)];
      rem %= in_stride[static_cast<size_t>(ax)];
      out_idx += coord * out_stride_per_axis[static_cast<size_t>(ax)];
    }
    float v = std::fabs(t.at(flat));
    if (v > out.at(out_idx)) out.at(out_idx) = v;
  }
  return out;
}

namespace {

float apply_ew(EwKind kind, float x, float y) {
  switch (kind) {
    case EwKind::add: return x + y;
    case EwKind::sub: return x - y;
    case EwKind::mul: return x * y;
    case EwKind::div: return x / y;
  }
  return 0.0f;
}

}  // namespace

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b) {
  if (b.rank() == 0) return elementwise(kind, a, b.at(0));
  if (a.same_shape(b)) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
      out.at(i) = apply_ew(kind, a.at(i), b.at(i));
    return out;
  }
  if (a.rank() != b.rank())
    throw std::invalid_argument("elementwise: shapes not broadcastable: " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int r = a.rank();
  std::vector<int64_t> a_stride(static_cast<size_t>(r), 1),
      b_stride(static_cast<size_t>(r), 1);
  for (int ax = r - 2; ax >= 0; --ax) {
    a_stride[static_cast<size_t>(ax)] =
        a_stride[static_cast<size_t>(ax + 1)] * a.dim(ax + 1);
    b_stride[static_cast<size_t>(ax)] =
        b_stride[static_cast<size_t>(ax + 1)] * b.dim(ax + 1);
  }
  for (int ax = 0; ax < r; ++ax) {
    if (b.dim(ax) == a.dim(ax)) continue;
    if (b.dim(ax) == 1) {
      b_stride[static_cast<size_t>(ax)] = 0;
      continue;
    }
    throw std::invalid_argument("elementwise: shapes not broadcastable: " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out(a.shape());
  for (int64_t flat = 0; flat < a.numel(); ++flat) {
    int64_t rem = flat, bi = 0;
    for (int ax = 0; ax < r; ++ax) {
      int64_t coord = rem / a_stride[static_cast<size_t>(ax)];
      rem %= a_stride[static_cast<size_t>(ax)];
      bi += coord * b_stride[static_cast<size_t>(ax)];
    }
    out.at(flat) = apply_ew(kind, a.at(flat), b.at(bi));
  }
  return out;
}

Tensor elementwise(EwKind kind, const Tensor& a, float b) {
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i)
    out.at(i) = apply_ew(kind, a.at(i), b);
  return out;
}

Tensor transpose2d(const Tensor& t) {
  if (t.rank() != 2)
    throw std::invalid_argument("transpose2d: expected rank-2, got " +
                                shape_str(t.shape()));
  const int64_t m = t.dim(0), n = t.dim(1);
  Tensor out(Shape{n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j * m + i) = t.at(i * n + j);
  return out;
}

}  // namespace qatforge
