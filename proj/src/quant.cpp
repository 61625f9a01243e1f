#include "qatforge/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace qatforge {

int qmax_for_bits(int bits) {
  if (bits == 8) return 127;
  if (bits == 4) return 7;
  throw std::invalid_argument("unsupported bit width " + std::to_string(bits) +
                              " (expected 4 or 8)");
}

void QuantSpec::validate() const {
  const bool any_bits = weight_bits.has_value() || activation_bits.has_value();
  if (path == ExecPath::float32 && any_bits)
    throw std::invalid_argument(
        "QuantSpec: float path cannot carry bit widths");
  if (path != ExecPath::float32 && !any_bits)
    throw std::invalid_argument(
        "QuantSpec: quantized path requires at least one bit width");
  if (weight_bits) qmax_for_bits(*weight_bits);
  if (activation_bits) qmax_for_bits(*activation_bits);
  if (activation_axis != kPerTensor && activation_axis != 0)
    throw std::invalid_argument(
        "QuantSpec: activation_axis must be per-tensor or 0 (per row)");
}

QuantSpec QuantSpec::make_float() { return QuantSpec{}; }
QuantSpec QuantSpec::i8w() {
  return QuantSpec{8, std::nullopt, ExecPath::native};
}
QuantSpec QuantSpec::i4w() {
  return QuantSpec{4, std::nullopt, ExecPath::native};
}
QuantSpec QuantSpec::i8wa() { return QuantSpec{8, 8, ExecPath::native}; }
QuantSpec QuantSpec::i4wi8a() { return QuantSpec{4, 8, ExecPath::native}; }
QuantSpec QuantSpec::i4wa() { return QuantSpec{4, 4, ExecPath::native}; }
QuantSpec QuantSpec::fake_i4w() {
  return QuantSpec{4, std::nullopt, ExecPath::fake};
}

namespace {

int64_t scale_count_for(const Shape& shape, int axis) {
  if (axis == kPerTensor) return 1;
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw std::invalid_argument("quant axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(shape));
  return shape[static_cast<size_t>(axis)];
}

// channel index of a flat element for a row-major shape
struct ChannelIndexer {
  int64_t stride = 0;
  int64_t dim = 1;
  ChannelIndexer(const Shape& shape, int axis) {
    if (axis == kPerTensor) return;
    dim = shape[static_cast<size_t>(axis)];
    stride = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i)
      stride *= shape[i];
  }
  int64_t channel(int64_t flat) const {
    if (stride == 0) return 0;
    return (flat / stride) % dim;
  }
};

}  // namespace

QuantizedTensor::QuantizedTensor(Shape shape, std::vector<int8_t> codes,
                                 std::vector<float> scales, int quant_axis,
                                 int bits)
    : shape_(std::move(shape)),
      codes_(std::move(codes)),
      scales_(std::move(scales)),
      quant_axis_(quant_axis),
      bits_(bits) {
  const int q = qmax_for_bits(bits_);
  if (static_cast<int64_t>(codes_.size()) != shape_numel(shape_))
    throw std::invalid_argument("QuantizedTensor: code count mismatch for " +
                                shape_str(shape_));
  if (static_cast<int64_t>(scales_.size()) !=
      scale_count_for(shape_, quant_axis_))
    throw std::invalid_argument(
        "QuantizedTensor: scale count " + std::to_string(scales_.size()) +
        " does not match axis " + std::to_string(quant_axis_) + " of " +
        shape_str(shape_));
  for (float s : scales_)
    if (!(s > 0.0f) || !std::isfinite(s))
      throw std::invalid_argument("QuantizedTensor: non-positive scale");
  for (int8_t c : codes_)
    if (c < -q || c > q)
      throw std::invalid_argument("QuantizedTensor: code " +
                                  std::to_string(int(c)) +
                                  " outside [-qmax, qmax]");
}

std::vector<float> compute_scales(const Tensor& t, int axis, int bits) {
  const int q = qmax_for_bits(bits);
  if (!t.all_finite())
    throw std::invalid_argument("compute_scales: non-finite input");
  const int64_t nscales = scale_count_for(t.shape(), axis);
  std::vector<float> maxes(static_cast<size_t>(nscales), 0.0f);
  ChannelIndexer idx(t.shape(), axis);
  for (int64_t i = 0; i < t.numel(); ++i) {
    float v = std::fabs(t.at(i));
    float& m = maxes[static_cast<size_t>(idx.channel(i))];
    if (v > m) m = v;
  }
  for (float& m : maxes)
    m = (m == 0.0f) ? 1.0f : m / static_cast<float>(q);
  return maxes;
}

namespace {

float round_code(float quotient, Rounding rounding) {
  if (rounding == Rounding::nearest) return std::round(quotient);
  // Truncate toward zero, but snap quotients that sit within a few ulp of
  // an integer; otherwise requantizing an exact grid point c*scale can
  // land at c-1 and break idempotence.
  float nearest = std::round(quotient);
  if (std::fabs(quotient - nearest) <=
      1e-6f * std::max(1.0f, std::fabs(quotient)))
    return nearest;
  return std::trunc(quotient);
}

}  // namespace

QuantizedTensor quantize(const Tensor& t, const std::vector<float>& scales,
                         int axis, int bits, Rounding rounding) {
  const int q = qmax_for_bits(bits);
  const float fq = static_cast<float>(q);
  if (static_cast<int64_t>(scales.size()) != scale_count_for(t.shape(), axis))
    throw std::invalid_argument("quantize: scale count mismatch");
  for (float s : scales)
    if (!(s > 0.0f) || !std::isfinite(s))
      throw std::invalid_argument("quantize: non-positive scale");
  std::vector<int8_t> codes(static_cast<size_t>(t.numel()));
  ChannelIndexer idx(t.shape(), axis);
  for (int64_t i = 0; i < t.numel(); ++i) {
    float s = scales[static_cast<size_t>(idx.channel(i))];
    float c = round_code(t.at(i) / s, rounding);
    c = std::min(fq, std::max(-fq, c));
    codes[static_cast<size_t>(i)] = static_cast<int8_t>(c);
  }
  return QuantizedTensor(t.shape(), std::move(codes), scales, axis, bits);
}

QuantizedTensor quantize_dynamic(const Tensor& t, int axis, int bits,
                                 Rounding rounding) {
  return quantize(t, compute_scales(t, axis, bits), axis, bits, rounding);
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape());
  ChannelIndexer idx(q.shape(), q.quant_axis());
  const auto& codes = q.codes();
  const auto& scales = q.scales();
  for (int64_t i = 0; i < q.numel(); ++i)
    out.at(i) = static_cast<float>(codes[static_cast<size_t>(i)]) *
                scales[static_cast<size_t>(idx.channel(i))];
  return out;
}

Tensor fake_quant(const Tensor& t, int axis, int bits, Rounding rounding) {
  return dequantize(quantize_dynamic(t, axis, bits, rounding));
}

std::vector<uint8_t> pack_int4(std::span<const int8_t> codes) {
  for (int8_t c : codes)
    if (c < -7 || c > 7)
      throw std::invalid_argument("pack_int4: code " + std::to_string(int(c)) +
                                  " outside [-7, 7]");
  std::vector<uint8_t> out((codes.size() + 1) / 2, 0);
  for (size_t i = 0; i < codes.size(); ++i) {
    uint8_t nib = static_cast<uint8_t>(codes[i]) & 0x0F;
    if (i % 2 == 0)
      out[i / 2] = nib;
    else
      out[i / 2] |= static_cast<uint8_t>(nib << 4);
  }
  return out;
}

std::vector<int8_t> unpack_int4(std::span<const uint8_t> bytes,
                                int64_t count) {
  if (count < 0 ||
      static_cast<size_t>((count + 1) / 2) != bytes.size())
    throw std::invalid_argument("unpack_int4: byte count " +
                                std::to_string(bytes.size()) +
                                " does not hold " + std::to_string(count) +
                                " codes");
  std::vector<int8_t> out(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    uint8_t nib = (i % 2 == 0) ? (bytes[static_cast<size_t>(i / 2)] & 0x0F)
                               : (bytes[static_cast<size_t>(i / 2)] >> 4);
    // sign-extend the 4-bit two's-complement nibble
    int8_t v = static_cast<int8_t>((nib ^ 0x08) - 0x08);
    if (v < -7 || v > 7)
      throw std::invalid_argument("unpack_int4: nibble decodes to " +
                                  std::to_string(int(v)) +
                                  ", outside [-7, 7]");
    out[static_cast<size_t>(i)] = v;
  }
  return out;
}

namespace {

struct MatmulScales {
  // One scale per row of qa (or the same scale for all rows), one per
  // column of qb.
  const std::vector<float>* a_scales;
  const std::vector<float>* b_scales;
  bool a_per_row;
  bool b_per_col;
  float a(int64_t i) const { return a_per_row ? (*a_scales)[size_t(i)] : (*a_scales)[0]; }
  float b(int64_t j) const { return b_per_col ? (*b_scales)[size_t(j)] : (*b_scales)[0]; }
};

MatmulScales check_matmul_operands(const QuantizedTensor& qa,
                                   const QuantizedTensor& qb) {
  if (qa.shape().size() != 2 || qb.shape().size() != 2)
    throw std::invalid_argument("quantized matmul: expected rank-2 operands");
  if (qa.shape()[1] != qb.shape()[0])
    throw std::invalid_argument(
        "quantized matmul: inner dimensions disagree: " +
        shape_str(qa.shape()) + " x " + shape_str(qb.shape()));
  if (qa.quant_axis() == 1)
    throw std::invalid_argument(
        "quantized matmul: left scales lie on the contracted axis");
  if (qb.quant_axis() == 0)
    throw std::invalid_argument(
        "quantized matmul: right scales lie on the contracted axis");
  return MatmulScales{&qa.scales(), &qb.scales(), qa.quant_axis() == 0,
                      qb.quant_axis() == 1};
}

}  // namespace

Tensor quantized_matmul_native(const QuantizedTensor& qa,
                               const QuantizedTensor& qb) {
  MatmulScales sc = check_matmul_operands(qa, qb);
  const int64_t m = qa.shape()[0], k = qa.shape()[1], n = qb.shape()[1];
  if (k * static_cast<int64_t>(qa.qmax()) * qb.qmax() >= (int64_t(1) << 31))
    throw std::invalid_argument(
        "quantized_matmul_native: K=" + std::to_string(k) +
        " can overflow the int32 accumulator at these bit widths");
  Tensor out(Shape{m, n});
  const int8_t* pa = qa.codes().data();
  const int8_t* pb = qb.codes().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      int32_t acc = 0;
      for (int64_t kk = 0; kk < k; ++kk)
        acc += static_cast<int32_t>(pa[i * k + kk]) *
               static_cast<int32_t>(pb[kk * n + j]);
      out.at(i * n + j) = static_cast<float>(acc) * sc.a(i) * sc.b(j);
    }
  }
  return out;
}

Tensor quantized_matmul_emulated(const QuantizedTensor& qa,
                                 const QuantizedTensor& qb) {
  MatmulScales sc = check_matmul_operands(qa, qb);
  const int64_t m = qa.shape()[0], k = qa.shape()[1], n = qb.shape()[1];
  if (k * static_cast<int64_t>(qa.qmax()) * qb.qmax() >= (int64_t(1) << 24))
    throw std::invalid_argument(
        "quantized_matmul_emulated: K=" + std::to_string(k) +
        " exceeds the 24-bit float32 exactness bound at these bit widths");
  Tensor out(Shape{m, n});
  const int8_t* pa = qa.codes().data();
  const int8_t* pb = qb.codes().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int64_t kk = 0; kk < k; ++kk)
        acc += static_cast<float>(pa[i * k + kk]) *
               static_cast<float>(pb[kk * n + j]);
      out.at(i * n + j) = acc * sc.a(i) * sc.b(j);
    }
  }
  return out;
}

}  // namespace qatforge
