#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qatforge/tensor.hpp"

namespace qatforge {

// Scales indexed by this pseudo-axis mean one scale for the whole tensor.
inline constexpr int kPerTensor = -1;

int qmax_for_bits(int bits);  // 127 for int8, 7 for int4; throws otherwise

enum class Rounding : uint8_t {
  nearest,   // round half away from zero
  truncate,  // toward zero (int-cast fidelity mode)
};

enum class ExecPath : uint8_t {
  native,   // integer matmul on codes, rescale after
  fake,     // quantize->dequantize in float, float matmul
  float32,  // no quantization at all
};

// Per-layer precision directive. weight_bits / activation_bits of nullopt
// mean the corresponding tensor is left in float32.
struct QuantSpec {
  std::optional<int> weight_bits;
  std::optional<int> activation_bits;
  ExecPath path = ExecPath::float32;
  Rounding rounding = Rounding::nearest;
  // Axis for dynamic activation quantization on the flattened [rows, K]
  // matmul input: kPerTensor (default) or 0 (per row). The contracted axis
  // is never allowed.
  int activation_axis = kPerTensor;

  bool is_float() const { return path == ExecPath::float32; }
  void validate() const;  // throws std::invalid_argument on bad combos

  // The seven named configurations.
  static QuantSpec make_float();
  static QuantSpec i8w();
  static QuantSpec i4w();
  static QuantSpec i8wa();
  static QuantSpec i4wi8a();
  static QuantSpec i4wa();
  static QuantSpec fake_i4w();

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

// Integer codes plus per-channel scales. Codes live in int8 containers for
// both bit widths; int4 codes stay within [-7, 7]. Symmetric, no zero
// point: value ~= code * scale. Immutable after construction.
class QuantizedTensor {
 public:
  QuantizedTensor(Shape shape, std::vector<int8_t> codes,
                  std::vector<float> scales, int quant_axis, int bits);

  const Shape& shape() const { return shape_; }
  const std::vector<int8_t>& codes() const { return codes_; }
  const std::vector<float>& scales() const { return scales_; }
  int quant_axis() const { return quant_axis_; }
  int bits() const { return bits_; }
  int qmax() const { return qmax_for_bits(bits_); }
  int64_t numel() const { return static_cast<int64_t>(codes_.size()); }

 private:
  Shape shape_;
  std::vector<int8_t> codes_;
  std::vector<float> scales_;
  int quant_axis_;
  int bits_;
};

// scale_c = max|x| over the channel slice / qmax; channels whose max is 0
// get scale 1.0. axis = kPerTensor yields a single scale.
std::vector<float> compute_scales(const Tensor& t, int axis, int bits);

// code = clamp(round(x / scale_c), -qmax, qmax). Rounding::nearest rounds
// half away from zero; Rounding::truncate rounds toward zero except that
// quotients within a few ulp of an integer snap to it, which keeps
// requantization of an already-quantized tensor exact.
QuantizedTensor quantize(const Tensor& t, const std::vector<float>& scales,
                         int axis, int bits,
                         Rounding rounding = Rounding::nearest);

// quantize with scales computed from the tensor itself.
QuantizedTensor quantize_dynamic(const Tensor& t, int axis, int bits,
                                 Rounding rounding = Rounding::nearest);

// x_hat = code * scale_c, broadcast along the quantization axis.
Tensor dequantize(const QuantizedTensor& q);

// dequantize(quantize(t, compute_scales(t))). Idempotent bit-exactly.
Tensor fake_quant(const Tensor& t, int axis, int bits,
                  Rounding rounding = Rounding::nearest);

// Two int4 codes per byte, first code in the low nibble, two's-complement
// nibbles; an odd count pads the final high nibble with zero. This layout
// is the on-disk contract for checkpoint payloads.
std::vector<uint8_t> pack_int4(std::span<const int8_t> codes);
std::vector<int8_t> unpack_int4(std::span<const uint8_t> bytes, int64_t count);

// acc[i,j] = sum_k code_a[i,k]*code_b[k,j] in int32; result is
// (float(acc) * s_a(i)) * s_b(j). qa scales must be per-tensor or per-row,
// qb scales per-tensor or per-column; K*qmax_a*qmax_b must stay below 2^31.
Tensor quantized_matmul_native(const QuantizedTensor& qa,
                               const QuantizedTensor& qb);

// Same contraction with codes held in float32. Requires
// K*qmax_a*qmax_b < 2^24 so every partial sum is exactly representable;
// under that bound it equals the native path bit-exactly.
Tensor quantized_matmul_emulated(const QuantizedTensor& qa,
                                 const QuantizedTensor& qb);

}  // namespace qatforge
