#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "qatforge/quant.hpp"
#include "qatforge/rng.hpp"
#include "qatforge/tensor.hpp"

using namespace qatforge;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, float lo = -1.0f,
                     float hi = 1.0f) {
  Tensor t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(float) * a.numel()) == 0;
}

QuantizedTensor random_codes(Rng& rng, Shape shape, int bits, int axis,
                             bool pow2_scales = false) {
  const int q = qmax_for_bits(bits);
  std::vector<int8_t> codes(static_cast<size_t>(shape_numel(shape)));
  for (auto& c : codes)
    c = static_cast<int8_t>(rng.next_index(2 * q + 1) - q);
  int64_t nscales = axis == kPerTensor ? 1 : shape[static_cast<size_t>(axis)];
  std::vector<float> scales(static_cast<size_t>(nscales));
  for (auto& s : scales)
    s = pow2_scales ? std::ldexp(1.0f, int(rng.next_index(9)) - 6)
                    : rng.uniform(0.001f, 2.0f);
  return QuantizedTensor(shape, std::move(codes), std::move(scales), axis,
                         bits);
}

}  // namespace

TEST_CASE("compute_scales per-tensor int8") {
  Tensor t(Shape{3}, {-1.0f, 0.5f, 1.27f});
  auto s = compute_scales(t, kPerTensor, 8);
  REQUIRE(s.size() == 1);
  CHECK(s[0] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("compute_scales per-tensor int4") {
  Tensor t(Shape{2}, {-7.0f, 3.0f});
  auto s = compute_scales(t, kPerTensor, 4);
  REQUIRE(s.size() == 1);
  CHECK(s[0] == 1.0f);
}

TEST_CASE("compute_scales zero tensor falls back to 1.0") {
  Tensor t(Shape{4}, 0.0f);
  auto s = compute_scales(t, kPerTensor, 8);
  CHECK(s[0] == 1.0f);
  // per-channel: one zero channel among live ones
  Tensor m(Shape{2, 2}, {0.0f, 3.0f, 0.0f, -6.0f});
  auto sc = compute_scales(m, 1, 4);
  REQUIRE(sc.size() == 2);
  CHECK(sc[0] == 1.0f);
  CHECK(sc[1] == doctest::Approx(6.0 / 7.0));
}

TEST_CASE("compute_scales rejects non-finite input") {
  Tensor t(Shape{2}, {1.0f, std::numeric_limits<float>::infinity()});
  CHECK_THROWS_AS(compute_scales(t, kPerTensor, 8), std::invalid_argument);
  CHECK_THROWS_AS(compute_scales(Tensor(Shape{1}, {1.f}), kPerTensor, 5),
                  std::invalid_argument);
}

TEST_CASE("quantize hand example int8") {
  Tensor t(Shape{3}, {-1.0f, 0.5f, 1.27f});
  auto q = quantize(t, {0.01f}, kPerTensor, 8);
  CHECK(q.codes()[0] == -100);
  CHECK(q.codes()[1] == 50);
  CHECK(q.codes()[2] == 127);
}

TEST_CASE("quantize integer-valued int4 input") {
  Tensor t(Shape{2}, {-7.0f, 3.0f});
  auto q = quantize(t, {1.0f}, kPerTensor, 4);
  CHECK(q.codes()[0] == -7);
  CHECK(q.codes()[1] == 3);
}

TEST_CASE("rounding modes near the halfway point") {
  Tensor a(Shape{1}, {0.149f});
  CHECK(quantize(a, {0.1f}, kPerTensor, 8, Rounding::truncate).codes()[0] == 1);
  CHECK(quantize(a, {0.1f}, kPerTensor, 8, Rounding::nearest).codes()[0] == 1);
  Tensor b(Shape{1}, {0.151f});
  CHECK(quantize(b, {0.1f}, kPerTensor, 8, Rounding::truncate).codes()[0] == 1);
  CHECK(quantize(b, {0.1f}, kPerTensor, 8, Rounding::nearest).codes()[0] == 2);
}

TEST_CASE("nearest rounds half away from zero") {
  Tensor t(Shape{2}, {1.5f, -2.5f});
  auto q = quantize(t, {1.0f}, kPerTensor, 8);
  CHECK(q.codes()[0] == 2);
  CHECK(q.codes()[1] == -3);
}

TEST_CASE("quantize rejects non-positive scale") {
  Tensor t(Shape{1}, {1.0f});
  CHECK_THROWS_AS(quantize(t, {0.0f}, kPerTensor, 8), std::invalid_argument);
  CHECK_THROWS_AS(quantize(t, {-0.5f}, kPerTensor, 8), std::invalid_argument);
}

TEST_CASE("dequantize hand example") {
  QuantizedTensor q(Shape{3}, {-100, 50, 127}, {0.01f}, kPerTensor, 8);
  Tensor t = dequantize(q);
  CHECK(t.at(0) == doctest::Approx(-1.0));
  CHECK(t.at(1) == doctest::Approx(0.5));
  CHECK(t.at(2) == doctest::Approx(1.27));
}

TEST_CASE("dequantize all-zero codes") {
  QuantizedTensor q(Shape{4}, {0, 0, 0, 0}, {123.0f}, kPerTensor, 8);
  Tensor t = dequantize(q);
  for (int64_t i = 0; i < 4; ++i) CHECK(t.at(i) == 0.0f);
}

TEST_CASE("round-trip bound over random tensors") {
  Rng rng(2024);
  // slack absorbs float32 rounding of the quotient and the dequant product
  const float slack = 1.0f + 1e-4f;
  for (int bits : {4, 8}) {
    for (int rep = 0; rep < 500; ++rep) {
      Tensor x = random_tensor(rng, {32}, -8.0f, 8.0f);
      auto scales = compute_scales(x, kPerTensor, bits);
      float s = scales[0];
      Tensor xn = dequantize(quantize(x, scales, kPerTensor, bits));
      Tensor xt = dequantize(
          quantize(x, scales, kPerTensor, bits, Rounding::truncate));
      for (int64_t i = 0; i < x.numel(); ++i) {
        REQUIRE(std::fabs(xn.at(i) - x.at(i)) <= 0.5f * s * slack);
        REQUIRE(std::fabs(xt.at(i) - x.at(i)) <= s * slack);
      }
    }
  }
}

TEST_CASE("max-magnitude element maps exactly to qmax") {
  Rng rng(5);
  for (int bits : {4, 8}) {
    const int q = qmax_for_bits(bits);
    for (int rep = 0; rep < 200; ++rep) {
      Tensor x = random_tensor(rng, {17}, -50.0f, 50.0f);
      auto qt = quantize_dynamic(x, kPerTensor, bits);
      int maxcode = 0;
      for (int8_t c : qt.codes()) maxcode = std::max(maxcode, std::abs(c));
      CHECK(maxcode == q);
    }
  }
}

TEST_CASE("quantize is symmetric under negation") {
  Rng rng(9);
  for (int bits : {4, 8}) {
    Tensor x = random_tensor(rng, {64}, -3.0f, 3.0f);
    Tensor nx = elementwise(EwKind::mul, x, -1.0f);
    auto scales = compute_scales(x, kPerTensor, bits);
    auto qp = quantize(x, scales, kPerTensor, bits);
    auto qn = quantize(nx, scales, kPerTensor, bits);
    for (size_t i = 0; i < qp.codes().size(); ++i)
      CHECK(qp.codes()[i] == -qn.codes()[i]);
  }
}

TEST_CASE("fake_quant keeps grid-aligned input bit-exact") {
  // power-of-two scale and a full-range code so the recomputed scale is exact
  std::vector<float> vals;
  for (int c : {-127, -64, -1, 0, 3, 127})
    vals.push_back(0.25f * static_cast<float>(c));
  Tensor x(Shape{(int64_t)vals.size()}, vals);
  Tensor y = fake_quant(x, kPerTensor, 8);
  CHECK(bit_equal(x, y));
}

TEST_CASE("fake_quant hand example stays on its grid") {
  Tensor x(Shape{3}, {-1.0f, 0.5f, 1.27f});
  Tensor y = fake_quant(x, kPerTensor, 8);
  for (int64_t i = 0; i < 3; ++i)
    CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-6));
}

TEST_CASE("fake_quant is idempotent bit-exactly") {
  Rng rng(31337);
  for (int rep = 0; rep < 1000; ++rep) {
    int bits = (rep % 2) ? 4 : 8;
    int axis = (rep % 3 == 0) ? kPerTensor : int(rep % 3) - 1;
    Tensor x = random_tensor(rng, {8, 6}, -20.0f, 20.0f);
    Tensor y = fake_quant(x, axis, bits);
    Tensor z = fake_quant(y, axis, bits);
    REQUIRE(bit_equal(y, z));
  }
}

TEST_CASE("fake_quant idempotence holds for truncate as well") {
  Rng rng(99);
  for (int rep = 0; rep < 500; ++rep) {
    int bits = (rep % 2) ? 4 : 8;
    Tensor x = random_tensor(rng, {40}, -5.0f, 5.0f);
    Tensor y = fake_quant(x, kPerTensor, bits, Rounding::truncate);
    Tensor z = fake_quant(y, kPerTensor, bits, Rounding::truncate);
    REQUIRE(bit_equal(y, z));
  }
}

TEST_CASE("pack_int4 hand examples") {
  std::vector<int8_t> codes{3, -2};
  auto bytes = pack_int4(codes);
  REQUIRE(bytes.size() == 1);
  CHECK(bytes[0] == 0xE3);
  std::vector<int8_t> zero{0};
  auto b2 = pack_int4(zero);
  REQUIRE(b2.size() == 1);
  CHECK(b2[0] == 0x00);
}

TEST_CASE("pack_int4 range check") {
  std::vector<int8_t> bad{8};
  CHECK_THROWS_AS(pack_int4(bad), std::invalid_argument);
  std::vector<int8_t> bad2{-8};
  CHECK_THROWS_AS(pack_int4(bad2), std::invalid_argument);
}

TEST_CASE("unpack rejects inconsistent byte counts") {
  std::vector<uint8_t> bytes{0x00, 0x00};
  CHECK_THROWS_AS(unpack_int4(bytes, 7), std::invalid_argument);
}

TEST_CASE("pack/unpack round trip property") {
  Rng rng(404);
  for (int rep = 0; rep < 1000; ++rep) {
    int64_t n = 1 + rng.next_index(33);
    std::vector<int8_t> codes(static_cast<size_t>(n));
    for (auto& c : codes) c = static_cast<int8_t>(rng.next_index(15) - 7);
    auto bytes = pack_int4(codes);
    CHECK(static_cast<int64_t>(bytes.size()) == (n + 1) / 2);
    auto back = unpack_int4(bytes, n);
    REQUIRE(back == codes);
  }
}

TEST_CASE("identity-coded left operand reproduces dequantized right") {
  Rng rng(11);
  const int64_t n = 6;
  std::vector<int8_t> eye(n * n, 0);
  for (int64_t i = 0; i < n; ++i) eye[static_cast<size_t>(i * n + i)] = 1;
  QuantizedTensor qa(Shape{n, n}, eye, {1.0f}, kPerTensor, 8);
  auto qb = random_codes(rng, {n, 4}, 8, 1);
  Tensor got = quantized_matmul_native(qa, qb);
  Tensor want = dequantize(qb);
  CHECK(bit_equal(got, want));
}

TEST_CASE("quantized matmul hand example") {
  QuantizedTensor qa(Shape{1, 2}, {1, 2}, {0.5f}, kPerTensor, 8);
  QuantizedTensor qb(Shape{2, 1}, {3, 4}, {0.25f}, kPerTensor, 8);
  Tensor r = quantized_matmul_native(qa, qb);
  CHECK(r.at(0) == 1.375f);
  Tensor e = quantized_matmul_emulated(qa, qb);
  CHECK(e.at(0) == 1.375f);
}

TEST_CASE("native equals emulated bit-exactly across bit pairs") {
  Rng rng(60001);
  for (int rep = 0; rep < 120; ++rep) {
    int abits = (rep & 1) ? 4 : 8;
    int bbits = (rep & 2) ? 4 : 8;
    int64_t m = 1 + rng.next_index(8), k = 1 + rng.next_index(64),
            n = 1 + rng.next_index(8);
    auto qa = random_codes(rng, {m, k}, abits, (rep % 3 == 0) ? 0 : kPerTensor);
    auto qb = random_codes(rng, {k, n}, bbits, (rep % 5 == 0) ? 1 : kPerTensor);
    Tensor nat = quantized_matmul_native(qa, qb);
    Tensor emu = quantized_matmul_emulated(qa, qb);
    REQUIRE(bit_equal(nat, emu));
  }
}

TEST_CASE("quantized matmul agrees with the dequantized float route") {
  Rng rng(321);
  for (int rep = 0; rep < 50; ++rep) {
    auto qa = random_codes(rng, {5, 24}, 8, 0);
    auto qb = random_codes(rng, {24, 7}, 8, 1);
    Tensor nat = quantized_matmul_native(qa, qb);
    Tensor da = dequantize(qa), db = dequantize(qb);
    Tensor ref = matmul(da, db);
    // error measured against the magnitude of the accumulated terms;
    // cancellation can make the result itself arbitrarily small
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 7; ++j) {
        float mag = 0.0f;
        for (int64_t k = 0; k < 24; ++k)
          mag += std::fabs(da.at(i * 24 + k) * db.at(k * 7 + j));
        float denom = std::max(mag, 1e-6f);
        CHECK(std::fabs(nat.at(i * 7 + j) - ref.at(i * 7 + j)) / denom <=
              1e-5f);
      }
  }
  // exactly equal when every scale is a power of two
  for (int rep = 0; rep < 50; ++rep) {
    auto qa = random_codes(rng, {4, 16}, 4, 0, /*pow2=*/true);
    auto qb = random_codes(rng, {16, 3}, 8, 1, /*pow2=*/true);
    Tensor nat = quantized_matmul_native(qa, qb);
    Tensor ref = matmul(dequantize(qa), dequantize(qb));
    REQUIRE(bit_equal(nat, ref));
  }
}

TEST_CASE("scales on the contracted axis are rejected") {
  Rng rng(8);
  auto qa = random_codes(rng, {3, 4}, 8, 1);  // scales on K
  auto qb = random_codes(rng, {4, 2}, 8, kPerTensor);
  CHECK_THROWS_AS(quantized_matmul_native(qa, qb), std::invalid_argument);
  auto qa2 = random_codes(rng, {3, 4}, 8, kPerTensor);
  auto qb2 = random_codes(rng, {4, 2}, 8, 0);  // scales on K
  CHECK_THROWS_AS(quantized_matmul_native(qa2, qb2), std::invalid_argument);
}

TEST_CASE("accumulator bounds are enforced") {
  Rng rng(12);
  {
    // 1041 * 127 * 127 just exceeds 2^24
    auto qa = random_codes(rng, {1, 1041}, 8, kPerTensor);
    auto qb = random_codes(rng, {1041, 1}, 8, kPerTensor);
    CHECK_THROWS_AS(quantized_matmul_emulated(qa, qb), std::invalid_argument);
    CHECK_NOTHROW(quantized_matmul_native(qa, qb));
  }
  {
    // 133153 * 127 * 127 just exceeds 2^31
    auto qa = random_codes(rng, {1, 133153}, 8, kPerTensor);
    auto qb = random_codes(rng, {133153, 1}, 8, kPerTensor);
    CHECK_THROWS_AS(quantized_matmul_native(qa, qb), std::invalid_argument);
  }
}

TEST_CASE("int8 K=1024 and int4 K=512 stay inside the exact regime") {
  CHECK(int64_t(1024) * 127 * 127 < (int64_t(1) << 24));
  CHECK(int64_t(512) * 7 * 7 < (int64_t(1) << 24));
  Rng rng(42);
  auto qa = random_codes(rng, {2, 512}, 4, kPerTensor);
  auto qb = random_codes(rng, {512, 2}, 4, kPerTensor);
  CHECK(bit_equal(quantized_matmul_native(qa, qb),
                  quantized_matmul_emulated(qa, qb)));
}

TEST_CASE("QuantizedTensor validates invariants") {
  CHECK_THROWS_AS(
      QuantizedTensor(Shape{2}, {1, 2}, {1.0f, 1.0f}, kPerTensor, 8),
      std::invalid_argument);
  CHECK_THROWS_AS(QuantizedTensor(Shape{1}, {8}, {1.0f}, kPerTensor, 4),
                  std::invalid_argument);
  CHECK_THROWS_AS(QuantizedTensor(Shape{1}, {1}, {0.0f}, kPerTensor, 8),
                  std::invalid_argument);
  // -2^(bits-1) never appears
  CHECK_THROWS_AS(QuantizedTensor(Shape{1}, {-128}, {1.0f}, kPerTensor, 8),
                  std::invalid_argument);
}

TEST_CASE("QuantSpec validation and named configs") {
  CHECK_NOTHROW(QuantSpec::make_float().validate());
  CHECK_NOTHROW(QuantSpec::i4wi8a().validate());
  QuantSpec bad;
  bad.weight_bits = 8;  // float path with bits
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  QuantSpec bad2;
  bad2.path = ExecPath::native;  // no bits on a quantized path
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
  CHECK(QuantSpec::i4wa().weight_bits == 4);
  CHECK(QuantSpec::i4wa().activation_bits == 4);
  CHECK(QuantSpec::fake_i4w().path == ExecPath::fake);
  CHECK(!QuantSpec::fake_i4w().activation_bits.has_value());
}
