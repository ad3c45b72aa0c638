#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ditto/tensor.hpp"

namespace ditto {

inline constexpr int kQuantMax = 127;
// Longest reduction accepted by the integer kernels. Keeps |acc| < 2^31 even
// for widened (9-bit) operands: 255 * 127 * 2^15 < 2^31.
inline constexpr std::size_t kMaxReduction = std::size_t{1} << 15;

// Activation units per integer step. Always positive and finite.
class QuantScale {
 public:
  explicit QuantScale(double value);

  double value() const { return value_; }
  bool operator==(const QuantScale&) const = default;

 private:
  double value_;
};

// Per-tensor symmetric int8 tensor with values in [-127, 127].
class QuantTensor {
 public:
  QuantTensor(Shape dims, std::vector<std::int8_t> values, QuantScale scale);

  const Shape& dims() const { return dims_; }
  std::span<const std::int8_t> values() const { return values_; }
  QuantScale scale() const { return scale_; }
  std::size_t size() const { return values_.size(); }
  std::int8_t operator[](std::size_t i) const { return values_[i]; }

  bool operator==(const QuantTensor&) const = default;

 private:
  Shape dims_;
  std::vector<std::int8_t> values_;
  QuantScale scale_;
};

// Signed operand tensor wider than int8: temporal differences of two int8
// tensors live in [-254, 254].
struct WideTensor {
  Shape dims;
  std::vector<std::int16_t> values;
};

struct AccumTensor {
  Shape dims;
  std::vector<std::int32_t> values;

  bool operator==(const AccumTensor&) const = default;
};

enum class LinearKind : std::uint8_t { Matmul, Conv2d, AttnScore, AttnContext };

// Shape conventions (row-major, batch 1):
//   Matmul      a [N, K]          w [K, M]            -> [N, M]
//   Conv2d      a [H, W, Cin]     w [kh, kw, Cin, Co] -> [Ho, Wo, Co]
//   AttnScore   a=Q [N, H*dh]     w=K [Nk, H*dh]      -> [H, N, Nk]
//   AttnContext a=P [H, N, Nk]    w=V [Nk, H*dh]      -> [N, H*dh]
struct LinearOp {
  LinearKind kind = LinearKind::Matmul;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int heads = 1;

  static LinearOp matmul() { return {}; }
  static LinearOp conv2d(int kh, int kw, int stride, int padding);
  static LinearOp attn_score(int heads);
  static LinearOp attn_context(int heads);

  bool is_attention() const {
    return kind == LinearKind::AttnScore || kind == LinearKind::AttnContext;
  }
};

const char* to_string(LinearKind kind);

// Validates operand shapes for `op` and returns the output shape.
Shape output_shape(const LinearOp& op, const Shape& a_dims, const Shape& w_dims);
std::size_t reduction_length(const LinearOp& op, const Shape& a_dims, const Shape& w_dims);
// Multiply-accumulates the dense hardware performs, padded taps included.
std::uint64_t total_macs(const LinearOp& op, const Shape& a_dims, const Shape& w_dims);

// Number of MACs each element of the first operand takes part in (padded
// taps excluded, since they carry no data).
std::vector<std::uint32_t> macs_per_a_element(const LinearOp& op, const Shape& a_dims,
                                              const Shape& w_dims);
// Same for the second operand; only meaningful for attention kinds where the
// second operand is an activation that changes over time.
std::vector<std::uint32_t> macs_per_w_element(const LinearOp& op, const Shape& a_dims,
                                              const Shape& w_dims);

QuantScale calibrate_scale(std::span<const float> samples);
QuantTensor quantize(const Tensor& x, QuantScale scale);
QuantTensor quantize_values(const Shape& dims, std::span<const float> x, QuantScale scale);
Tensor dequantize(const QuantTensor& q);

// Exact full-bit-width reference. Rejects reductions longer than kMaxReduction.
AccumTensor direct_linear(const QuantTensor& a, const QuantTensor& w, const LinearOp& op);
// Same kernel with a widened first operand (|a| <= 255).
AccumTensor direct_linear_wide(const WideTensor& a, const QuantTensor& w, const LinearOp& op);

// im2col rows for a conv input: [Ho*Wo, kh*kw*Cin], padded taps are zero.
std::vector<std::int8_t> im2col(const QuantTensor& a, const LinearOp& op, std::size_t& rows,
                                std::size_t& cols);

}  // namespace ditto
