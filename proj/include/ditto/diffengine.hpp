#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ditto/qtensor.hpp"

namespace ditto {

inline constexpr int kLowMax = 15;     // largest magnitude carried by one nibble
inline constexpr int kDiffMax = 2 * kQuantMax;

enum class DiffClass : std::uint8_t { Zero, Low, Full };
enum class ExecMode : std::uint8_t { Direct, TemporalDiff, SpatialDiff };

const char* to_string(DiffClass c);
const char* to_string(ExecMode m);

// Sign-magnitude difference split into two nibbles, as the encoder queues it.
struct DiffElement {
  std::uint32_t index;
  std::int8_t sign;  // +1 or -1
  std::uint8_t mag_lo;
  std::uint8_t mag_hi;
  DiffClass cls;

  int magnitude() const { return mag_hi * 16 + mag_lo; }
  int value() const { return sign * magnitude(); }
};

struct DiffCounts {
  std::uint64_t zero = 0;
  std::uint64_t low = 0;
  std::uint64_t full = 0;

  std::uint64_t total() const { return zero + low + full; }
  bool operator==(const DiffCounts&) const = default;
};

// Class counts weighted by how many MACs each element feeds.
struct MacCounts {
  std::uint64_t zero = 0;
  std::uint64_t low = 0;
  std::uint64_t full = 0;

  std::uint64_t total() const { return zero + low + full; }
  MacCounts& operator+=(const MacCounts& o);
  bool operator==(const MacCounts&) const = default;
};

DiffClass classify_value(int delta);
// Magnitude bits needed for `delta`; 0 for zero. |delta| must be <= 254.
int bit_requirement(int delta);

class ClassifiedDiff {
 public:
  // Classifies a dense delta tensor; zeros are elided from the stream.
  static ClassifiedDiff from_dense(Shape dims, std::span<const std::int16_t> delta,
                                   QuantScale scale);

  const Shape& dims() const { return dims_; }
  std::span<const DiffElement> elements() const { return elements_; }
  const DiffCounts& counts() const { return counts_; }
  QuantScale scale() const { return scale_; }

  // Exact dense reconstruction of the delta tensor.
  WideTensor dense() const;

 private:
  ClassifiedDiff(Shape dims, std::vector<DiffElement> elements, DiffCounts counts,
                 QuantScale scale);

  Shape dims_;
  std::vector<DiffElement> elements_;
  DiffCounts counts_;
  QuantScale scale_;
};

ClassifiedDiff temporal_diff(const QuantTensor& cur, const QuantTensor& prev);

MacCounts weighted_counts(const ClassifiedDiff& diff, std::span<const std::uint32_t> macs);
MacCounts dense_counts(std::uint64_t macs);

// prev_out + delta * w, streaming only the non-zero elements of `delta`.
AccumTensor diff_linear(const ClassifiedDiff& delta, const QuantTensor& w,
                        const AccumTensor& prev_out, const LinearOp& op);

// Two-term decomposition for operators whose both operands change per step:
// prev + a_t * (w_t - w_prev) + (a_t - a_prev) * w_prev == a_t * w_t.
// Serves Q x K^T (AttnScore) and P x V (AttnContext).
AccumTensor diff_attention(const QuantTensor& a_t, const QuantTensor& w_t,
                           const QuantTensor& a_prev, const QuantTensor& w_prev,
                           const AccumTensor& prev, const LinearOp& op);

struct CrossAttentionOutputs {
  AccumTensor scores;
  AccumTensor context;
};

// Cross-attention against a step-invariant context: K' and V' act as weights,
// so only dQ' and dP' are streamed. Throws ContextChanged if K' or V' moved.
CrossAttentionOutputs cross_attention_constant_context(
    const ClassifiedDiff& dq, const QuantTensor& k_ctx, const QuantTensor& k_ctx_prev,
    const AccumTensor& prev_scores, const ClassifiedDiff& dp, const QuantTensor& v_ctx,
    const QuantTensor& v_ctx_prev, const AccumTensor& prev_context, int heads);

// Differences between adjacent rows (or adjacent conv windows) of one tensor.
// The operand is viewed as a row matrix; the first row of each segment is the
// dense base row, every other row stores its difference to the row above.
//   Matmul      a [N,K]          rows N,      segment N
//   Conv2d      im2col(a)        rows Ho*Wo,  segment Wo (first window per output row)
//   AttnScore   Q [N,H*dh]       rows N,      segment N
//   AttnContext P [H,N,Nk]       rows H*N,    segment N
struct SpatialDiff {
  LinearOp op;
  Shape source_dims;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t segment = 0;
  std::vector<std::int8_t> base;  // (rows / segment) dense base rows
  ClassifiedDiff diffs;           // over [rows, cols]; base-row entries are zero

  std::size_t base_rows() const { return segment ? rows / segment : 0; }
  bool is_base_row(std::size_t r) const { return r % segment == 0; }
  // Base elements are processed densely at full width.
  DiffCounts counts() const;
  // Row-delta matrix with base rows filled in; reconstruction input.
  WideTensor row_deltas() const;
  // Exact reconstruction of the row matrix.
  std::vector<std::int8_t> reconstruct() const;
};

SpatialDiff spatial_diff(const QuantTensor& a, const LinearOp& op);
AccumTensor spatial_linear(const SpatialDiff& sd, const QuantTensor& w);
MacCounts spatial_weighted_counts(const SpatialDiff& sd, const Shape& w_dims);

// Bit operations: MACs x activation bits x weight bits. Low elements run at
// 4 bits, full at 8, zeros are skipped.
std::uint64_t bops(const DiffCounts& counts, std::uint64_t macs_per_element, int w_bits = 8);
std::uint64_t bops(const MacCounts& macs, int w_bits = 8);
std::uint64_t direct_bops(std::uint64_t elements, std::uint64_t macs_per_element,
                          int w_bits = 8);

}  // namespace ditto
