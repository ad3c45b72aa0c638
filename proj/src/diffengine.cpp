#include "ditto/diffengine.hpp"

#include <cstdlib>
#include <limits>
#include <string>

#include "ditto/error.hpp"

namespace ditto {

namespace {

// One multiplier pass per nibble; the high nibble's product is shifted by 4.
inline std::int64_t nibble_product(const DiffElement& e, std::int64_t w) {
  return e.sign * (((e.mag_hi * w) << 4) + e.mag_lo * w);
}

AccumTensor narrow(const Shape& dims, const std::vector<std::int64_t>& acc) {
  AccumTensor out{dims, std::vector<std::int32_t>(acc.size())};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (acc[i] > std::numeric_limits<std::int32_t>::max() ||
        acc[i] < std::numeric_limits<std::int32_t>::min())
      throw Error(ErrorCode::Overflow, "accumulator overflow at output index " + std::to_string(i));
    out.values[i] = static_cast<std::int32_t>(acc[i]);
  }
  return out;
}

std::vector<std::int64_t> widen(const AccumTensor& t) {
  return std::vector<std::int64_t>(t.values.begin(), t.values.end());
}

void require_prev(const AccumTensor& prev, const Shape& expected, const char* what) {
  if (prev.values.empty() && element_count(expected) != 0)
    throw Error(ErrorCode::MissingPrevious, std::string(what) + ": previous-step output missing");
  if (prev.dims != expected || prev.values.size() != element_count(expected))
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": previous output " +
                                              shape_string(prev.dims) + " but layer produces " +
                                              shape_string(expected));
}

// Adds stream(a) * w into acc, where the stream walks the first operand.
void accumulate_first(std::span<const DiffElement> stream, const Shape& ad, const QuantTensor& w,
                      const LinearOp& op, std::vector<std::int64_t>& acc) {
  const Shape& wd = w.dims();
  const auto wv = w.values();
  switch (op.kind) {
    case LinearKind::Matmul: {
      const std::size_t k = ad[1], m = wd[1];
      for (const auto& e : stream) {
        const std::size_t n = e.index / k, r = e.index % k;
        for (std::size_t j = 0; j < m; ++j) acc[n * m + j] += nibble_product(e, wv[r * m + j]);
      }
      break;
    }
    case LinearKind::Conv2d: {
      const Shape od = output_shape(op, ad, wd);
      const std::size_t cin = ad[2], cout = wd[3], ho = od[0], wo = od[1];
      const long s = op.stride, p = op.padding;
      for (const auto& e : stream) {
        const long y = static_cast<long>(e.index / (ad[1] * cin));
        const long x = static_cast<long>((e.index / cin) % ad[1]);
        const std::size_t c = e.index % cin;
        for (long ky = 0; ky < op.kernel_h; ++ky) {
          const long ty = y + p - ky;
          if (ty < 0 || ty % s != 0 || ty / s >= static_cast<long>(ho)) continue;
          for (long kx = 0; kx < op.kernel_w; ++kx) {
            const long tx = x + p - kx;
            if (tx < 0 || tx % s != 0 || tx / s >= static_cast<long>(wo)) continue;
            const std::size_t obase =
                (static_cast<std::size_t>(ty / s) * wo + static_cast<std::size_t>(tx / s)) * cout;
            const std::size_t wbase =
                ((static_cast<std::size_t>(ky) * op.kernel_w + static_cast<std::size_t>(kx)) * cin + c) *
                cout;
            for (std::size_t co = 0; co < cout; ++co)
              acc[obase + co] += nibble_product(e, wv[wbase + co]);
          }
        }
      }
      break;
    }
    case LinearKind::AttnScore: {
      const std::size_t width = ad[1], n_q = ad[0], nk = wd[0];
      const std::size_t dh = width / static_cast<std::size_t>(op.heads);
      for (const auto& e : stream) {
        const std::size_t n = e.index / width, col = e.index % width, hd = col / dh;
        for (std::size_t j = 0; j < nk; ++j)
          acc[(hd * n_q + n) * nk + j] += nibble_product(e, wv[j * width + col]);
      }
      break;
    }
    case LinearKind::AttnContext: {
      const std::size_t n_q = ad[1], nk = ad[2], width = wd[1];
      const std::size_t dh = width / static_cast<std::size_t>(op.heads);
      for (const auto& e : stream) {
        const std::size_t hd = e.index / (n_q * nk), n = (e.index / nk) % n_q, j = e.index % nk;
        for (std::size_t d = 0; d < dh; ++d)
          acc[n * width + hd * dh + d] += nibble_product(e, wv[j * width + hd * dh + d]);
      }
      break;
    }
  }
}

// Adds a * stream(w) into acc, where the stream walks the second operand.
// Only attention kinds have a time-varying second operand.
void accumulate_second(std::span<const DiffElement> stream, const QuantTensor& a, const Shape& wd,
                       const LinearOp& op, std::vector<std::int64_t>& acc) {
  const Shape& ad = a.dims();
  const auto av = a.values();
  if (op.kind == LinearKind::AttnScore) {
    const std::size_t width = ad[1], n_q = ad[0], nk = wd[0];
    const std::size_t dh = width / static_cast<std::size_t>(op.heads);
    for (const auto& e : stream) {
      const std::size_t j = e.index / width, col = e.index % width, hd = col / dh;
      for (std::size_t n = 0; n < n_q; ++n)
        acc[(hd * n_q + n) * nk + j] += nibble_product(e, av[n * width + col]);
    }
  } else if (op.kind == LinearKind::AttnContext) {
    const std::size_t n_q = ad[1], nk = ad[2], width = wd[1];
    const std::size_t dh = width / static_cast<std::size_t>(op.heads);
    for (const auto& e : stream) {
      const std::size_t j = e.index / width, col = e.index % width, hd = col / dh;
      for (std::size_t n = 0; n < n_q; ++n)
        acc[n * width + col] += nibble_product(e, av[(hd * n_q + n) * nk + j]);
    }
  } else {
    throw Error(ErrorCode::InvalidArgument, "second-operand streaming needs an attention kind");
  }
}

void require_same_scale(const QuantTensor& a, const QuantTensor& b, const char* what) {
  if (!(a.scale() == b.scale()))
    throw Error(ErrorCode::ScaleMismatch,
                std::string(what) + ": scales differ across steps (" +
                    std::to_string(a.scale().value()) + " vs " + std::to_string(b.scale().value()) +
                    "), differences would not be exact");
  if (a.dims() != b.dims())
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": dims differ across steps " +
                                              shape_string(a.dims()) + " vs " +
                                              shape_string(b.dims()));
}

}  // namespace

const char* to_string(DiffClass c) {
  switch (c) {
    case DiffClass::Zero: return "zero";
    case DiffClass::Low: return "low";
    case DiffClass::Full: return "full";
  }
  return "unknown";
}

const char* to_string(ExecMode m) {
  switch (m) {
    case ExecMode::Direct: return "direct";
    case ExecMode::TemporalDiff: return "temporal";
    case ExecMode::SpatialDiff: return "spatial";
  }
  return "unknown";
}

MacCounts& MacCounts::operator+=(const MacCounts& o) {
  zero += o.zero;
  low += o.low;
  full += o.full;
  return *this;
}

DiffClass classify_value(int delta) {
  const int mag = std::abs(delta);
  if (mag > kDiffMax)
    throw Error(ErrorCode::InvalidArgument,
                "difference " + std::to_string(delta) + " outside [-254, 254]");
  if (mag == 0) return DiffClass::Zero;
  return mag <= kLowMax ? DiffClass::Low : DiffClass::Full;
}

int bit_requirement(int delta) {
  int mag = std::abs(delta);
  if (mag > kDiffMax)
    throw Error(ErrorCode::InvalidArgument,
                "difference " + std::to_string(delta) + " outside [-254, 254]");
  int bits = 0;
  while (mag) {
    ++bits;
    mag >>= 1;
  }
  return bits;
}

ClassifiedDiff::ClassifiedDiff(Shape dims, std::vector<DiffElement> elements, DiffCounts counts,
                               QuantScale scale)
    : dims_(std::move(dims)), elements_(std::move(elements)), counts_(counts), scale_(scale) {}

ClassifiedDiff ClassifiedDiff::from_dense(Shape dims, std::span<const std::int16_t> delta,
                                          QuantScale scale) {
  if (element_count(dims) != delta.size())
    throw Error(ErrorCode::ShapeMismatch, "delta dims " + shape_string(dims) + " do not match " +
                                              std::to_string(delta.size()) + " values");
  std::vector<DiffElement> elements;
  DiffCounts counts;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const DiffClass cls = classify_value(delta[i]);
    if (cls == DiffClass::Zero) {
      ++counts.zero;
      continue;
    }
    (cls == DiffClass::Low ? counts.low : counts.full)++;
    const int mag = std::abs(static_cast<int>(delta[i]));
    elements.push_back({static_cast<std::uint32_t>(i), static_cast<std::int8_t>(delta[i] < 0 ? -1 : 1),
                        static_cast<std::uint8_t>(mag & 0xF), static_cast<std::uint8_t>(mag >> 4),
                        cls});
  }
  return ClassifiedDiff(std::move(dims), std::move(elements), counts, scale);
}

WideTensor ClassifiedDiff::dense() const {
  WideTensor t{dims_, std::vector<std::int16_t>(element_count(dims_), 0)};
  for (const auto& e : elements_) t.values[e.index] = static_cast<std::int16_t>(e.value());
  return t;
}

ClassifiedDiff temporal_diff(const QuantTensor& cur, const QuantTensor& prev) {
  require_same_scale(cur, prev, "temporal_diff");
  std::vector<std::int16_t> delta(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i)
    delta[i] = static_cast<std::int16_t>(cur[i] - prev[i]);
  return ClassifiedDiff::from_dense(cur.dims(), delta, cur.scale());
}

MacCounts weighted_counts(const ClassifiedDiff& diff, std::span<const std::uint32_t> macs) {
  if (macs.size() != element_count(diff.dims()))
    throw Error(ErrorCode::ShapeMismatch, "per-element MAC table size differs from diff size");
  MacCounts out;
  std::uint64_t nonzero = 0;
  for (const auto& e : diff.elements()) {
    (e.cls == DiffClass::Low ? out.low : out.full) += macs[e.index];
    nonzero += macs[e.index];
  }
  std::uint64_t all = 0;
  for (auto m : macs) all += m;
  out.zero = all - nonzero;
  return out;
}

MacCounts dense_counts(std::uint64_t macs) { return MacCounts{0, 0, macs}; }

AccumTensor diff_linear(const ClassifiedDiff& delta, const QuantTensor& w,
                        const AccumTensor& prev_out, const LinearOp& op) {
  const Shape out_dims = output_shape(op, delta.dims(), w.dims());
  if (reduction_length(op, delta.dims(), w.dims()) > kMaxReduction)
    throw Error(ErrorCode::Overflow, "reduction length could overflow 32-bit accumulation");
  require_prev(prev_out, out_dims, "diff_linear");
  auto acc = widen(prev_out);
  accumulate_first(delta.elements(), delta.dims(), w, op, acc);
  return narrow(out_dims, acc);
}

AccumTensor diff_attention(const QuantTensor& a_t, const QuantTensor& w_t,
                           const QuantTensor& a_prev, const QuantTensor& w_prev,
                           const AccumTensor& prev, const LinearOp& op) {
  if (!op.is_attention())
    throw Error(ErrorCode::InvalidArgument, "diff_attention needs an attention descriptor");
  require_same_scale(a_t, a_prev, "diff_attention (first operand)");
  require_same_scale(w_t, w_prev, "diff_attention (second operand)");
  const Shape out_dims = output_shape(op, a_t.dims(), w_t.dims());
  if (reduction_length(op, a_t.dims(), w_t.dims()) > kMaxReduction)
    throw Error(ErrorCode::Overflow, "reduction length could overflow 32-bit accumulation");
  require_prev(prev, out_dims, "diff_attention");
  const ClassifiedDiff da = temporal_diff(a_t, a_prev);
  const ClassifiedDiff dw = temporal_diff(w_t, w_prev);
  auto acc = widen(prev);
  accumulate_second(dw.elements(), a_t, w_t.dims(), op, acc);
  accumulate_first(da.elements(), a_t.dims(), w_prev, op, acc);
  return narrow(out_dims, acc);
}

CrossAttentionOutputs cross_attention_constant_context(
    const ClassifiedDiff& dq, const QuantTensor& k_ctx, const QuantTensor& k_ctx_prev,
    const AccumTensor& prev_scores, const ClassifiedDiff& dp, const QuantTensor& v_ctx,
    const QuantTensor& v_ctx_prev, const AccumTensor& prev_context, int heads) {
  if (!(k_ctx == k_ctx_prev) || !(v_ctx == v_ctx_prev))
    throw Error(ErrorCode::ContextChanged,
                "cross-attention context changed between steps; use diff_attention instead");
  CrossAttentionOutputs out;
  out.scores = diff_linear(dq, k_ctx, prev_scores, LinearOp::attn_score(heads));
  out.context = diff_linear(dp, v_ctx, prev_context, LinearOp::attn_context(heads));
  return out;
}

DiffCounts SpatialDiff::counts() const {
  const std::uint64_t base_elems = base_rows() * cols;
  DiffCounts c = diffs.counts();
  c.zero -= base_elems;
  c.full += base_elems;
  return c;
}

WideTensor SpatialDiff::row_deltas() const {
  WideTensor d = diffs.dense();
  for (std::size_t b = 0; b < base_rows(); ++b)
    for (std::size_t c = 0; c < cols; ++c)
      d.values[b * segment * cols + c] = base[b * cols + c];
  return d;
}

std::vector<std::int8_t> SpatialDiff::reconstruct() const {
  const WideTensor d = row_deltas();
  std::vector<std::int8_t> m(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const int v = d.values[r * cols + c] + (is_base_row(r) ? 0 : m[(r - 1) * cols + c]);
      m[r * cols + c] = static_cast<std::int8_t>(v);
    }
  return m;
}

SpatialDiff spatial_diff(const QuantTensor& a, const LinearOp& op) {
  SpatialDiff sd{op, a.dims(), 0, 0, 0, {}, ClassifiedDiff::from_dense({0}, {}, a.scale())};
  std::vector<std::int8_t> matrix;
  const Shape& ad = a.dims();
  switch (op.kind) {
    case LinearKind::Matmul:
    case LinearKind::AttnScore:
      if (ad.size() != 2) throw Error(ErrorCode::ShapeMismatch, "row view expects a rank-2 operand");
      sd.rows = ad[0];
      sd.cols = ad[1];
      sd.segment = ad[0];
      matrix.assign(a.values().begin(), a.values().end());
      break;
    case LinearKind::AttnContext:
      if (ad.size() != 3) throw Error(ErrorCode::ShapeMismatch, "P must be [H,N,Nk]");
      sd.rows = ad[0] * ad[1];
      sd.cols = ad[2];
      sd.segment = ad[1];
      matrix.assign(a.values().begin(), a.values().end());
      break;
    case LinearKind::Conv2d: {
      matrix = im2col(a, op, sd.rows, sd.cols);
      const Shape wd{static_cast<std::size_t>(op.kernel_h), static_cast<std::size_t>(op.kernel_w),
                     ad[2], 1};
      sd.segment = output_shape(op, ad, wd)[1];
      break;
    }
  }
  std::vector<std::int16_t> delta(sd.rows * sd.cols, 0);
  for (std::size_t r = 0; r < sd.rows; ++r) {
    if (sd.is_base_row(r)) {
      sd.base.insert(sd.base.end(), matrix.begin() + static_cast<long>(r * sd.cols),
                     matrix.begin() + static_cast<long>((r + 1) * sd.cols));
      continue;
    }
    for (std::size_t c = 0; c < sd.cols; ++c)
      delta[r * sd.cols + c] =
          static_cast<std::int16_t>(matrix[r * sd.cols + c] - matrix[(r - 1) * sd.cols + c]);
  }
  sd.diffs = ClassifiedDiff::from_dense({sd.rows, sd.cols}, delta, a.scale());
  return sd;
}

AccumTensor spatial_linear(const SpatialDiff& sd, const QuantTensor& w) {
  const LinearOp& op = sd.op;
  const Shape out_dims = output_shape(op, sd.source_dims, w.dims());
  WideTensor d = sd.row_deltas();
  AccumTensor contrib;
  switch (op.kind) {
    case LinearKind::Matmul:
    case LinearKind::AttnScore:
      d.dims = sd.source_dims;
      contrib = direct_linear_wide(d, w, op);
      break;
    case LinearKind::AttnContext:
      d.dims = sd.source_dims;
      contrib = direct_linear_wide(d, w, op);
      break;
    case LinearKind::Conv2d: {
      const Shape& wd = w.dims();
      const QuantTensor flat({wd[0] * wd[1] * wd[2], wd[3]},
                             std::vector<std::int8_t>(w.values().begin(), w.values().end()),
                             w.scale());
      d.dims = {sd.rows, sd.cols};
      contrib = direct_linear_wide(d, flat, LinearOp::matmul());
      break;
    }
  }

  std::vector<std::int64_t> acc = widen(contrib);
  if (op.kind == LinearKind::AttnScore) {
    const std::size_t heads = out_dims[0], n = out_dims[1], nk = out_dims[2];
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 1; i < n; ++i)
        for (std::size_t j = 0; j < nk; ++j)
          acc[(h * n + i) * nk + j] += acc[(h * n + i - 1) * nk + j];
  } else if (op.kind == LinearKind::AttnContext) {
    const std::size_t n = out_dims[0], width = out_dims[1];
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t c = 0; c < width; ++c) acc[i * width + c] += acc[(i - 1) * width + c];
  } else {
    const std::size_t m = acc.size() / sd.rows;
    for (std::size_t r = 0; r < sd.rows; ++r) {
      if (sd.is_base_row(r)) continue;
      for (std::size_t c = 0; c < m; ++c) acc[r * m + c] += acc[(r - 1) * m + c];
    }
  }
  return narrow(out_dims, acc);
}

MacCounts spatial_weighted_counts(const SpatialDiff& sd, const Shape& w_dims) {
  std::uint64_t macs = 0;
  switch (sd.op.kind) {
    case LinearKind::Matmul: macs = w_dims.at(1); break;
    case LinearKind::Conv2d: macs = w_dims.at(3); break;
    case LinearKind::AttnScore: macs = w_dims.at(0); break;
    case LinearKind::AttnContext: macs = w_dims.at(1) / static_cast<std::size_t>(sd.op.heads); break;
  }
  const DiffCounts c = sd.counts();
  return MacCounts{c.zero * macs, c.low * macs, c.full * macs};
}

std::uint64_t bops(const DiffCounts& counts, std::uint64_t macs_per_element, int w_bits) {
  const auto w = static_cast<std::uint64_t>(w_bits);
  return counts.low * macs_per_element * 4 * w + counts.full * macs_per_element * 8 * w;
}

std::uint64_t bops(const MacCounts& macs, int w_bits) {
  const auto w = static_cast<std::uint64_t>(w_bits);
  return macs.low * 4 * w + macs.full * 8 * w;
}

std::uint64_t direct_bops(std::uint64_t elements, std::uint64_t macs_per_element, int w_bits) {
  return elements * macs_per_element * 8 * static_cast<std::uint64_t>(w_bits);
}

}  // namespace ditto
