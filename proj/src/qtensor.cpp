#include "ditto/qtensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ditto/error.hpp"

namespace ditto {

namespace {

[[noreturn]] void shape_error(const LinearOp& op, const Shape& a, const Shape& w,
                              const std::string& why) {
  throw Error(ErrorCode::ShapeMismatch, std::string(to_string(op.kind)) + ": a=" +
                                            shape_string(a) + " w=" + shape_string(w) + ": " +
                                            why);
}

struct ConvGeometry {
  std::size_t h, w, cin, kh, kw, cout, ho, wo;
  int stride, pad;
};

ConvGeometry conv_geometry(const LinearOp& op, const Shape& a, const Shape& w) {
  if (a.size() != 3 || w.size() != 4) shape_error(op, a, w, "expected a [H,W,Cin], w [kh,kw,Cin,Co]");
  if (op.stride < 1 || op.padding < 0) shape_error(op, a, w, "stride must be >= 1, padding >= 0");
  if (w[0] != static_cast<std::size_t>(op.kernel_h) || w[1] != static_cast<std::size_t>(op.kernel_w))
    shape_error(op, a, w, "kernel extent differs from descriptor");
  if (w[2] != a[2]) shape_error(op, a, w, "input channels differ");
  ConvGeometry g{a[0], a[1], a[2], w[0], w[1], w[3], 0, 0, op.stride, op.padding};
  const auto padded_h = static_cast<long>(g.h) + 2L * g.pad;
  const auto padded_w = static_cast<long>(g.w) + 2L * g.pad;
  if (padded_h < static_cast<long>(g.kh) || padded_w < static_cast<long>(g.kw))
    shape_error(op, a, w, "kernel larger than padded input");
  g.ho = static_cast<std::size_t>((padded_h - static_cast<long>(g.kh)) / g.stride + 1);
  g.wo = static_cast<std::size_t>((padded_w - static_cast<long>(g.kw)) / g.stride + 1);
  return g;
}

struct AttnGeometry {
  std::size_t heads, n, nk, dh;
};

AttnGeometry attn_geometry(const LinearOp& op, const Shape& a, const Shape& w) {
  if (op.heads < 1) shape_error(op, a, w, "heads must be >= 1");
  const auto heads = static_cast<std::size_t>(op.heads);
  if (op.kind == LinearKind::AttnScore) {
    if (a.size() != 2 || w.size() != 2) shape_error(op, a, w, "expected Q [N,H*dh], K [Nk,H*dh]");
    if (a[1] != w[1]) shape_error(op, a, w, "feature widths differ");
    if (a[1] % heads != 0) shape_error(op, a, w, "width not divisible by heads");
    return {heads, a[0], w[0], a[1] / heads};
  }
  if (a.size() != 3 || w.size() != 2) shape_error(op, a, w, "expected P [H,N,Nk], V [Nk,H*dh]");
  if (a[0] != heads) shape_error(op, a, w, "P head count differs from descriptor");
  if (a[2] != w[0]) shape_error(op, a, w, "key lengths differ");
  if (w[1] % heads != 0) shape_error(op, a, w, "width not divisible by heads");
  return {heads, a[1], a[2], w[1] / heads};
}

// Number of (output, tap) pairs along one axis that read input index i.
std::vector<std::uint32_t> taps_per_index(std::size_t in, std::size_t out, std::size_t kernel,
                                          int stride, int pad) {
  std::vector<std::uint32_t> taps(in, 0);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t k = 0; k < kernel; ++k) {
      const long i = static_cast<long>(o) * stride - pad + static_cast<long>(k);
      if (i >= 0 && i < static_cast<long>(in)) ++taps[static_cast<std::size_t>(i)];
    }
  return taps;
}

template <typename TA>
AccumTensor linear_kernel(std::span<const TA> a, const Shape& ad, std::span<const std::int8_t> w,
                          const Shape& wd, const LinearOp& op) {
  const Shape out_dims = output_shape(op, ad, wd);
  if (reduction_length(op, ad, wd) > kMaxReduction)
    throw Error(ErrorCode::Overflow, "reduction length " +
                                         std::to_string(reduction_length(op, ad, wd)) +
                                         " could overflow 32-bit accumulation");
  std::vector<std::int64_t> acc(element_count(out_dims), 0);

  switch (op.kind) {
    case LinearKind::Matmul: {
      const std::size_t n = ad[0], k = ad[1], m = wd[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          std::int64_t s = 0;
          for (std::size_t r = 0; r < k; ++r) s += std::int64_t{a[i * k + r]} * w[r * m + j];
          acc[i * m + j] = s;
        }
      break;
    }
    case LinearKind::Conv2d: {
      const auto g = conv_geometry(op, ad, wd);
      for (std::size_t oy = 0; oy < g.ho; ++oy)
        for (std::size_t ox = 0; ox < g.wo; ++ox)
          for (std::size_t co = 0; co < g.cout; ++co) {
            std::int64_t s = 0;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                const std::size_t abase =
                    (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
                const std::size_t wbase = (ky * g.kw + kx) * g.cin * g.cout + co;
                for (std::size_t c = 0; c < g.cin; ++c)
                  s += std::int64_t{a[abase + c]} * w[wbase + c * g.cout];
              }
            }
            acc[(oy * g.wo + ox) * g.cout + co] = s;
          }
      break;
    }
    case LinearKind::AttnScore: {
      const auto g = attn_geometry(op, ad, wd);
      const std::size_t width = g.heads * g.dh;
      for (std::size_t h = 0; h < g.heads; ++h)
        for (std::size_t i = 0; i < g.n; ++i)
          for (std::size_t j = 0; j < g.nk; ++j) {
            std::int64_t s = 0;
            for (std::size_t d = 0; d < g.dh; ++d)
              s += std::int64_t{a[i * width + h * g.dh + d]} * w[j * width + h * g.dh + d];
            acc[(h * g.n + i) * g.nk + j] = s;
          }
      break;
    }
    case LinearKind::AttnContext: {
      const auto g = attn_geometry(op, ad, wd);
      const std::size_t width = g.heads * g.dh;
      for (std::size_t h = 0; h < g.heads; ++h)
        for (std::size_t i = 0; i < g.n; ++i)
          for (std::size_t d = 0; d < g.dh; ++d) {
            std::int64_t s = 0;
            for (std::size_t j = 0; j < g.nk; ++j)
              s += std::int64_t{a[(h * g.n + i) * g.nk + j]} * w[j * width + h * g.dh + d];
            acc[i * width + h * g.dh + d] = s;
          }
      break;
    }
  }

  AccumTensor out{out_dims, std::vector<std::int32_t>(acc.size())};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (acc[i] > std::numeric_limits<std::int32_t>::max() ||
        acc[i] < std::numeric_limits<std::int32_t>::min())
      throw Error(ErrorCode::Overflow, "accumulator overflow at output index " + std::to_string(i));
    out.values[i] = static_cast<std::int32_t>(acc[i]);
  }
  return out;
}

}  // namespace

QuantScale::QuantScale(double value) : value_(value) {
  if (!std::isfinite(value) || value <= 0.0)
    throw Error(ErrorCode::InvalidArgument,
                "quantization scale must be positive and finite, got " + std::to_string(value));
}

QuantTensor::QuantTensor(Shape dims, std::vector<std::int8_t> values, QuantScale scale)
    : dims_(std::move(dims)), values_(std::move(values)), scale_(scale) {
  if (element_count(dims_) != values_.size())
    throw Error(ErrorCode::ShapeMismatch, "quantized tensor dims " + shape_string(dims_) +
                                              " do not match " + std::to_string(values_.size()) +
                                              " values");
  for (std::size_t i = 0; i < values_.size(); ++i)
    if (values_[i] < -kQuantMax)
      throw Error(ErrorCode::InvalidArgument,
                  "quantized value -128 at index " + std::to_string(i) + " outside [-127, 127]");
}

LinearOp LinearOp::conv2d(int kh, int kw, int stride, int padding) {
  return {LinearKind::Conv2d, kh, kw, stride, padding, 1};
}

LinearOp LinearOp::attn_score(int heads) { return {LinearKind::AttnScore, 1, 1, 1, 0, heads}; }

LinearOp LinearOp::attn_context(int heads) {
  return {LinearKind::AttnContext, 1, 1, 1, 0, heads};
}

const char* to_string(LinearKind kind) {
  switch (kind) {
    case LinearKind::Matmul: return "matmul";
    case LinearKind::Conv2d: return "conv2d";
    case LinearKind::AttnScore: return "attn_score";
    case LinearKind::AttnContext: return "attn_context";
  }
  return "unknown";
}

Shape output_shape(const LinearOp& op, const Shape& a, const Shape& w) {
  switch (op.kind) {
    case LinearKind::Matmul:
      if (a.size() != 2 || w.size() != 2) shape_error(op, a, w, "expected rank-2 operands");
      if (a[1] != w[0]) shape_error(op, a, w, "inner dimensions differ");
      return {a[0], w[1]};
    case LinearKind::Conv2d: {
      const auto g = conv_geometry(op, a, w);
      return {g.ho, g.wo, g.cout};
    }
    case LinearKind::AttnScore: {
      const auto g = attn_geometry(op, a, w);
      return {g.heads, g.n, g.nk};
    }
    case LinearKind::AttnContext: {
      const auto g = attn_geometry(op, a, w);
      return {g.n, g.heads * g.dh};
    }
  }
  shape_error(op, a, w, "unknown kind");
}

std::size_t reduction_length(const LinearOp& op, const Shape& a, const Shape& w) {
  output_shape(op, a, w);
  switch (op.kind) {
    case LinearKind::Matmul: return a[1];
    case LinearKind::Conv2d: return w[0] * w[1] * w[2];
    case LinearKind::AttnScore: return attn_geometry(op, a, w).dh;
    case LinearKind::AttnContext: return attn_geometry(op, a, w).nk;
  }
  return 0;
}

std::uint64_t total_macs(const LinearOp& op, const Shape& a, const Shape& w) {
  const Shape out = output_shape(op, a, w);
  if (op.kind == LinearKind::AttnScore) {
    const auto g = attn_geometry(op, a, w);
    return std::uint64_t{g.heads} * g.n * g.nk * g.dh;
  }
  return std::uint64_t{element_count(out)} * reduction_length(op, a, w);
}

std::vector<std::uint32_t> macs_per_a_element(const LinearOp& op, const Shape& a, const Shape& w) {
  output_shape(op, a, w);
  switch (op.kind) {
    case LinearKind::Matmul:
      return std::vector<std::uint32_t>(element_count(a), static_cast<std::uint32_t>(w[1]));
    case LinearKind::Conv2d: {
      const auto g = conv_geometry(op, a, w);
      const auto ty = taps_per_index(g.h, g.ho, g.kh, g.stride, g.pad);
      const auto tx = taps_per_index(g.w, g.wo, g.kw, g.stride, g.pad);
      std::vector<std::uint32_t> macs(element_count(a));
      for (std::size_t y = 0; y < g.h; ++y)
        for (std::size_t x = 0; x < g.w; ++x)
          for (std::size_t c = 0; c < g.cin; ++c)
            macs[(y * g.w + x) * g.cin + c] = ty[y] * tx[x] * static_cast<std::uint32_t>(g.cout);
      return macs;
    }
    case LinearKind::AttnScore:
      return std::vector<std::uint32_t>(element_count(a),
                                        static_cast<std::uint32_t>(attn_geometry(op, a, w).nk));
    case LinearKind::AttnContext:
      return std::vector<std::uint32_t>(element_count(a),
                                        static_cast<std::uint32_t>(attn_geometry(op, a, w).dh));
  }
  return {};
}

std::vector<std::uint32_t> macs_per_w_element(const LinearOp& op, const Shape& a, const Shape& w) {
  output_shape(op, a, w);
  if (!op.is_attention())
    throw Error(ErrorCode::InvalidArgument,
                std::string(to_string(op.kind)) + " has a static second operand");
  return std::vector<std::uint32_t>(element_count(w),
                                    static_cast<std::uint32_t>(attn_geometry(op, a, w).n));
}

QuantScale calibrate_scale(std::span<const float> samples) {
  if (samples.empty()) throw Error(ErrorCode::InvalidArgument, "calibration needs samples");
  double absmax = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i]))
      throw Error(ErrorCode::NonFinite,
                  "calibration sample " + std::to_string(i) + " is not finite");
    absmax = std::max(absmax, std::abs(static_cast<double>(samples[i])));
  }
  return QuantScale(absmax == 0.0 ? 1.0 : absmax / kQuantMax);
}

QuantTensor quantize_values(const Shape& dims, std::span<const float> x, QuantScale scale) {
  std::vector<std::int8_t> q(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]))
      throw Error(ErrorCode::NonFinite, "cannot quantize non-finite element at index " +
                                            std::to_string(i));
    // std::round rounds half away from zero.
    const double r = std::round(static_cast<double>(x[i]) / scale.value());
    q[i] = static_cast<std::int8_t>(std::clamp(r, double{-kQuantMax}, double{kQuantMax}));
  }
  return QuantTensor(dims, std::move(q), scale);
}

QuantTensor quantize(const Tensor& x, QuantScale scale) {
  return quantize_values(x.dims, x.values, scale);
}

Tensor dequantize(const QuantTensor& q) {
  std::vector<float> x(q.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    x[i] = static_cast<float>(q[i] * q.scale().value());
  return Tensor(q.dims(), std::move(x));
}

AccumTensor direct_linear(const QuantTensor& a, const QuantTensor& w, const LinearOp& op) {
  return linear_kernel<std::int8_t>(a.values(), a.dims(), w.values(), w.dims(), op);
}

AccumTensor direct_linear_wide(const WideTensor& a, const QuantTensor& w, const LinearOp& op) {
  if (element_count(a.dims) != a.values.size())
    throw Error(ErrorCode::ShapeMismatch, "wide operand dims do not match value count");
  for (std::size_t i = 0; i < a.values.size(); ++i)
    if (a.values[i] > 255 || a.values[i] < -255)
      throw Error(ErrorCode::InvalidArgument,
                  "wide operand value at index " + std::to_string(i) + " exceeds 9 bits");
  return linear_kernel<std::int16_t>(std::span<const std::int16_t>(a.values), a.dims,
                                     w.values(), w.dims(), op);
}

std::vector<std::int8_t> im2col(const QuantTensor& a, const LinearOp& op, std::size_t& rows,
                                std::size_t& cols) {
  if (op.kind != LinearKind::Conv2d)
    throw Error(ErrorCode::InvalidArgument, "im2col requires a conv2d descriptor");
  const Shape& ad = a.dims();
  if (ad.size() != 3) throw Error(ErrorCode::ShapeMismatch, "im2col expects [H,W,Cin]");
  const Shape wd{static_cast<std::size_t>(op.kernel_h), static_cast<std::size_t>(op.kernel_w),
                 ad[2], 1};
  const auto g = conv_geometry(op, ad, wd);
  rows = g.ho * g.wo;
  cols = g.kh * g.kw * g.cin;
  std::vector<std::int8_t> m(rows * cols, 0);
  for (std::size_t oy = 0; oy < g.ho; ++oy)
    for (std::size_t ox = 0; ox < g.wo; ++ox)
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
          if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
          for (std::size_t c = 0; c < g.cin; ++c)
            m[(oy * g.wo + ox) * cols + (ky * g.kw + kx) * g.cin + c] =
                a[(static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin + c];
        }
      }
  return m;
}

}  // namespace ditto
