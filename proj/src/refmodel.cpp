#include "ditto/refmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "ditto/error.hpp"
#include "ditto/report_io.hpp"

namespace ditto {

std::uint64_t SplitMix64::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double SplitMix64::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

const char* to_string(ModelKind k) { return k == ModelKind::ToyUnet ? "toy-unet" : "toy-dit"; }

std::optional<ModelKind> model_kind_from_string(const std::string& name) {
  if (name == "toy-unet") return ModelKind::ToyUnet;
  if (name == "toy-dit") return ModelKind::ToyDit;
  return std::nullopt;
}

ModelSpec ModelSpec::toy_unet() { return ModelSpec{}; }

ModelSpec ModelSpec::toy_dit() {
  ModelSpec s;
  s.kind = ModelKind::ToyDit;
  s.channels = 32;
  s.heads = 2;
  s.spatial = 16;
  s.in_channels = 8;
  return s;
}

void ModelSpec::validate() const {
  for (int v : {channels, depth, heads, spatial, in_channels, frames, context_tokens})
    if (v < 1) throw Error(ErrorCode::InvalidArgument, "model dimensions must be >= 1");
  if (channels % heads != 0)
    throw Error(ErrorCode::InvalidArgument, "channels must be divisible by heads");
  if (kind == ModelKind::ToyUnet && spatial < 2)
    throw Error(ErrorCode::InvalidArgument, "toy-unet needs spatial size >= 2");
  // Rough bound before allocating anything; build_model checks the exact count.
  const std::uint64_t c = static_cast<std::uint64_t>(channels);
  const std::uint64_t est = static_cast<std::uint64_t>(depth) * 40 * c * c;
  if (est > 16 * kMaxParameters)
    throw Error(ErrorCode::Capacity, "model exceeds the desk-scale parameter bound");
}

namespace {

class Builder {
 public:
  Builder(std::uint64_t seed) : seed_(seed) {}

  NodeId input(Shape dims) { return add(NodeKind::Input, "x", std::move(dims), {}, {}); }

  NodeId constant(const std::string& name, Shape dims) {
    LayerNode n = make(NodeKind::Const, name, dims, {}, {});
    SplitMix64 rng(seed_ ^ (0xC0FFEEULL + graph_.size()));
    n.weights.resize(element_count(dims));
    for (auto& w : n.weights) w = static_cast<float>(rng.normal());
    return graph_.add(std::move(n));
  }

  NodeId conv(const std::string& name, NodeId in, int k, int cout) {
    const Shape& src = graph_.node(in).dims;
    const int pad = k / 2;
    const std::size_t cin = src[2];
    LayerNode n = make(NodeKind::Conv, name, {src[0], src[1], static_cast<std::size_t>(cout)}, {in},
                       {k, k, 1, pad});
    fill(n, static_cast<std::size_t>(k * k) * cin * static_cast<std::size_t>(cout),
         static_cast<std::size_t>(k * k) * cin);
    return graph_.add(std::move(n));
  }

  NodeId fc(const std::string& name, NodeId in, int out, Shape dims = {}) {
    const Shape& src = graph_.node(in).dims;
    const std::size_t k = src.back();
    if (dims.empty()) {
      dims = src;
      dims.back() = static_cast<std::size_t>(out);
    }
    LayerNode n = make(NodeKind::FC, name, dims, {in}, {});
    fill(n, k * static_cast<std::size_t>(out), k);
    return graph_.add(std::move(n));
  }

  NodeId unary(NodeKind kind, const std::string& name, NodeId in, std::vector<std::int32_t> attrs = {}) {
    return add(kind, name, graph_.node(in).dims, {in}, std::move(attrs));
  }

  NodeId add_node(const std::string& name, NodeId a, NodeId b) {
    return add(NodeKind::Add, name, graph_.node(a).dims, {a, b}, {});
  }

  NodeId concat(const std::string& name, NodeId a, NodeId b) {
    Shape dims = graph_.node(a).dims;
    dims.back() += graph_.node(b).dims.back();
    return add(NodeKind::Concat, name, dims, {a, b}, {});
  }

  NodeId score(const std::string& name, NodeId q, NodeId k, int heads) {
    const std::size_t n = graph_.node(q).dims[0];
    const std::size_t nk = graph_.node(k).dims[0];
    return add(NodeKind::AttnScore, name, {static_cast<std::size_t>(heads), n, nk}, {q, k},
               {heads});
  }

  NodeId context(const std::string& name, NodeId p, NodeId v, int heads) {
    const std::size_t n = graph_.node(p).dims[1];
    return add(NodeKind::AttnContext, name, {n, graph_.node(v).dims.back()}, {p, v}, {heads});
  }

  const LayerGraph& graph() const { return graph_; }

 private:
  LayerNode make(NodeKind kind, const std::string& name, Shape dims, std::vector<NodeId> in,
                 std::vector<std::int32_t> attrs) {
    LayerNode n;
    n.kind = kind;
    n.name = name;
    n.dims = std::move(dims);
    n.inputs = std::move(in);
    n.attrs = std::move(attrs);
    return n;
  }

  NodeId add(NodeKind kind, const std::string& name, Shape dims, std::vector<NodeId> in,
             std::vector<std::int32_t> attrs) {
    return graph_.add(make(kind, name, std::move(dims), std::move(in), std::move(attrs)));
  }

  void fill(LayerNode& n, std::size_t count, std::size_t fan_in) {
    SplitMix64 rng(seed_ * 0x9E3779B97F4A7C15ULL + graph_.size() + 1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    n.weights.resize(count);
    for (auto& w : n.weights) w = static_cast<float>((rng.uniform() - 0.5) * bound);
  }

  std::uint64_t seed_;
  LayerGraph graph_;
};

int groups_for(int channels) {
  for (int g : {4, 2, 1})
    if (channels % g == 0) return g;
  return 1;
}

LayerGraph build_unet(const ModelSpec& s) {
  Builder b(s.weight_seed);
  const int c = s.channels;
  const auto hw = static_cast<std::size_t>(s.spatial);
  const NodeId x = b.input({hw, hw, static_cast<std::size_t>(s.in_channels)});
  NodeId h = b.conv("conv_in", x, 3, c);
  std::vector<NodeId> skips;
  for (int i = 0; i < s.depth; ++i) {
    const std::string p = "down" + std::to_string(i) + ".";
    NodeId t = b.unary(NodeKind::GroupNorm, p + "gn1", h, {groups_for(c)});
    t = b.unary(NodeKind::SiLU, p + "silu1", t);
    t = b.conv(p + "conv1", t, 3, c);
    t = b.unary(NodeKind::GroupNorm, p + "gn2", t, {groups_for(c)});
    t = b.unary(NodeKind::SiLU, p + "silu2", t);
    t = b.conv(p + "conv2", t, 3, c);
    h = b.add_node(p + "add", t, h);
    skips.push_back(h);
  }
  {
    NodeId t = b.unary(NodeKind::GroupNorm, "mid.gn", h, {groups_for(c)});
    // Flattened token view [H*W, C] for the attention products.
    const Shape tokens{hw * hw, static_cast<std::size_t>(c)};
    const NodeId q = b.fc("mid.q", t, c, tokens);
    const NodeId k = b.fc("mid.k", t, c, tokens);
    const NodeId v = b.fc("mid.v", t, c, tokens);
    const NodeId sc = b.score("mid.score", q, k, s.heads);
    const NodeId p = b.unary(NodeKind::Softmax, "mid.softmax", sc, {c / s.heads});
    const NodeId ctx = b.context("mid.context", p, v, s.heads);
    const NodeId o = b.fc("mid.proj", ctx, c, {hw, hw, static_cast<std::size_t>(c)});
    h = b.add_node("mid.add", o, h);
  }
  for (int i = 0; i < s.depth; ++i) {
    const std::string p = "up" + std::to_string(i) + ".";
    const NodeId cat = b.concat(p + "concat", h, skips[skips.size() - 1 - static_cast<std::size_t>(i)]);
    NodeId t = b.unary(NodeKind::GroupNorm, p + "gn1", cat, {groups_for(2 * c)});
    t = b.unary(NodeKind::SiLU, p + "silu1", t);
    t = b.conv(p + "conv1", t, 3, c);
    t = b.unary(NodeKind::GroupNorm, p + "gn2", t, {groups_for(c)});
    t = b.unary(NodeKind::SiLU, p + "silu2", t);
    t = b.conv(p + "conv2", t, 3, c);
    const NodeId sk = b.conv(p + "skip", cat, 1, c);
    h = b.add_node(p + "add", t, sk);
  }
  NodeId t = b.unary(NodeKind::GroupNorm, "out.gn", h, {groups_for(c)});
  t = b.unary(NodeKind::SiLU, "out.silu", t);
  b.conv("conv_out", t, 3, s.in_channels);
  return b.graph();
}

LayerGraph build_dit(const ModelSpec& s) {
  Builder b(s.weight_seed);
  const int w = s.channels;
  const auto tokens = static_cast<std::size_t>(s.spatial * s.frames);
  const NodeId x = b.input({tokens, static_cast<std::size_t>(s.in_channels)});
  const NodeId ctx = b.constant("context", {static_cast<std::size_t>(s.context_tokens),
                                            static_cast<std::size_t>(w)});
  NodeId h = b.fc("patch", x, w);
  const int head_dim = w / s.heads;
  for (int i = 0; i < s.depth; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    {
      const NodeId t = b.unary(NodeKind::LayerNorm, p + "ln1", h);
      const NodeId q = b.fc(p + "attn.q", t, w);
      const NodeId k = b.fc(p + "attn.k", t, w);
      const NodeId v = b.fc(p + "attn.v", t, w);
      const NodeId sc = b.score(p + "attn.score", q, k, s.heads);
      const NodeId pr = b.unary(NodeKind::Softmax, p + "attn.softmax", sc, {head_dim});
      const NodeId cx = b.context(p + "attn.context", pr, v, s.heads);
      const NodeId o = b.fc(p + "attn.proj", cx, w);
      h = b.add_node(p + "attn.add", o, h);
    }
    {
      const NodeId t = b.unary(NodeKind::LayerNorm, p + "ln2", h);
      const NodeId q = b.fc(p + "cross.q", t, w);
      const NodeId k = b.fc(p + "cross.k", ctx, w);
      const NodeId v = b.fc(p + "cross.v", ctx, w);
      const NodeId sc = b.score(p + "cross.score", q, k, s.heads);
      const NodeId pr = b.unary(NodeKind::Softmax, p + "cross.softmax", sc, {head_dim});
      const NodeId cx = b.context(p + "cross.context", pr, v, s.heads);
      const NodeId o = b.fc(p + "cross.proj", cx, w);
      h = b.add_node(p + "cross.add", o, h);
    }
    {
      const NodeId t = b.unary(NodeKind::LayerNorm, p + "ln3", h);
      NodeId m = b.fc(p + "mlp.fc1", t, 4 * w);
      m = b.unary(NodeKind::GeLU, p + "mlp.gelu", m);
      m = b.fc(p + "mlp.fc2", m, w);
      h = b.add_node(p + "mlp.add", m, h);
    }
  }
  const NodeId t = b.unary(NodeKind::LayerNorm, "final.ln", h);
  b.fc("fc_out", t, s.in_channels);
  return b.graph();
}

void check_finite(const Tensor& t, const LayerNode& n) {
  for (std::size_t i = 0; i < t.values.size(); ++i)
    if (!std::isfinite(t.values[i]))
      throw Error(ErrorCode::NonFinite, "node " + std::to_string(n.id) + " (" + n.name +
                                            ") produced a non-finite value at index " +
                                            std::to_string(i));
}

void normalize(std::vector<float>& v, const std::vector<std::size_t>& idx) {
  double mean = 0.0;
  for (auto i : idx) mean += v[i];
  mean /= static_cast<double>(idx.size());
  double var = 0.0;
  for (auto i : idx) var += (v[i] - mean) * (v[i] - mean);
  var /= static_cast<double>(idx.size());
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  for (auto i : idx) v[i] = static_cast<float>((v[i] - mean) * inv);
}

Tensor eval_node(const LayerGraph& g, const LayerNode& n, const std::vector<Tensor>& out) {
  auto in = [&](std::size_t k) -> const Tensor& { return out[n.inputs[k]]; };
  Tensor r(n.dims);
  switch (n.kind) {
    case NodeKind::Input:
    case NodeKind::Const:
      break;
    case NodeKind::Conv: {
      const Tensor& a = in(0);
      const std::size_t h = a.dims[0], w = a.dims[1], cin = a.dims[2];
      const int kh = n.attrs[0], kw = n.attrs[1], st = n.attrs[2], pad = n.attrs[3];
      const std::size_t ho = n.dims[0], wo = n.dims[1], co = n.dims[2];
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          float* dst = &r.values[(oy * wo + ox) * co];
          for (int ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy) * st + ky - pad;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox) * st + kx - pad;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const float* src = &a.values[(static_cast<std::size_t>(iy) * w +
                                            static_cast<std::size_t>(ix)) * cin];
              const float* wt = &n.weights[(static_cast<std::size_t>(ky * kw + kx) * cin) * co];
              for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t c = 0; c < co; ++c) dst[c] += src[ci] * wt[ci * co + c];
            }
          }
        }
      break;
    }
    case NodeKind::FC: {
      const Tensor& a = in(0);
      const std::size_t k = a.dims.back(), rows = a.size() / k, m = n.weights.size() / k;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const float av = a.values[i * k + j];
          for (std::size_t c = 0; c < m; ++c) r.values[i * m + c] += av * n.weights[j * m + c];
        }
      break;
    }
    case NodeKind::AttnScore: {
      const Tensor &q = in(0), &kt = in(1);
      const std::size_t heads = n.dims[0], nq = n.dims[1], nk = n.dims[2];
      const std::size_t width = q.dims.back(), dh = width / heads;
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t i = 0; i < nq; ++i)
          for (std::size_t j = 0; j < nk; ++j) {
            float s = 0.f;
            for (std::size_t d = 0; d < dh; ++d)
              s += q.values[i * width + hd * dh + d] * kt.values[j * width + hd * dh + d];
            r.values[(hd * nq + i) * nk + j] = s;
          }
      break;
    }
    case NodeKind::AttnContext: {
      const Tensor &p = in(0), &v = in(1);
      const std::size_t heads = p.dims[0], nq = p.dims[1], nk = p.dims[2];
      const std::size_t width = v.dims.back(), dh = width / heads;
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t i = 0; i < nq; ++i)
          for (std::size_t j = 0; j < nk; ++j) {
            const float pv = p.values[(hd * nq + i) * nk + j];
            for (std::size_t d = 0; d < dh; ++d)
              r.values[i * width + hd * dh + d] += pv * v.values[j * width + hd * dh + d];
          }
      break;
    }
    case NodeKind::Add:
      for (std::size_t k = 0; k < n.inputs.size(); ++k)
        for (std::size_t i = 0; i < r.size(); ++i) r.values[i] += in(k).values[i];
      break;
    case NodeKind::Concat: {
      const std::size_t rows = r.size() / n.dims.back();
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t w = in(k).dims.back();
        for (std::size_t i = 0; i < rows; ++i)
          std::copy_n(&in(k).values[i * w], w, &r.values[i * n.dims.back() + off]);
        off += w;
      }
      break;
    }
    case NodeKind::Split: {
      const std::size_t w = in(0).dims.back(), len = n.dims.back();
      const std::size_t rows = r.size() / len;
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(&in(0).values[i * w + static_cast<std::size_t>(n.attrs[0])], len,
                    &r.values[i * len]);
      break;
    }
    case NodeKind::SiLU:
      for (std::size_t i = 0; i < r.size(); ++i) {
        const float v = in(0).values[i];
        r.values[i] = v / (1.0f + std::exp(-v));
      }
      break;
    case NodeKind::GeLU:
      for (std::size_t i = 0; i < r.size(); ++i) {
        const float v = in(0).values[i];
        r.values[i] = 0.5f * v * (1.0f + std::erf(v / std::numbers::sqrt2_v<float>));
      }
      break;
    case NodeKind::Softmax: {
      r.values = in(0).values;
      const std::size_t len = n.dims.back(), rows = r.size() / len;
      const float scale =
          n.attrs.empty() ? 1.f : 1.f / std::sqrt(static_cast<float>(n.attrs[0]));
      for (std::size_t i = 0; i < rows; ++i) {
        float* row = &r.values[i * len];
        float mx = row[0] * scale;
        for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, row[j] * scale);
        float sum = 0.f;
        for (std::size_t j = 0; j < len; ++j) sum += row[j] = std::exp(row[j] * scale - mx);
        for (std::size_t j = 0; j < len; ++j) row[j] /= sum;
      }
      break;
    }
    case NodeKind::GroupNorm: {
      r.values = in(0).values;
      const std::size_t ch = n.dims.back(), pos = r.size() / ch;
      const auto groups = static_cast<std::size_t>(n.attrs[0]);
      const std::size_t per = ch / groups;
      std::vector<std::size_t> idx;
      for (std::size_t gi = 0; gi < groups; ++gi) {
        idx.clear();
        for (std::size_t p = 0; p < pos; ++p)
          for (std::size_t c = gi * per; c < (gi + 1) * per; ++c) idx.push_back(p * ch + c);
        normalize(r.values, idx);
      }
      break;
    }
    case NodeKind::LayerNorm: {
      r.values = in(0).values;
      const std::size_t len = n.dims.back(), rows = r.size() / len;
      std::vector<std::size_t> idx(len);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < len; ++j) idx[j] = i * len + j;
        normalize(r.values, idx);
      }
      break;
    }
    case NodeKind::Quant:
    case NodeKind::Dequant:
      r.values = in(0).values;
      break;
  }
  (void)g;
  return r;
}

}  // namespace

LayerGraph build_model(const ModelSpec& spec) {
  spec.validate();
  LayerGraph g = spec.kind == ModelKind::ToyUnet ? build_unet(spec) : build_dit(spec);
  if (g.parameter_count() > kMaxParameters)
    throw Error(ErrorCode::Capacity, "model has " + std::to_string(g.parameter_count()) +
                                         " parameters; desk-scale limit is 2^20");
  g.validate();
  return g;
}

std::vector<Tensor> forward(const LayerGraph& g, const Tensor& x) {
  std::vector<Tensor> out(g.size());
  bool seen_input = false;
  for (NodeId id : g.topo_order()) {
    const LayerNode& n = g.node(id);
    if (n.kind == NodeKind::Input) {
      if (x.dims != n.dims)
        throw Error(ErrorCode::ShapeMismatch, "model input must be " + shape_string(n.dims) +
                                                  ", got " + shape_string(x.dims));
      out[id] = x;
      seen_input = true;
    } else if (n.kind == NodeKind::Const) {
      out[id] = Tensor(n.dims, n.weights);
    } else {
      out[id] = eval_node(g, n, out);
    }
    check_finite(out[id], n);
  }
  if (!seen_input) throw Error(ErrorCode::InvalidArgument, "graph has no input node");
  return out;
}

Tensor evaluate_node(const LayerGraph& g, NodeId id, const std::vector<Tensor>& outputs) {
  const LayerNode& n = g.node(id);
  if (is_source(n.kind)) throw Error(ErrorCode::InvalidArgument, "source nodes have no evaluation");
  for (NodeId p : n.inputs)
    if (p >= outputs.size() || outputs[p].values.empty())
      throw Error(ErrorCode::MissingPrevious, "operand of node " + std::to_string(id) + " missing");
  Tensor r = eval_node(g, n, outputs);
  check_finite(r, n);
  return r;
}

std::vector<double> linear_alphas(int steps, double first, double last) {
  if (steps < 1) throw Error(ErrorCode::InvalidArgument, "steps must be >= 1");
  std::vector<double> a(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t)
    a[static_cast<std::size_t>(t)] =
        steps == 1 ? first : first + (last - first) * t / static_cast<double>(steps - 1);
  return a;
}

SamplerConfig SamplerConfig::make(int steps, std::uint64_t seed) {
  SamplerConfig c;
  c.steps = steps;
  c.seed = seed;
  if (steps >= 1) c.alphas = linear_alphas(steps);
  return c;
}

void SamplerConfig::validate() const {
  if (steps < 2) throw Error(ErrorCode::InvalidArgument, "sampler needs T >= 2 steps");
  if (steps > 0xFFFF) throw Error(ErrorCode::InvalidArgument, "sampler supports at most 65535 steps");
  if (alphas.size() != static_cast<std::size_t>(steps))
    throw Error(ErrorCode::InvalidArgument, "schedule must hold one alpha per step");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0.0 && alphas[i] <= 1.0))
      throw Error(ErrorCode::InvalidArgument, "alphas must lie in (0, 1]");
    if (i > 0 && !(alphas[i] < alphas[i - 1]))
      throw Error(ErrorCode::InvalidArgument, "alphas must be strictly decreasing in t");
  }
  if (!(similarity_bound >= 0.0) || !std::isfinite(similarity_bound))
    throw Error(ErrorCode::InvalidArgument, "similarity bound must be finite and >= 0");
}

const Tensor& Trace::output(int step, NodeId node) const {
  if (step < 1 || step > step_count())
    throw Error(ErrorCode::InvalidArgument, "trace has no step " + std::to_string(step));
  return steps[static_cast<std::size_t>(step - 1)].at(node);
}

const Tensor& Trace::operand(int step, NodeId node, std::size_t index) const {
  return output(step, graph.node(node).inputs.at(index));
}

Trace run_sampler(const LayerGraph& g, const SamplerConfig& cfg) {
  cfg.validate();
  g.validate();
  NodeId input = 0;
  for (const auto& n : g.nodes())
    if (n.kind == NodeKind::Input) input = n.id;
  const auto sinks = g.sinks();
  if (sinks.size() != 1) throw Error(ErrorCode::InvalidArgument, "model must have one output");
  const Shape& xd = g.node(input).dims;
  if (element_count(g.node(sinks[0]).dims) != element_count(xd))
    throw Error(ErrorCode::ShapeMismatch, "model output must match its input size");

  SplitMix64 rng(cfg.seed);
  Tensor x(xd);
  for (auto& v : x.values) v = static_cast<float>(rng.normal());

  Trace trace;
  trace.graph = g;
  const int T = cfg.steps;
  for (int e = 1; e <= T; ++e) {
    const int t = T - e + 1;
    std::vector<Tensor> outs;
    try {
      outs = forward(g, x);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::NonFinite) throw;
      throw Error(ErrorCode::NonFinite, "step " + std::to_string(e) + ": " + err.what());
    }
    std::vector<float> eps = outs[sinks[0]].values;
    if (cfg.zero_output_step == -1 || cfg.zero_output_step == e) std::fill(eps.begin(), eps.end(), 0.f);
    trace.steps.push_back(std::move(outs));
    if (e == T) break;

    Tensor next(xd);
    if (cfg.collapse_step > 0 && e + 1 >= cfg.collapse_step) {
      for (auto& v : next.values) v = static_cast<float>(rng.normal());
    } else {
      const double a_t = cfg.alphas[static_cast<std::size_t>(t - 1)];
      const double a_prev = cfg.alphas[static_cast<std::size_t>(t - 2)];
      double dn = 0.0, xn = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = (x.values[i] - std::sqrt(1.0 - a_t) * eps[i]) / std::sqrt(a_t);
        const double v = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps[i];
        next.values[i] = static_cast<float>(v);
        dn += (v - x.values[i]) * (v - x.values[i]);
        xn += static_cast<double>(x.values[i]) * x.values[i];
      }
      if (cfg.similarity_bound > 0.0 && dn > 0.0) {
        const double limit = cfg.similarity_bound * std::sqrt(xn);
        const double norm = std::sqrt(dn);
        if (norm > limit) {
          const double f = limit / norm;
          for (std::size_t i = 0; i < x.size(); ++i)
            next.values[i] = static_cast<float>(x.values[i] + (next.values[i] - x.values[i]) * f);
        }
      }
    }
    for (std::size_t i = 0; i < next.size(); ++i)
      if (!std::isfinite(next.values[i]))
        throw Error(ErrorCode::NonFinite,
                    "sampler update at step " + std::to_string(e) + " is not finite");
    x = std::move(next);
  }
  return trace;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "trace I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_floats(const std::vector<float>& v) {
    for (float f : v) put(std::bit_cast<std::uint32_t>(f));
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::vector<float> get_floats(std::uint64_t byte_len) {
    if (byte_len % 4 != 0) throw Error(ErrorCode::Format, "payload length is not a multiple of 4");
    need(byte_len);
    std::vector<float> v(byte_len / 4);
    for (auto& f : v) f = std::bit_cast<float>(get<std::uint32_t>());
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > b_.size() - pos_) throw Error(ErrorCode::Format, "trace file is truncated");
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

constexpr std::uint64_t kMaxTensorElements = std::uint64_t{1} << 28;

Shape checked_dims(const std::vector<std::uint32_t>& raw) {
  Shape dims;
  std::uint64_t count = 1;
  for (auto d : raw) {
    if (d == 0) throw Error(ErrorCode::Format, "zero-length dimension");
    count *= d;
    if (count > kMaxTensorElements) throw Error(ErrorCode::Overflow, "tensor dimensions overflow");
    dims.push_back(d);
  }
  return dims;
}

}  // namespace

std::vector<std::uint8_t> serialize_trace(const Trace& trace) {
  Writer w;
  for (char c : kTraceMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kTraceVersion);
  const auto& nodes = trace.graph.nodes();
  w.put(static_cast<std::uint32_t>(nodes.size()));
  for (const auto& n : nodes) {
    w.put(static_cast<std::uint32_t>(n.id));
    w.put(static_cast<std::uint8_t>(n.kind));
    for (std::size_t i = 0; i < 4; ++i)
      w.put(static_cast<std::uint32_t>(i < n.dims.size() ? n.dims[i] : 0));
    w.put(static_cast<std::uint64_t>(n.weights.size() * 4));
    w.put_floats(n.weights);
  }
  // Topology section: inputs, attributes and names for each node.
  for (const auto& n : nodes) {
    w.put(static_cast<std::uint8_t>(n.inputs.size()));
    for (NodeId p : n.inputs) w.put(static_cast<std::uint32_t>(p));
    w.put(static_cast<std::uint8_t>(n.attrs.size()));
    for (auto a : n.attrs) w.put(a);
    w.put(static_cast<std::uint16_t>(n.name.size()));
    for (char c : n.name) w.put(static_cast<std::uint8_t>(c));
  }
  std::uint64_t records = 0;
  for (const auto& step : trace.steps) records += step.size();
  w.put(records);
  for (std::size_t s = 0; s < trace.steps.size(); ++s)
    for (std::size_t id = 0; id < trace.steps[s].size(); ++id) {
      const Tensor& t = trace.steps[s][id];
      w.put(static_cast<std::uint16_t>(s + 1));
      w.put(static_cast<std::uint32_t>(id));
      w.put(static_cast<std::uint8_t>(t.dims.size()));
      for (auto d : t.dims) w.put(static_cast<std::uint32_t>(d));
      w.put(static_cast<std::uint64_t>(t.values.size() * 4));
      w.put_floats(t.values);
    }
  return std::move(w.bytes);
}

Trace deserialize_trace(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTraceMagic, 4) != 0)
    throw Error(ErrorCode::Format, "not a trace file (bad magic)");
  for (int i = 0; i < 4; ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kTraceVersion)
    throw Error(ErrorCode::Format, "unsupported trace version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  if (count > kMaxNodes) throw Error(ErrorCode::Capacity, "trace graph has too many nodes");
  std::vector<LayerNode> nodes(count);
  for (auto& n : nodes) {
    n.id = r.get<std::uint32_t>();
    const auto kind = node_kind_from_code(r.get<std::uint8_t>());
    if (!kind) throw Error(ErrorCode::Format, "unknown node kind");
    n.kind = *kind;
    std::vector<std::uint32_t> raw;
    for (int i = 0; i < 4; ++i) {
      const auto d = r.get<std::uint32_t>();
      if (d != 0) raw.push_back(d);
    }
    n.dims = checked_dims(raw);
    const auto len = r.get<std::uint64_t>();
    if (len / 4 > kMaxTensorElements) throw Error(ErrorCode::Overflow, "weight blob too large");
    n.weights = r.get_floats(len);
  }
  for (auto& n : nodes) {
    const auto ni = r.get<std::uint8_t>();
    for (int i = 0; i < ni; ++i) n.inputs.push_back(r.get<std::uint32_t>());
    const auto na = r.get<std::uint8_t>();
    for (int i = 0; i < na; ++i) n.attrs.push_back(r.get<std::int32_t>());
    n.name = r.get_string(r.get<std::uint16_t>());
  }
  Trace trace;
  for (auto& n : nodes) {
    const NodeId expected = static_cast<NodeId>(trace.graph.size());
    if (n.id != expected) throw Error(ErrorCode::Format, "node ids are not sequential");
    trace.graph.add(std::move(n));
  }
  try {
    trace.graph.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Format, std::string("invalid graph in trace: ") + e.what());
  }

  const auto records = r.get<std::uint64_t>();
  if (count == 0 || records % count != 0)
    throw Error(ErrorCode::Format, "record count does not cover every node");
  const std::uint64_t steps = records / count;
  if (steps > 0xFFFF) throw Error(ErrorCode::Overflow, "too many steps");
  trace.steps.assign(steps, std::vector<Tensor>(count));
  std::vector<bool> seen(records, false);
  for (std::uint64_t i = 0; i < records; ++i) {
    const auto step = r.get<std::uint16_t>();
    const auto node = r.get<std::uint32_t>();
    const auto rank = r.get<std::uint8_t>();
    if (rank > 8) throw Error(ErrorCode::Format, "tensor rank too large");
    std::vector<std::uint32_t> raw;
    for (int k = 0; k < rank; ++k) raw.push_back(r.get<std::uint32_t>());
    const Shape dims = checked_dims(raw);
    const auto len = r.get<std::uint64_t>();
    if (len != element_count(dims) * 4)
      throw Error(ErrorCode::Format, "payload length disagrees with dims");
    if (step < 1 || step > steps || node >= count)
      throw Error(ErrorCode::Format, "record outside the trace grid");
    const std::size_t slot = (step - 1u) * count + node;
    if (seen[slot]) throw Error(ErrorCode::Format, "duplicate record");
    seen[slot] = true;
    trace.steps[step - 1u][node] = Tensor(dims, r.get_floats(len));
  }
  if (!r.done()) throw Error(ErrorCode::Format, "trailing bytes after trace records");
  return trace;
}

void export_trace(const Trace& trace, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_trace(trace));
}

Trace import_trace(const std::filesystem::path& path) {
  return deserialize_trace(read_file(path));
}

}  // namespace ditto
