#include "ditto/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "ditto/error.hpp"
#include "ditto/hwsim.hpp"

namespace ditto {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt(std::optional<double> v) { return v ? fmt(*v) : ""; }

nlohmann::json opt_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

nlohmann::json mean_json(const MeanAccumulator& m) {
  return {{"mean", opt_json(m.mean())}, {"count", m.count}, {"undefined", m.undefined}};
}

std::optional<double> mean_of_rows(std::span<const float> v, std::size_t width, std::uint64_t& zeros) {
  if (width == 0 || v.size() < 2 * width) return std::nullopt;
  MeanAccumulator m;
  for (std::size_t r = 0; r + 1 < v.size() / width; ++r) {
    const auto c = cosine_defined(v.subspan(r * width, width), v.subspan((r + 1) * width, width));
    if (!c) ++zeros;
    m.add(c);
  }
  return m.mean();
}

// Sliding-window vector of an [H, W, C] tensor at output position (oy, ox).
std::vector<float> window(const Tensor& x, const LinearOp& op, std::size_t oy, std::size_t ox) {
  const std::size_t H = x.dims[0], W = x.dims[1], C = x.dims[2];
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(op.kernel_h * op.kernel_w) * C);
  for (int ky = 0; ky < op.kernel_h; ++ky)
    for (int kx = 0; kx < op.kernel_w; ++kx) {
      const long y = static_cast<long>(oy) * op.stride + ky - op.padding;
      const long xx = static_cast<long>(ox) * op.stride + kx - op.padding;
      const bool inside = y >= 0 && xx >= 0 && y < static_cast<long>(H) && xx < static_cast<long>(W);
      for (std::size_t c = 0; c < C; ++c)
        out.push_back(inside ? x.values[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(xx)) * C + c]
                             : 0.f);
    }
  return out;
}

std::optional<double> mean_of_windows(const Tensor& x, const LinearOp& op, const Shape& out_dims,
                                      std::uint64_t& zeros) {
  MeanAccumulator m;
  for (std::size_t oy = 0; oy < out_dims[0]; ++oy)
    for (std::size_t ox = 0; ox + 1 < out_dims[1]; ++ox) {
      const auto c = cosine_defined(window(x, op, oy, ox), window(x, op, oy, ox + 1));
      if (!c) ++zeros;
      m.add(c);
    }
  return m.mean();
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double ratio(std::uint64_t a, std::uint64_t b) {
  return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
}

}  // namespace

std::optional<double> cosine_defined(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::ShapeMismatch, "cosine needs vectors of equal length, got " +
                                              std::to_string(a.size()) + " and " +
                                              std::to_string(b.size()));
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return std::nullopt;
  const double c = static_cast<double>(dot / (std::sqrt(na) * std::sqrt(nb)));
  return std::clamp(c, -1.0, 1.0);
}

double cosine(std::span<const float> a, std::span<const float> b) {
  return cosine_defined(a, b).value_or(0.0);
}

void MeanAccumulator::add(std::optional<double> v) {
  if (!v) {
    ++undefined;
    return;
  }
  sum += *v;
  ++count;
}

void MeanAccumulator::merge(const MeanAccumulator& o) {
  sum += o.sum;
  count += o.count;
  undefined += o.undefined;
}

std::optional<double> MeanAccumulator::mean() const {
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

namespace {

MeanAccumulator accumulate(const std::vector<std::optional<double>>& v) {
  MeanAccumulator m;
  for (const auto& x : v) m.add(x);
  return m;
}

}  // namespace

MeanAccumulator LayerSimilarity::temporal_mean() const { return accumulate(temporal); }
MeanAccumulator LayerSimilarity::spatial_row_mean() const { return accumulate(spatial_row); }
MeanAccumulator LayerSimilarity::spatial_window_mean() const { return accumulate(spatial_window); }

SimilarityReport similarity_report(const Trace& trace) {
  const LayerGraph& g = trace.graph;
  SimilarityReport rep;
  for (NodeId id : g.linear_nodes()) {
    const LayerNode& n = g.node(id);
    const LinearOp op = g.linear_op(id);
    const Shape a_dims = g.operand_dims(id, 0);
    LayerSimilarity ls;
    ls.node = id;
    ls.name = n.name;
    for (int s = 1; s <= trace.step_count(); ++s) {
      const Tensor& x = trace.operand(s, id, 0);
      if (s < trace.step_count()) {
        const auto c = cosine_defined(x.values, trace.operand(s + 1, id, 0).values);
        if (!c) ++rep.zero_vectors;
        ls.temporal.push_back(c);
      }
      ls.spatial_row.push_back(mean_of_rows(x.values, a_dims.back(), rep.zero_vectors));
      if (op.kind == LinearKind::Conv2d) {
        const Tensor xs(a_dims, x.values);
        const Shape out = output_shape(op, a_dims, g.weight_dims(id));
        ls.spatial_window.push_back(mean_of_windows(xs, op, out, rep.zero_vectors));
      }
    }
    rep.temporal.merge(ls.temporal_mean());
    rep.spatial_row.merge(ls.spatial_row_mean());
    rep.spatial_window.merge(ls.spatial_window_mean());
    rep.layers.push_back(std::move(ls));
  }
  return rep;
}

double LayerRange::mean_activation() const { return mean(activation); }

std::optional<double> LayerRange::mean_diff() const {
  if (diff.empty()) return std::nullopt;
  return mean(diff);
}

std::optional<double> LayerRange::ratio() const {
  const auto d = mean_diff();
  if (!d || *d == 0.0) return std::nullopt;
  return mean_activation() / *d;
}

double RangeReport::fraction_narrower() const {
  if (layers.empty()) return 0.0;
  const auto n = std::count_if(layers.begin(), layers.end(), [](const LayerRange& l) {
    const auto r = l.ratio();
    return r && *r > 1.0;
  });
  return static_cast<double>(n) / static_cast<double>(layers.size());
}

double value_range(std::span<const float> v) {
  if (v.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return static_cast<double>(*hi) - static_cast<double>(*lo);
}

RangeReport range_report(const QuantizedTrace& qt) {
  RangeReport rep;
  for (std::size_t l = 0; l < qt.layer_count(); ++l) {
    LayerRange lr;
    lr.node = qt.layer(l).node;
    lr.name = qt.graph().node(lr.node).name;
    std::optional<QuantTensor> prev;
    for (int s = 1; s <= qt.step_count(); ++s) {
      QuantTensor a = qt.a(s, l);
      lr.activation.push_back(value_range(dequantize(a).values));
      if (prev) {
        const WideTensor d = temporal_diff(a, *prev).dense();
        const double scale = a.scale().value();
        std::vector<float> dv(d.values.size());
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] = static_cast<float>(d.values[i] * scale);
        lr.diff.push_back(value_range(dv));
      }
      prev = std::move(a);
    }
    rep.layers.push_back(std::move(lr));
  }
  return rep;
}

void BucketCounts::add_value(int v) {
  const int bits = bit_requirement(v);
  ++n[bits == 0 ? 0 : bits <= 4 ? 1 : 2];
}

void BucketCounts::add(const BucketCounts& o) {
  for (std::size_t i = 0; i < n.size(); ++i) n[i] += o.n[i];
}

double BucketCounts::fraction(std::size_t bucket) const {
  return total() ? static_cast<double>(n.at(bucket)) / static_cast<double>(total()) : 0.0;
}

BucketCounts bucket_counts(const ClassifiedDiff& diff) {
  BucketCounts b;
  const DiffCounts& c = diff.counts();
  b.n = {c.zero, c.low, c.full};
  return b;
}

BucketCounts bucket_counts(const QuantTensor& activations) {
  BucketCounts b;
  for (std::int8_t v : activations.values()) b.add_value(v);
  return b;
}

BucketCounts bucket_counts(const SpatialDiff& sd) {
  BucketCounts b;
  for (std::int16_t v : sd.row_deltas().values) b.add_value(v);
  return b;
}

BitwidthHistogram bitwidth_histogram(const QuantizedTrace& qt) {
  BitwidthHistogram h;
  for (std::size_t l = 0; l < qt.layer_count(); ++l) {
    const LinearOp& op = qt.layer(l).op;
    std::optional<QuantTensor> prev;
    for (int s = 1; s <= qt.step_count(); ++s) {
      QuantTensor a = qt.a(s, l);
      h.activations.add(bucket_counts(a));
      h.spatial.add(bucket_counts(spatial_diff(a, op)));
      if (prev) h.temporal.add(bucket_counts(temporal_diff(a, *prev)));
      prev = std::move(a);
    }
  }
  return h;
}

double RelativeBops::spatial_ratio() const { return ratio(spatial, direct); }
double RelativeBops::temporal_ratio() const { return ratio(temporal, direct); }

RelativeBops relative_bops(const QuantizedTrace& qt) {
  const Workload w(qt);
  RelativeBops rb;
  for (int s = 1; s <= w.step_count(); ++s) {
    StepBops sb;
    sb.step = s;
    std::uint64_t temporal = 0;
    for (std::size_t l = 0; l < w.layer_count(); ++l) {
      const LayerWork& lw = w.at(s, l);
      sb.direct += bops(macs_for(lw, ExecMode::Direct));
      sb.spatial += bops(macs_for(lw, ExecMode::SpatialDiff));
      if (s > 1) temporal += bops(macs_for(lw, ExecMode::TemporalDiff));
    }
    if (s > 1) {
      sb.temporal = temporal;
      rb.direct += sb.direct;
      rb.spatial += sb.spatial;
      rb.temporal += temporal;
    }
    rb.steps.push_back(sb);
  }
  return rb;
}

namespace {

void csv_header(std::ostringstream& os, const std::string& digest) {
  if (!digest.empty()) os << "# config_digest=" << digest << "\n";
  os << "model,layer,step,metric,value\n";
}

void csv_row(std::ostringstream& os, const std::string& model, const std::string& layer,
             const std::string& step, const std::string& metric, const std::string& value) {
  os << model << ',' << layer << ',' << step << ',' << metric << ',' << value << '\n';
}

}  // namespace

std::string MotivationReport::similarity_csv(const std::string& digest) const {
  std::ostringstream os;
  csv_header(os, digest);
  for (const auto& l : similarity.layers) {
    for (std::size_t i = 0; i < l.temporal.size(); ++i)
      csv_row(os, model, l.name, std::to_string(i + 1), "temporal_cosine", fmt(l.temporal[i]));
    for (std::size_t i = 0; i < l.spatial_row.size(); ++i)
      csv_row(os, model, l.name, std::to_string(i + 1), "spatial_row_cosine", fmt(l.spatial_row[i]));
    for (std::size_t i = 0; i < l.spatial_window.size(); ++i)
      csv_row(os, model, l.name, std::to_string(i + 1), "spatial_window_cosine",
              fmt(l.spatial_window[i]));
  }
  csv_row(os, model, "all", "all", "temporal_cosine_mean", fmt(similarity.temporal.mean()));
  csv_row(os, model, "all", "all", "spatial_row_cosine_mean", fmt(similarity.spatial_row.mean()));
  csv_row(os, model, "all", "all", "spatial_window_cosine_mean",
          fmt(similarity.spatial_window.mean()));
  return os.str();
}

std::string MotivationReport::range_csv(const std::string& digest) const {
  std::ostringstream os;
  csv_header(os, digest);
  for (const auto& l : range.layers) {
    for (std::size_t i = 0; i < l.activation.size(); ++i)
      csv_row(os, model, l.name, std::to_string(i + 1), "activation_range", fmt(l.activation[i]));
    for (std::size_t i = 0; i < l.diff.size(); ++i)
      csv_row(os, model, l.name, std::to_string(i + 2), "diff_range", fmt(l.diff[i]));
    csv_row(os, model, l.name, "all", "range_ratio", fmt(l.ratio()));
  }
  csv_row(os, model, "all", "all", "fraction_narrower", fmt(range.fraction_narrower()));
  return os.str();
}

std::string MotivationReport::histogram_csv(const std::string& digest) const {
  std::ostringstream os;
  csv_header(os, digest);
  const char* buckets[] = {"bits_0", "bits_1_4", "bits_5_8"};
  const std::pair<const char*, const BucketCounts*> series[] = {
      {"activation", &histogram.activations},
      {"temporal", &histogram.temporal},
      {"spatial", &histogram.spatial}};
  for (const auto& [name, b] : series)
    for (std::size_t i = 0; i < 3; ++i)
      csv_row(os, model, "all", "all", std::string(name) + "_" + buckets[i], fmt(b->fraction(i)));
  return os.str();
}

std::string MotivationReport::bops_csv(const std::string& digest) const {
  std::ostringstream os;
  csv_header(os, digest);
  for (const auto& s : bops.steps) {
    const std::string step = std::to_string(s.step);
    csv_row(os, model, "all", step, "direct_bops", std::to_string(s.direct));
    csv_row(os, model, "all", step, "spatial_relative", fmt(ratio(s.spatial, s.direct)));
    if (s.temporal) csv_row(os, model, "all", step, "temporal_relative", fmt(ratio(*s.temporal, s.direct)));
  }
  csv_row(os, model, "all", "all", "direct_relative", fmt(1.0));
  csv_row(os, model, "all", "all", "spatial_relative", fmt(bops.spatial_ratio()));
  csv_row(os, model, "all", "all", "temporal_relative", fmt(bops.temporal_ratio()));
  return os.str();
}

nlohmann::json MotivationReport::summary() const {
  auto hist = [](const BucketCounts& b) {
    return nlohmann::json{{"bits_0", b.fraction(0)},
                          {"bits_1_4", b.fraction(1)},
                          {"bits_5_8", b.fraction(2)},
                          {"elements", b.total()}};
  };
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& l : range.layers)
    ranges.push_back({{"layer", l.name},
                      {"mean_activation_range", l.mean_activation()},
                      {"mean_diff_range", opt_json(l.mean_diff())},
                      {"ratio", opt_json(l.ratio())}});
  return {{"model", model},
          {"similarity",
           {{"temporal", mean_json(similarity.temporal)},
            {"spatial_row", mean_json(similarity.spatial_row)},
            {"spatial_window", mean_json(similarity.spatial_window)},
            {"zero_vectors", similarity.zero_vectors}}},
          {"range", {{"layers", ranges}, {"fraction_narrower", range.fraction_narrower()}}},
          {"bitwidth",
           {{"activation", hist(histogram.activations)},
            {"temporal", hist(histogram.temporal)},
            {"spatial", hist(histogram.spatial)}}},
          {"relative_bops",
           {{"direct", 1.0},
            {"spatial", bops.spatial_ratio()},
            {"temporal", bops.temporal_ratio()}}}};
}

MotivationReport analyze_trace(const QuantizedTrace& qt, const std::string& model) {
  MotivationReport r;
  r.model = model;
  r.similarity = similarity_report(qt.trace());
  r.range = range_report(qt);
  r.histogram = bitwidth_histogram(qt);
  r.bops = relative_bops(qt);
  return r;
}

}  // namespace ditto
