#include "ditto/quantized.hpp"

#include <algorithm>

#include "ditto/error.hpp"

namespace ditto {

namespace {

std::vector<float> flatten(const Trace& t, int step, NodeId producer) {
  return t.output(step, producer).values;
}

Tensor dequantize_accum(const AccumTensor& acc, const Shape& dims, double scale) {
  Tensor out(dims);
  for (std::size_t i = 0; i < acc.values.size(); ++i)
    out.values[i] = static_cast<float>(acc.values[i] * scale);
  return out;
}

void note(ExactnessReport& rep, bool ok, const std::string& what) {
  ++rep.checks;
  if (ok) return;
  ++rep.mismatches;
  if (rep.failures.size() < 16) rep.failures.push_back(what);
}

}  // namespace

std::vector<bool> constant_nodes(const LayerGraph& g) {
  std::vector<bool> c(g.size(), false);
  for (NodeId id : g.topo_order()) {
    const LayerNode& n = g.node(id);
    if (n.kind == NodeKind::Input) continue;
    c[id] = n.kind == NodeKind::Const ||
            (!n.inputs.empty() &&
             std::all_of(n.inputs.begin(), n.inputs.end(), [&](NodeId p) { return c[p]; }));
  }
  return c;
}

QuantizedTrace::QuantizedTrace(Trace trace, int calibration_step)
    : trace_(std::move(trace)), calibration_step_(calibration_step) {
  const LayerGraph& g = trace_.graph;
  if (trace_.step_count() < 1) throw Error(ErrorCode::InvalidArgument, "trace has no steps");
  if (calibration_step < 1 || calibration_step > trace_.step_count())
    throw Error(ErrorCode::InvalidArgument,
                "calibration step " + std::to_string(calibration_step) + " outside the trace");
  const auto constant = constant_nodes(g);
  ids_ = g.linear_nodes();
  for (NodeId id : ids_) {
    const LayerNode& n = g.node(id);
    LayerQuant q;
    q.node = id;
    q.op = g.linear_op(id);
    q.a_dims = g.operand_dims(id, 0);
    q.w_dims = g.weight_dims(id);
    q.a_scale = calibrate_scale(trace_.output(calibration_step, n.inputs[0]).values);
    if (q.op.is_attention()) {
      q.w_scale = calibrate_scale(trace_.output(calibration_step, n.inputs[1]).values);
      q.w_constant = constant[n.inputs[1]];
    } else {
      q.w_scale = calibrate_scale(n.weights);
      const QuantTensor w = quantize_values(q.w_dims, n.weights, q.w_scale);
      q.weight.assign(w.values().begin(), w.values().end());
    }
    layers_.push_back(std::move(q));
  }
}

std::size_t QuantizedTrace::layer_index(NodeId node) const {
  const auto it = std::find(ids_.begin(), ids_.end(), node);
  if (it == ids_.end())
    throw Error(ErrorCode::InvalidArgument, "node " + std::to_string(node) + " is not linear");
  return static_cast<std::size_t>(it - ids_.begin());
}

QuantTensor QuantizedTrace::a(int step, std::size_t layer) const {
  const LayerQuant& q = layers_.at(layer);
  return quantize_values(q.a_dims, flatten(trace_, step, graph().node(q.node).inputs[0]), q.a_scale);
}

QuantTensor QuantizedTrace::w(int step, std::size_t layer) const {
  const LayerQuant& q = layers_.at(layer);
  if (!q.op.is_attention()) return QuantTensor(q.w_dims, q.weight, q.w_scale);
  return quantize_values(q.w_dims, flatten(trace_, step, graph().node(q.node).inputs[1]), q.w_scale);
}

nlohmann::json ExactnessReport::to_json() const {
  return {{"checks", checks},
          {"mismatches", mismatches},
          {"verdict", exact() ? "exact" : "mismatch"},
          {"failures", failures}};
}

ExactnessReport verify_exactness(const QuantizedTrace& qt) {
  ExactnessReport rep;
  const LayerGraph& g = qt.graph();
  for (std::size_t l = 0; l < qt.layer_count(); ++l) {
    const LayerQuant& lq = qt.layer(l);
    const std::string name = g.node(lq.node).name;
    QuantTensor a_prev = qt.a(1, l);
    QuantTensor w_prev = qt.w(1, l);
    AccumTensor chained = direct_linear(a_prev, w_prev, lq.op);
    note(rep, spatial_linear(spatial_diff(a_prev, lq.op), w_prev) == chained,
         name + " spatial step 1");
    for (int s = 2; s <= qt.step_count(); ++s) {
      const QuantTensor a = qt.a(s, l);
      const QuantTensor w = qt.w(s, l);
      const AccumTensor direct = direct_linear(a, w, lq.op);
      const std::string where = name + " step " + std::to_string(s);
      if (!lq.op.is_attention()) {
        chained = diff_linear(temporal_diff(a, a_prev), w, chained, lq.op);
        note(rep, chained == direct, where + " temporal");
      } else if (lq.w_constant) {
        if (!(w == w_prev))
          throw Error(ErrorCode::ContextChanged, where + ": constant context changed");
        chained = diff_linear(temporal_diff(a, a_prev), w, chained, lq.op);
        note(rep, chained == direct, where + " constant-context");
      } else {
        chained = diff_attention(a, w, a_prev, w_prev, chained, lq.op);
        note(rep, chained == direct, where + " attention decomposition");
      }
      note(rep, spatial_linear(spatial_diff(a, lq.op), w) == direct, where + " spatial");
      a_prev = a;
      w_prev = w;
    }
  }
  return rep;
}

std::vector<std::vector<Tensor>> execute_quantized(const QuantizedTrace& qt, const ExecPlan& plan) {
  const LayerGraph& g = qt.graph();
  if (plan.layers != qt.layer_nodes() || plan.step_count() != static_cast<std::size_t>(qt.step_count()))
    throw Error(ErrorCode::Incompatible, "plan does not match the trace");
  const auto order = g.topo_order();
  std::vector<std::vector<Tensor>> result;
  std::vector<std::optional<QuantTensor>> prev_a(qt.layer_count()), prev_w(qt.layer_count());
  std::vector<std::optional<AccumTensor>> prev_acc(qt.layer_count());

  for (int s = 1; s <= qt.step_count(); ++s) {
    std::vector<Tensor> out(g.size());
    for (NodeId id : order) {
      const LayerNode& n = g.node(id);
      if (n.kind == NodeKind::Input) {
        out[id] = qt.trace().output(s, id);
        continue;
      }
      if (n.kind == NodeKind::Const) {
        out[id] = Tensor(n.dims, n.weights);
        continue;
      }
      if (!is_linear(n.kind)) {
        out[id] = evaluate_node(g, id, out);
        continue;
      }
      const std::size_t l = qt.layer_index(id);
      const LayerQuant& lq = qt.layer(l);
      const QuantTensor a = quantize_values(lq.a_dims, out[n.inputs[0]].values, lq.a_scale);
      const QuantTensor w = lq.op.is_attention()
                                ? quantize_values(lq.w_dims, out[n.inputs[1]].values, lq.w_scale)
                                : QuantTensor(lq.w_dims, lq.weight, lq.w_scale);
      AccumTensor acc;
      switch (plan.mode(s, l)) {
        case ExecMode::Direct:
          acc = direct_linear(a, w, lq.op);
          break;
        case ExecMode::SpatialDiff:
          acc = spatial_linear(spatial_diff(a, lq.op), w);
          break;
        case ExecMode::TemporalDiff:
          if (!prev_acc[l])
            throw Error(ErrorCode::MissingPrevious,
                        n.name + ": temporal difference needs a previous step");
          if (lq.op.is_attention() && !lq.w_constant)
            acc = diff_attention(a, w, *prev_a[l], *prev_w[l], *prev_acc[l], lq.op);
          else
            acc = diff_linear(temporal_diff(a, *prev_a[l]), w, *prev_acc[l], lq.op);
          break;
      }
      out[id] = dequantize_accum(acc, n.dims, lq.a_scale.value() * lq.w_scale.value());
      prev_a[l] = a;
      prev_w[l] = w;
      prev_acc[l] = std::move(acc);
    }
    result.push_back(std::move(out));
  }
  return result;
}

}  // namespace ditto
