#include "ditto/flow.hpp"

#include <algorithm>
#include <array>
#include <string>

#include "ditto/error.hpp"

namespace ditto {

namespace {

bool temporal(const AnalysisOptions& opts, NodeId id) {
  return opts.modes.empty() || opts.modes.at(id) == ExecMode::TemporalDiff;
}

bool producer_tolerant(const LayerGraph& g, const AnalysisOptions& opts, NodeId id) {
  if (!opts.bypass) return false;
  const NodeKind k = g.node(id).kind;
  if (is_linear(k)) return temporal(opts, id);
  return k == NodeKind::Add && opts.bypass;
}

bool consumer_tolerant(const LayerGraph& g, const AnalysisOptions& opts, NodeId id) {
  const NodeKind k = g.node(id).kind;
  if (k == NodeKind::Conv || k == NodeKind::FC) return temporal(opts, id);
  return k == NodeKind::Add && opts.bypass;
}

}  // namespace

const char* to_string(Domain d) { return d == Domain::Diff ? "diff" : "value"; }

std::size_t MaterializationPlan::diff_calc_count() const {
  return static_cast<std::size_t>(std::count(needs_diff_calc.begin(), needs_diff_calc.end(), true));
}

std::size_t MaterializationPlan::summation_count() const {
  return static_cast<std::size_t>(std::count(needs_summation.begin(), needs_summation.end(), true));
}

MaterializationPlan analyze_graph(const LayerGraph& g, const AnalysisOptions& opts) {
  g.validate();
  const std::size_t n = g.size();
  if (!opts.modes.empty() && opts.modes.size() != n)
    throw Error(ErrorCode::InvalidArgument, "mode vector must have one entry per node");
  const auto cons = g.consumers();

  std::vector<bool> sink(n, false);
  for (NodeId s : g.sinks()) sink[s] = true;

  std::vector<bool> diff(n, false);
  for (NodeId id = 0; id < n; ++id) {
    if (sink[id] || cons[id].empty() || !producer_tolerant(g, opts, id)) continue;
    diff[id] = std::all_of(cons[id].begin(), cons[id].end(),
                           [&](NodeId c) { return consumer_tolerant(g, opts, c); });
  }

  // An Add can only stay in the difference domain if every operand arrives
  // as a difference; otherwise it and its operands fall back to values.
  std::vector<bool> add_active(n, false);
  for (NodeId id = 0; id < n; ++id)
    add_active[id] = g.node(id).kind == NodeKind::Add && opts.bypass;
  for (bool changed = true; changed;) {
    changed = false;
    for (NodeId id = 0; id < n; ++id) {
      if (!add_active[id]) continue;
      const auto& in = g.node(id).inputs;
      if (std::all_of(in.begin(), in.end(), [&](NodeId p) { return diff[p]; })) continue;
      add_active[id] = false;
      diff[id] = false;
      for (NodeId p : in) diff[p] = false;
      changed = true;
    }
    // A tensor consumed by a demoted Add must be a value.
    for (NodeId id = 0; id < n; ++id) {
      if (!diff[id]) continue;
      for (NodeId c : cons[id])
        if (g.node(c).kind == NodeKind::Add && !add_active[c]) {
          diff[id] = false;
          changed = true;
          break;
        }
    }
  }

  MaterializationPlan plan;
  plan.tensor_domain.resize(n, Domain::Value);
  plan.diff_node.assign(n, false);
  plan.needs_diff_calc.assign(n, false);
  plan.needs_summation.assign(n, false);
  for (NodeId id = 0; id < n; ++id) {
    const LayerNode& node = g.node(id);
    plan.tensor_domain[id] = diff[id] ? Domain::Diff : Domain::Value;
    if (is_linear(node.kind) && temporal(opts, id)) {
      plan.diff_node[id] = true;
      plan.needs_diff_calc[id] = std::any_of(node.inputs.begin(), node.inputs.end(),
                                             [&](NodeId p) { return !diff[p]; });
    } else if (node.kind == NodeKind::Add && add_active[id]) {
      plan.diff_node[id] = true;
    }
    plan.needs_summation[id] = plan.diff_node[id] && !diff[id];
  }
  check_plan_legal(g, plan);
  return plan;
}

void check_plan_legal(const LayerGraph& g, const MaterializationPlan& plan) {
  for (const Edge& e : g.edges()) {
    if (plan.edge_domain(e) != Domain::Diff) continue;
    const LayerNode& c = g.node(e.consumer);
    const bool ok = (c.kind == NodeKind::Conv || c.kind == NodeKind::FC ||
                     c.kind == NodeKind::Add) &&
                    plan.diff_node[e.consumer];
    if (!ok || !plan.diff_node[e.producer])
      throw Error(ErrorCode::InvariantViolation,
                  "difference tensor from node " + std::to_string(e.producer) +
                      " reaches node " + std::to_string(e.consumer) + " (" +
                      to_string(c.kind) + ") without summation");
  }
}

std::uint64_t DefoEntry::packed() const {
  return (static_cast<std::uint64_t>(use_diff) << 32) |
         (static_cast<std::uint64_t>(cycle_act) << 16) | cycle_diff;
}

DefoTable::DefoTable(std::size_t layers) {
  if (layers > kDefoEntries)
    throw Error(ErrorCode::Capacity, "Defo table holds at most " + std::to_string(kDefoEntries) +
                                         " layers, got " + std::to_string(layers));
  entries_.resize(layers);
}

const DefoEntry& DefoTable::entry(std::size_t layer) const {
  if (layer >= entries_.size())
    throw Error(ErrorCode::Capacity, "no Defo entry for layer " + std::to_string(layer));
  return entries_[layer];
}

void DefoTable::record(int step, std::size_t layer, std::uint64_t cycles) {
  if (layer >= entries_.size())
    throw Error(ErrorCode::Capacity, "no Defo entry for layer " + std::to_string(layer));
  const auto v = static_cast<std::uint16_t>(std::min(cycles, kDefoCycleMax));
  DefoEntry& e = entries_[layer];
  if (step == 1) {
    e.cycle_act = v;
    e.has_act = true;
  } else if (step == 2) {
    e.cycle_diff = v;
    e.has_diff = true;
  } else {
    throw Error(ErrorCode::InvalidArgument, "cycles are recorded at steps 1 and 2 only");
  }
}

void DefoTable::set_use_diff(std::size_t layer, bool use_diff) {
  if (layer >= entries_.size())
    throw Error(ErrorCode::Capacity, "no Defo entry for layer " + std::to_string(layer));
  entries_[layer].use_diff = use_diff;
}

DefoTable record_step_cycles(DefoTable table, int step, std::size_t layer, std::uint64_t cycles) {
  table.record(step, layer, cycles);
  return table;
}

std::vector<bool> decide_flow(const DefoTable& table) {
  std::vector<bool> out(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    const DefoEntry& e = table.entry(i);
    if (!e.has_act || !e.has_diff)
      throw Error(ErrorCode::MissingPrevious,
                  "Defo entry " + std::to_string(i) + " lacks a step-1 or step-2 record");
    out[i] = e.cycle_diff < e.cycle_act;
  }
  return out;
}

namespace {

constexpr std::array<std::pair<Variant, const char*>, 10> kVariantNames{{
    {Variant::Direct, "direct"},
    {Variant::AllTemporal, "all-temporal"},
    {Variant::AllTemporalNoBypass, "all-temporal-no-bypass"},
    {Variant::AllSpatial, "all-spatial"},
    {Variant::Ditto, "ditto"},
    {Variant::DittoPlus, "ditto-plus"},
    {Variant::DynamicDitto, "dynamic-ditto"},
    {Variant::Ideal, "ideal"},
    {Variant::IdealPlus, "ideal-plus"},
    {Variant::CambriconD, "cambricon-d"},
}};

}  // namespace

const char* to_string(Variant v) {
  for (const auto& [var, name] : kVariantNames)
    if (var == v) return name;
  return "unknown";
}

std::optional<Variant> variant_from_string(const std::string& name) {
  for (const auto& [var, n] : kVariantNames)
    if (name == n) return var;
  return std::nullopt;
}

bool uses_defo(Variant v) {
  return v == Variant::Ditto || v == Variant::DittoPlus || v == Variant::DynamicDitto;
}

bool uses_bypass(Variant v) { return v != Variant::AllTemporalNoBypass; }

std::vector<ExecMode> plan_for_step(int step, Variant v, const DefoTable& table,
                                    const std::vector<bool>& switched) {
  if (step < 1) throw Error(ErrorCode::InvalidArgument, "steps are numbered from 1");
  const std::size_t n = table.size();
  switch (v) {
    case Variant::Ditto:
    case Variant::DittoPlus:
    case Variant::DynamicDitto: {
      const ExecMode fallback = v == Variant::DittoPlus ? ExecMode::SpatialDiff : ExecMode::Direct;
      if (step == 1) return std::vector<ExecMode>(n, fallback);
      if (step == 2) return std::vector<ExecMode>(n, ExecMode::TemporalDiff);
      const auto use = decide_flow(table);
      std::vector<ExecMode> out(n);
      for (std::size_t i = 0; i < n; ++i) {
        const bool off = v == Variant::DynamicDitto && i < switched.size() && switched[i];
        out[i] = use[i] && !off ? ExecMode::TemporalDiff : fallback;
      }
      return out;
    }
    default:
      throw Error(ErrorCode::InvalidArgument,
                  std::string("plan_for_step does not schedule variant ") + to_string(v));
  }
}

ExecMode ExecPlan::mode(int step, std::size_t layer) const {
  if (step < 1 || static_cast<std::size_t>(step) > steps.size())
    throw Error(ErrorCode::InvalidArgument, "plan has no step " + std::to_string(step));
  return steps[static_cast<std::size_t>(step - 1)].at(layer);
}

std::vector<ExecMode> ExecPlan::node_modes(int step, std::size_t node_count) const {
  std::vector<ExecMode> out(node_count, ExecMode::Direct);
  for (std::size_t i = 0; i < layers.size(); ++i) out.at(layers[i]) = mode(step, i);
  return out;
}

Agreement plan_agreement(const ExecPlan& a, const ExecPlan& b) {
  if (a.layers != b.layers || a.steps.size() != b.steps.size())
    throw Error(ErrorCode::Incompatible, "plans cover different layers or steps");
  Agreement out;
  for (std::size_t s = 2; s < a.steps.size(); ++s)
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      ++out.total;
      if (a.steps[s][l] == b.steps[s][l]) ++out.matches;
    }
  return out;
}

nlohmann::json graph_to_json(const LayerGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes()) {
    nodes.push_back({{"id", n.id},
                     {"kind", to_string(n.kind)},
                     {"name", n.name},
                     {"dims", n.dims},
                     {"inputs", n.inputs},
                     {"attrs", n.attrs},
                     {"weights", n.weights.size()}});
  }
  return {{"node_count", g.size()}, {"parameters", g.parameter_count()}, {"nodes", nodes}};
}

nlohmann::json materialization_to_json(const LayerGraph& g, const MaterializationPlan& plan) {
  nlohmann::json edges = nlohmann::json::array();
  for (const Edge& e : g.edges())
    edges.push_back({{"producer", e.producer},
                     {"consumer", e.consumer},
                     {"domain", to_string(plan.edge_domain(e))}});
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes()) {
    if (!plan.diff_node[n.id]) continue;
    nodes.push_back({{"id", n.id},
                     {"name", n.name},
                     {"needs_diff_calc", static_cast<bool>(plan.needs_diff_calc[n.id])},
                     {"needs_summation", static_cast<bool>(plan.needs_summation[n.id])}});
  }
  return {{"edges", edges},
          {"diff_nodes", nodes},
          {"diff_calc_count", plan.diff_calc_count()},
          {"summation_count", plan.summation_count()}};
}

nlohmann::json exec_plan_to_json(const LayerGraph& g, const ExecPlan& plan) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    nlohmann::json modes = nlohmann::json::array();
    for (const auto& step : plan.steps) modes.push_back(to_string(step[i]));
    layers.push_back(
        {{"id", plan.layers[i]}, {"name", g.node(plan.layers[i]).name}, {"modes", modes}});
  }
  return {{"steps", plan.steps.size()}, {"layers", layers}};
}

}  // namespace ditto
