#include <doctest.h>

#include <algorithm>
#include <random>

#include "ditto/error.hpp"
#include "ditto/flow.hpp"
#include "ditto/quantized.hpp"
#include "ditto/refmodel.hpp"
#include "oracles.hpp"

using namespace ditto;

namespace {

LayerNode mk(NodeKind k, Shape dims, std::vector<NodeId> in, std::string name) {
  LayerNode n;
  n.kind = k;
  n.name = std::move(name);
  n.dims = std::move(dims);
  n.inputs = std::move(in);
  if (k == NodeKind::FC) n.weights.assign(4 * n.dims.back(), 0.1f);
  return n;
}

// Oracle: enumerate every subset of the tensors that could locally hold
// differences and keep the largest one satisfying the Add rules.
struct BruteForce {
  std::vector<bool> diff;
  std::size_t diff_calc = 0;
  std::size_t summation = 0;
};

BruteForce brute_force(const LayerGraph& g, const std::vector<ExecMode>& modes, bool bypass) {
  const std::size_t n = g.size();
  const auto cons = g.consumers();
  const auto temporal = [&](NodeId id) { return modes.empty() || modes[id] == ExecMode::TemporalDiff; };
  const auto sinks = g.sinks();
  std::vector<NodeId> cand;
  for (NodeId id = 0; id < n; ++id) {
    const auto& node = g.node(id);
    if (!bypass || std::find(sinks.begin(), sinks.end(), id) != sinks.end() || cons[id].empty()) continue;
    const bool prod = (is_linear(node.kind) && temporal(id)) || (node.kind == NodeKind::Add && bypass);
    const bool consumers_ok = std::all_of(cons[id].begin(), cons[id].end(), [&](NodeId c) {
      const auto k = g.node(c).kind;
      return ((k == NodeKind::Conv || k == NodeKind::FC) && temporal(c)) || (k == NodeKind::Add && bypass);
    });
    if (prod && consumers_ok) cand.push_back(id);
  }
  REQUIRE(cand.size() <= 20);

  std::vector<bool> best(n, false);
  std::size_t best_size = 0;
  for (std::uint32_t mask = 0; mask < (1u << cand.size()); ++mask) {
    std::vector<bool> d(n, false);
    for (std::size_t i = 0; i < cand.size(); ++i) d[cand[i]] = (mask >> i) & 1u;
    bool legal = true;
    for (NodeId id = 0; id < n && legal; ++id) {
      const auto& node = g.node(id);
      if (node.kind != NodeKind::Add) continue;
      const bool all_in = std::all_of(node.inputs.begin(), node.inputs.end(), [&](NodeId p) { return d[p]; });
      const bool any_in = std::any_of(node.inputs.begin(), node.inputs.end(), [&](NodeId p) { return d[p]; });
      if ((any_in || d[id]) && !all_in) legal = false;
    }
    const auto size = static_cast<std::size_t>(std::count(d.begin(), d.end(), true));
    if (legal && size >= best_size) {
      best = d;
      best_size = size;
    }
  }

  BruteForce out;
  out.diff = best;
  for (NodeId id = 0; id < n; ++id) {
    const auto& node = g.node(id);
    const bool all_in = std::all_of(node.inputs.begin(), node.inputs.end(), [&](NodeId p) { return best[p]; });
    bool diff_node = false;
    if (is_linear(node.kind) && temporal(id)) {
      diff_node = true;
      if (!all_in) ++out.diff_calc;
    } else if (node.kind == NodeKind::Add && bypass && all_in) {
      diff_node = true;
    }
    if (diff_node && !best[id]) ++out.summation;
  }
  return out;
}

void check_against_oracle(const LayerGraph& g, const std::vector<ExecMode>& modes, bool bypass) {
  AnalysisOptions opts;
  opts.modes = modes;
  opts.bypass = bypass;
  const auto plan = analyze_graph(g, opts);
  const auto bf = brute_force(g, modes, bypass);
  for (NodeId id = 0; id < g.size(); ++id)
    CHECK(plan.tensor_domain[id] == (bf.diff[id] ? Domain::Diff : Domain::Value));
  CHECK(plan.diff_calc_count() == bf.diff_calc);
  CHECK(plan.summation_count() == bf.summation);
  CHECK_NOTHROW(check_plan_legal(g, plan));
}

LayerGraph unet() { return build_model(ModelSpec::toy_unet()); }
LayerGraph dit() { return build_model(ModelSpec::toy_dit()); }

}  // namespace

TEST_CASE("FC -> GeLU -> FC needs two diff calcs and two summations") {
  LayerGraph g;
  g.add(mk(NodeKind::Input, {2, 4}, {}, "x"));
  g.add(mk(NodeKind::FC, {2, 4}, {0}, "fc1"));
  g.add(mk(NodeKind::GeLU, {2, 4}, {1}, "act"));
  g.add(mk(NodeKind::FC, {2, 4}, {2}, "fc2"));
  const auto plan = analyze_graph(g);
  CHECK(plan.diff_calc_count() == 2);
  CHECK(plan.summation_count() == 2);
  CHECK(plan.tensor_domain[1] == Domain::Value);
}

TEST_CASE("FC -> FC stays in differences only with bypassing") {
  LayerGraph g;
  g.add(mk(NodeKind::Input, {2, 4}, {}, "x"));
  g.add(mk(NodeKind::FC, {2, 4}, {0}, "fc1"));
  g.add(mk(NodeKind::FC, {2, 4}, {1}, "fc2"));
  const auto plan = analyze_graph(g);
  CHECK(plan.tensor_domain[1] == Domain::Diff);
  CHECK(plan.boundary_count() == 2);
  AnalysisOptions off;
  off.bypass = false;
  const auto nb = analyze_graph(g, off);
  CHECK(nb.tensor_domain[1] == Domain::Value);
  CHECK(nb.diff_calc_count() == 2);
  CHECK(nb.summation_count() == 2);
}

TEST_CASE("FC -> Add -> FC keeps the sum in differences") {
  LayerGraph g;
  g.add(mk(NodeKind::Input, {2, 4}, {}, "x"));
  g.add(mk(NodeKind::FC, {2, 4}, {0}, "fc1"));
  g.add(mk(NodeKind::FC, {2, 4}, {0}, "fc2"));
  g.add(mk(NodeKind::Add, {2, 4}, {1, 2}, "add"));
  g.add(mk(NodeKind::FC, {2, 4}, {3}, "fc3"));
  const auto plan = analyze_graph(g);
  CHECK(plan.tensor_domain[3] == Domain::Diff);
  CHECK(plan.diff_calc_count() == 2);
  CHECK(plan.summation_count() == 1);
  CHECK(plan.needs_summation[4]);
  CHECK_FALSE(plan.needs_diff_calc[4]);

  AnalysisOptions no_bypass;
  no_bypass.bypass = false;
  const auto nb = analyze_graph(g, no_bypass);
  CHECK(nb.diff_calc_count() == 3);
  CHECK(nb.summation_count() == 3);

  // One Direct operand forces the Add and its other operand back to values.
  AnalysisOptions mixed;
  mixed.modes.assign(g.size(), ExecMode::TemporalDiff);
  mixed.modes[2] = ExecMode::Direct;
  const auto m = analyze_graph(g, mixed);
  CHECK(m.tensor_domain[1] == Domain::Value);
  CHECK(m.tensor_domain[3] == Domain::Value);
  CHECK_FALSE(m.diff_node[3]);
}

TEST_CASE("materialization matches the exhaustive oracle on both toy graphs") {
  for (const auto& g : {unet(), dit()}) {
    check_against_oracle(g, {}, true);
    check_against_oracle(g, {}, false);
    std::mt19937 rng(17);
    for (int trial = 0; trial < 60; ++trial) {
      std::vector<ExecMode> modes(g.size(), ExecMode::Direct);
      for (NodeId id : g.linear_nodes()) modes[id] = static_cast<ExecMode>(rng() % 3);
      check_against_oracle(g, modes, trial % 4 != 0);
    }
  }
}

TEST_CASE("nonlinear inputs and attention operands are always values") {
  for (const auto& g : {unet(), dit()}) {
    const auto plan = analyze_graph(g);
    for (const Edge& e : g.edges()) {
      const NodeKind k = g.node(e.consumer).kind;
      if (is_nonlinear(k) || k == NodeKind::AttnScore || k == NodeKind::AttnContext ||
          k == NodeKind::Concat || k == NodeKind::Split)
        CHECK(plan.edge_domain(e) == Domain::Value);
    }
    for (NodeId s : g.sinks()) CHECK(plan.tensor_domain[s] == Domain::Value);
  }
}

TEST_CASE("check_plan_legal rejects a difference reaching a nonlinear node") {
  LayerGraph g;
  g.add(mk(NodeKind::Input, {2, 4}, {}, "x"));
  g.add(mk(NodeKind::FC, {2, 4}, {0}, "fc"));
  g.add(mk(NodeKind::SiLU, {2, 4}, {1}, "act"));
  auto plan = analyze_graph(g);
  plan.tensor_domain[1] = Domain::Diff;
  CHECK_THROWS_AS(check_plan_legal(g, plan), Error);
}

TEST_CASE("Defo table") {
  DefoTable t(2);
  t.record(1, 0, 100);
  CHECK(t.entry(0).cycle_act == 100);
  t.record(2, 0, 70000);
  CHECK(t.entry(0).cycle_diff == 65535);
  CHECK_THROWS_AS(t.record(3, 0, 1), Error);
  CHECK_THROWS_AS(t.record(1, 2, 1), Error);

  try {
    DefoTable too_big(513);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Capacity);
  }
  CHECK(DefoTable(512).size() == 512);

  DefoTable d(3);
  d = record_step_cycles(d, 1, 0, 100);
  d = record_step_cycles(d, 2, 0, 80);
  d = record_step_cycles(d, 1, 1, 80);
  d = record_step_cycles(d, 2, 1, 80);
  d = record_step_cycles(d, 1, 2, 80);
  try {
    decide_flow(d);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MissingPrevious);
  }
  d = record_step_cycles(d, 2, 2, 100);
  CHECK(decide_flow(d) == std::vector<bool>{true, false, false});

  DefoEntry e;
  e.cycle_act = 0x1234;
  e.cycle_diff = 0xABCD;
  e.use_diff = true;
  CHECK(e.packed() == 0x11234ABCDull);
  CHECK(e.packed() < (1ull << 33));
}

TEST_CASE("plan_for_step schedules") {
  DefoTable t(3);
  for (std::size_t l = 0; l < 3; ++l) {
    t.record(1, l, 100);
    t.record(2, l, l == 1 ? 120 : 50);
  }
  using M = ExecMode;
  CHECK(plan_for_step(1, Variant::Ditto, t) == std::vector<M>(3, M::Direct));
  CHECK(plan_for_step(1, Variant::DittoPlus, t) == std::vector<M>(3, M::SpatialDiff));
  CHECK(plan_for_step(2, Variant::Ditto, t) == std::vector<M>(3, M::TemporalDiff));
  const std::vector<M> want{M::TemporalDiff, M::Direct, M::TemporalDiff};
  for (int s = 3; s <= 20; ++s) CHECK(plan_for_step(s, Variant::Ditto, t) == want);
  CHECK(plan_for_step(5, Variant::DittoPlus, t)[1] == M::SpatialDiff);
  CHECK(plan_for_step(5, Variant::DynamicDitto, t, {true, false, false}) ==
        std::vector<M>{M::Direct, M::Direct, M::TemporalDiff});
  // Static Ditto ignores the switch flags.
  CHECK(plan_for_step(5, Variant::Ditto, t, {true, true, true}) == want);
  CHECK_THROWS_AS(plan_for_step(0, Variant::Ditto, t), Error);
  CHECK_THROWS_AS(plan_for_step(3, Variant::Direct, t), Error);
}

TEST_CASE("variant names round trip") {
  for (auto v : {Variant::Direct, Variant::AllTemporal, Variant::AllTemporalNoBypass, Variant::AllSpatial,
                 Variant::Ditto, Variant::DittoPlus, Variant::DynamicDitto, Variant::Ideal,
                 Variant::IdealPlus, Variant::CambriconD})
    CHECK(variant_from_string(to_string(v)) == v);
  CHECK_FALSE(variant_from_string("fast").has_value());
}

TEST_CASE("plan agreement counts steps from 3") {
  ExecPlan a;
  a.layers = {1, 2};
  a.steps.assign(4, std::vector<ExecMode>(2, ExecMode::Direct));
  ExecPlan b = a;
  b.steps[0][0] = ExecMode::TemporalDiff;
  b.steps[3][1] = ExecMode::TemporalDiff;
  const auto ag = plan_agreement(a, b);
  CHECK(ag.total == 4);
  CHECK(ag.matches == 3);
}

TEST_CASE("execution under any plan equals direct execution") {
  for (const auto& g : {unet(), dit()}) {
    const QuantizedTrace qt(run_sampler(g, SamplerConfig::make(5, 8)));
    ExecPlan direct;
    direct.layers = qt.layer_nodes();
    direct.steps.assign(5, std::vector<ExecMode>(direct.layers.size(), ExecMode::Direct));
    const auto ref = execute_quantized(qt, direct);

    std::mt19937 rng(23);
    for (int trial = 0; trial < 4; ++trial) {
      ExecPlan p = direct;
      for (std::size_t s = 0; s < p.steps.size(); ++s)
        for (auto& m : p.steps[s]) {
          m = static_cast<ExecMode>(rng() % 3);
          if (s == 0 && m == ExecMode::TemporalDiff) m = ExecMode::Direct;
        }
      if (trial == 0)
        for (std::size_t s = 1; s < p.steps.size(); ++s)
          std::fill(p.steps[s].begin(), p.steps[s].end(), ExecMode::TemporalDiff);
      CHECK(execute_quantized(qt, p) == ref);
    }
  }
}

TEST_CASE("difference sums compose in the integer domain") {
  std::mt19937 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a0 = oracle::random_q({3, 6}, rng);
    const auto b0 = oracle::random_q({3, 6}, rng);
    const auto a1 = oracle::perturb(a0, rng, 20);
    const auto b1 = oracle::perturb(b0, rng, 20);
    const auto wa = oracle::random_q({6, 4}, rng);
    const auto wb = oracle::random_q({6, 4}, rng);
    const auto op = LinearOp::matmul();
    const auto ya = diff_linear(temporal_diff(a1, a0), wa, direct_linear(a0, wa, op), op);
    const auto yb = diff_linear(temporal_diff(b1, b0), wb, direct_linear(b0, wb, op), op);
    const auto da = direct_linear(a1, wa, op);
    const auto db = direct_linear(b1, wb, op);
    for (std::size_t i = 0; i < ya.values.size(); ++i) CHECK(ya.values[i] + yb.values[i] == da.values[i] + db.values[i]);
  }
}
