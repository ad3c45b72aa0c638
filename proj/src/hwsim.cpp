#include "ditto/hwsim.hpp"

#include <algorithm>
#include <cstdio>
#include <future>
#include <map>
#include <sstream>

#include "ditto/error.hpp"

namespace ditto {

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return b ? (a + b - 1) / b : 0; }

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

constexpr std::pair<Preset, const char*> kPresetNames[] = {
    {Preset::ITC, "itc"},
    {Preset::Diffy, "diffy"},
    {Preset::CambriconD, "cambricon-d"},
    {Preset::Ditto, "ditto"},
    {Preset::DittoPlus, "ditto-plus"},
};

}  // namespace

const char* to_string(Preset p) {
  for (const auto& [pr, name] : kPresetNames)
    if (pr == p) return name;
  return "unknown";
}

std::optional<Preset> preset_from_string(const std::string& name) {
  for (const auto& [pr, n] : kPresetNames)
    if (name == n) return pr;
  return std::nullopt;
}

void HwConfig::validate() const {
  if (n_lanes == 0) throw Error(ErrorCode::InvalidArgument, "hardware needs at least one lane");
  if (lane_bits != 4 && lane_bits != 8)
    throw Error(ErrorCode::InvalidArgument, "lane_bits must be 4 or 8");
  if (lanes_per_tree <= 0 || shifters_per_tree <= 0 || dram_bw == 0 || sram_bytes == 0 ||
      !(freq_ghz > 0.0))
    throw Error(ErrorCode::InvalidArgument, "hardware parameters must be positive");
  const EnergyConstants& e = energy;
  for (double v : {e.e_mult4, e.e_mult8, e.e_add, e.e_shift, e.e_sram_byte, e.e_dram_byte})
    if (!(v > 0.0)) throw Error(ErrorCode::InvalidArgument, "energy constants must be positive");
  if (e.e_mult8 < 2.0 * e.e_mult4)
    throw Error(ErrorCode::InvalidArgument, "e_mult8 must be at least 2 * e_mult4");
  if (lane_bits == 8 && (outlier_lanes != 0 || temporal || spatial))
    throw Error(ErrorCode::InvalidArgument, "8-bit lane hardware runs original activations only");
}

HwConfig preset_config(Preset p, std::uint64_t lane_divisor) {
  if (lane_divisor == 0) throw Error(ErrorCode::InvalidArgument, "lane divisor must be >= 1");
  HwConfig c;
  c.name = to_string(p);
  switch (p) {
    case Preset::ITC:
      c.n_lanes = 27648;
      c.lane_bits = 8;
      c.temporal = false;
      break;
    case Preset::Diffy:
      c.temporal = false;
      c.spatial = true;
      break;
    case Preset::CambriconD:
      c.n_lanes = 38280;
      c.outlier_lanes = 2552;
      c.sign_mask = true;
      break;
    case Preset::Ditto:
      break;
    case Preset::DittoPlus:
      c.spatial = true;
      break;
  }
  c.n_lanes = ceil_div(c.n_lanes, lane_divisor);
  c.outlier_lanes = ceil_div(c.outlier_lanes, lane_divisor);
  return c;
}

Variant default_variant(Preset p) {
  switch (p) {
    case Preset::ITC: return Variant::Direct;
    case Preset::Diffy: return Variant::AllSpatial;
    case Preset::CambriconD: return Variant::CambriconD;
    case Preset::Ditto: return Variant::Ditto;
    case Preset::DittoPlus: return Variant::DittoPlus;
  }
  return Variant::Direct;
}

bool supports(const HwConfig& cfg, Variant v) {
  switch (v) {
    case Variant::Direct: return true;
    case Variant::AllSpatial: return cfg.spatial;
    case Variant::DittoPlus:
    case Variant::IdealPlus: return cfg.spatial && cfg.temporal;
    default: return cfg.temporal;
  }
}

nlohmann::json hw_config_to_json(const HwConfig& c) {
  return {{"name", c.name},
          {"n_lanes", c.n_lanes},
          {"lane_bits", c.lane_bits},
          {"lanes_per_tree", c.lanes_per_tree},
          {"shifters_per_tree", c.shifters_per_tree},
          {"outlier_lanes", c.outlier_lanes},
          {"dram_bw", c.dram_bw},
          {"sram_bytes", c.sram_bytes},
          {"weights_resident", c.weights_resident},
          {"pipeline_fill", c.pipeline_fill},
          {"freq_ghz", c.freq_ghz},
          {"temporal", c.temporal},
          {"spatial", c.spatial},
          {"sign_mask", c.sign_mask},
          {"energy",
           {{"e_mult4", c.energy.e_mult4},
            {"e_mult8", c.energy.e_mult8},
            {"e_add", c.energy.e_add},
            {"e_shift", c.energy.e_shift},
            {"e_sram_byte", c.energy.e_sram_byte},
            {"e_dram_byte", c.energy.e_dram_byte}}}};
}

HwConfig hw_config_from_json(const nlohmann::json& j, HwConfig c) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "hardware config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "name") c.name = v.get<std::string>();
      else if (key == "n_lanes") c.n_lanes = v.get<std::uint64_t>();
      else if (key == "lane_bits") c.lane_bits = v.get<int>();
      else if (key == "lanes_per_tree") c.lanes_per_tree = v.get<int>();
      else if (key == "shifters_per_tree") c.shifters_per_tree = v.get<int>();
      else if (key == "outlier_lanes") c.outlier_lanes = v.get<std::uint64_t>();
      else if (key == "dram_bw") c.dram_bw = v.get<std::uint64_t>();
      else if (key == "sram_bytes") c.sram_bytes = v.get<std::uint64_t>();
      else if (key == "weights_resident") c.weights_resident = v.get<bool>();
      else if (key == "pipeline_fill") c.pipeline_fill = v.get<std::uint64_t>();
      else if (key == "freq_ghz") c.freq_ghz = v.get<double>();
      else if (key == "temporal") c.temporal = v.get<bool>();
      else if (key == "spatial") c.spatial = v.get<bool>();
      else if (key == "sign_mask") c.sign_mask = v.get<bool>();
      else if (key == "energy") {
        if (!v.is_object()) throw Error(ErrorCode::InvalidArgument, "energy must be an object");
        for (const auto& [ek, ev] : v.items()) {
          if (ek == "e_mult4") c.energy.e_mult4 = ev.get<double>();
          else if (ek == "e_mult8") c.energy.e_mult8 = ev.get<double>();
          else if (ek == "e_add") c.energy.e_add = ev.get<double>();
          else if (ek == "e_shift") c.energy.e_shift = ev.get<double>();
          else if (ek == "e_sram_byte") c.energy.e_sram_byte = ev.get<double>();
          else if (ek == "e_dram_byte") c.energy.e_dram_byte = ev.get<double>();
          else throw Error(ErrorCode::InvalidArgument, "unknown energy key '" + ek + "'");
        }
      } else {
        throw Error(ErrorCode::InvalidArgument, "unknown hardware key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad hardware config value: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t slots_for(const MacCounts& macs, ExecMode mode, const HwConfig& cfg) {
  (void)mode;  // Direct work arrives as all-Full counts.
  if (cfg.lane_bits == 8 || cfg.outlier_lanes > 0) return macs.low + macs.full;
  return macs.low + 2 * macs.full;
}

std::uint64_t compute_cycles(std::uint64_t total_slots, const HwConfig& cfg) {
  if (cfg.n_lanes == 0) throw Error(ErrorCode::InvalidArgument, "hardware needs at least one lane");
  return ceil_div(total_slots, cfg.n_lanes);
}

std::uint64_t compute_cycles(const MacCounts& macs, ExecMode mode, const HwConfig& cfg) {
  if (cfg.outlier_lanes == 0) return compute_cycles(slots_for(macs, mode, cfg), cfg);
  if (cfg.n_lanes == 0) throw Error(ErrorCode::InvalidArgument, "hardware needs at least one lane");
  return std::max(ceil_div(macs.low, cfg.n_lanes), ceil_div(macs.full, cfg.outlier_lanes));
}

Traffic& Traffic::operator+=(const Traffic& o) {
  weights += o.weights;
  cur_in += o.cur_in;
  prev_in += o.prev_in;
  prev_out += o.prev_out;
  out += o.out;
  return *this;
}

MacCounts macs_for(const LayerWork& w, ExecMode mode) {
  switch (mode) {
    case ExecMode::Direct: return dense_counts(w.dense_macs);
    case ExecMode::SpatialDiff: return w.spatial;
    case ExecMode::TemporalDiff:
      if (!w.has_temporal)
        throw Error(ErrorCode::MissingPrevious, "temporal differences need a previous step");
      return w.temporal;
  }
  return {};
}

Traffic memory_traffic(const LayerWork& w, ExecMode mode, const Boundaries& b, const HwConfig& cfg) {
  Traffic t;
  t.cur_in = w.a_elements + w.w_act_elements;
  t.weights = cfg.weights_resident && w.weight_bytes <= cfg.sram_bytes ? 0 : w.weight_bytes;
  t.out = w.out_elements;
  if (mode == ExecMode::TemporalDiff) {
    if (b.diff_calc && !b.free_prev_in)
      t.prev_in = w.a_elements + (w.w_constant ? 0 : w.w_act_elements);
    if (b.summation && !b.free_prev_out) t.prev_out += 4 * w.out_elements;
  }
  t.prev_out += 4 * b.extra_summation_elements;
  return t;
}

std::uint64_t stall_cycles(std::uint64_t traffic_bytes, std::uint64_t compute, const HwConfig& cfg) {
  const std::uint64_t mem = ceil_div(traffic_bytes, cfg.dram_bw);
  return mem > compute ? mem - compute : 0;
}

std::uint64_t encoder_cycles(std::uint64_t elements, const HwConfig& cfg) {
  return ceil_div(elements, cfg.n_lanes) + 2;
}

std::uint64_t vpu_cycles(std::span<const std::uint64_t> op_elements, const HwConfig& cfg) {
  std::uint64_t c = 0;
  for (auto e : op_elements) c += ceil_div(e, cfg.n_lanes);
  return c;
}

LayerCost evaluate_layer(const LayerWork& w, ExecMode mode, const Boundaries& b,
                         std::span<const std::uint64_t> vpu_ops, bool defo_unit,
                         int defo_updates, const HwConfig& cfg) {
  if (mode == ExecMode::TemporalDiff && !cfg.temporal)
    throw Error(ErrorCode::Incompatible, cfg.name + " cannot run temporal differences");
  if (mode == ExecMode::SpatialDiff && !cfg.spatial)
    throw Error(ErrorCode::Incompatible, cfg.name + " cannot run spatial differences");
  LayerCost c;
  c.mode = mode;
  c.macs = macs_for(w, mode);
  c.slots = slots_for(c.macs, mode, cfg);
  c.compute_cycles = compute_cycles(c.macs, mode, cfg);
  c.traffic = memory_traffic(w, mode, b, cfg);
  c.stall_cycles = stall_cycles(c.traffic.total(), c.compute_cycles, cfg);
  if (mode == ExecMode::TemporalDiff) c.enc_cycles = encoder_cycles(w.temporal_encoded, cfg);
  if (mode == ExecMode::SpatialDiff) c.enc_cycles = encoder_cycles(w.spatial_encoded, cfg);
  c.vpu_cycles = vpu_cycles(vpu_ops, cfg);
  c.defo_cycles = defo_unit ? 1 : 0;
  c.total_cycles = cfg.pipeline_fill + std::max({c.compute_cycles, c.enc_cycles, c.vpu_cycles}) +
                   c.stall_cycles + c.defo_cycles;
  c.bops = bops(c.macs);

  const EnergyConstants& e = cfg.energy;
  double mult = 0.0;
  if (cfg.lane_bits == 8)
    mult = static_cast<double>(c.macs.low + c.macs.full) * e.e_mult8;
  else if (cfg.outlier_lanes > 0)
    mult = static_cast<double>(c.macs.low) * e.e_mult4 + static_cast<double>(c.macs.full) * e.e_mult8;
  else
    mult = static_cast<double>(c.macs.low) * e.e_mult4 +
           static_cast<double>(c.macs.full) * (2.0 * e.e_mult4 + e.e_shift);
  const double traffic = static_cast<double>(c.traffic.total());
  const double resident = cfg.weights_resident ? static_cast<double>(w.weight_bytes) : 0.0;
  c.energy = mult + e.e_add * static_cast<double>(c.slots) + e.e_sram_byte * (traffic + resident) +
             e.e_dram_byte * traffic + e.e_add * defo_updates;
  return c;
}

Workload::Workload(const QuantizedTrace& qt)
    : graph_(qt.graph()), steps_(qt.step_count()), layers_(qt.layer_nodes()) {
  const std::size_t L = layers_.size();
  if (L == 0) throw Error(ErrorCode::InvalidArgument, "graph has no linear layers");
  owner_.assign(graph_.size(), 0);
  for (NodeId id : graph_.topo_order()) {
    const LayerNode& n = graph_.node(id);
    if (is_linear(n.kind)) owner_[id] = qt.layer_index(id);
    else if (!n.inputs.empty()) owner_[id] = owner_[n.inputs[0]];
  }

  std::vector<std::vector<std::uint32_t>> macs_a(L), macs_w(L);
  for (std::size_t l = 0; l < L; ++l) {
    const LayerQuant& q = qt.layer(l);
    macs_a[l] = macs_per_a_element(q.op, q.a_dims, q.w_dims);
    if (q.op.is_attention()) macs_w[l] = macs_per_w_element(q.op, q.a_dims, q.w_dims);
  }

  work_.resize(static_cast<std::size_t>(steps_) * L);
  for (std::size_t l = 0; l < L; ++l) {
    const LayerQuant& q = qt.layer(l);
    std::optional<QuantTensor> a_prev, w_prev;
    for (int s = 1; s <= steps_; ++s) {
      const QuantTensor a = qt.a(s, l);
      const QuantTensor w = qt.w(s, l);
      LayerWork& lw = work_[static_cast<std::size_t>(s - 1) * L + l];
      lw.a_elements = a.size();
      lw.w_act_elements = q.op.is_attention() ? w.size() : 0;
      lw.w_constant = q.w_constant;
      lw.out_elements = element_count(output_shape(q.op, q.a_dims, q.w_dims));
      lw.weight_bytes = q.op.is_attention() ? 0 : w.size();
      lw.dense_macs = total_macs(q.op, q.a_dims, q.w_dims);

      const SpatialDiff sd = spatial_diff(a, q.op);
      lw.spatial = spatial_weighted_counts(sd, q.w_dims);
      lw.spatial_encoded = sd.rows * sd.cols;
      const DiffCounts sc = sd.counts();
      lw.spatial_nonzero = sc.low + sc.full;

      if (a_prev) {
        lw.has_temporal = true;
        const ClassifiedDiff da = temporal_diff(a, *a_prev);
        lw.temporal = weighted_counts(da, macs_a[l]);
        lw.temporal_encoded = a.size();
        lw.temporal_nonzero = da.elements().size();
        if (q.op.is_attention() && !q.w_constant) {
          const ClassifiedDiff dw = temporal_diff(w, *w_prev);
          lw.temporal += weighted_counts(dw, macs_w[l]);
          lw.temporal_encoded += w.size();
          lw.temporal_nonzero += dw.elements().size();
        }
      }
      a_prev = a;
      w_prev = w;
    }
  }
}

const LayerWork& Workload::at(int step, std::size_t layer) const {
  if (step < 1 || step > steps_ || layer >= layers_.size())
    throw Error(ErrorCode::InvalidArgument, "workload has no entry for that step/layer");
  return work_[static_cast<std::size_t>(step - 1) * layers_.size() + layer];
}

Workload::StepLayout Workload::layout(std::span<const ExecMode> modes, bool bypass,
                                      bool sign_mask) const {
  const std::size_t L = layers_.size();
  if (modes.size() != L) throw Error(ErrorCode::InvalidArgument, "one mode per layer required");
  AnalysisOptions opts;
  opts.bypass = bypass;
  opts.modes.assign(graph_.size(), ExecMode::Direct);
  for (std::size_t l = 0; l < L; ++l) opts.modes[layers_[l]] = modes[l];
  const MaterializationPlan plan = analyze_graph(graph_, opts);
  const auto cons = graph_.consumers();

  auto masked = [&](NodeKind k) { return k == NodeKind::GroupNorm || k == NodeKind::SiLU; };
  StepLayout out;
  out.boundaries.resize(L);
  out.vpu_ops.resize(L);
  for (const auto& n : graph_.nodes()) {
    const std::uint64_t elems = element_count(n.dims);
    if (is_linear(n.kind)) {
      const std::size_t l = owner_[n.id];
      Boundaries& b = out.boundaries[l];
      b.diff_calc = plan.needs_diff_calc[n.id];
      b.summation = plan.needs_summation[n.id];
      if (sign_mask) {
        b.free_prev_in = masked(graph_.node(n.inputs[0]).kind);
        b.free_prev_out = !cons[n.id].empty() &&
                          std::all_of(cons[n.id].begin(), cons[n.id].end(),
                                      [&](NodeId c) { return masked(graph_.node(c).kind); });
      }
      if (b.summation) out.vpu_ops[l].push_back(elems);
    } else if (is_nonlinear(n.kind)) {
      out.vpu_ops[owner_[n.id]].push_back(elems);
    } else if (n.kind == NodeKind::Add) {
      const std::size_t l = owner_[n.id];
      if (!plan.diff_node[n.id]) {
        out.vpu_ops[l].push_back(elems);
      } else if (plan.needs_summation[n.id]) {
        out.boundaries[l].extra_summation_elements += elems;
        out.vpu_ops[l].push_back(elems);
      }
    }
  }
  return out;
}

void RunTotals::add(const LayerCost& c) {
  cycles += c.total_cycles;
  compute_cycles += c.compute_cycles;
  stall_cycles += c.stall_cycles;
  enc_cycles += c.enc_cycles;
  vpu_cycles += c.vpu_cycles;
  defo_cycles += c.defo_cycles;
  slots += c.slots;
  traffic += c.traffic;
  bops += c.bops;
  energy += c.energy;
}

RunTotals RunReport::step_totals(int step) const {
  RunTotals t;
  for (const auto& r : rows)
    if (r.step == step) t.add(r);
  return t;
}

RunTotals RunReport::layer_totals(std::size_t layer) const {
  RunTotals t;
  for (const auto& r : rows)
    if (r.layer == layer) t.add(r);
  return t;
}

std::string RunReport::to_csv(const LayerGraph& g, const std::string& digest) const {
  std::ostringstream os;
  if (!digest.empty()) os << "# config_digest=" << digest << "\n";
  os << "variant,preset,step,layer,node,name,mode,macs_low,macs_full,slots,compute_cycles,"
        "enc_cycles,vpu_cycles,stall_cycles,defo_cycles,total_cycles,traffic_weights,"
        "traffic_cur_in,traffic_prev_in,traffic_prev_out,traffic_out,traffic_total,bops,energy\n";
  for (const auto& r : rows) {
    os << variant << ',' << preset << ',' << r.step << ',' << r.layer << ',' << r.node << ','
       << g.node(r.node).name << ',' << to_string(r.mode) << ',' << r.macs.low << ','
       << r.macs.full << ',' << r.slots << ',' << r.compute_cycles << ',' << r.enc_cycles << ','
       << r.vpu_cycles << ',' << r.stall_cycles << ',' << r.defo_cycles << ',' << r.total_cycles
       << ',' << r.traffic.weights << ',' << r.traffic.cur_in << ',' << r.traffic.prev_in << ','
       << r.traffic.prev_out << ',' << r.traffic.out << ',' << r.traffic.total() << ',' << r.bops
       << ',' << fmt_double(r.energy) << '\n';
  }
  return os.str();
}

namespace {

nlohmann::json totals_json(const RunTotals& t) {
  return {{"cycles", t.cycles},
          {"compute_cycles", t.compute_cycles},
          {"stall_cycles", t.stall_cycles},
          {"enc_cycles", t.enc_cycles},
          {"vpu_cycles", t.vpu_cycles},
          {"defo_cycles", t.defo_cycles},
          {"slots", t.slots},
          {"traffic",
           {{"weights", t.traffic.weights},
            {"cur_in", t.traffic.cur_in},
            {"prev_in", t.traffic.prev_in},
            {"prev_out", t.traffic.prev_out},
            {"out", t.traffic.out},
            {"total", t.traffic.total()}}},
          {"bops", t.bops},
          {"energy", t.energy}};
}

}  // namespace

nlohmann::json RunReport::summary(const LayerGraph& g) const {
  nlohmann::json j{{"variant", variant},
                   {"preset", preset},
                   {"hardware", hw_config_to_json(config)},
                   {"totals", totals_json(totals)}};
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.layers.size(); ++l) {
    nlohmann::json e{{"layer", l}, {"node", plan.layers[l]}, {"name", g.node(plan.layers[l]).name}};
    if (table) {
      const DefoEntry& d = table->entry(l);
      e["cycle_act"] = d.cycle_act;
      e["cycle_diff"] = d.cycle_diff;
      e["use_diff"] = d.use_diff;
    }
    if (!plan.steps.empty()) e["final_mode"] = to_string(plan.steps.back()[l]);
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

namespace {

std::vector<ExecMode> uniform_modes(std::size_t n, ExecMode m) { return std::vector<ExecMode>(n, m); }

class LayoutCache {
 public:
  LayoutCache(const Workload& w, bool bypass, bool sign_mask)
      : w_(w), bypass_(bypass), sign_mask_(sign_mask) {}

  const Workload::StepLayout& get(const std::vector<ExecMode>& modes) {
    auto it = cache_.find(modes);
    if (it == cache_.end()) it = cache_.emplace(modes, w_.layout(modes, bypass_, sign_mask_)).first;
    return it->second;
  }

 private:
  const Workload& w_;
  bool bypass_;
  bool sign_mask_;
  std::map<std::vector<ExecMode>, Workload::StepLayout> cache_;
};

}  // namespace

ExecPlan ideal_plan(const Workload& w, const HwConfig& cfg, bool plus) {
  cfg.validate();
  const std::size_t L = w.layer_count();
  const ExecMode fallback = plus ? ExecMode::SpatialDiff : ExecMode::Direct;
  const auto lay_diff = w.layout(uniform_modes(L, ExecMode::TemporalDiff), true, cfg.sign_mask);
  const auto lay_fb = w.layout(uniform_modes(L, fallback), true, cfg.sign_mask);
  ExecPlan plan;
  plan.layers = w.layers();
  plan.steps.push_back(uniform_modes(L, fallback));
  for (int s = 2; s <= w.step_count(); ++s) {
    std::vector<ExecMode> modes(L);
    for (std::size_t l = 0; l < L; ++l) {
      const LayerWork& lw = w.at(s, l);
      const auto cd = evaluate_layer(lw, ExecMode::TemporalDiff, lay_diff.boundaries[l],
                                     lay_diff.vpu_ops[l], false, 0, cfg);
      const auto cf = evaluate_layer(lw, fallback, lay_fb.boundaries[l], lay_fb.vpu_ops[l], false,
                                     0, cfg);
      modes[l] = cd.total_cycles < cf.total_cycles ? ExecMode::TemporalDiff : fallback;
    }
    plan.steps.push_back(std::move(modes));
  }
  return plan;
}

RunReport run_plan(const Workload& w, const ExecPlan& plan, const HwConfig& cfg, bool bypass,
                   const std::string& label) {
  cfg.validate();
  if (plan.layers != w.layers() || plan.step_count() != static_cast<std::size_t>(w.step_count()))
    throw Error(ErrorCode::Incompatible, "plan does not match the workload");
  RunReport rep;
  rep.variant = label;
  rep.preset = cfg.name;
  rep.config = cfg;
  rep.plan = plan;
  LayoutCache cache(w, bypass, cfg.sign_mask);
  for (int s = 1; s <= w.step_count(); ++s) {
    const auto& modes = plan.steps[static_cast<std::size_t>(s - 1)];
    const auto& lay = cache.get(modes);
    for (std::size_t l = 0; l < w.layer_count(); ++l) {
      LayerCost c = evaluate_layer(w.at(s, l), modes[l], lay.boundaries[l], lay.vpu_ops[l], false,
                                   0, cfg);
      c.step = s;
      c.layer = l;
      c.node = w.layers()[l];
      rep.totals.add(c);
      rep.rows.push_back(c);
    }
  }
  return rep;
}

RunReport run_sim(const Workload& w, Variant v, const HwConfig& cfg) {
  cfg.validate();
  if (!supports(cfg, v))
    throw Error(ErrorCode::Incompatible, std::string("hardware '") + cfg.name +
                                             "' cannot run variant '" + to_string(v) + "'");
  const std::size_t L = w.layer_count();
  if (v == Variant::Ideal || v == Variant::IdealPlus)
    return run_plan(w, ideal_plan(w, cfg, v == Variant::IdealPlus), cfg, true, to_string(v));

  const bool defo = uses_defo(v);
  RunReport rep;
  rep.variant = to_string(v);
  rep.preset = cfg.name;
  rep.config = cfg;
  rep.plan.layers = w.layers();
  DefoTable table(L);
  std::vector<bool> switched(L, false);
  LayoutCache cache(w, uses_bypass(v), cfg.sign_mask);

  for (int s = 1; s <= w.step_count(); ++s) {
    std::vector<ExecMode> modes;
    switch (v) {
      case Variant::Direct: modes = uniform_modes(L, ExecMode::Direct); break;
      case Variant::AllSpatial: modes = uniform_modes(L, ExecMode::SpatialDiff); break;
      case Variant::AllTemporal:
      case Variant::AllTemporalNoBypass:
      case Variant::CambriconD:
        modes = uniform_modes(L, s == 1 ? ExecMode::Direct : ExecMode::TemporalDiff);
        break;
      default: modes = plan_for_step(s, v, table, switched);
    }
    const auto& lay = cache.get(modes);
    for (std::size_t l = 0; l < L; ++l) {
      const int updates = defo && s <= 2 ? 1 : 0;
      LayerCost c = evaluate_layer(w.at(s, l), modes[l], lay.boundaries[l], lay.vpu_ops[l], defo,
                                   updates, cfg);
      c.step = s;
      c.layer = l;
      c.node = w.layers()[l];
      if (defo && s <= 2) table.record(s, l, c.total_cycles);
      if (v == Variant::DynamicDitto && s >= 3 && modes[l] == ExecMode::TemporalDiff &&
          std::min(c.total_cycles, kDefoCycleMax) > table.entry(l).cycle_act) {
        switched[l] = true;
        table.set_use_diff(l, false);
        c.energy += cfg.energy.e_add;
      }
      rep.totals.add(c);
      rep.rows.push_back(c);
    }
    if (defo && s == 2) {
      rep.decisions = decide_flow(table);
      for (std::size_t l = 0; l < L; ++l) table.set_use_diff(l, rep.decisions[l]);
    }
    rep.plan.steps.push_back(std::move(modes));
  }
  if (defo) rep.table = table;
  return rep;
}

nlohmann::json CompareResult::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  const RunTotals* itc = nullptr;
  for (const auto& r : rows)
    if (r.preset == Preset::ITC) itc = &r.totals;
  auto ratio = [](double a, double b) { return b != 0.0 ? a / b : 0.0; };
  for (const auto& r : rows) {
    nlohmann::json e{{"preset", to_string(r.preset)},
                     {"variant", to_string(r.variant)},
                     {"cycles", r.totals.cycles},
                     {"energy", r.totals.energy},
                     {"traffic", r.totals.traffic.total()},
                     {"bops", r.totals.bops}};
    if (itc) {
      e["cycles_norm"] = ratio(static_cast<double>(r.totals.cycles), static_cast<double>(itc->cycles));
      e["speedup"] = ratio(static_cast<double>(itc->cycles), static_cast<double>(r.totals.cycles));
      e["energy_norm"] = ratio(r.totals.energy, itc->energy);
      e["traffic_norm"] = ratio(static_cast<double>(r.totals.traffic.total()),
                                static_cast<double>(itc->traffic.total()));
      e["bops_norm"] = ratio(static_cast<double>(r.totals.bops), static_cast<double>(itc->bops));
    }
    rows_j.push_back(std::move(e));
  }
  auto acc = [](const Agreement& a) {
    return nlohmann::json{{"matches", a.matches}, {"total", a.total}, {"fraction", a.fraction()}};
  };
  return {{"rows", rows_j},
          {"defo_accuracy", acc(defo_accuracy)},
          {"defo_plus_accuracy", acc(defo_plus_accuracy)},
          {"all_temporal_traffic", all_temporal_traffic}};
}

std::string CompareResult::to_csv(const std::string& digest) const {
  const nlohmann::json j = to_json();
  std::ostringstream os;
  if (!digest.empty()) os << "# config_digest=" << digest << "\n";
  os << "preset,variant,cycles,cycles_norm,energy_norm,traffic_norm,bops_norm\n";
  for (const auto& r : j["rows"]) {
    os << r["preset"].get<std::string>() << ',' << r["variant"].get<std::string>() << ','
       << r["cycles"].get<std::uint64_t>() << ',' << fmt_double(r.value("cycles_norm", 0.0)) << ','
       << fmt_double(r.value("energy_norm", 0.0)) << ',' << fmt_double(r.value("traffic_norm", 0.0))
       << ',' << fmt_double(r.value("bops_norm", 0.0)) << '\n';
  }
  return os.str();
}

CompareResult compare_presets(const Workload& w, std::uint64_t lane_divisor,
                              const nlohmann::json& hw_patch) {
  std::vector<std::future<RunReport>> jobs;
  std::vector<HwConfig> cfgs;
  for (Preset p : kAllPresets) {
    cfgs.push_back(hw_config_from_json(hw_patch, preset_config(p, lane_divisor)));
  }
  for (std::size_t i = 0; i < cfgs.size(); ++i)
    jobs.push_back(std::async(std::launch::async, [&w, &cfgs, i] {
      return run_sim(w, default_variant(kAllPresets[i]), cfgs[i]);
    }));
  CompareResult out;
  std::vector<RunReport> reports;
  for (auto& j : jobs) reports.push_back(j.get());
  for (std::size_t i = 0; i < reports.size(); ++i)
    out.rows.push_back({kAllPresets[i], default_variant(kAllPresets[i]), reports[i].totals});

  const HwConfig& ditto = cfgs[3];
  const HwConfig& plus = cfgs[4];
  out.defo_accuracy = plan_agreement(reports[3].plan, ideal_plan(w, ditto, false));
  out.defo_plus_accuracy = plan_agreement(reports[4].plan, ideal_plan(w, plus, true));
  out.all_temporal_traffic = run_sim(w, Variant::AllTemporal, ditto).totals.traffic.total();
  return out;
}

}  // namespace ditto
