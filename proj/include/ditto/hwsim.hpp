#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditto/diffengine.hpp"
#include "ditto/flow.hpp"
#include "ditto/quantized.hpp"

namespace ditto {

enum class Preset : std::uint8_t { ITC, Diffy, CambriconD, Ditto, DittoPlus };

const char* to_string(Preset p);
std::optional<Preset> preset_from_string(const std::string& name);
inline constexpr Preset kAllPresets[] = {Preset::ITC, Preset::Diffy, Preset::CambriconD,
                                         Preset::Ditto, Preset::DittoPlus};

struct EnergyConstants {
  double e_mult4 = 1.0;
  double e_mult8 = 2.2;
  double e_add = 0.3;
  double e_shift = 0.05;
  double e_sram_byte = 1.5;
  double e_dram_byte = 100.0;
  bool operator==(const EnergyConstants&) const = default;
};

struct HwConfig {
  std::string name = "custom";
  std::uint64_t n_lanes = 39398;  // normal multiplier lanes
  int lane_bits = 4;
  int lanes_per_tree = 4;
  int shifters_per_tree = 2;
  std::uint64_t outlier_lanes = 0;  // dedicated 8-bit lanes
  std::uint64_t dram_bw = 64;       // bytes per cycle
  std::uint64_t sram_bytes = 192ull << 20;
  bool weights_resident = true;
  std::uint64_t pipeline_fill = 4;
  double freq_ghz = 1.0;
  bool temporal = true;
  bool spatial = false;
  bool sign_mask = false;
  EnergyConstants energy;

  void validate() const;
  bool operator==(const HwConfig&) const = default;
};

// Full-size lane counts, optionally divided by `lane_divisor` (rounded up) so
// toy-scale layers see the same compute/memory balance as full-size ones.
HwConfig preset_config(Preset p, std::uint64_t lane_divisor = 1);
Variant default_variant(Preset p);
bool supports(const HwConfig& cfg, Variant v);

nlohmann::json hw_config_to_json(const HwConfig& cfg);
// Applies the keys present in `j` on top of `base`; unknown keys throw.
HwConfig hw_config_from_json(const nlohmann::json& j, HwConfig base);

// Multiplier-lane cycles for the MACs of one layer.
std::uint64_t slots_for(const MacCounts& macs, ExecMode mode, const HwConfig& cfg);
std::uint64_t compute_cycles(std::uint64_t total_slots, const HwConfig& cfg);
// Queue-aware form; differs from the above only with outlier lanes.
std::uint64_t compute_cycles(const MacCounts& macs, ExecMode mode, const HwConfig& cfg);

struct Traffic {
  std::uint64_t weights = 0;
  std::uint64_t cur_in = 0;
  std::uint64_t prev_in = 0;
  std::uint64_t prev_out = 0;
  std::uint64_t out = 0;

  std::uint64_t total() const { return weights + cur_in + prev_in + prev_out + out; }
  Traffic& operator+=(const Traffic& o);
  bool operator==(const Traffic&) const = default;
};

// Everything one linear layer does at one step, independent of the plan.
struct LayerWork {
  std::uint64_t a_elements = 0;
  std::uint64_t w_act_elements = 0;  // attention second operand, 0 for Conv/FC
  bool w_constant = false;
  std::uint64_t out_elements = 0;
  std::uint64_t weight_bytes = 0;
  std::uint64_t dense_macs = 0;
  bool has_temporal = false;
  MacCounts temporal;
  MacCounts spatial;
  std::uint64_t temporal_encoded = 0;  // elements through the encoder
  std::uint64_t temporal_nonzero = 0;
  std::uint64_t spatial_encoded = 0;
  std::uint64_t spatial_nonzero = 0;
};

MacCounts macs_for(const LayerWork& w, ExecMode mode);

struct Boundaries {
  bool diff_calc = false;
  bool summation = false;
  // Summations of difference-domain Add nodes charged to this layer.
  std::uint64_t extra_summation_elements = 0;
  // Sign-mask dataflow hides prev-tensor traffic next to GroupNorm/SiLU.
  bool free_prev_in = false;
  bool free_prev_out = false;
};

Traffic memory_traffic(const LayerWork& w, ExecMode mode, const Boundaries& b, const HwConfig& cfg);
std::uint64_t stall_cycles(std::uint64_t traffic_bytes, std::uint64_t compute, const HwConfig& cfg);
std::uint64_t encoder_cycles(std::uint64_t elements, const HwConfig& cfg);
std::uint64_t vpu_cycles(std::span<const std::uint64_t> op_elements, const HwConfig& cfg);

struct LayerCost {
  int step = 0;
  NodeId node = 0;
  std::size_t layer = 0;
  ExecMode mode = ExecMode::Direct;
  MacCounts macs;
  std::uint64_t slots = 0;
  std::uint64_t compute_cycles = 0;
  std::uint64_t stall_cycles = 0;
  std::uint64_t enc_cycles = 0;
  std::uint64_t vpu_cycles = 0;
  std::uint64_t defo_cycles = 0;
  std::uint64_t total_cycles = 0;
  Traffic traffic;
  std::uint64_t bops = 0;
  double energy = 0.0;
};

// Cost of one layer at one step. `defo_updates` counts Defo table writes
// charged to this layer (one e_add each).
LayerCost evaluate_layer(const LayerWork& w, ExecMode mode, const Boundaries& b,
                         std::span<const std::uint64_t> vpu_ops, bool defo_unit,
                         int defo_updates, const HwConfig& cfg);

// Per-step, per-layer work of a quantized trace plus the graph bookkeeping
// needed to cost any plan over it.
class Workload {
 public:
  explicit Workload(const QuantizedTrace& qt);

  const LayerGraph& graph() const { return graph_; }
  int step_count() const { return steps_; }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<NodeId>& layers() const { return layers_; }
  const LayerWork& at(int step, std::size_t layer) const;
  // Linear layer each node's VPU work is charged to.
  std::size_t owner(NodeId node) const { return owner_.at(node); }

  struct StepLayout {
    std::vector<Boundaries> boundaries;
    std::vector<std::vector<std::uint64_t>> vpu_ops;
  };
  // Boundaries and VPU ops of every layer for one step's modes.
  StepLayout layout(std::span<const ExecMode> modes, bool bypass, bool sign_mask) const;

 private:
  LayerGraph graph_;
  int steps_ = 0;
  std::vector<NodeId> layers_;
  std::vector<std::size_t> owner_;
  std::vector<LayerWork> work_;  // [step - 1][layer]
};

struct RunTotals {
  std::uint64_t cycles = 0;
  std::uint64_t compute_cycles = 0;
  std::uint64_t stall_cycles = 0;
  std::uint64_t enc_cycles = 0;
  std::uint64_t vpu_cycles = 0;
  std::uint64_t defo_cycles = 0;
  std::uint64_t slots = 0;
  Traffic traffic;
  std::uint64_t bops = 0;
  double energy = 0.0;

  void add(const LayerCost& c);
};

struct RunReport {
  std::string variant;
  std::string preset;
  HwConfig config;
  ExecPlan plan;
  std::vector<LayerCost> rows;  // step-major, layer order within a step
  RunTotals totals;
  std::optional<DefoTable> table;
  std::vector<bool> decisions;  // Defo use_diff per layer, when applicable

  RunTotals step_totals(int step) const;
  RunTotals layer_totals(std::size_t layer) const;
  std::string to_csv(const LayerGraph& g, const std::string& digest = "") const;
  nlohmann::json summary(const LayerGraph& g) const;
};

// Per-layer, per-step cheaper mode, each layer costed on the same basis Defo
// uses: differences under the all-difference materialization, the fallback
// mode under the all-fallback one. Step 1 always uses the fallback.
ExecPlan ideal_plan(const Workload& w, const HwConfig& cfg, bool plus);

RunReport run_sim(const Workload& w, Variant v, const HwConfig& cfg);
// Fixed plan, no Defo unit involvement.
RunReport run_plan(const Workload& w, const ExecPlan& plan, const HwConfig& cfg, bool bypass,
                   const std::string& label);

struct CompareRow {
  Preset preset;
  Variant variant;
  RunTotals totals;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  Agreement defo_accuracy;          // static Ditto vs ideal
  Agreement defo_plus_accuracy;     // static Ditto+ vs ideal+
  std::uint64_t all_temporal_traffic = 0;

  nlohmann::json to_json() const;
  std::string to_csv(const std::string& digest = "") const;
};

// Runs every preset with its matching variant (concurrently). `hw_patch`
// holds HwConfig keys applied on top of each preset.
CompareResult compare_presets(const Workload& w, std::uint64_t lane_divisor,
                              const nlohmann::json& hw_patch = nlohmann::json::object());

}  // namespace ditto
