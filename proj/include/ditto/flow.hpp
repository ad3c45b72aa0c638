#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditto/diffengine.hpp"
#include "ditto/graph.hpp"

namespace ditto {

enum class Domain : std::uint8_t { Value, Diff };

const char* to_string(Domain d);

// Domain of every node's output tensor plus the boundary operations needed
// around difference-domain regions. All consumers of a tensor see the same
// domain, so an edge's domain is its producer's.
struct MaterializationPlan {
  std::vector<Domain> tensor_domain;
  std::vector<bool> diff_node;  // node computes on differences
  std::vector<bool> needs_diff_calc;
  std::vector<bool> needs_summation;

  Domain edge_domain(const Edge& e) const { return tensor_domain[e.producer]; }
  std::size_t diff_calc_count() const;
  std::size_t summation_count() const;
  std::size_t boundary_count() const { return diff_calc_count() + summation_count(); }
};

struct AnalysisOptions {
  // Per node id; entries for non-linear nodes are ignored. Empty means every
  // linear node runs TemporalDiff.
  std::vector<ExecMode> modes;
  // Let difference regions flow through Add nodes. Off: every linear layer
  // materializes its own input and output.
  bool bypass = true;
};

MaterializationPlan analyze_graph(const LayerGraph& g, const AnalysisOptions& opts = {});

// Throws InvariantViolation if a difference tensor reaches a node that cannot
// consume it.
void check_plan_legal(const LayerGraph& g, const MaterializationPlan& plan);

inline constexpr std::size_t kDefoEntries = 512;
inline constexpr std::uint64_t kDefoCycleMax = 0xFFFF;

struct DefoEntry {
  std::uint16_t cycle_act = 0;
  std::uint16_t cycle_diff = 0;
  bool use_diff = false;
  bool has_act = false;
  bool has_diff = false;

  // 33-bit hardware layout: use_diff at bit 32, cycle_act in [31:16],
  // cycle_diff in [15:0].
  std::uint64_t packed() const;
  bool operator==(const DefoEntry&) const = default;
};

class DefoTable {
 public:
  explicit DefoTable(std::size_t layers);

  std::size_t size() const { return entries_.size(); }
  const DefoEntry& entry(std::size_t layer) const;
  std::span<const DefoEntry> entries() const { return entries_; }

  // Step 1 writes cycle_act, step 2 writes cycle_diff; values saturate.
  void record(int step, std::size_t layer, std::uint64_t cycles);
  void set_use_diff(std::size_t layer, bool use_diff);

  bool operator==(const DefoTable&) const = default;

 private:
  std::vector<DefoEntry> entries_;
};

DefoTable record_step_cycles(DefoTable table, int step, std::size_t layer, std::uint64_t cycles);
// use_diff = cycle_diff < cycle_act; ties keep original activations.
std::vector<bool> decide_flow(const DefoTable& table);

enum class Variant : std::uint8_t {
  Direct,
  AllTemporal,
  AllTemporalNoBypass,
  AllSpatial,
  Ditto,
  DittoPlus,
  DynamicDitto,
  Ideal,
  IdealPlus,
  CambriconD,
};

const char* to_string(Variant v);
std::optional<Variant> variant_from_string(const std::string& name);
bool uses_defo(Variant v);
bool uses_bypass(Variant v);

// Per linear layer (in graph.linear_nodes() order) for one step. Steps count
// executions: step 1 is the first denoising step.
// `switched` marks DynamicDitto layers that have fallen back to Direct.
std::vector<ExecMode> plan_for_step(int step, Variant v, const DefoTable& table,
                                    const std::vector<bool>& switched = {});

struct ExecPlan {
  std::vector<NodeId> layers;
  std::vector<std::vector<ExecMode>> steps;  // [step - 1][layer index]

  ExecMode mode(int step, std::size_t layer) const;
  std::size_t step_count() const { return steps.size(); }
  // Per-node mode vector for analyze_graph.
  std::vector<ExecMode> node_modes(int step, std::size_t node_count) const;
  bool operator==(const ExecPlan&) const = default;
};

// Fraction of (layer, step >= 3) pairs on which two plans agree.
struct Agreement {
  std::uint64_t matches = 0;
  std::uint64_t total = 0;
  double fraction() const { return total ? static_cast<double>(matches) / total : 1.0; }
};
Agreement plan_agreement(const ExecPlan& a, const ExecPlan& b);

nlohmann::json graph_to_json(const LayerGraph& g);
nlohmann::json materialization_to_json(const LayerGraph& g, const MaterializationPlan& plan);
nlohmann::json exec_plan_to_json(const LayerGraph& g, const ExecPlan& plan);

}  // namespace ditto
