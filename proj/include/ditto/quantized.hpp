#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditto/diffengine.hpp"
#include "ditto/flow.hpp"
#include "ditto/refmodel.hpp"

namespace ditto {

// Static quantization of one linear node. Scales come from one calibration
// step (execution step 1 by default) and are reused for every step.
struct LayerQuant {
  NodeId node = 0;
  LinearOp op;
  Shape a_dims;
  Shape w_dims;
  QuantScale a_scale{1.0};
  QuantScale w_scale{1.0};
  // Conv/FC weights. Attention takes its second operand from the trace.
  std::vector<std::int8_t> weight;
  // Attention second operand depends only on constants (cross-attention).
  bool w_constant = false;
};

class QuantizedTrace {
 public:
  explicit QuantizedTrace(Trace trace, int calibration_step = 1);

  const Trace& trace() const { return trace_; }
  const LayerGraph& graph() const { return trace_.graph; }
  int step_count() const { return trace_.step_count(); }
  std::size_t layer_count() const { return layers_.size(); }
  const LayerQuant& layer(std::size_t i) const { return layers_.at(i); }
  const std::vector<NodeId>& layer_nodes() const { return ids_; }
  int calibration_step() const { return calibration_step_; }
  std::size_t layer_index(NodeId node) const;

  QuantTensor a(int step, std::size_t layer) const;
  QuantTensor w(int step, std::size_t layer) const;

 private:
  Trace trace_;
  std::vector<LayerQuant> layers_;
  std::vector<NodeId> ids_;
  int calibration_step_ = 1;
};

// Nodes whose value never changes between steps (reachable only from Const).
std::vector<bool> constant_nodes(const LayerGraph& g);

struct ExactnessReport {
  std::uint64_t checks = 0;
  std::uint64_t mismatches = 0;
  std::vector<std::string> failures;  // first few, for diagnostics

  bool exact() const { return checks > 0 && mismatches == 0; }
  nlohmann::json to_json() const;
};

// Compares every difference-domain path against direct_linear at every step:
// chained temporal differences (steps >= 2), the two-term attention
// decomposition, constant-context cross-attention, and spatial differences.
ExactnessReport verify_exactness(const QuantizedTrace& qt);

// Runs the quantized model over the trace's model inputs, executing each
// linear layer in the mode given by `plan` and keeping its own previous-step
// operands and accumulators. Returns every node output per step.
std::vector<std::vector<Tensor>> execute_quantized(const QuantizedTrace& qt, const ExecPlan& plan);

}  // namespace ditto
