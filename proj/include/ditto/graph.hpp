#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ditto/qtensor.hpp"

namespace ditto {

using NodeId = std::uint32_t;

// Matches the Defo table capacity; larger graphs cannot be scheduled.
inline constexpr std::size_t kMaxNodes = 512;

// Numeric values are the on-disk kind codes of the trace format.
enum class NodeKind : std::uint8_t {
  Input = 0,
  Const = 1,
  Conv = 2,
  FC = 3,
  AttnScore = 4,
  AttnContext = 5,
  Add = 6,
  Concat = 7,
  Split = 8,
  SiLU = 9,
  GeLU = 10,
  Softmax = 11,
  GroupNorm = 12,
  LayerNorm = 13,
  Quant = 14,
  Dequant = 15,
};

const char* to_string(NodeKind kind);
std::optional<NodeKind> node_kind_from_code(std::uint8_t code);

bool is_linear(NodeKind kind);
bool is_nonlinear(NodeKind kind);
bool is_source(NodeKind kind);

// Attribute layout per kind:
//   Conv       {kernel_h, kernel_w, stride, padding}
//   AttnScore, AttnContext {heads}
//   Softmax    {head_dim}      logits are scaled by 1/sqrt(head_dim)
//   GroupNorm  {groups}
//   Split      {offset, length} along the last axis
// Conv/FC weights are stored row-major as [kh,kw,Cin,Co] / [K,M]; a Const
// node stores its value in `weights`. `dims` is the authoritative output
// shape; linear kernels reshape into it.
struct LayerNode {
  NodeId id = 0;
  NodeKind kind = NodeKind::Input;
  std::string name;
  Shape dims;
  std::vector<NodeId> inputs;
  std::vector<std::int32_t> attrs;
  std::vector<float> weights;

  bool operator==(const LayerNode&) const = default;
};

struct Edge {
  NodeId producer;
  NodeId consumer;
};

class LayerGraph {
 public:
  NodeId add(LayerNode node);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<LayerNode>& nodes() const { return nodes_; }
  const LayerNode& node(NodeId id) const;
  LayerNode& mutable_node(NodeId id);

  std::vector<Edge> edges() const;
  std::vector<std::vector<NodeId>> consumers() const;
  // Nodes with no consumers; their outputs are the model outputs.
  std::vector<NodeId> sinks() const;
  std::vector<NodeId> linear_nodes() const;

  // Throws Capacity (> 512 nodes), CyclicGraph, InvalidArgument (fan-in,
  // dangling inputs) or ShapeMismatch (weights inconsistent with dims).
  void validate() const;
  std::vector<NodeId> topo_order() const;

  // Descriptor and operand views for a linear node.
  LinearOp linear_op(NodeId id) const;
  Shape weight_dims(NodeId id) const;
  Shape operand_dims(NodeId id, std::size_t operand) const;
  std::uint64_t parameter_count() const;

  bool operator==(const LayerGraph&) const = default;

 private:
  std::vector<LayerNode> nodes_;
};

}  // namespace ditto
