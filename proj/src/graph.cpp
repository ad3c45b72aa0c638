#include "ditto/graph.hpp"

#include <deque>
#include <string>

#include "ditto/error.hpp"

namespace ditto {

namespace {

std::string label(const LayerNode& n) {
  return (n.name.empty() ? std::string(to_string(n.kind)) : n.name) + "#" + std::to_string(n.id);
}

std::size_t expected_fan_in_min(NodeKind k) {
  switch (k) {
    case NodeKind::Input:
    case NodeKind::Const: return 0;
    case NodeKind::AttnScore:
    case NodeKind::AttnContext:
    case NodeKind::Add:
    case NodeKind::Concat: return 2;
    default: return 1;
  }
}

std::size_t expected_fan_in_max(NodeKind k) {
  switch (k) {
    case NodeKind::Input:
    case NodeKind::Const: return 0;
    case NodeKind::AttnScore:
    case NodeKind::AttnContext: return 2;
    case NodeKind::Add:
    case NodeKind::Concat: return 16;
    default: return 1;
  }
}

Shape rows_view(const Shape& producer) {
  if (producer.empty()) return {0, 0};
  const std::size_t width = producer.back();
  return {width ? element_count(producer) / width : 0, width};
}

}  // namespace

const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Const: return "const";
    case NodeKind::Conv: return "conv";
    case NodeKind::FC: return "fc";
    case NodeKind::AttnScore: return "attn_score";
    case NodeKind::AttnContext: return "attn_context";
    case NodeKind::Add: return "add";
    case NodeKind::Concat: return "concat";
    case NodeKind::Split: return "split";
    case NodeKind::SiLU: return "silu";
    case NodeKind::GeLU: return "gelu";
    case NodeKind::Softmax: return "softmax";
    case NodeKind::GroupNorm: return "group_norm";
    case NodeKind::LayerNorm: return "layer_norm";
    case NodeKind::Quant: return "quant";
    case NodeKind::Dequant: return "dequant";
  }
  return "unknown";
}

std::optional<NodeKind> node_kind_from_code(std::uint8_t code) {
  if (code > static_cast<std::uint8_t>(NodeKind::Dequant)) return std::nullopt;
  return static_cast<NodeKind>(code);
}

bool is_linear(NodeKind kind) {
  return kind == NodeKind::Conv || kind == NodeKind::FC || kind == NodeKind::AttnScore ||
         kind == NodeKind::AttnContext;
}

bool is_nonlinear(NodeKind kind) {
  switch (kind) {
    case NodeKind::SiLU:
    case NodeKind::GeLU:
    case NodeKind::Softmax:
    case NodeKind::GroupNorm:
    case NodeKind::LayerNorm:
    case NodeKind::Quant:
    case NodeKind::Dequant: return true;
    default: return false;
  }
}

bool is_source(NodeKind kind) { return kind == NodeKind::Input || kind == NodeKind::Const; }

NodeId LayerGraph::add(LayerNode node) {
  if (nodes_.size() >= kMaxNodes)
    throw Error(ErrorCode::Capacity, "graph exceeds " + std::to_string(kMaxNodes) + " nodes");
  node.id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

const LayerNode& LayerGraph::node(NodeId id) const {
  if (id >= nodes_.size())
    throw Error(ErrorCode::InvalidArgument, "no node with id " + std::to_string(id));
  return nodes_[id];
}

LayerNode& LayerGraph::mutable_node(NodeId id) {
  if (id >= nodes_.size())
    throw Error(ErrorCode::InvalidArgument, "no node with id " + std::to_string(id));
  return nodes_[id];
}

std::vector<Edge> LayerGraph::edges() const {
  std::vector<Edge> out;
  for (const auto& n : nodes_)
    for (NodeId p : n.inputs) out.push_back({p, n.id});
  return out;
}

std::vector<std::vector<NodeId>> LayerGraph::consumers() const {
  std::vector<std::vector<NodeId>> out(nodes_.size());
  for (const auto& n : nodes_)
    for (NodeId p : n.inputs)
      if (p < nodes_.size()) out[p].push_back(n.id);
  return out;
}

std::vector<NodeId> LayerGraph::sinks() const {
  const auto cons = consumers();
  std::vector<NodeId> out;
  for (const auto& n : nodes_)
    if (cons[n.id].empty() && !is_source(n.kind)) out.push_back(n.id);
  return out;
}

std::vector<NodeId> LayerGraph::linear_nodes() const {
  std::vector<NodeId> out;
  for (NodeId id : topo_order())
    if (is_linear(nodes_[id].kind)) out.push_back(id);
  return out;
}

std::vector<NodeId> LayerGraph::topo_order() const {
  std::vector<std::size_t> pending(nodes_.size(), 0);
  for (const auto& n : nodes_) {
    for (NodeId p : n.inputs)
      if (p >= nodes_.size())
        throw Error(ErrorCode::InvalidArgument,
                    label(n) + " references missing node " + std::to_string(p));
    pending[n.id] = n.inputs.size();
  }
  const auto cons = consumers();
  std::deque<NodeId> ready;
  for (const auto& n : nodes_)
    if (pending[n.id] == 0) ready.push_back(n.id);
  std::vector<NodeId> order;
  while (!ready.empty()) {
    const NodeId id = ready.front();
    ready.pop_front();
    order.push_back(id);
    for (NodeId c : cons[id]) {
      // Multi-edges (same producer twice) decrement once per edge.
      if (--pending[c] == 0) ready.push_back(c);
    }
  }
  if (order.size() != nodes_.size())
    throw Error(ErrorCode::CyclicGraph, "graph contains a cycle");
  return order;
}

void LayerGraph::validate() const {
  if (nodes_.size() > kMaxNodes)
    throw Error(ErrorCode::Capacity, "graph has " + std::to_string(nodes_.size()) +
                                         " nodes; at most " + std::to_string(kMaxNodes) +
                                         " are supported");
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].id != i)
      throw Error(ErrorCode::InvalidArgument, "node ids must equal their position");
  topo_order();
  for (const auto& n : nodes_) {
    if (n.inputs.size() < expected_fan_in_min(n.kind) ||
        n.inputs.size() > expected_fan_in_max(n.kind))
      throw Error(ErrorCode::InvalidArgument,
                  label(n) + ": fan-in " + std::to_string(n.inputs.size()) +
                      " inconsistent with kind " + to_string(n.kind));
    if (n.dims.empty() || n.dims.size() > 4 || element_count(n.dims) == 0)
      throw Error(ErrorCode::ShapeMismatch, label(n) + ": output dims must have rank 1..4");
    switch (n.kind) {
      case NodeKind::Const:
        if (n.weights.size() != element_count(n.dims))
          throw Error(ErrorCode::ShapeMismatch, label(n) + ": constant value size mismatch");
        break;
      case NodeKind::Conv:
      case NodeKind::FC:
      case NodeKind::AttnScore:
      case NodeKind::AttnContext: {
        const LinearOp op = linear_op(n.id);
        const Shape a = operand_dims(n.id, 0);
        const Shape w = weight_dims(n.id);
        if (!n.weights.empty() || !op.is_attention())
          if (n.weights.size() != element_count(w))
            throw Error(ErrorCode::ShapeMismatch,
                        label(n) + ": expected " + std::to_string(element_count(w)) +
                            " weights, got " + std::to_string(n.weights.size()));
        if (element_count(output_shape(op, a, w)) != element_count(n.dims))
          throw Error(ErrorCode::ShapeMismatch, label(n) + ": dims " + shape_string(n.dims) +
                                                    " disagree with operands");
        break;
      }
      case NodeKind::Add:
        for (NodeId p : n.inputs)
          if (element_count(nodes_[p].dims) != element_count(n.dims))
            throw Error(ErrorCode::ShapeMismatch, label(n) + ": operand sizes differ");
        break;
      case NodeKind::Split:
        if (n.attrs.size() != 2 || n.attrs[0] < 0 || n.attrs[1] < 1 ||
            static_cast<std::size_t>(n.attrs[0] + n.attrs[1]) > nodes_[n.inputs[0]].dims.back())
          throw Error(ErrorCode::InvalidArgument, label(n) + ": bad split range");
        break;
      case NodeKind::GroupNorm:
        if (n.attrs.size() != 1 || n.attrs[0] < 1 ||
            n.dims.back() % static_cast<std::size_t>(n.attrs[0]) != 0)
          throw Error(ErrorCode::InvalidArgument, label(n) + ": channels not divisible by groups");
        break;
      default: break;
    }
  }
}

LinearOp LayerGraph::linear_op(NodeId id) const {
  const LayerNode& n = node(id);
  switch (n.kind) {
    case NodeKind::Conv:
      if (n.attrs.size() != 4)
        throw Error(ErrorCode::InvalidArgument, label(n) + ": conv needs {kh,kw,stride,pad}");
      return LinearOp::conv2d(n.attrs[0], n.attrs[1], n.attrs[2], n.attrs[3]);
    case NodeKind::FC: return LinearOp::matmul();
    case NodeKind::AttnScore:
    case NodeKind::AttnContext: {
      const int heads = n.attrs.empty() ? 1 : n.attrs[0];
      return n.kind == NodeKind::AttnScore ? LinearOp::attn_score(heads)
                                           : LinearOp::attn_context(heads);
    }
    default:
      throw Error(ErrorCode::InvalidArgument, label(n) + " is not a linear node");
  }
}

Shape LayerGraph::operand_dims(NodeId id, std::size_t operand) const {
  const LayerNode& n = node(id);
  if (operand >= n.inputs.size())
    throw Error(ErrorCode::InvalidArgument, label(n) + ": no operand " + std::to_string(operand));
  const Shape& src = node(n.inputs[operand]).dims;
  switch (n.kind) {
    case NodeKind::Conv: return src;
    case NodeKind::FC: return rows_view(src);
    case NodeKind::AttnScore: return rows_view(src);
    case NodeKind::AttnContext: return operand == 0 ? src : rows_view(src);
    default:
      throw Error(ErrorCode::InvalidArgument, label(n) + " is not a linear node");
  }
}

Shape LayerGraph::weight_dims(NodeId id) const {
  const LayerNode& n = node(id);
  switch (n.kind) {
    case NodeKind::Conv: {
      const Shape a = operand_dims(id, 0);
      if (n.attrs.size() != 4 || a.size() != 3)
        throw Error(ErrorCode::ShapeMismatch, label(n) + ": conv input must be [H,W,C]");
      return {static_cast<std::size_t>(n.attrs[0]), static_cast<std::size_t>(n.attrs[1]), a[2],
              n.dims.back()};
    }
    case NodeKind::FC: return {operand_dims(id, 0)[1], n.dims.back()};
    case NodeKind::AttnScore:
    case NodeKind::AttnContext: return operand_dims(id, 1);
    default:
      throw Error(ErrorCode::InvalidArgument, label(n) + " is not a linear node");
  }
}

std::uint64_t LayerGraph::parameter_count() const {
  std::uint64_t total = 0;
  for (const auto& n : nodes_)
    if (n.kind == NodeKind::Conv || n.kind == NodeKind::FC) total += n.weights.size();
  return total;
}

}  // namespace ditto
