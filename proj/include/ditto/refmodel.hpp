#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ditto/graph.hpp"
#include "ditto/tensor.hpp"

namespace ditto {

// splitmix64; also drives Box-Muller normals so traces are portable.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next();
  double uniform();  // [0, 1)
  double normal();

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

enum class ModelKind : std::uint8_t { ToyUnet, ToyDit };

const char* to_string(ModelKind k);
std::optional<ModelKind> model_kind_from_string(const std::string& name);

inline constexpr std::uint64_t kMaxParameters = std::uint64_t{1} << 20;

struct ModelSpec {
  ModelKind kind = ModelKind::ToyUnet;
  int channels = 8;      // toy-unet channels, toy-dit width
  int depth = 2;
  int heads = 1;
  int spatial = 8;       // toy-unet H = W, toy-dit tokens per frame
  int in_channels = 4;   // toy-dit: patch feature size
  int frames = 1;        // toy-dit only
  int context_tokens = 4;  // toy-dit only
  std::uint64_t weight_seed = 1;

  static ModelSpec toy_unet();
  static ModelSpec toy_dit();
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

LayerGraph build_model(const ModelSpec& spec);

// Every node's output for one model input. Non-finite values throw NonFinite
// naming the node.
std::vector<Tensor> forward(const LayerGraph& g, const Tensor& x);
// Float evaluation of one non-source node given every earlier output.
Tensor evaluate_node(const LayerGraph& g, NodeId id, const std::vector<Tensor>& outputs);

std::vector<double> linear_alphas(int steps, double first = 0.99, double last = 0.3);

struct SamplerConfig {
  int steps = 20;
  std::uint64_t seed = 3;
  // Cumulative alpha for t = 1..T (index t - 1); strictly decreasing in t,
  // so the executed sequence T..1 sees increasing values.
  std::vector<double> alphas = linear_alphas(20);
  // Caps |x_{t-1} - x_t| at this fraction of |x_t|; 0 disables.
  double similarity_bound = 0.05;
  // From this execution step on, x is redrawn as fresh noise each step.
  int collapse_step = 0;
  // Forces the model output to zero at this execution step (0: never; -1: always).
  int zero_output_step = 0;

  static SamplerConfig make(int steps, std::uint64_t seed);
  void validate() const;
};

// Node outputs at every execution step. Step 1 is the first executed
// (t = T); the model input at step s is the Input node's output.
struct Trace {
  LayerGraph graph;
  std::vector<std::vector<Tensor>> steps;

  int step_count() const { return static_cast<int>(steps.size()); }
  const Tensor& output(int step, NodeId node) const;
  const Tensor& operand(int step, NodeId node, std::size_t index) const;
  bool operator==(const Trace&) const = default;
};

Trace run_sampler(const LayerGraph& g, const SamplerConfig& cfg);

inline constexpr char kTraceMagic[4] = {'D', 'I', 'T', 'T'};
inline constexpr std::uint16_t kTraceVersion = 1;

std::vector<std::uint8_t> serialize_trace(const Trace& trace);
Trace deserialize_trace(std::span<const std::uint8_t> bytes);
void export_trace(const Trace& trace, const std::filesystem::path& path);
Trace import_trace(const std::filesystem::path& path);

}  // namespace ditto
