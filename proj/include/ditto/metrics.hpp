#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditto/quantized.hpp"
#include "ditto/refmodel.hpp"

namespace ditto {

// dot(a, b) / (|a| |b|). Returns nullopt when either vector is all zero.
std::optional<double> cosine_defined(std::span<const float> a, std::span<const float> b);
// Same, with the undefined case reported as 0.
double cosine(std::span<const float> a, std::span<const float> b);

// Running arithmetic mean over defined samples; undefined ones are counted.
struct MeanAccumulator {
  double sum = 0.0;
  std::uint64_t count = 0;
  std::uint64_t undefined = 0;

  void add(std::optional<double> v);
  void merge(const MeanAccumulator& o);
  std::optional<double> mean() const;
};

struct LayerSimilarity {
  NodeId node = 0;
  std::string name;
  // temporal[s - 1]: input cosine between steps s and s + 1.
  std::vector<std::optional<double>> temporal;
  // Per step: mean cosine of adjacent rows / adjacent sliding windows. Window
  // series is empty for non-conv layers.
  std::vector<std::optional<double>> spatial_row;
  std::vector<std::optional<double>> spatial_window;

  MeanAccumulator temporal_mean() const;
  MeanAccumulator spatial_row_mean() const;
  MeanAccumulator spatial_window_mean() const;
};

struct SimilarityReport {
  std::vector<LayerSimilarity> layers;
  MeanAccumulator temporal;
  MeanAccumulator spatial_row;
  MeanAccumulator spatial_window;
  std::uint64_t zero_vectors = 0;  // cosines excluded because a vector was all zero
};

SimilarityReport similarity_report(const Trace& trace);

struct LayerRange {
  NodeId node = 0;
  std::string name;
  std::vector<double> activation;  // [step - 1], dequantized max - min
  std::vector<double> diff;        // [step - 2], empty for a single-step trace

  double mean_activation() const;
  std::optional<double> mean_diff() const;
  // mean activation range / mean diff range; nullopt when the latter is 0.
  std::optional<double> ratio() const;
};

struct RangeReport {
  std::vector<LayerRange> layers;
  // Layers whose ratio is defined and greater than 1, over all layers.
  double fraction_narrower() const;
};

double value_range(std::span<const float> v);
RangeReport range_report(const QuantizedTrace& qt);

// Bit-width buckets: 0 (zero), 1-4, 5-8 magnitude bits.
struct BucketCounts {
  std::array<std::uint64_t, 3> n{};

  void add_value(int v);
  void add(const BucketCounts& o);
  std::uint64_t total() const { return n[0] + n[1] + n[2]; }
  double fraction(std::size_t bucket) const;
};

BucketCounts bucket_counts(const ClassifiedDiff& diff);
BucketCounts bucket_counts(const QuantTensor& activations);
// Base rows count as activations, the rest as row differences.
BucketCounts bucket_counts(const SpatialDiff& sd);

struct BitwidthHistogram {
  BucketCounts activations;
  BucketCounts temporal;
  BucketCounts spatial;
};

// Activations and spatial diffs over every step, temporal diffs over steps >= 2.
BitwidthHistogram bitwidth_histogram(const QuantizedTrace& qt);

struct StepBops {
  int step = 0;
  std::uint64_t direct = 0;
  std::uint64_t spatial = 0;
  std::optional<std::uint64_t> temporal;  // absent at step 1
};

struct RelativeBops {
  std::vector<StepBops> steps;
  // Aggregates over steps >= 2 so all three modes see the same work.
  std::uint64_t direct = 0;
  std::uint64_t spatial = 0;
  std::uint64_t temporal = 0;

  double spatial_ratio() const;
  double temporal_ratio() const;
};

RelativeBops relative_bops(const QuantizedTrace& qt);

// Long-format CSV (model, layer, step, metric, value) and a JSON summary over
// all four analyses.
struct MotivationReport {
  std::string model;
  SimilarityReport similarity;
  RangeReport range;
  BitwidthHistogram histogram;
  RelativeBops bops;

  std::string similarity_csv(const std::string& digest = "") const;
  std::string range_csv(const std::string& digest = "") const;
  std::string histogram_csv(const std::string& digest = "") const;
  std::string bops_csv(const std::string& digest = "") const;
  nlohmann::json summary() const;
};

MotivationReport analyze_trace(const QuantizedTrace& qt, const std::string& model = "trace");

}  // namespace ditto
