#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "ditto/flow.hpp"
#include "ditto/hwsim.hpp"
#include "ditto/refmodel.hpp"

namespace ditto {

struct QuantConfig {
  int bits = 8;
  int calibration_step = 1;
  bool operator==(const QuantConfig&) const = default;
};

struct ExperimentConfig {
  ModelSpec model = ModelSpec::toy_unet();
  SamplerConfig sampler;
  double alpha_first = 0.99;
  double alpha_last = 0.3;
  QuantConfig quant;
  Variant variant = Variant::Ditto;
  std::optional<Preset> preset = Preset::Ditto;
  // HwConfig keys applied on top of the preset (or the default config when
  // no preset is set).
  nlohmann::json hardware = nlohmann::json::object();
  std::uint64_t lane_divisor = 64;
  std::string output_dir = "out";

  // Rebuilds sampler.alphas from the step count and alpha endpoints.
  void sync_alphas();
  void validate() const;
  HwConfig hw_config() const;
};

// Field-by-field overlay; unknown keys anywhere throw InvalidArgument.
void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

// SHA-256 of the canonical (sorted-key, compact) JSON form.
std::string config_digest(const nlohmann::json& merged);

// DITTO_SEED as an unsigned integer, if set and well-formed.
std::optional<std::uint64_t> env_seed();

}  // namespace ditto
