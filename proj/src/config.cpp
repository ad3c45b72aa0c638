#include "ditto/config.hpp"

#include <cstdlib>
#include <string>

#include "ditto/error.hpp"
#include "ditto/report_io.hpp"

namespace ditto {

namespace {

[[noreturn]] void unknown(const std::string& section, const std::string& key) {
  throw Error(ErrorCode::InvalidArgument, "unknown config key '" + section + key + "'");
}

void require_object(const nlohmann::json& j, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, what + " must be a JSON object");
}

void apply_model(ModelSpec& m, const nlohmann::json& j) {
  require_object(j, "model");
  if (j.contains("kind")) {
    const auto k = model_kind_from_string(j["kind"].get<std::string>());
    if (!k) throw Error(ErrorCode::InvalidArgument, "unknown model '" + j["kind"].get<std::string>() + "'");
    m = *k == ModelKind::ToyDit ? ModelSpec::toy_dit() : ModelSpec::toy_unet();
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") continue;
    else if (key == "channels") m.channels = v.get<int>();
    else if (key == "depth") m.depth = v.get<int>();
    else if (key == "heads") m.heads = v.get<int>();
    else if (key == "spatial") m.spatial = v.get<int>();
    else if (key == "in_channels") m.in_channels = v.get<int>();
    else if (key == "frames") m.frames = v.get<int>();
    else if (key == "context_tokens") m.context_tokens = v.get<int>();
    else if (key == "weight_seed") m.weight_seed = v.get<std::uint64_t>();
    else unknown("model.", key);
  }
}

void apply_sampler(ExperimentConfig& c, const nlohmann::json& j) {
  require_object(j, "sampler");
  SamplerConfig& s = c.sampler;
  for (const auto& [key, v] : j.items()) {
    if (key == "steps") s.steps = v.get<int>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else if (key == "similarity_bound") s.similarity_bound = v.get<double>();
    else if (key == "collapse_step") s.collapse_step = v.get<int>();
    else if (key == "zero_output_step") s.zero_output_step = v.get<int>();
    else if (key == "alpha_first") c.alpha_first = v.get<double>();
    else if (key == "alpha_last") c.alpha_last = v.get<double>();
    else unknown("sampler.", key);
  }
}

void apply_quant(QuantConfig& q, const nlohmann::json& j) {
  require_object(j, "quantization");
  for (const auto& [key, v] : j.items()) {
    if (key == "bits") q.bits = v.get<int>();
    else if (key == "calibration_step") q.calibration_step = v.get<int>();
    else unknown("quantization.", key);
  }
}

}  // namespace

void ExperimentConfig::sync_alphas() {
  if (sampler.steps >= 1) sampler.alphas = linear_alphas(sampler.steps, alpha_first, alpha_last);
}

void ExperimentConfig::validate() const {
  model.validate();
  sampler.validate();
  if (quant.bits != 8) throw Error(ErrorCode::InvalidArgument, "only 8-bit quantization is supported");
  if (quant.calibration_step < 1 || quant.calibration_step > sampler.steps)
    throw Error(ErrorCode::InvalidArgument, "calibration_step must lie in [1, steps]");
  if (lane_divisor == 0) throw Error(ErrorCode::InvalidArgument, "lane_divisor must be >= 1");
  if (output_dir.empty()) throw Error(ErrorCode::InvalidArgument, "output_dir must not be empty");
  hw_config();
}

HwConfig ExperimentConfig::hw_config() const {
  HwConfig base = preset ? preset_config(*preset, lane_divisor) : HwConfig{};
  return hw_config_from_json(hardware, base);
}

void apply_config_json(ExperimentConfig& cfg, const nlohmann::json& j) {
  require_object(j, "config");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "model") apply_model(cfg.model, v);
      else if (key == "sampler") apply_sampler(cfg, v);
      else if (key == "quantization") apply_quant(cfg.quant, v);
      else if (key == "variant") {
        const auto var = variant_from_string(v.get<std::string>());
        if (!var) throw Error(ErrorCode::InvalidArgument, "unknown variant '" + v.get<std::string>() + "'");
        cfg.variant = *var;
      } else if (key == "preset") {
        if (v.is_null()) {
          cfg.preset.reset();
        } else {
          const auto p = preset_from_string(v.get<std::string>());
          if (!p) throw Error(ErrorCode::InvalidArgument, "unknown preset '" + v.get<std::string>() + "'");
          cfg.preset = *p;
        }
      } else if (key == "hardware") {
        require_object(v, "hardware");
        cfg.hardware.update(v, true);
      } else if (key == "lane_divisor") cfg.lane_divisor = v.get<std::uint64_t>();
      else if (key == "output_dir") cfg.output_dir = v.get<std::string>();
      else if (key == "seed") cfg.sampler.seed = v.get<std::uint64_t>();
      else unknown("", key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("bad config value: ") + e.what());
  }
  cfg.sync_alphas();
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  const ModelSpec& m = c.model;
  return {{"model",
           {{"kind", to_string(m.kind)},
            {"channels", m.channels},
            {"depth", m.depth},
            {"heads", m.heads},
            {"spatial", m.spatial},
            {"in_channels", m.in_channels},
            {"frames", m.frames},
            {"context_tokens", m.context_tokens},
            {"weight_seed", m.weight_seed}}},
          {"sampler",
           {{"steps", c.sampler.steps},
            {"seed", c.sampler.seed},
            {"similarity_bound", c.sampler.similarity_bound},
            {"collapse_step", c.sampler.collapse_step},
            {"zero_output_step", c.sampler.zero_output_step},
            {"alpha_first", c.alpha_first},
            {"alpha_last", c.alpha_last}}},
          {"quantization", {{"bits", c.quant.bits}, {"calibration_step", c.quant.calibration_step}}},
          {"variant", to_string(c.variant)},
          {"preset", c.preset ? nlohmann::json(to_string(*c.preset)) : nlohmann::json()},
          {"hardware", c.hardware},
          {"lane_divisor", c.lane_divisor},
          {"output_dir", c.output_dir}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  apply_config_json(cfg, j);
  return cfg;
}

std::string config_digest(const nlohmann::json& merged) { return sha256_hex(merged.dump()); }

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("DITTO_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') return std::nullopt;
  return static_cast<std::uint64_t>(v);
}

}  // namespace ditto
