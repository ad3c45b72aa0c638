#include <doctest.h>

#include <cmath>
#include <random>

#include "ditto/diffengine.hpp"
#include "ditto/hwsim.hpp"
#include "oracles.hpp"

using namespace ditto;

namespace {

constexpr int kCases = 1200;

struct Sample {
  std::vector<std::int16_t> delta;
  std::vector<std::uint32_t> macs;
};

Sample random_sample(std::mt19937& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 300);
  std::uniform_int_distribution<int> cls(0, 2), low(1, 15), full(16, 254), fan(1, 40);
  Sample s;
  s.delta.resize(len(rng));
  s.macs.resize(s.delta.size());
  for (std::size_t i = 0; i < s.delta.size(); ++i) {
    const int c = cls(rng);
    const int mag = c == 0 ? 0 : c == 1 ? low(rng) : full(rng);
    s.delta[i] = static_cast<std::int16_t>(rng() % 2 ? mag : -mag);
    s.macs[i] = static_cast<std::uint32_t>(fan(rng));
  }
  return s;
}

MacCounts counts_of(const Sample& s) {
  const auto cd = ClassifiedDiff::from_dense({s.delta.size()}, s.delta, QuantScale(1.0));
  return weighted_counts(cd, s.macs);
}

LayerCost cost(const MacCounts& m, const HwConfig& cfg) {
  LayerWork w;
  w.a_elements = 64;
  w.out_elements = 64;
  w.dense_macs = m.total();
  w.has_temporal = true;
  w.temporal = m;
  w.temporal_encoded = 64;
  return evaluate_layer(w, ExecMode::TemporalDiff, Boundaries{}, {}, false, 0, cfg);
}

std::vector<HwConfig> monotone_configs() {
  return {preset_config(Preset::Ditto, 64), preset_config(Preset::Ditto, 1000), preset_config(Preset::DittoPlus, 64)};
}

}  // namespace

TEST_CASE("promoting an element never makes a layer cheaper") {
  std::mt19937 rng(101);
  std::uniform_int_distribution<int> low(1, 15), full(16, 254);
  int checked = 0;
  while (checked < kCases) {
    const Sample s = random_sample(rng);
    Sample p = s;
    const std::size_t i = rng() % p.delta.size();
    const int mag = std::abs(p.delta[i]);
    if (mag > 15) continue;
    p.delta[i] = static_cast<std::int16_t>(mag == 0 ? low(rng) : full(rng));
    const MacCounts a = counts_of(s), b = counts_of(p);
    CHECK(bops(b) >= bops(a));
    for (const HwConfig& cfg : monotone_configs()) {
      const LayerCost ca = cost(a, cfg), cb = cost(b, cfg);
      CHECK(cb.slots >= ca.slots);
      CHECK(cb.compute_cycles >= ca.compute_cycles);
      CHECK(cb.energy >= ca.energy);
    }
    ++checked;
  }
}

TEST_CASE("adding zeros never increases compute cycles") {
  std::mt19937 rng(103);
  std::vector<HwConfig> cfgs = monotone_configs();
  cfgs.push_back(preset_config(Preset::CambriconD, 64));
  for (int n = 0; n < kCases; ++n) {
    const Sample s = random_sample(rng);
    Sample z = s;
    const std::size_t k = 1 + rng() % z.delta.size();
    for (std::size_t j = 0; j < k; ++j) z.delta[rng() % z.delta.size()] = 0;
    const MacCounts a = counts_of(s), b = counts_of(z);
    CHECK(bops(b) <= bops(a));
    for (const HwConfig& cfg : cfgs)
      CHECK(compute_cycles(b, ExecMode::TemporalDiff, cfg) <= compute_cycles(a, ExecMode::TemporalDiff, cfg));
  }
}

TEST_CASE("classes partition the difference range") {
  for (int d = -254; d <= 254; ++d) {
    const DiffClass c = classify_value(d);
    const int m = std::abs(d);
    CHECK((c == DiffClass::Zero) == (m == 0));
    CHECK((c == DiffClass::Low) == (m >= 1 && m <= 15));
    CHECK((c == DiffClass::Full) == (m >= 16));
    CHECK(bit_requirement(d) <= (c == DiffClass::Low ? 4 : 8));
  }
}

TEST_CASE("sign-magnitude encoding is lossless") {
  std::vector<std::int16_t> all;
  for (int d = -254; d <= 254; ++d) all.push_back(static_cast<std::int16_t>(d));
  const auto cd = ClassifiedDiff::from_dense({all.size()}, all, QuantScale(1.0));
  CHECK(cd.elements().size() == all.size() - 1);
  for (const auto& e : cd.elements()) {
    CHECK(e.value() == all[e.index]);
    CHECK(e.mag_lo < 16);
    CHECK(e.mag_hi < 16);
    CHECK(e.cls == classify_value(e.value()));
  }
  CHECK(cd.dense().values == all);
}

TEST_CASE("temporal differences reconstruct the current step") {
  std::mt19937 rng(107);
  for (int n = 0; n < kCases; ++n) {
    const auto prev = oracle::random_q({1 + rng() % 40}, rng);
    const auto cur = oracle::random_q(prev.dims(), rng);
    const auto d = temporal_diff(cur, prev).dense();
    for (std::size_t i = 0; i < cur.size(); ++i) CHECK(prev[i] + d.values[i] == cur[i]);
  }
}

TEST_CASE("quantize is idempotent on its own grid") {
  std::mt19937 rng(109);
  std::uniform_real_distribution<float> u(-5.f, 5.f);
  for (int n = 0; n < kCases; ++n) {
    std::vector<float> x(1 + rng() % 32);
    for (auto& v : x) v = u(rng);
    const QuantScale s = calibrate_scale(x);
    const QuantTensor q = quantize(Tensor({x.size()}, x), s);
    CHECK(quantize(dequantize(q), s) == q);
  }
}
