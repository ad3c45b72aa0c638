#include <doctest.h>

#include <cmath>
#include <random>

#include "ditto/error.hpp"
#include "ditto/metrics.hpp"
#include "oracles.hpp"

using namespace ditto;

namespace {

double long_cosine(const std::vector<float>& a, const std::vector<float>& b) {
  long double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += static_cast<long double>(a[i]) * b[i];
    na += static_cast<long double>(a[i]) * a[i];
    nb += static_cast<long double>(b[i]) * b[i];
  }
  return static_cast<double>(d / std::sqrt(na * nb));
}

std::vector<float> normals(std::mt19937& rng, std::size_t n) {
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Input [1, 3, 2] feeding a 1x1 conv; pixels are (1,0), (1,0), (0,1).
Trace pixel_trace() {
  Trace t;
  LayerNode in;
  in.kind = NodeKind::Input;
  in.name = "x";
  in.dims = {1, 3, 2};
  t.graph.add(in);
  LayerNode conv;
  conv.kind = NodeKind::Conv;
  conv.name = "conv";
  conv.dims = {1, 3, 1};
  conv.inputs = {0};
  conv.attrs = {1, 1, 1, 0};
  conv.weights = {1.f, 1.f};
  t.graph.add(conv);
  const Tensor x({1, 3, 2}, {1, 0, 1, 0, 0, 1});
  const Tensor y({1, 3, 1}, {1, 1, 1});
  t.steps = {{x, y}, {x, y}};
  return t;
}

const QuantizedTrace& unet_q() {
  static const QuantizedTrace q(run_sampler(build_model(ModelSpec::toy_unet()), SamplerConfig::make(6, 3)));
  return q;
}

}  // namespace

TEST_CASE("cosine trivial cases") {
  const std::vector<float> a{1, 2, 3};
  const std::vector<float> neg{-1, -2, -3};
  const std::vector<float> z{0, 0, 0};
  CHECK(cosine(a, a) == doctest::Approx(1.0));
  CHECK(cosine(a, neg) == doctest::Approx(-1.0));
  CHECK(cosine(std::vector<float>{1, 0}, std::vector<float>{0, 1}) == 0.0);
  CHECK_FALSE(cosine_defined(a, z).has_value());
  CHECK(cosine(a, z) == 0.0);
  CHECK_THROWS_AS(cosine(a, std::vector<float>{1, 2}), Error);
}

TEST_CASE("cosine is symmetric, scale invariant and matches a long accumulator") {
  std::mt19937 rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = normals(rng, 257);
    const auto b = normals(rng, 257);
    const double c = cosine(a, b);
    CHECK(c == doctest::Approx(cosine(b, a)).epsilon(1e-12));
    CHECK(c == doctest::Approx(long_cosine(a, b)).epsilon(1e-12));
    std::vector<float> scaled = a;
    for (auto& v : scaled) v *= 4.0f;
    CHECK(cosine(scaled, b) == doctest::Approx(c).epsilon(1e-12));
    CHECK(std::fabs(c) <= 1.0);
  }
}

TEST_CASE("independent random vectors are nearly orthogonal") {
  std::mt19937 rng(43);
  MeanAccumulator m;
  for (int trial = 0; trial < 100; ++trial) m.add(std::fabs(cosine(normals(rng, 4096), normals(rng, 4096))));
  CHECK(*m.mean() < 0.1);
}

TEST_CASE("mean accumulator") {
  MeanAccumulator a;
  CHECK_FALSE(a.mean().has_value());
  a.add(1.0);
  a.add(std::nullopt);
  MeanAccumulator b;
  b.add(0.0);
  a.merge(b);
  CHECK(*a.mean() == 0.5);
  CHECK(a.undefined == 1);
}

TEST_CASE("row and window similarity on a hand-built trace") {
  const auto rep = similarity_report(pixel_trace());
  REQUIRE(rep.layers.size() == 1);
  const auto& l = rep.layers[0];
  CHECK(*l.temporal.at(0) == doctest::Approx(1.0));
  CHECK(*l.spatial_row.at(0) == doctest::Approx(0.5));
  CHECK(*l.spatial_window.at(0) == doctest::Approx(0.5));
}

TEST_CASE("a frozen trace is perfectly similar and free in differences") {
  Trace t = run_sampler(build_model(ModelSpec::toy_unet()), SamplerConfig::make(3, 3));
  t.steps[1] = t.steps[0];
  t.steps[2] = t.steps[0];
  const auto sim = similarity_report(t);
  for (const auto& l : sim.layers)
    for (const auto& c : l.temporal)
      if (c) CHECK(*c == doctest::Approx(1.0));
  const QuantizedTrace q(t);
  const auto bops = relative_bops(q);
  CHECK(bops.temporal == 0);
  CHECK(bops.temporal_ratio() == 0.0);
  const auto hist = bitwidth_histogram(q);
  CHECK(hist.temporal.fraction(0) == 1.0);
  for (const auto& l : range_report(q).layers) CHECK_FALSE(l.ratio().has_value());
  CHECK(range_report(q).fraction_narrower() == 0.0);
}

TEST_CASE("bit-width buckets") {
  BucketCounts b;
  for (int v : {0, 1, -15, 16, -254, 127}) b.add_value(v);
  CHECK(b.n == std::array<std::uint64_t, 3>{1, 2, 3});

  std::vector<std::int16_t> delta(27, 0);
  for (int i = 0; i < 9; ++i) delta[static_cast<std::size_t>(i)] = static_cast<std::int16_t>(i % 2 ? -(i + 1) : i + 1);
  for (int i = 9; i < 12; ++i) delta[static_cast<std::size_t>(i)] = static_cast<std::int16_t>(100 + i);
  const auto cd = ClassifiedDiff::from_dense({27}, delta, QuantScale(1.0));
  const auto h = bucket_counts(cd);
  CHECK(h.fraction(0) == doctest::Approx(15.0 / 27));
  CHECK(h.fraction(1) == doctest::Approx(9.0 / 27));
  CHECK(h.fraction(2) == doctest::Approx(3.0 / 27));

  const QuantTensor zeros({4, 4}, std::vector<std::int8_t>(16, 0), QuantScale(1.0));
  CHECK(bucket_counts(zeros).fraction(0) == 1.0);
  CHECK(BucketCounts{}.fraction(0) == 0.0);
}

TEST_CASE("value range") {
  CHECK(value_range(std::vector<float>{}) == 0.0);
  CHECK(value_range(std::vector<float>{2.f}) == 0.0);
  CHECK(value_range(std::vector<float>{-1.f, 3.f, 0.5f}) == 4.0);
}

TEST_CASE("relative BOPs against dense MAC counts") {
  const auto& q = unet_q();
  const auto r = relative_bops(q);
  std::uint64_t dense = 0;
  for (std::size_t l = 0; l < q.layer_count(); ++l) {
    const auto& lq = q.layer(l);
    dense += 64 * total_macs(lq.op, lq.a_dims, lq.w_dims);
  }
  CHECK(r.direct == dense * static_cast<std::uint64_t>(q.step_count() - 1));
  REQUIRE(r.steps.size() == static_cast<std::size_t>(q.step_count()));
  CHECK_FALSE(r.steps[0].temporal.has_value());
  std::uint64_t t = 0;
  for (std::size_t s = 1; s < r.steps.size(); ++s) {
    CHECK(r.steps[s].direct == dense);
    t += *r.steps[s].temporal;
  }
  CHECK(t == r.temporal);
  CHECK(r.temporal_ratio() == doctest::Approx(static_cast<double>(r.temporal) / static_cast<double>(r.direct)));
  CHECK(r.temporal_ratio() < r.spatial_ratio());
  CHECK(r.spatial_ratio() < 1.0);
}

TEST_CASE("analysis report outputs") {
  const auto rep = analyze_trace(unet_q(), "toy-unet");
  const auto csv = rep.similarity_csv("abc");
  CHECK(csv.rfind("# config_digest=abc\n", 0) == 0);
  CHECK(csv.find("model,layer,step,metric,value") != std::string::npos);
  CHECK(rep.bops_csv().rfind("model,layer,step,metric,value", 0) == 0);
  const auto j = rep.summary();
  CHECK(j.at("model") == "toy-unet");
  CHECK(rep.similarity.temporal.mean().value() > rep.similarity.spatial_row.mean().value());
}
