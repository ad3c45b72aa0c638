#include <doctest.h>

#include <random>

#include "ditto/diffengine.hpp"
#include "ditto/error.hpp"
#include "oracles.hpp"

using namespace ditto;

namespace {

QuantTensor qt(Shape d, std::vector<int> v, double s = 1.0) {
  return QuantTensor(std::move(d), std::vector<std::int8_t>(v.begin(), v.end()), QuantScale(s));
}

// The 27-element worked example: 15 zero, 9 low, 3 full differences.
std::pair<QuantTensor, QuantTensor> worked_example() {
  std::vector<int> prev;
  for (int i = 0; i < 27; ++i) prev.push_back((i * 7) % 50 - 25);
  std::vector<int> cur(prev);
  const int low[] = {1, -3, 7, 15, -15, 2, -9, 4, 11};
  for (int i = 0; i < 9; ++i) cur[15 + i] = prev[15 + i] + low[i];
  cur[24] = prev[24] + 16;
  cur[25] = prev[25] - 40;
  cur[26] = prev[26] + 90;
  return {qt({27}, cur), qt({27}, prev)};
}

}  // namespace

TEST_CASE("classification boundaries") {
  CHECK(classify_value(0) == DiffClass::Zero);
  CHECK(classify_value(15) == DiffClass::Low);
  CHECK(classify_value(-15) == DiffClass::Low);
  CHECK(classify_value(16) == DiffClass::Full);
  CHECK(classify_value(254) == DiffClass::Full);
  CHECK_THROWS_AS(classify_value(255), Error);
  CHECK(bit_requirement(0) == 0);
  CHECK(bit_requirement(1) == 1);
  CHECK(bit_requirement(15) == 4);
  CHECK(bit_requirement(16) == 5);
  CHECK(bit_requirement(-254) == 8);
  CHECK_THROWS_AS(bit_requirement(-255), Error);
}

TEST_CASE("temporal_diff encodes sign and nibbles") {
  const auto same = qt({4}, {1, 2, 3, 4});
  const auto d0 = temporal_diff(same, same);
  CHECK(d0.counts() == DiffCounts{4, 0, 0});
  CHECK(d0.elements().empty());

  const auto d = temporal_diff(qt({3}, {15, 16, -100}), qt({3}, {0, 0, 100}));
  REQUIRE(d.elements().size() == 3);
  CHECK(d.elements()[0].cls == DiffClass::Low);
  CHECK(d.elements()[1].cls == DiffClass::Full);
  const DiffElement& e = d.elements()[2];
  CHECK(e.cls == DiffClass::Full);
  CHECK(e.sign == -1);
  CHECK(e.mag_hi == 12);
  CHECK(e.mag_lo == 8);
  CHECK(e.value() == -200);

  CHECK_THROWS_AS(temporal_diff(qt({1}, {1}, 1.0), qt({1}, {1}, 2.0)), Error);
  try {
    temporal_diff(qt({1}, {1}, 1.0), qt({1}, {1}, 2.0));
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::ScaleMismatch);
  }
}

TEST_CASE("worked 27-element example") {
  const auto [cur, prev] = worked_example();
  const auto d = temporal_diff(cur, prev);
  CHECK(d.counts() == DiffCounts{15, 9, 3});
  CHECK(bops(d.counts(), 1) == 480);
  CHECK(direct_bops(27, 1) == 1728);
  const auto dense = d.dense();
  for (std::size_t i = 0; i < 27; ++i) CHECK(dense.values[i] == cur[i] - prev[i]);
}

TEST_CASE("bops accounting") {
  CHECK(bops(DiffCounts{10, 0, 0}, 5) == 0);
  CHECK(bops(DiffCounts{0, 2, 1}, 3) == 2 * 3 * 32 + 1 * 3 * 64);
  CHECK(bops(MacCounts{7, 4, 2}) == 4 * 32 + 2 * 64);
  CHECK(direct_bops(10, 2) == bops(dense_counts(20)));
}

TEST_CASE("diff_linear limiting cases") {
  const auto w = qt({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const AccumTensor prev{{1, 3}, {5, 6, 7}};
  const auto a = qt({1, 3}, {1, 2, 3});
  CHECK(diff_linear(temporal_diff(a, a), w, prev, LinearOp::matmul()) == prev);
  const auto r = diff_linear(temporal_diff(qt({1, 3}, {1, 3, 3}), a), w, prev, LinearOp::matmul());
  CHECK(r.values == std::vector<std::int32_t>{5, 7, 7});
  CHECK_THROWS_AS(diff_linear(temporal_diff(a, a), w, AccumTensor{}, LinearOp::matmul()), Error);
}

TEST_CASE("chained diff_linear matches direct_linear over many steps") {
  std::mt19937 rng(17);
  SUBCASE("matmul") {
    auto a = oracle::random_q({6, 6}, rng);
    const auto w = oracle::random_q({6, 6}, rng);
    auto acc = direct_linear(a, w, LinearOp::matmul());
    for (int s = 0; s < 5; ++s) {
      const auto next = oracle::perturb(a, rng, 20);
      acc = diff_linear(temporal_diff(next, a), w, acc, LinearOp::matmul());
      CHECK(oracle::widen(acc.values) == oracle::matmul(oracle::ints(next), oracle::ints(w), 6, 6, 6));
      a = next;
    }
  }
  SUBCASE("conv2d") {
    const auto op = LinearOp::conv2d(3, 3, 2, 1);
    auto a = oracle::random_q({7, 6, 3}, rng);
    const auto w = oracle::random_q({3, 3, 3, 4}, rng);
    auto acc = direct_linear(a, w, op);
    for (int s = 0; s < 5; ++s) {
      const auto next = oracle::perturb(a, rng, 40);
      acc = diff_linear(temporal_diff(next, a), w, acc, op);
      CHECK(oracle::widen(acc.values) ==
            oracle::conv(oracle::ints(next), 7, 6, 3, oracle::ints(w), 3, 3, 4, 2, 1));
      a = next;
    }
  }
}

TEST_CASE("attention decomposition") {
  std::mt19937 rng(23);
  const std::size_t n = 4, dh = 8;
  const auto op = LinearOp::attn_score(1);
  auto q = oracle::random_q({n, dh}, rng);
  auto k = oracle::random_q({n, dh}, rng);

  const AccumTensor base = direct_linear(q, k, op);
  CHECK(diff_attention(q, k, q, k, base, op) == base);

  const QuantTensor zq({n, dh}, std::vector<std::int8_t>(n * dh, 0), q.scale());
  const QuantTensor zk({n, dh}, std::vector<std::int8_t>(n * dh, 0), k.scale());
  const AccumTensor zero{{1, n, n}, std::vector<std::int32_t>(n * n, 0)};
  CHECK(diff_attention(q, k, zq, zk, zero, op) == base);

  auto acc = base;
  for (int s = 0; s < 5; ++s) {
    const auto q2 = oracle::perturb(q, rng, 30);
    const auto k2 = oracle::perturb(k, rng, 30);
    acc = diff_attention(q2, k2, q, k, acc, op);
    CHECK(oracle::widen(acc.values) == oracle::scores(oracle::ints(q2), oracle::ints(k2), n, n, 1, dh));
    q = q2;
    k = k2;
  }

  // Same identity for P x V with two heads.
  const auto cop = LinearOp::attn_context(2);
  auto p = oracle::random_q({2, n, n}, rng, 0, 127);
  auto v = oracle::random_q({n, 2 * dh}, rng);
  auto cacc = direct_linear(p, v, cop);
  for (int s = 0; s < 5; ++s) {
    const auto p2 = oracle::perturb(p, rng, 10);
    const auto v2 = oracle::perturb(v, rng, 30);
    cacc = diff_attention(p2, v2, p, v, cacc, cop);
    CHECK(oracle::widen(cacc.values) == oracle::context(oracle::ints(p2), oracle::ints(v2), n, n, 2, dh));
    p = p2;
    v = v2;
  }

  const QuantTensor other({n, dh}, std::vector<std::int8_t>(n * dh, 0), QuantScale(7.0));
  CHECK_THROWS_AS(diff_attention(q, k, other, k, base, op), Error);
}

TEST_CASE("constant-context cross-attention") {
  std::mt19937 rng(29);
  const std::size_t n = 4, nk = 3, dh = 4;
  const auto q = oracle::random_q({n, dh}, rng);
  const auto kc = oracle::random_q({nk, dh}, rng);
  const auto vc = oracle::random_q({nk, dh}, rng);
  const auto p = oracle::random_q({1, n, nk}, rng, 0, 127);
  const auto s0 = direct_linear(q, kc, LinearOp::attn_score(1));
  const auto c0 = direct_linear(p, vc, LinearOp::attn_context(1));

  const auto same = cross_attention_constant_context(temporal_diff(q, q), kc, kc, s0,
                                                     temporal_diff(p, p), vc, vc, c0, 1);
  CHECK(same.scores == s0);
  CHECK(same.context == c0);

  const auto q2 = oracle::perturb(q, rng, 20);
  const auto p2 = oracle::perturb(p, rng, 20);
  const auto r = cross_attention_constant_context(temporal_diff(q2, q), kc, kc, s0,
                                                  temporal_diff(p2, p), vc, vc, c0, 1);
  CHECK(r.scores == direct_linear(q2, kc, LinearOp::attn_score(1)));
  CHECK(r.context == direct_linear(p2, vc, LinearOp::attn_context(1)));

  const auto kc2 = oracle::perturb(kc, rng, 3);
  try {
    cross_attention_constant_context(temporal_diff(q2, q), kc2, kc, s0, temporal_diff(p2, p), vc, vc,
                                     c0, 1);
    FAIL("expected ContextChanged");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ContextChanged);
  }
}

TEST_CASE("spatial differences") {
  SUBCASE("identical rows are all zero") {
    const auto a = qt({3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    const auto sd = spatial_diff(a, LinearOp::matmul());
    CHECK(sd.diffs.elements().empty());
    CHECK(sd.counts() == DiffCounts{8, 0, 4});
  }
  SUBCASE("row plus one gives one low diff per element") {
    const auto a = qt({2, 3}, {5, -2, 9, 6, -1, 10});
    const auto sd = spatial_diff(a, LinearOp::matmul());
    CHECK(sd.diffs.counts().low == 3);
    for (const auto& e : sd.diffs.elements()) CHECK(e.value() == 1);
  }
  SUBCASE("single row is dense") {
    const auto a = qt({1, 3}, {5, 0, 9});
    const auto sd = spatial_diff(a, LinearOp::matmul());
    CHECK(sd.counts() == DiffCounts{0, 0, 3});
  }
  SUBCASE("random operands reconstruct and match direct") {
    std::mt19937 rng(31);
    const auto a = oracle::random_q({8, 8}, rng);
    const auto w = oracle::random_q({8, 5}, rng);
    const auto sd = spatial_diff(a, LinearOp::matmul());
    const auto rec = sd.reconstruct();
    CHECK(std::vector<std::int8_t>(a.values().begin(), a.values().end()) == rec);
    CHECK(spatial_linear(sd, w) == direct_linear(a, w, LinearOp::matmul()));

    const auto op = LinearOp::conv2d(3, 3, 1, 1);
    const auto x = oracle::random_q({6, 5, 3}, rng);
    const auto cw = oracle::random_q({3, 3, 3, 4}, rng);
    CHECK(spatial_linear(spatial_diff(x, op), cw) == direct_linear(x, cw, op));

    const auto q = oracle::random_q({5, 6}, rng);
    const auto k = oracle::random_q({4, 6}, rng);
    CHECK(spatial_linear(spatial_diff(q, LinearOp::attn_score(2)), k) ==
          direct_linear(q, k, LinearOp::attn_score(2)));
    const auto p = oracle::random_q({2, 5, 4}, rng, 0, 127);
    const auto v = oracle::random_q({4, 6}, rng);
    CHECK(spatial_linear(spatial_diff(p, LinearOp::attn_context(2)), v) ==
          direct_linear(p, v, LinearOp::attn_context(2)));
  }
}

TEST_CASE("weighted counts follow the MAC table") {
  const auto d = temporal_diff(qt({4}, {0, 3, 20, 1}), qt({4}, {0, 0, 0, 0}));
  const std::vector<std::uint32_t> macs{5, 2, 3, 1};
  const MacCounts m = weighted_counts(d, macs);
  CHECK(m.zero == 5);
  CHECK(m.low == 3);
  CHECK(m.full == 3);
}
