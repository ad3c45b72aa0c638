#include <doctest.h>

#include <cmath>
#include <random>

#include "ditto/error.hpp"
#include "ditto/qtensor.hpp"
#include "oracles.hpp"

using namespace ditto;

namespace {

QuantTensor qt(Shape d, std::vector<int> v, double s = 1.0) {
  return QuantTensor(std::move(d), std::vector<std::int8_t>(v.begin(), v.end()), QuantScale(s));
}

}  // namespace

TEST_CASE("calibrate_scale uses absmax / 127") {
  const std::vector<float> s{-2.54f, 1.0f};
  CHECK(calibrate_scale(s).value() == doctest::Approx(0.02).epsilon(1e-6));
  const std::vector<float> z{0.f, 0.f};
  CHECK(calibrate_scale(z).value() == 1.0);

  std::mt19937 rng(7);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> x(1000);
  for (auto& v : x) v = u(rng);
  float absmax = 0.f;
  for (float v : x) absmax = std::max(absmax, std::fabs(v));
  CHECK(calibrate_scale(x).value() == static_cast<double>(absmax) / 127.0);

  const std::vector<float> bad{1.f, NAN};
  CHECK_THROWS_AS(calibrate_scale(bad), Error);
  CHECK_THROWS_AS(calibrate_scale(std::vector<float>{}), Error);
}

TEST_CASE("quantize rounds half away from zero and clamps") {
  const QuantScale s(0.25);
  CHECK(quantize(Tensor({1}, {0.5f}), s)[0] == 2);
  CHECK(quantize(Tensor({1}, {100.f}), s)[0] == 127);
  CHECK(quantize(Tensor({1}, {-100.f}), s)[0] == -127);
  CHECK(quantize(Tensor({1}, {-0.125f}), s)[0] == -1);
  CHECK(quantize(Tensor({1}, {0.125f}), s)[0] == 1);
  try {
    quantize(Tensor({3}, {0.f, 1.f, INFINITY}), s);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
    CHECK(std::string(e.what()).find("index 2") != std::string::npos);
  }
  CHECK_THROWS_AS(QuantScale(0.0), Error);
  CHECK_THROWS_AS(QuantScale(-1.0), Error);
  CHECK_THROWS_AS(QuantScale(NAN), Error);
}

TEST_CASE("dequantize and round trips") {
  CHECK(dequantize(qt({1}, {2}, 0.25)).values[0] == 0.5f);
  CHECK(dequantize(qt({1}, {0}, 0.25)).values[0] == 0.f);

  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(-3.f, 3.f);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(64);
    for (auto& v : x) v = u(rng);
    const QuantScale s = calibrate_scale(x);
    const QuantTensor q = quantize(Tensor({64}, x), s);
    const Tensor back = dequantize(q);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(std::fabs(back.values[i] - x[i]) <= s.value() / 2 + 1e-6);
    CHECK(quantize(back, s) == q);
  }
}

TEST_CASE("QuantTensor rejects -128 and size mismatch") {
  CHECK_THROWS_AS(QuantTensor({1}, {static_cast<std::int8_t>(-128)}, QuantScale(1.0)), Error);
  CHECK_THROWS_AS(QuantTensor({2}, {1}, QuantScale(1.0)), Error);
}

TEST_CASE("direct_linear matmul") {
  const auto id = qt({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(direct_linear(qt({1, 3}, {1, 2, 3}), id, LinearOp::matmul()).values ==
        std::vector<std::int32_t>{1, 2, 3});
  CHECK(direct_linear(qt({1, 3}, {0, 0, 0}), id, LinearOp::matmul()).values ==
        std::vector<std::int32_t>{0, 0, 0});

  std::mt19937 rng(11);
  const auto a = oracle::random_q({4, 5}, rng);
  const auto w = oracle::random_q({5, 3}, rng);
  const auto r = direct_linear(a, w, LinearOp::matmul());
  CHECK(r.dims == Shape{4, 3});
  CHECK(oracle::widen(r.values) == oracle::matmul(oracle::ints(a), oracle::ints(w), 4, 5, 3));

  CHECK_THROWS_AS(direct_linear(a, oracle::random_q({4, 3}, rng), LinearOp::matmul()), Error);
}

TEST_CASE("direct_linear conv2d equals the direct-summation oracle") {
  std::mt19937 rng(21);
  int cases = 0;
  for (std::size_t H : {3, 5, 8})
    for (std::size_t W : {4, 8})
      for (std::size_t C : {1, 4})
        for (int k : {1, 3})
          for (int stride : {1, 2})
            for (int pad : {0, 1}) {
              if (static_cast<long>(H) + 2 * pad < k || static_cast<long>(W) + 2 * pad < k) continue;
              const std::size_t co = 3;
              const auto a = oracle::random_q({H, W, C}, rng);
              const auto w = oracle::random_q({std::size_t(k), std::size_t(k), C, co}, rng);
              const auto op = LinearOp::conv2d(k, k, stride, pad);
              const auto r = direct_linear(a, w, op);
              CHECK(oracle::widen(r.values) ==
                    oracle::conv(oracle::ints(a), H, W, C, oracle::ints(w), k, k, co, stride, pad));
              ++cases;
            }
  CHECK(cases > 40);
}

TEST_CASE("conv2d equals im2col followed by matmul") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = oracle::random_q({6, 7, 4}, rng);
    const auto w = oracle::random_q({3, 3, 4, 5}, rng);
    const auto op = LinearOp::conv2d(3, 3, 1, 1);
    std::size_t rows = 0, cols = 0;
    const auto cols_m = im2col(a, op, rows, cols);
    CHECK(rows == 42);
    CHECK(cols == 36);
    const std::vector<int> am(cols_m.begin(), cols_m.end());
    CHECK(oracle::widen(direct_linear(a, w, op).values) ==
          oracle::matmul(am, oracle::ints(w), rows, cols, 5));
  }
}

TEST_CASE("direct_linear attention kinds") {
  std::mt19937 rng(9);
  const std::size_t n = 4, nk = 6, heads = 2, dh = 3;
  const auto q = oracle::random_q({n, heads * dh}, rng);
  const auto k = oracle::random_q({nk, heads * dh}, rng);
  const auto s = direct_linear(q, k, LinearOp::attn_score(2));
  CHECK(s.dims == Shape{heads, n, nk});
  CHECK(oracle::widen(s.values) == oracle::scores(oracle::ints(q), oracle::ints(k), n, nk, heads, dh));

  const auto p = oracle::random_q({heads, n, nk}, rng, 0, 127);
  const auto v = oracle::random_q({nk, heads * dh}, rng);
  const auto c = direct_linear(p, v, LinearOp::attn_context(2));
  CHECK(c.dims == Shape{n, heads * dh});
  CHECK(oracle::widen(c.values) == oracle::context(oracle::ints(p), oracle::ints(v), n, nk, heads, dh));
}

TEST_CASE("direct_linear is additive over widened operands") {
  std::mt19937 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a1 = oracle::random_q({3, 8}, rng);
    const auto a2 = oracle::random_q({3, 8}, rng);
    const auto w = oracle::random_q({8, 4}, rng);
    WideTensor sum{{3, 8}, {}};
    for (std::size_t i = 0; i < a1.size(); ++i) sum.values.push_back(static_cast<std::int16_t>(a1[i] + a2[i]));
    const auto lhs = direct_linear_wide(sum, w, LinearOp::matmul());
    const auto r1 = direct_linear(a1, w, LinearOp::matmul());
    const auto r2 = direct_linear(a2, w, LinearOp::matmul());
    for (std::size_t i = 0; i < lhs.values.size(); ++i) CHECK(lhs.values[i] == r1.values[i] + r2.values[i]);
  }
}

TEST_CASE("reductions longer than the limit are rejected") {
  const std::size_t k = kMaxReduction + 1;
  const QuantTensor a({1, k}, std::vector<std::int8_t>(k, 1), QuantScale(1.0));
  const QuantTensor w({k, 1}, std::vector<std::int8_t>(k, 1), QuantScale(1.0));
  try {
    direct_linear(a, w, LinearOp::matmul());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Overflow);
  }
}

TEST_CASE("MAC bookkeeping") {
  CHECK(total_macs(LinearOp::matmul(), {4, 5}, {5, 3}) == 60);
  const auto m = macs_per_a_element(LinearOp::matmul(), {4, 5}, {5, 3});
  CHECK(m.size() == 20);
  for (auto v : m) CHECK(v == 3);
  // 3x3 conv with padding: corner taps feed 4 windows, centre taps 9, times Co.
  const auto c = macs_per_a_element(LinearOp::conv2d(3, 3, 1, 1), {4, 4, 1}, {3, 3, 1, 2});
  CHECK(c[0] == 4 * 2);
  CHECK(c[5] == 9 * 2);
  std::uint64_t sum = 0;
  for (auto v : c) sum += v;
  // Padded taps carry no data, so the per-element total is below the dense count.
  CHECK(sum < total_macs(LinearOp::conv2d(3, 3, 1, 1), {4, 4, 1}, {3, 3, 1, 2}));
}
