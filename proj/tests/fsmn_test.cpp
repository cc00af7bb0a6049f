// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "ssan/fsmn.hpp"
#include "ssan/gradcheck.hpp"

namespace ssan {
namespace {

using testing::random_tensor;

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

TEST(FsmnTest, ZeroTapsIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor<double> x = random_tensor({2, 7, 4}, rng);
  auto c = FsmnCoefficients<double>::zeros({3, 2}, 4);
  EXPECT_EQ(values(fsmn_apply(x, c)), values(x));
}

TEST(FsmnTest, CurrentTapOfOneDoublesInput) {
  std::mt19937_64 rng(2);
  Tensor<double> x = random_tensor({5, 3}, rng);
  auto c = FsmnCoefficients<double>::zeros({0, 0}, 3);
  for (double& v : c.back_taps.data()) v = 1.0;
  const auto out = values(fsmn_apply(x, c));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 2.0 * x.data()[i]);
}

TEST(FsmnTest, HandWorkedThreeStepExample) {
  Tensor<double> x({3, 1}, {1, 2, 3});
  auto c = FsmnCoefficients<double>::zeros({1, 1}, 1);
  c.back_taps.data()[0] = 0.0;  // a_0
  c.back_taps.data()[1] = 1.0;  // a_1
  c.ahead_taps.data()[0] = 1.0;  // c_1
  EXPECT_EQ(values(fsmn_apply(x, c)), (std::vector<double>{3, 6, 5}));
}

TEST(FsmnTest, WidthMismatchIsDimensionError) {
  auto c = FsmnCoefficients<double>::zeros({1, 1}, 4);
  EXPECT_THROW(fsmn_apply(Tensor<double>({3, 5}), c), DimensionError);
  EXPECT_THROW(fsmn_apply(Tensor<double>({3}), c), DimensionError);
}

TEST(FsmnTest, ParamCounts) {
  EXPECT_EQ(fsmn_param_count({11, 10}, 512), 11264u);
  EXPECT_EQ(fsmn_param_count({0, 0}, 8), 8u);
  EXPECT_EQ(fsmn_param_count({11, 0}, 512), 6144u);
  EXPECT_EQ(fsmn_param_count_without_current_tap({11, 10}, 512), 21u * 512u);
  std::mt19937_64 rng(3);
  auto c = FsmnCoefficients<double>::random({4, 2}, 6, rng);
  EXPECT_EQ(c.back_taps.numel() + c.ahead_taps.numel(), fsmn_param_count(c));
}

TEST(FsmnTest, RandomInitWithinBound) {
  std::mt19937_64 rng(4);
  auto c = FsmnCoefficients<float>::random({3, 5}, 32, rng);
  const double bound = 1.0 / 3.0;
  for (float v : c.back_taps.data()) EXPECT_LE(std::abs(v), bound);
  for (float v : c.ahead_taps.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(FsmnProperty, MatchesDirectSummationOracleExactly) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> order(0, 4), len(1, 12), width(1, 5);
  std::bernoulli_distribution keep(0.8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n1 = order(rng), n2 = order(rng), steps = len(rng), d = width(rng);
    Tensor<double> x = random_tensor({steps, d}, rng);
    auto c = FsmnCoefficients<double>::random({n1, n2}, d, rng, false);
    std::vector<std::uint8_t> valid(steps, 1);
    if (trial % 2)
      for (auto& v : valid) v = keep(rng);
    const std::vector<double> ahead = n2 ? values(c.ahead_taps) : std::vector<double>{};
    const auto expected = testing::fsmn_direct(values(x), steps, d, values(c.back_taps), n1, ahead, n2, valid);
    EXPECT_EQ(values(fsmn_apply(x, c, valid)), expected) << "trial " << trial;
  }
}

TEST(FsmnProperty, CausalWhenNoLookAhead) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t steps = 10, d = 3;
    auto c = FsmnCoefficients<double>::random({3, 0}, d, rng, false);
    Tensor<double> x = random_tensor({steps, d}, rng);
    const auto base = values(fsmn_apply(x, c));
    const std::size_t t = trial % steps;
    Tensor<double> y = x.detach();
    for (std::size_t i = (t + 1) * d; i < steps * d; ++i) y.data()[i] = std::uniform_real_distribution<double>(-9, 9)(rng);
    const auto pert = values(fsmn_apply(y, c));
    for (std::size_t i = 0; i < (t + 1) * d; ++i) EXPECT_EQ(pert[i], base[i]);
  }
}

TEST(FsmnProperty, LocalWithinOrders) {
  std::mt19937_64 rng(7);
  const std::size_t steps = 14, d = 2, n1 = 2, n2 = 3;
  auto c = FsmnCoefficients<double>::random({n1, n2}, d, rng, false);
  for (std::size_t t = 0; t < steps; ++t) {
    Tensor<double> x = random_tensor({steps, d}, rng);
    const auto base = values(fsmn_apply(x, c));
    Tensor<double> y = x.detach();
    for (std::size_t s = 0; s < steps; ++s)
      if (s + n1 < t || s > t + n2)
        for (std::size_t e = 0; e < d; ++e) y.data()[s * d + e] += 5.0;
    const auto pert = values(fsmn_apply(y, c));
    for (std::size_t e = 0; e < d; ++e) EXPECT_EQ(pert[t * d + e], base[t * d + e]);
  }
}

TEST(FsmnProperty, LinearInInput) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = FsmnCoefficients<float>::random({2, 2}, 4, rng, false);
    Tensor<float> x({2, 6, 4}), y({2, 6, 4});
    for (float& v : x.data()) v = u(rng);
    for (float& v : y.data()) v = u(rng);
    const float alpha = u(rng), beta = u(rng);
    Tensor<float> combo({2, 6, 4});
    for (std::size_t i = 0; i < combo.numel(); ++i) combo.data()[i] = alpha * x.data()[i] + beta * y.data()[i];
    const Tensor<float> lhs = fsmn_apply(combo, c), fx = fsmn_apply(x, c), fy = fsmn_apply(y, c);
    for (std::size_t i = 0; i < combo.numel(); ++i)
      EXPECT_NEAR(lhs.data()[i], alpha * fx.data()[i] + beta * fy.data()[i], 1e-5);
  }
}

TEST(FsmnProperty, MaskedPositionsContributeNothing) {
  std::mt19937_64 rng(9);
  auto c = FsmnCoefficients<double>::random({2, 2}, 3, rng, false);
  Tensor<double> x = random_tensor({2, 6, 3}, rng);
  const std::vector<std::uint8_t> valid{1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1};
  const auto base = values(fsmn_apply(x, c, valid));
  Tensor<double> y = x.detach();
  for (std::size_t i = 4 * 3; i < 6 * 3; ++i) y.data()[i] = 100.0;
  const auto pert = values(fsmn_apply(y, c, valid));
  for (std::size_t i = 0; i < 4 * 3; ++i) EXPECT_EQ(pert[i], base[i]);
}

TEST(FsmnProperty, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n2 = trial % 3;
    auto c = FsmnCoefficients<double>::random({2, n2}, 3, rng, true);
    Tensor<double> x = random_tensor({2, 5, 3}, rng, true);
    Tensor<double> probe = random_tensor({2, 5, 3}, rng);
    const std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    std::vector<Tensor<double>> params{x, c.back_taps};
    if (n2) params.push_back(c.ahead_taps);
    auto r = check_gradients([&] { return probe_loss(fsmn_apply(x, c, valid), probe); }, params);
    EXPECT_LT(r.worst(), 1e-4) << "trial " << trial;
  }
}

}  // namespace
}  // namespace ssan
