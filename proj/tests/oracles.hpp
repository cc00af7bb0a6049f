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

// Test-only reference implementations. None of these touch the library's
// op implementations; they work on plain vectors.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ssan/tensor.hpp"

namespace ssan::testing {

inline std::vector<double> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false,
                                    double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor<double>(std::move(shape), random_values(n, rng, lo, hi), requires_grad);
}

/// Direct summation of the memory-block recurrence over an explicitly
/// zero-padded copy of the sequence. x: [T x d], back: [(N1+1) x d],
/// ahead: [N2 x d], valid: T flags.
inline std::vector<double> fsmn_direct(const std::vector<double>& x, std::size_t steps, std::size_t d,
                                       const std::vector<double>& back, std::size_t n1,
                                       const std::vector<double>& ahead, std::size_t n2,
                                       const std::vector<std::uint8_t>& valid) {
  // padded[n1 + t] holds x_t for valid t and 0 otherwise
  const std::size_t padded_len = n1 + steps + n2;
  std::vector<double> padded(padded_len * d, 0.0);
  for (std::size_t t = 0; t < steps; ++t)
    if (valid[t])
      for (std::size_t e = 0; e < d; ++e) padded[(n1 + t) * d + e] = x[t * d + e];
  std::vector<double> out(steps * d);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t e = 0; e < d; ++e) {
      double acc = x[t * d + e];
      for (std::size_t i = 0; i <= n1; ++i) acc += back[i * d + e] * padded[(n1 + t - i) * d + e];
      for (std::size_t j = 1; j <= n2; ++j) acc += ahead[(j - 1) * d + e] * padded[(n1 + t + j) * d + e];
      out[t * d + e] = acc;
    }
  return out;
}

/// y = W x for one position, W: [rows x cols].
inline std::vector<double> matvec(const std::vector<double>& w, std::size_t rows, std::size_t cols,
                                  const double* x) {
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r] += w[r * cols + c] * x[c];
  return y;
}

/// Scalar Adam with bias correction.
struct ScalarAdam {
  double beta1, beta2, eps;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double param, double grad, double lr) {
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad * grad;
    const double mhat = m / (1.0 - std::pow(beta1, t));
    const double vhat = v / (1.0 - std::pow(beta2, t));
    return param - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

/// Minimum total edit cost by enumerating every alignment path.
inline std::size_t exhaustive_alignment_cost(const std::vector<int>& a, std::size_t i,
                                             const std::vector<int>& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t diag = (a[i] == b[j] ? 0 : 1) + exhaustive_alignment_cost(a, i + 1, b, j + 1);
  const std::size_t skip_a = 1 + exhaustive_alignment_cost(a, i + 1, b, j);
  const std::size_t skip_b = 1 + exhaustive_alignment_cost(a, i, b, j + 1);
  return std::min({diag, skip_a, skip_b});
}

/// Smoothed cross-entropy by direct summation over log-probabilities.
inline double smoothed_ce_direct(const std::vector<double>& logits, std::size_t vocab,
                                 const std::vector<int>& targets, double s, int pad) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == pad) continue;
    ++count;
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(logits[r * vocab + c]);
    for (std::size_t c = 0; c < vocab; ++c) {
      const double q = static_cast<int>(c) == targets[r] ? 1.0 - s : s / static_cast<double>(vocab - 1);
      total += -q * (logits[r * vocab + c] - std::log(z));
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace ssan::testing
