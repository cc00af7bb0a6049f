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

// Central finite-difference verification of analytic gradients. The
// numeric side only ever calls the forward function, so it stays
// independent of the backward rules it checks.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssan/tensor.hpp"

namespace ssan {

struct GradCheckEntry {
  std::string name;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.relative_error);
    return w;
  }
};

/// Relative error between two gradient vectors: ||a - n|| / max(||a||, ||n||),
/// with an absolute floor so exactly-zero gradients compare as equal.
inline double gradient_relative_error(const std::vector<double>& analytic,
                                      const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / scale;
}

/// `loss_fn` must rebuild the graph from the current parameter values and
/// return a scalar tensor. Every parameter must have requires_grad set.
template <typename LossFn>
GradCheckResult check_gradients(LossFn&& loss_fn, std::vector<Tensor<double>> params,
                                std::vector<std::string> names = {}, double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());

  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<double>& p = params[t];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    std::vector<double> numeric(p.numel());
    {
      NoGradGuard no_grad;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double saved = p.data()[i];
        p.data()[i] = saved + step;
        const double up = loss_fn().item();
        p.data()[i] = saved - step;
        const double down = loss_fn().item();
        p.data()[i] = saved;
        numeric[i] = (up - down) / (2.0 * step);
      }
    }
    double norm = 0.0;
    for (double v : analytic) norm += v * v;
    result.entries.push_back({t < names.size() ? names[t] : "param" + std::to_string(t),
                              gradient_relative_error(analytic, numeric), std::sqrt(norm)});
  }
  return result;
}

/// Fixed random projection used to turn a tensor output into a scalar loss
/// with non-degenerate gradients (plain sums vanish through softmax and
/// layer norm).
inline Tensor<double> random_probe(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor<double>(shape, std::move(values));
}

inline Tensor<double> probe_loss(const Tensor<double>& out, const Tensor<double>& probe) {
  return sum(mul(out, probe));
}

}  // namespace ssan
