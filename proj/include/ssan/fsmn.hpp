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

// FSMN memory block: a learnable element-wise FIR filter over a sequence.
//
//   out_t = x_t + sum_{i=0..N1} a_i * x_{t-i} + sum_{j=1..N2} c_j * x_{t+j}
//
// Taps are per-dimension vectors. Positions outside the sequence or marked
// invalid in the mask read as zero vectors.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ssan/tensor.hpp"

namespace ssan {

struct FsmnOrders {
  std::size_t look_back = 0;   // N1; the i=0 tap is counted separately
  std::size_t look_ahead = 0;  // N2

  std::size_t taps() const { return look_back + 1 + look_ahead; }
  bool operator==(const FsmnOrders&) const = default;
};

template <typename T>
struct FsmnCoefficients {
  FsmnOrders orders;
  std::size_t dim = 0;
  Tensor<T> back_taps;   // [(N1+1) x d]: a_0 .. a_N1
  Tensor<T> ahead_taps;  // [N2 x d]: c_1 .. c_N2; undefined when N2 == 0

  static FsmnCoefficients zeros(FsmnOrders orders, std::size_t dim, bool requires_grad = false) {
    FsmnCoefficients c;
    c.orders = orders;
    c.dim = dim;
    c.back_taps = Tensor<T>({orders.look_back + 1, dim}, requires_grad);
    if (orders.look_ahead > 0) c.ahead_taps = Tensor<T>({orders.look_ahead, dim}, requires_grad);
    return c;
  }

  /// Uniform in +-1/sqrt(N1+1+N2), independent per element.
  template <typename Rng>
  static FsmnCoefficients random(FsmnOrders orders, std::size_t dim, Rng& rng,
                                 bool requires_grad = true) {
    FsmnCoefficients c = zeros(orders, dim, requires_grad);
    const double bound = 1.0 / std::sqrt(static_cast<double>(orders.taps()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : c.back_taps.data()) v = static_cast<T>(dist(rng));
    if (c.ahead_taps.defined())
      for (T& v : c.ahead_taps.data()) v = static_cast<T>(dist(rng));
    return c;
  }

  void validate() const {
    if (dim == 0) throw DimensionError("fsmn: dim must be positive");
    if (!back_taps.defined() || back_taps.shape() != Shape{orders.look_back + 1, dim}) {
      throw DimensionError("fsmn: back_taps must be [" + std::to_string(orders.look_back + 1) +
                           "x" + std::to_string(dim) + "]");
    }
    if (orders.look_ahead == 0) {
      if (ahead_taps.defined()) throw DimensionError("fsmn: ahead_taps present with N2 = 0");
    } else if (!ahead_taps.defined() || ahead_taps.shape() != Shape{orders.look_ahead, dim}) {
      throw DimensionError("fsmn: ahead_taps must be [" + std::to_string(orders.look_ahead) + "x" +
                           std::to_string(dim) + "]");
    }
  }
};

/// Tap count of one block as the recurrence is written: (N1 + 1 + N2) * d.
inline std::size_t fsmn_param_count(FsmnOrders orders, std::size_t dim) {
  return orders.taps() * dim;
}

template <typename T>
std::size_t fsmn_param_count(const FsmnCoefficients<T>& coeffs) {
  return fsmn_param_count(coeffs.orders, coeffs.dim);
}

/// Tap count by the closed-form (N1 + N2) * d, which leaves out the i=0 tap.
inline std::size_t fsmn_param_count_without_current_tap(FsmnOrders orders, std::size_t dim) {
  return (orders.look_back + orders.look_ahead) * dim;
}

/// Applies the memory block to x of shape [T, d] or [B, T, d]. `valid` is
/// either empty (all positions valid) or holds B*T flags.
template <typename T>
Tensor<T> fsmn_apply(const Tensor<T>& x, const FsmnCoefficients<T>& coeffs,
                     std::span<const std::uint8_t> valid = {}) {
  coeffs.validate();
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("fsmn_apply expects [T, d] or [B, T, d], got " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t steps = x.dim(x.rank() - 2);
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  if (d != coeffs.dim) {
    throw DimensionError("fsmn_apply: input width " + std::to_string(d) +
                         " does not match taps width " + std::to_string(coeffs.dim));
  }
  if (!valid.empty() && valid.size() != batch * steps) {
    throw DimensionError("fsmn_apply: mask has " + std::to_string(valid.size()) +
                         " entries, expected " + std::to_string(batch * steps));
  }
  const std::size_t n1 = coeffs.orders.look_back, n2 = coeffs.orders.look_ahead;
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  if (mask.empty()) mask.assign(batch * steps, 1);

  const T* in = x.data().data();
  const T* back = coeffs.back_taps.data().data();
  const T* ahead = n2 > 0 ? coeffs.ahead_taps.data().data() : nullptr;
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      T* o = out.data() + (b * steps + t) * d;
      const T* xt = in + (b * steps + t) * d;
      std::copy(xt, xt + d, o);
      for (std::size_t i = 0; i <= n1 && i <= t; ++i) {
        const std::size_t src = t - i;
        if (!mask[b * steps + src]) continue;
        const T* xs = in + (b * steps + src) * d;
        const T* tap = back + i * d;
        for (std::size_t e = 0; e < d; ++e) o[e] += tap[e] * xs[e];
      }
      for (std::size_t j = 1; j <= n2 && t + j < steps; ++j) {
        const std::size_t src = t + j;
        if (!mask[b * steps + src]) continue;
        const T* xs = in + (b * steps + src) * d;
        const T* tap = ahead + (j - 1) * d;
        for (std::size_t e = 0; e < d; ++e) o[e] += tap[e] * xs[e];
      }
    }
  }

  std::vector<std::shared_ptr<Node<T>>> inputs{x.node(), coeffs.back_taps.node()};
  if (n2 > 0) inputs.push_back(coeffs.ahead_taps.node());
  return detail::make_result<T>(
      x.shape(), std::move(out), "fsmn", std::move(inputs),
      [batch, steps, d, n1, n2, mask = std::move(mask)](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& nback = *self.inputs[1];
        Node<T>* nahead = n2 > 0 ? self.inputs[2].get() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < steps; ++t) {
            const T* g = self.grad.data() + (b * steps + t) * d;
            if (nx.requires_grad) {
              T* gx = nx.grad.data() + (b * steps + t) * d;
              for (std::size_t e = 0; e < d; ++e) gx[e] += g[e];
            }
            auto tap_term = [&](Node<T>& taps, std::size_t row, std::size_t src) {
              const T* xs = nx.data.data() + (b * steps + src) * d;
              const T* tap = taps.data.data() + row * d;
              if (nx.requires_grad) {
                T* gx = nx.grad.data() + (b * steps + src) * d;
                for (std::size_t e = 0; e < d; ++e) gx[e] += tap[e] * g[e];
              }
              if (taps.requires_grad) {
                T* gt = taps.grad.data() + row * d;
                for (std::size_t e = 0; e < d; ++e) gt[e] += xs[e] * g[e];
              }
            };
            for (std::size_t i = 0; i <= n1 && i <= t; ++i)
              if (mask[b * steps + t - i]) tap_term(nback, i, t - i);
            for (std::size_t j = 1; j <= n2 && t + j < steps; ++j)
              if (mask[b * steps + t + j]) tap_term(*nahead, j - 1, t + j);
          }
        }
      });
}

}  // namespace ssan
