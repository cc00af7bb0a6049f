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

// Multi-head scaled dot-product attention with two ways of forming the
// query/key/value inputs:
//
//   SAN   Q = x Wq^T, K = x Wk^T, V = x Wv^T
//   SSAN  Q = fsmn(x; q taps), K = fsmn(x; k taps), V = x
//
// Both variants keep the output projection Wo. Heads are contiguous chunks
// of the model dimension.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "ssan/fsmn.hpp"
#include "ssan/tensor.hpp"

namespace ssan {

enum class AttentionVariant { San, Ssan };

inline const char* variant_name(AttentionVariant v) {
  return v == AttentionVariant::San ? "san" : "ssan";
}

struct AttentionConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  AttentionVariant variant = AttentionVariant::San;
  FsmnOrders fsmn;  // used only by SSAN
  bool causal = false;

  std::size_t head_dim() const { return d_model / heads; }

  void validate() const {
    if (d_model == 0 || heads == 0) throw ContractError("attention: d_model and heads must be positive");
    if (d_model % heads != 0) {
      throw ContractError("attention: heads (" + std::to_string(heads) +
                          ") must divide d_model (" + std::to_string(d_model) + ")");
    }
    if (variant == AttentionVariant::Ssan && causal && fsmn.look_ahead != 0) {
      throw ContractError("attention: causal SSAN requires look-ahead order 0");
    }
  }
};

template <typename T>
struct SanWeights {
  Tensor<T> wq, wk, wv, wo;  // each [d_model x d_model], applied as x W^T
};

template <typename T>
struct SsanWeights {
  FsmnCoefficients<T> q_coeffs;
  FsmnCoefficients<T> k_coeffs;
  Tensor<T> wo;
};

template <typename T>
using SelfAttentionWeights = std::variant<SanWeights<T>, SsanWeights<T>>;

template <typename T>
struct Qkv {
  Tensor<T> q, k, v;
};

template <typename T>
struct AttentionResult {
  Tensor<T> out;   // [B, Tq, d_model] (or [Tq, d_model] for unbatched input)
  Tensor<T> attn;  // [B, h, Tq, Tk] (or [h, Tq, Tk]); pre-dropout weights
};

/// Which (query, key) pairs may attend, per batch member.
class AttentionMask {
 public:
  AttentionMask() = default;

  /// Keys at positions >= key_lengths[b] are masked; `causal` additionally
  /// masks keys after the query position.
  static AttentionMask from_lengths(std::size_t queries, std::size_t keys,
                                    const std::vector<std::size_t>& key_lengths,
                                    bool causal = false) {
    AttentionMask m;
    m.batch_ = key_lengths.size();
    m.queries_ = queries;
    m.keys_ = keys;
    m.allowed_.assign(m.batch_ * queries * keys, 0);
    for (std::size_t b = 0; b < m.batch_; ++b)
      for (std::size_t q = 0; q < queries; ++q)
        for (std::size_t k = 0; k < keys; ++k)
          m.allowed_[(b * queries + q) * keys + k] =
              k < key_lengths[b] && (!causal || k <= q) ? 1 : 0;
    return m;
  }

  static AttentionMask none(std::size_t batch, std::size_t queries, std::size_t keys) {
    return from_lengths(queries, keys, std::vector<std::size_t>(batch, keys));
  }

  /// Explicit table of B*Tq*Tk allow flags.
  AttentionMask(std::size_t batch, std::size_t queries, std::size_t keys,
                std::vector<std::uint8_t> allowed)
      : batch_(batch), queries_(queries), keys_(keys), allowed_(std::move(allowed)) {
    if (allowed_.size() != batch * queries * keys) throw DimensionError("attention mask size mismatch");
  }

  std::size_t batch() const { return batch_; }
  std::size_t queries() const { return queries_; }
  std::size_t keys() const { return keys_; }

  bool allowed(std::size_t b, std::size_t q, std::size_t k) const {
    return allowed_[(b * queries_ + q) * keys_ + k] != 0;
  }

  void require_nonempty_rows() const {
    for (std::size_t b = 0; b < batch_; ++b)
      for (std::size_t q = 0; q < queries_; ++q) {
        bool any = false;
        for (std::size_t k = 0; k < keys_ && !any; ++k) any = allowed(b, q, k);
        if (!any) {
          throw ContractError("attention: every key masked for batch " + std::to_string(b) +
                              ", query " + std::to_string(q));
        }
      }
  }

  /// Additive bias [B, h, Tq, Tk]: 0 where allowed, -1e9 where masked.
  template <typename T>
  Tensor<T> bias(std::size_t heads) const {
    std::vector<T> values(batch_ * heads * queries_ * keys_);
    const std::size_t plane = queries_ * keys_;
    for (std::size_t b = 0; b < batch_; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < plane; ++i)
          values[(b * heads + h) * plane + i] = allowed_[b * plane + i] ? T{0} : T(-1e9);
    return Tensor<T>({batch_, heads, queries_, keys_}, std::move(values));
  }

 private:
  std::size_t batch_ = 0, queries_ = 0, keys_ = 0;
  std::vector<std::uint8_t> allowed_;
};

namespace detail {

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
  throw DimensionError("attention expects [T, d] or [B, T, d], got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> drop_leading(const Tensor<T>& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return reshape(x, std::move(s));
}

template <typename T>
void require_square(const Tensor<T>& w, std::size_t d, const char* name) {
  if (!w.defined() || w.shape() != Shape{d, d}) {
    throw DimensionError(std::string("attention: ") + name + " must be [" + std::to_string(d) +
                         "x" + std::to_string(d) + "]");
  }
}

}  // namespace detail

template <typename T>
Qkv<T> form_qkv_san(const Tensor<T>& x, const SanWeights<T>& w) {
  const std::size_t d = x.shape().back();
  detail::require_square(w.wq, d, "Wq");
  detail::require_square(w.wk, d, "Wk");
  detail::require_square(w.wv, d, "Wv");
  return {matmul_nt(x, w.wq), matmul_nt(x, w.wk), matmul_nt(x, w.wv)};
}

/// V is x itself (same tensor), so gradients from the value path flow
/// straight to the input.
template <typename T>
Qkv<T> form_qkv_ssan(const Tensor<T>& x, const SsanWeights<T>& w,
                     std::span<const std::uint8_t> valid = {}) {
  if (w.q_coeffs.orders != w.k_coeffs.orders || w.q_coeffs.dim != w.k_coeffs.dim) {
    throw DimensionError("ssan: query and key blocks must share orders and width");
  }
  return {fsmn_apply(x, w.q_coeffs, valid), fsmn_apply(x, w.k_coeffs, valid), x};
}

/// Scaled dot-product attention over h contiguous head chunks followed by
/// the output projection. Accepts [T, d] or [B, T, d] inputs.
template <typename T>
AttentionResult<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k,
                                        const Tensor<T>& v, const Tensor<T>& wo,
                                        std::size_t heads, const AttentionMask& mask,
                                        DropoutContext* drop = nullptr) {
  const bool unbatched = q.rank() == 2;
  const Tensor<T> qb = detail::as_batched(q), kb = detail::as_batched(k),
                  vb = detail::as_batched(v);
  const std::size_t batch = qb.dim(0), tq = qb.dim(1), tk = kb.dim(1), d = qb.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ContractError("attention: heads (" + std::to_string(heads) + ") must divide d_model (" +
                        std::to_string(d) + ")");
  }
  if (kb.shape() != vb.shape() || kb.dim(0) != batch || kb.dim(2) != d) {
    throw DimensionError("attention: Q " + shape_str(qb.shape()) + ", K " + shape_str(kb.shape()) +
                         ", V " + shape_str(vb.shape()) + " are inconsistent");
  }
  if (mask.batch() != batch || mask.queries() != tq || mask.keys() != tk) {
    throw DimensionError("attention: mask does not match " + std::to_string(batch) + "x" +
                         std::to_string(tq) + "x" + std::to_string(tk));
  }
  detail::require_square(wo, d, "Wo");
  mask.require_nonempty_rows();

  const std::size_t dk = d / heads;
  auto split = [&](const Tensor<T>& t, std::size_t len) {
    return swap_axes_12(reshape(t, {batch, len, heads, dk}));
  };
  const Tensor<T> qh = split(qb, tq), kh = split(kb, tk), vh = split(vb, tk);
  Tensor<T> scores = scale(bmm(qh, kh, /*transpose_b=*/true), T{1} / std::sqrt(static_cast<T>(dk)));
  scores = add(scores, mask.template bias<T>(heads));
  Tensor<T> attn = softmax_lastdim(scores);
  Tensor<T> weights = drop ? dropout(attn, *drop) : attn;
  Tensor<T> context = reshape(swap_axes_12(bmm(weights, vh)), {batch, tq, d});
  Tensor<T> out = matmul_nt(context, wo);
  if (unbatched) return {detail::drop_leading(out), detail::drop_leading(attn)};
  return {out, attn};
}

template <typename T>
AttentionResult<T> self_attention(const Tensor<T>& x, const SelfAttentionWeights<T>& weights,
                                  const AttentionConfig& config, const AttentionMask& mask,
                                  std::span<const std::uint8_t> valid = {},
                                  DropoutContext* drop = nullptr) {
  config.validate();
  if (x.shape().back() != config.d_model) {
    throw DimensionError("self_attention: input width " + std::to_string(x.shape().back()) +
                         " != d_model " + std::to_string(config.d_model));
  }
  if (const auto* san = std::get_if<SanWeights<T>>(&weights)) {
    if (config.variant != AttentionVariant::San) throw ContractError("self_attention: SAN weights for SSAN config");
    const Qkv<T> qkv = form_qkv_san(x, *san);
    return multi_head_attention(qkv.q, qkv.k, qkv.v, san->wo, config.heads, mask, drop);
  }
  const auto& ssan = std::get<SsanWeights<T>>(weights);
  if (config.variant != AttentionVariant::Ssan) throw ContractError("self_attention: SSAN weights for SAN config");
  if (ssan.q_coeffs.orders != config.fsmn) throw ContractError("self_attention: FSMN orders differ from config");
  const Qkv<T> qkv = form_qkv_ssan(x, ssan, valid);
  return multi_head_attention(qkv.q, qkv.k, qkv.v, ssan.wo, config.heads, mask, drop);
}

/// Decoder queries attend over encoder outputs; always projection-based.
template <typename T>
AttentionResult<T> cross_attention(const Tensor<T>& decoder_x, const Tensor<T>& encoder_h,
                                   const SanWeights<T>& w, std::size_t heads,
                                   const AttentionMask& mask, DropoutContext* drop = nullptr) {
  const std::size_t d = decoder_x.shape().back();
  detail::require_square(w.wq, d, "Wq");
  detail::require_square(w.wk, d, "Wk");
  detail::require_square(w.wv, d, "Wv");
  return multi_head_attention(matmul_nt(decoder_x, w.wq), matmul_nt(encoder_h, w.wk),
                              matmul_nt(encoder_h, w.wv), w.wo, heads, mask, drop);
}

/// SAN: 4 d^2. SSAN: d^2 + two FSMN blocks of (N1 + 1 + N2) d taps.
inline std::size_t attention_param_count(const AttentionConfig& config) {
  const std::size_t d = config.d_model;
  if (config.variant == AttentionVariant::San) return 4 * d * d;
  return d * d + 2 * fsmn_param_count(config.fsmn, d);
}

/// Same as attention_param_count but with the closed-form 2 (N1 + N2) d
/// count for the two SSAN blocks.
inline std::size_t attention_param_count_without_current_tap(const AttentionConfig& config) {
  const std::size_t d = config.d_model;
  if (config.variant == AttentionVariant::San) return 4 * d * d;
  return d * d + 2 * fsmn_param_count_without_current_tap(config.fsmn, d);
}

}  // namespace ssan
