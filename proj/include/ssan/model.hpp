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

// Encoder-decoder transformer with pre-norm residual sublayers.
//
// Encoder layer: self-attention, FFN.
// Decoder layer: causal self-attention, cross-attention, FFN.
//
// Self-attention sublayers are SAN or SSAN depending on the config;
// cross-attention is always SAN.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ssan/attention.hpp"
#include "ssan/batch.hpp"
#include "ssan/fsmn.hpp"
#include "ssan/tensor.hpp"

namespace ssan {

struct ModelConfig {
  std::size_t encoder_layers = 6;
  std::size_t decoder_layers = 3;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ffn = 2048;
  AttentionVariant variant = AttentionVariant::San;
  FsmnOrders encoder_fsmn{11, 10};
  FsmnOrders decoder_fsmn{11, 0};
  std::size_t input_dim = 560;
  std::size_t vocab_size = 4233;  // includes pad, sos, eos
  double dropout = 0.1;

  AttentionConfig encoder_attention() const {
    return {d_model, heads, variant, encoder_fsmn, false};
  }
  AttentionConfig decoder_self_attention() const {
    return {d_model, heads, variant, decoder_fsmn, true};
  }
  AttentionConfig cross_attention() const {
    return {d_model, heads, AttentionVariant::San, {}, false};
  }

  void validate() const {
    if (encoder_layers == 0 || decoder_layers == 0) throw ContractError("model: layer counts must be positive");
    if (d_ffn == 0 || input_dim == 0) throw ContractError("model: d_ffn and input_dim must be positive");
    if (vocab_size <= static_cast<std::size_t>(kReservedTokens)) {
      throw ContractError("model: vocab_size must exceed the 3 reserved symbols");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("model: dropout must be in [0, 1)");
    if (variant == AttentionVariant::Ssan && decoder_fsmn.look_ahead != 0) {
      throw ContractError("model: SSAN decoder look-ahead order must be 0");
    }
    encoder_attention().validate();
    decoder_self_attention().validate();
  }
};

template <typename T>
struct LayerNormWeights {
  Tensor<T> gain, bias;
};

template <typename T>
struct FeedForwardWeights {
  Tensor<T> w1;  // [d_model x d_ffn]
  Tensor<T> b1;  // [d_ffn]
  Tensor<T> w2;  // [d_ffn x d_model]
  Tensor<T> b2;  // [d_model]
};

template <typename T>
struct EncoderLayer {
  SelfAttentionWeights<T> self_attn;
  FeedForwardWeights<T> ffn;
  LayerNormWeights<T> attn_norm, ffn_norm;
};

template <typename T>
struct DecoderLayer {
  SelfAttentionWeights<T> self_attn;
  SanWeights<T> cross_attn;
  FeedForwardWeights<T> ffn;
  LayerNormWeights<T> self_norm, cross_norm, ffn_norm;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct ModelWeights {
  Tensor<T> input_proj;       // [input_dim x d_model]
  Tensor<T> input_bias;       // [d_model]
  Tensor<T> token_embedding;  // [vocab x d_model]
  std::vector<EncoderLayer<T>> encoder;
  LayerNormWeights<T> encoder_norm;
  std::vector<DecoderLayer<T>> decoder;
  LayerNormWeights<T> decoder_norm;
  Tensor<T> output_proj;  // [d_model x vocab]
  Tensor<T> output_bias;  // [vocab]

  /// Stable dotted names; tensors alias the weights.
  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    auto add = [&out](std::string name, const Tensor<T>& t) {
      if (t.defined()) out.push_back({std::move(name), t});
    };
    auto add_norm = [&add](const std::string& p, const LayerNormWeights<T>& n) {
      add(p + ".gain", n.gain);
      add(p + ".bias", n.bias);
    };
    auto add_san = [&add](const std::string& p, const SanWeights<T>& w) {
      add(p + ".wq", w.wq);
      add(p + ".wk", w.wk);
      add(p + ".wv", w.wv);
      add(p + ".wo", w.wo);
    };
    auto add_self = [&](const std::string& p, const SelfAttentionWeights<T>& w) {
      if (const auto* san = std::get_if<SanWeights<T>>(&w)) {
        add_san(p, *san);
        return;
      }
      const auto& ssan = std::get<SsanWeights<T>>(w);
      add(p + ".q_coeffs.back_taps", ssan.q_coeffs.back_taps);
      add(p + ".q_coeffs.ahead_taps", ssan.q_coeffs.ahead_taps);
      add(p + ".k_coeffs.back_taps", ssan.k_coeffs.back_taps);
      add(p + ".k_coeffs.ahead_taps", ssan.k_coeffs.ahead_taps);
      add(p + ".wo", ssan.wo);
    };
    auto add_ffn = [&add](const std::string& p, const FeedForwardWeights<T>& f) {
      add(p + ".w1", f.w1);
      add(p + ".b1", f.b1);
      add(p + ".w2", f.w2);
      add(p + ".b2", f.b2);
    };

    add("input.proj", input_proj);
    add("input.bias", input_bias);
    add("embed.tokens", token_embedding);
    for (std::size_t i = 0; i < encoder.size(); ++i) {
      const std::string p = "encoder.layer" + std::to_string(i);
      add_self(p + ".attn", encoder[i].self_attn);
      add_ffn(p + ".ffn", encoder[i].ffn);
      add_norm(p + ".attn_norm", encoder[i].attn_norm);
      add_norm(p + ".ffn_norm", encoder[i].ffn_norm);
    }
    add_norm("encoder.norm", encoder_norm);
    for (std::size_t i = 0; i < decoder.size(); ++i) {
      const std::string p = "decoder.layer" + std::to_string(i);
      add_self(p + ".self_attn", decoder[i].self_attn);
      add_san(p + ".cross_attn", decoder[i].cross_attn);
      add_ffn(p + ".ffn", decoder[i].ffn);
      add_norm(p + ".self_norm", decoder[i].self_norm);
      add_norm(p + ".cross_norm", decoder[i].cross_norm);
      add_norm(p + ".ffn_norm", decoder[i].ffn_norm);
    }
    add_norm("decoder.norm", decoder_norm);
    add("output.proj", output_proj);
    add("output.bias", output_bias);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.numel();
    return n;
  }
};

namespace detail {

template <typename T, typename Rng>
Tensor<T> xavier(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(rows * cols);
  for (T& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>({rows, cols}, std::move(v), true);
}

template <typename T>
LayerNormWeights<T> unit_norm(std::size_t d) {
  return {Tensor<T>::filled({d}, T{1}, true), Tensor<T>({d}, true)};
}

template <typename T, typename Rng>
SanWeights<T> san_weights(std::size_t d, Rng& rng) {
  return {xavier<T>(d, d, rng), xavier<T>(d, d, rng), xavier<T>(d, d, rng), xavier<T>(d, d, rng)};
}

template <typename T, typename Rng>
SelfAttentionWeights<T> self_attention_weights(const AttentionConfig& cfg, Rng& rng) {
  if (cfg.variant == AttentionVariant::San) return san_weights<T>(cfg.d_model, rng);
  SsanWeights<T> w;
  w.q_coeffs = FsmnCoefficients<T>::random(cfg.fsmn, cfg.d_model, rng);
  w.k_coeffs = FsmnCoefficients<T>::random(cfg.fsmn, cfg.d_model, rng);
  w.wo = xavier<T>(cfg.d_model, cfg.d_model, rng);
  return w;
}

template <typename T, typename Rng>
FeedForwardWeights<T> ffn_weights(std::size_t d, std::size_t ffn, Rng& rng) {
  return {xavier<T>(d, ffn, rng), Tensor<T>({ffn}, true), xavier<T>(ffn, d, rng),
          Tensor<T>({d}, true)};
}

}  // namespace detail

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  ModelWeights<T> w;
  w.input_proj = detail::xavier<T>(config.input_dim, d, rng);
  w.input_bias = Tensor<T>({d}, true);
  {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    std::vector<T> v(config.vocab_size * d);
    for (T& x : v) x = static_cast<T>(dist(rng));
    w.token_embedding = Tensor<T>({config.vocab_size, d}, std::move(v), true);
  }
  for (std::size_t i = 0; i < config.encoder_layers; ++i) {
    EncoderLayer<T> layer;
    layer.self_attn = detail::self_attention_weights<T>(config.encoder_attention(), rng);
    layer.ffn = detail::ffn_weights<T>(d, config.d_ffn, rng);
    layer.attn_norm = detail::unit_norm<T>(d);
    layer.ffn_norm = detail::unit_norm<T>(d);
    w.encoder.push_back(std::move(layer));
  }
  w.encoder_norm = detail::unit_norm<T>(d);
  for (std::size_t i = 0; i < config.decoder_layers; ++i) {
    DecoderLayer<T> layer;
    layer.self_attn = detail::self_attention_weights<T>(config.decoder_self_attention(), rng);
    layer.cross_attn = detail::san_weights<T>(d, rng);
    layer.ffn = detail::ffn_weights<T>(d, config.d_ffn, rng);
    layer.self_norm = detail::unit_norm<T>(d);
    layer.cross_norm = detail::unit_norm<T>(d);
    layer.ffn_norm = detail::unit_norm<T>(d);
    w.decoder.push_back(std::move(layer));
  }
  w.decoder_norm = detail::unit_norm<T>(d);
  w.output_proj = detail::xavier<T>(d, config.vocab_size, rng);
  w.output_bias = Tensor<T>({config.vocab_size}, true);
  return w;
}

/// Fixed sinusoidal encoding, [B, T, d] (same for every batch member).
template <typename T>
Tensor<T> positional_encoding(std::size_t batch, std::size_t steps, std::size_t d) {
  std::vector<T> v(batch * steps * d);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(t) * freq;
      const T value = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      for (std::size_t b = 0; b < batch; ++b) v[(b * steps + t) * d + i] = value;
    }
  return Tensor<T>({batch, steps, d}, std::move(v));
}

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [B, T, d_model]
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> valid;  // B x T
  std::vector<Tensor<T>> self_attns;  // per layer, [B, h, T, T]
};

template <typename T>
struct DecoderOutput {
  Tensor<T> logits;  // [B, L, vocab]
  std::vector<Tensor<T>> self_attns;   // per layer, [B, h, L, L]
  std::vector<Tensor<T>> cross_attns;  // per layer, [B, h, L, T]
};

template <typename T>
class Transformer {
 public:
  Transformer(ModelConfig config, std::uint64_t seed)
      : config_(std::move(config)), weights_(init_weights<T>(config_, seed)) {}

  Transformer(ModelConfig config, ModelWeights<T> weights)
      : config_(std::move(config)), weights_(std::move(weights)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  const ModelWeights<T>& weights() const { return weights_; }
  ModelWeights<T>& weights() { return weights_; }

  EncoderOutput<T> encode(const FeatureBatch& batch, DropoutContext* drop = nullptr) const {
    batch.validate();
    return encode(batch.to_tensor<T>(), batch.lengths, drop);
  }

  /// features: [B, T, input_dim]; positions at or beyond lengths[b] are padding.
  EncoderOutput<T> encode(const Tensor<T>& features, const std::vector<std::size_t>& lengths,
                          DropoutContext* drop = nullptr) const {
    if (features.rank() != 3 || features.dim(2) != config_.input_dim) {
      throw DimensionError("encode: features must be [B, T, " + std::to_string(config_.input_dim) +
                           "], got " + shape_str(features.shape()));
    }
    const std::size_t batch = features.dim(0), steps = features.dim(1), d = config_.d_model;
    if (lengths.size() != batch) throw ContractError("encode: one length per batch member required");
    EncoderOutput<T> out;
    out.lengths = lengths;
    out.valid.assign(batch * steps, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] == 0 || lengths[b] > steps) {
        throw ContractError("encode: sequence length must be in [1, T]");
      }
      std::fill_n(out.valid.begin() + static_cast<std::ptrdiff_t>(b * steps), lengths[b], 1);
    }

    Tensor<T> x = add_bias(matmul(features, weights_.input_proj), weights_.input_bias);
    x = apply_dropout(add(x, positional_encoding<T>(batch, steps, d)), drop);
    const AttentionConfig attn_cfg = config_.encoder_attention();
    const AttentionMask mask = AttentionMask::from_lengths(steps, steps, lengths);
    for (const EncoderLayer<T>& layer : weights_.encoder) {
      AttentionResult<T> r = self_attention(norm(x, layer.attn_norm), layer.self_attn, attn_cfg,
                                            mask, out.valid, drop);
      x = add(x, apply_dropout(r.out, drop));
      x = add(x, apply_dropout(feed_forward(norm(x, layer.ffn_norm), layer.ffn), drop));
      out.self_attns.push_back(r.attn);
    }
    out.hidden = norm(x, weights_.encoder_norm);
    return out;
  }

  /// tokens: B x steps decoder inputs (starting with sos); lengths count the
  /// valid prefix of each row.
  DecoderOutput<T> decode_teacher_forced(std::span<const int> tokens, std::size_t batch,
                                         std::size_t steps,
                                         const std::vector<std::size_t>& lengths,
                                         const EncoderOutput<T>& enc,
                                         DropoutContext* drop = nullptr) const {
    if (tokens.size() != batch * steps || lengths.size() != batch || steps == 0) {
      throw ContractError("decode: token buffer does not match B x L");
    }
    if (enc.hidden.dim(0) != batch) throw ContractError("decode: encoder batch differs");
    for (int id : tokens) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw ContractError("decode: token id " + std::to_string(id) + " >= vocab_size " +
                            std::to_string(config_.vocab_size));
      }
    }
    const std::size_t d = config_.d_model;
    std::vector<std::uint8_t> valid(batch * steps, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] == 0 || lengths[b] > steps) throw ContractError("decode: length must be in [1, L]");
      std::fill_n(valid.begin() + static_cast<std::ptrdiff_t>(b * steps), lengths[b], 1);
    }

    Tensor<T> y = scale(embedding(weights_.token_embedding, tokens, {batch, steps}),
                        static_cast<T>(std::sqrt(static_cast<double>(d))));
    y = apply_dropout(add(y, positional_encoding<T>(batch, steps, d)), drop);
    const AttentionConfig self_cfg = config_.decoder_self_attention();
    const AttentionMask self_mask = AttentionMask::from_lengths(steps, steps, lengths, true);
    const AttentionMask cross_mask =
        AttentionMask::from_lengths(steps, enc.hidden.dim(1), enc.lengths);
    DecoderOutput<T> out;
    for (const DecoderLayer<T>& layer : weights_.decoder) {
      AttentionResult<T> s = self_attention(norm(y, layer.self_norm), layer.self_attn, self_cfg,
                                            self_mask, valid, drop);
      y = add(y, apply_dropout(s.out, drop));
      AttentionResult<T> c = cross_attention(norm(y, layer.cross_norm), enc.hidden,
                                             layer.cross_attn, config_.heads, cross_mask, drop);
      y = add(y, apply_dropout(c.out, drop));
      y = add(y, apply_dropout(feed_forward(norm(y, layer.ffn_norm), layer.ffn), drop));
      out.self_attns.push_back(s.attn);
      out.cross_attns.push_back(c.attn);
    }
    out.logits = add_bias(matmul(norm(y, weights_.decoder_norm), weights_.output_proj),
                          weights_.output_bias);
    return out;
  }

  DecoderOutput<T> decode_teacher_forced(const TeacherForcing& tf, const EncoderOutput<T>& enc,
                                         DropoutContext* drop = nullptr) const {
    return decode_teacher_forced(tf.inputs, tf.batch, tf.steps, tf.lengths, enc, drop);
  }

  /// Appends the highest-scoring non-pad, non-sos token until eos or
  /// max_len tokens. Returned sequences exclude sos and eos.
  std::vector<std::vector<int>> greedy_decode(const FeatureBatch& batch, std::size_t max_len) const {
    NoGradGuard no_grad;
    const EncoderOutput<T> enc = encode(batch);
    const std::size_t b_count = batch.batch;
    std::vector<std::vector<int>> prefix(b_count, std::vector<int>{kSosId});
    std::vector<bool> done(b_count, false);
    for (std::size_t step = 0; step < max_len; ++step) {
      const std::size_t len = step + 1;
      std::vector<int> tokens;
      tokens.reserve(b_count * len);
      for (const auto& p : prefix) tokens.insert(tokens.end(), p.begin(), p.end());
      const DecoderOutput<T> dec = decode_teacher_forced(
          tokens, b_count, len, std::vector<std::size_t>(b_count, len), enc);
      bool all_done = true;
      for (std::size_t b = 0; b < b_count; ++b) {
        if (done[b]) {
          prefix[b].push_back(kEosId);
          continue;
        }
        const T* row = dec.logits.data().data() + (b * len + step) * config_.vocab_size;
        int best = kEosId;
        for (std::size_t v = kEosId + 1; v < config_.vocab_size; ++v)
          if (row[v] > row[best]) best = static_cast<int>(v);
        prefix[b].push_back(best);
        if (best == kEosId) done[b] = true;
        all_done = all_done && done[b];
      }
      if (all_done) break;
    }
    std::vector<std::vector<int>> out(b_count);
    for (std::size_t b = 0; b < b_count; ++b)
      for (std::size_t t = 1; t < prefix[b].size() && prefix[b][t] != kEosId; ++t)
        out[b].push_back(prefix[b][t]);
    return out;
  }

 private:
  Tensor<T> norm(const Tensor<T>& x, const LayerNormWeights<T>& n) const {
    return layer_norm(x, n.gain, n.bias);
  }

  Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& f) const {
    return add_bias(matmul(relu(add_bias(matmul(x, f.w1), f.b1)), f.w2), f.b2);
  }

  static Tensor<T> apply_dropout(const Tensor<T>& x, DropoutContext* drop) {
    return drop ? dropout(x, *drop) : x;
  }

  ModelConfig config_;
  ModelWeights<T> weights_;
};

/// Parameter counts derived from the config alone.
struct ParamAudit {
  std::size_t embeddings = 0;  // input projection (+bias) and token embedding
  std::size_t encoder_attention = 0;
  std::size_t encoder_ffn = 0;
  std::size_t decoder_self_attention = 0;
  std::size_t cross_attention = 0;
  std::size_t decoder_ffn = 0;
  std::size_t layer_norms = 0;
  std::size_t output_projection = 0;  // weight + bias
  std::size_t tied_savings = 0;       // vocab x d_model, shared if embedding is tied to output
  // Self-attention counts when the two FSMN blocks use (N1 + N2) d taps.
  std::size_t encoder_attention_without_current_tap = 0;
  std::size_t decoder_self_attention_without_current_tap = 0;

  std::size_t total() const {
    return embeddings + encoder_attention + encoder_ffn + decoder_self_attention +
           cross_attention + decoder_ffn + layer_norms + output_projection;
  }
  std::size_t tied_total() const { return total() - tied_savings; }
  std::size_t total_without_current_tap() const {
    return total() - encoder_attention - decoder_self_attention +
           encoder_attention_without_current_tap + decoder_self_attention_without_current_tap;
  }
};

inline ParamAudit count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t ffn = 2 * d * c.d_ffn + c.d_ffn + d;
  ParamAudit a;
  a.embeddings = c.input_dim * d + d + c.vocab_size * d;
  a.encoder_attention = c.encoder_layers * attention_param_count(c.encoder_attention());
  a.encoder_ffn = c.encoder_layers * ffn;
  a.decoder_self_attention = c.decoder_layers * attention_param_count(c.decoder_self_attention());
  a.cross_attention = c.decoder_layers * attention_param_count(c.cross_attention());
  a.decoder_ffn = c.decoder_layers * ffn;
  a.layer_norms = (2 * c.encoder_layers + 3 * c.decoder_layers + 2) * 2 * d;
  a.output_projection = d * c.vocab_size + c.vocab_size;
  a.tied_savings = c.vocab_size * d;
  a.encoder_attention_without_current_tap =
      c.encoder_layers * attention_param_count_without_current_tap(c.encoder_attention());
  a.decoder_self_attention_without_current_tap =
      c.decoder_layers * attention_param_count_without_current_tap(c.decoder_self_attention());
  return a;
}

struct ParamComparison {
  std::size_t baseline_total = 0;
  std::size_t candidate_total = 0;

  long long delta() const {
    return static_cast<long long>(baseline_total) - static_cast<long long>(candidate_total);
  }
  /// (baseline - candidate) / baseline
  double reduction() const {
    return static_cast<double>(delta()) / static_cast<double>(baseline_total);
  }
};

inline ParamComparison compare_params(const ParamAudit& baseline, const ParamAudit& candidate) {
  return {baseline.total(), candidate.total()};
}

}  // namespace ssan
