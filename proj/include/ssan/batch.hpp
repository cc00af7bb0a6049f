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

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ssan/tensor.hpp"

namespace ssan {

inline constexpr int kPadId = 0;
inline constexpr int kSosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kReservedTokens = 3;

inline bool is_reserved_token(int id) { return id >= 0 && id < kReservedTokens; }

/// Padded real-valued sequences, B x T x dim, row-major.
struct FeatureBatch {
  std::size_t batch = 0;
  std::size_t frames = 0;
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<std::size_t> lengths;
  std::vector<std::uint8_t> mask;  // B x T; mask[b, t] == (t < lengths[b])

  /// Each sequence is a row-major [T_b x dim] block.
  static FeatureBatch from_sequences(const std::vector<std::vector<float>>& sequences,
                                     std::size_t dim) {
    FeatureBatch fb;
    fb.batch = sequences.size();
    fb.dim = dim;
    for (const auto& s : sequences) {
      if (dim == 0 || s.size() % dim != 0 || s.empty()) {
        throw ContractError("feature sequence must hold a positive whole number of frames");
      }
      fb.lengths.push_back(s.size() / dim);
      fb.frames = std::max(fb.frames, s.size() / dim);
    }
    fb.features.assign(fb.batch * fb.frames * dim, 0.0f);
    fb.mask.assign(fb.batch * fb.frames, 0);
    for (std::size_t b = 0; b < fb.batch; ++b) {
      std::copy(sequences[b].begin(), sequences[b].end(),
                fb.features.begin() + static_cast<std::ptrdiff_t>(b * fb.frames * dim));
      std::fill_n(fb.mask.begin() + static_cast<std::ptrdiff_t>(b * fb.frames), fb.lengths[b], 1);
    }
    return fb;
  }

  void validate() const {
    if (batch == 0 || frames == 0) throw ContractError("feature batch is empty");
    if (features.size() != batch * frames * dim || lengths.size() != batch ||
        mask.size() != batch * frames) {
      throw ContractError("feature batch buffers do not match B x T x dim");
    }
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] == 0) throw ContractError("feature batch member " + std::to_string(b) + " is empty");
      for (std::size_t t = 0; t < frames; ++t) {
        if ((mask[b * frames + t] != 0) != (t < lengths[b])) {
          throw ContractError("feature mask disagrees with lengths");
        }
      }
    }
  }

  template <typename T>
  Tensor<T> to_tensor(bool requires_grad = false) const {
    return Tensor<T>({batch, frames, dim}, std::vector<T>(features.begin(), features.end()),
                     requires_grad);
  }
};

/// Padded token sequences, each sos ... eos followed by pad.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;

  static TokenBatch from_sequences(const std::vector<std::vector<int>>& sequences) {
    TokenBatch tb;
    tb.batch = sequences.size();
    for (const auto& s : sequences) {
      tb.lengths.push_back(s.size());
      tb.max_len = std::max(tb.max_len, s.size());
    }
    tb.tokens.assign(tb.batch * tb.max_len, kPadId);
    for (std::size_t b = 0; b < tb.batch; ++b)
      std::copy(sequences[b].begin(), sequences[b].end(),
                tb.tokens.begin() + static_cast<std::ptrdiff_t>(b * tb.max_len));
    return tb;
  }

  int at(std::size_t b, std::size_t t) const { return tokens[b * max_len + t]; }

  void validate(std::size_t vocab_size) const {
    if (tokens.size() != batch * max_len || lengths.size() != batch) {
      throw ContractError("token batch buffers do not match B x L");
    }
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] < 2 || at(b, 0) != kSosId || at(b, lengths[b] - 1) != kEosId) {
        throw ContractError("token sequence " + std::to_string(b) + " must be sos ... eos");
      }
      for (std::size_t t = 0; t < max_len; ++t) {
        const int id = at(b, t);
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
          throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
        }
        if (t >= lengths[b] && id != kPadId) throw ContractError("non-pad token after eos");
      }
    }
  }
};

/// Decoder inputs (sos y1 .. yn) and shifted targets (y1 .. yn eos).
struct TeacherForcing {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<int> inputs;   // B x steps, pad beyond length
  std::vector<int> targets;  // B x steps, pad beyond length
  std::vector<std::size_t> lengths;
};

inline TeacherForcing teacher_forcing(const TokenBatch& tb) {
  TeacherForcing tf;
  tf.batch = tb.batch;
  tf.steps = tb.max_len - 1;
  tf.inputs.assign(tf.batch * tf.steps, kPadId);
  tf.targets.assign(tf.batch * tf.steps, kPadId);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const std::size_t n = tb.lengths[b] - 1;
    tf.lengths.push_back(n);
    for (std::size_t t = 0; t < n; ++t) {
      tf.inputs[b * tf.steps + t] = tb.at(b, t);
      tf.targets[b * tf.steps + t] = tb.at(b, t + 1);
    }
  }
  return tf;
}

}  // namespace ssan
