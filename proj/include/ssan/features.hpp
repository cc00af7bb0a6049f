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

// Front-end feature pipeline: context stacking with frame-rate reduction,
// time/frequency masking, and the synthetic sequence tasks used in place of
// recorded speech.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ssan/batch.hpp"
#include "ssan/tensor.hpp"

namespace ssan {

struct FrameStacking {
  std::size_t left = 3;
  std::size_t right = 3;
  std::size_t rate = 6;

  std::size_t window() const { return left + 1 + right; }
};

/// frames: row-major [T x dim]. Each kept row t in {0, rate, 2 rate, ...}
/// concatenates frames t-left .. t+right, zero-filled past the edges.
/// Output is [ceil(T / rate) x window * dim].
inline std::vector<float> stack_and_downsample(std::span<const float> frames, std::size_t dim,
                                               FrameStacking cfg = {}) {
  if (dim == 0 || frames.empty() || frames.size() % dim != 0) {
    throw ContractError("stack_and_downsample: input must hold at least one whole frame");
  }
  if (cfg.rate == 0) throw ContractError("stack_and_downsample: rate must be positive");
  const std::size_t steps = frames.size() / dim;
  const std::size_t out_steps = (steps + cfg.rate - 1) / cfg.rate;
  const std::size_t width = cfg.window() * dim;
  std::vector<float> out(out_steps * width, 0.0f);
  for (std::size_t r = 0; r < out_steps; ++r) {
    const auto center = static_cast<long long>(r * cfg.rate);
    for (std::size_t slot = 0; slot < cfg.window(); ++slot) {
      const long long src = center - static_cast<long long>(cfg.left) + static_cast<long long>(slot);
      if (src < 0 || src >= static_cast<long long>(steps)) continue;
      std::copy_n(frames.begin() + src * static_cast<long long>(dim), dim,
                  out.begin() + static_cast<std::ptrdiff_t>(r * width + slot * dim));
    }
  }
  return out;
}

struct SpecAugmentConfig {
  std::size_t time_masks = 2;
  std::size_t max_time_width = 10;
  std::size_t freq_masks = 2;
  std::size_t max_freq_width = 8;
};

struct MaskBand {
  bool time_axis = true;  // false: a band of feature channels
  std::size_t start = 0;
  std::size_t width = 0;
};

/// Widths are uniform in [0, min(max_width, extent)]; starts are uniform over
/// the positions where the band fits.
template <typename Rng>
std::vector<MaskBand> sample_mask_bands(std::size_t steps, std::size_t dim,
                                        const SpecAugmentConfig& cfg, Rng& rng) {
  std::vector<MaskBand> bands;
  auto draw = [&](bool time_axis, std::size_t extent, std::size_t max_width) {
    const std::size_t limit = std::min(max_width, extent);
    const std::size_t width = std::uniform_int_distribution<std::size_t>(0, limit)(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, extent - width)(rng);
    bands.push_back({time_axis, start, width});
  };
  for (std::size_t i = 0; i < cfg.time_masks; ++i) draw(true, steps, cfg.max_time_width);
  for (std::size_t i = 0; i < cfg.freq_masks; ++i) draw(false, dim, cfg.max_freq_width);
  return bands;
}

inline void apply_mask_bands(std::span<float> frames, std::size_t dim,
                             const std::vector<MaskBand>& bands) {
  const std::size_t steps = frames.size() / dim;
  for (const MaskBand& band : bands) {
    if (band.time_axis) {
      if (band.start + band.width > steps) throw ContractError("time mask exceeds sequence");
      std::fill_n(frames.begin() + static_cast<std::ptrdiff_t>(band.start * dim), band.width * dim, 0.0f);
    } else {
      if (band.start + band.width > dim) throw ContractError("frequency mask exceeds feature width");
      for (std::size_t t = 0; t < steps; ++t)
        std::fill_n(frames.begin() + static_cast<std::ptrdiff_t>(t * dim + band.start), band.width, 0.0f);
    }
  }
}

/// Masking-only SpecAugment (no time warping) on raw [T x dim] frames.
template <typename Rng>
std::vector<float> spec_augment(std::span<const float> frames, std::size_t dim,
                                const SpecAugmentConfig& cfg, Rng& rng) {
  std::vector<float> out(frames.begin(), frames.end());
  apply_mask_bands(out, dim, sample_mask_bands(frames.size() / dim, dim, cfg, rng));
  return out;
}

enum class ToyTaskKind { Copy, Reverse, MonotonicMap };

inline const char* toy_task_name(ToyTaskKind kind) {
  switch (kind) {
    case ToyTaskKind::Copy: return "copy";
    case ToyTaskKind::Reverse: return "reverse";
    case ToyTaskKind::MonotonicMap: return "monotonic-map";
  }
  return "?";
}

inline ToyTaskKind parse_toy_task(const std::string& name) {
  if (name == "copy") return ToyTaskKind::Copy;
  if (name == "reverse") return ToyTaskKind::Reverse;
  if (name == "monotonic-map") return ToyTaskKind::MonotonicMap;
  throw ContractError("unknown toy task '" + name + "' (copy, reverse, monotonic-map)");
}

struct ToyTaskConfig {
  ToyTaskKind kind = ToyTaskKind::Copy;
  std::size_t vocab = 30;  // includes the 3 reserved symbols
  std::size_t min_len = 5;
  std::size_t max_len = 15;
  std::size_t frame_dim = 80;
  double noise = 0.1;
  // Fixes the symbol-to-frame embedding and the symbol mapping, so train
  // and dev splits drawn with different sample seeds share one task.
  std::uint64_t task_seed = 0;
  FrameStacking stacking;

  std::size_t input_dim() const { return frame_dim * stacking.window(); }

  void validate() const {
    if (vocab < 5) throw ContractError("toy task: vocab must be at least 5");
    if (min_len == 0 || min_len > max_len) throw ContractError("toy task: need 1 <= min_len <= max_len");
    if (frame_dim == 0) throw ContractError("toy task: frame_dim must be positive");
  }
};

struct Utterance {
  std::vector<int> latent;   // symbols in [3, vocab)
  std::vector<float> frames;  // [latent.size() * rate x frame_dim], unstacked
  std::vector<int> labels;   // sos, target symbols, eos
};

struct ToyDataset {
  ToyTaskConfig task;
  std::vector<Utterance> samples;

  std::size_t size() const { return samples.size(); }
};

namespace detail {

inline std::vector<float> symbol_embeddings(const ToyTaskConfig& task) {
  std::mt19937_64 rng(task.task_seed ^ 0x5eed0f5e7a11ULL);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> table(task.vocab * task.frame_dim);
  for (float& v : table) v = static_cast<float>(dist(rng));
  return table;
}

inline std::vector<int> symbol_mapping(const ToyTaskConfig& task) {
  std::vector<int> map(task.vocab);
  std::iota(map.begin(), map.end(), 0);
  std::mt19937_64 rng(task.task_seed ^ 0x9a7f00d1ULL);
  std::shuffle(map.begin() + kReservedTokens, map.end(), rng);
  return map;
}

}  // namespace detail

/// Each latent symbol spans `stacking.rate` frames of its embedding plus
/// Gaussian noise, so stacking recovers one feature row per symbol.
inline ToyDataset make_toy_task(const ToyTaskConfig& task, std::size_t count, std::uint64_t seed) {
  task.validate();
  const std::vector<float> table = detail::symbol_embeddings(task);
  const std::vector<int> mapping = detail::symbol_mapping(task);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> length(task.min_len, task.max_len);
  std::uniform_int_distribution<int> symbol(kReservedTokens, static_cast<int>(task.vocab) - 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  ToyDataset ds;
  ds.task = task;
  ds.samples.reserve(count);
  const std::size_t rate = task.stacking.rate, dim = task.frame_dim;
  for (std::size_t n = 0; n < count; ++n) {
    Utterance u;
    u.latent.resize(length(rng));
    for (int& s : u.latent) s = symbol(rng);
    u.frames.resize(u.latent.size() * rate * dim);
    for (std::size_t k = 0; k < u.latent.size(); ++k)
      for (std::size_t f = 0; f < rate; ++f)
        for (std::size_t e = 0; e < dim; ++e)
          u.frames[(k * rate + f) * dim + e] =
              table[static_cast<std::size_t>(u.latent[k]) * dim + e] +
              static_cast<float>(task.noise * noise(rng));
    std::vector<int> target = u.latent;
    if (task.kind == ToyTaskKind::Reverse) std::reverse(target.begin(), target.end());
    if (task.kind == ToyTaskKind::MonotonicMap)
      for (int& s : target) s = mapping[static_cast<std::size_t>(s)];
    u.labels.push_back(kSosId);
    u.labels.insert(u.labels.end(), target.begin(), target.end());
    u.labels.push_back(kEosId);
    ds.samples.push_back(std::move(u));
  }
  return ds;
}

/// Stacked feature batch for the given samples; masking is applied to raw
/// frames before stacking when `augment` is given.
template <typename Rng = std::mt19937_64>
FeatureBatch make_feature_batch(const ToyDataset& ds, std::span<const std::size_t> indices,
                                const SpecAugmentConfig* augment = nullptr, Rng* rng = nullptr) {
  std::vector<std::vector<float>> seqs;
  seqs.reserve(indices.size());
  for (std::size_t i : indices) {
    const Utterance& u = ds.samples.at(i);
    if (augment && rng) {
      seqs.push_back(stack_and_downsample(spec_augment(u.frames, ds.task.frame_dim, *augment, *rng),
                                          ds.task.frame_dim, ds.task.stacking));
    } else {
      seqs.push_back(stack_and_downsample(u.frames, ds.task.frame_dim, ds.task.stacking));
    }
  }
  return FeatureBatch::from_sequences(seqs, ds.task.input_dim());
}

inline TokenBatch make_token_batch(const ToyDataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::vector<int>> seqs;
  for (std::size_t i : indices) seqs.push_back(ds.samples.at(i).labels);
  return TokenBatch::from_sequences(seqs);
}

}  // namespace ssan
