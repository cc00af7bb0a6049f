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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ssan/batch.hpp"
#include "ssan/features.hpp"
#include "ssan/model.hpp"

namespace ssan {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;   // reference tokens missing from the hypothesis
  std::size_t insertions = 0;  // hypothesis tokens absent from the reference

  std::size_t total() const { return substitutions + deletions + insertions; }
  bool operator==(const EditCounts&) const = default;
};

/// Unit-cost Levenshtein alignment. Among minimal alignments the backtrace
/// prefers substitution (or match), then insertion, then deletion.
inline EditCounts edit_distance(std::span<const int> hyp, std::span<const int> ref) {
  const std::size_t h = hyp.size(), r = ref.size();
  // cost[i][j]: hyp prefix i against ref prefix j
  std::vector<std::size_t> cost((h + 1) * (r + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (r + 1) + j]; };
  for (std::size_t i = 0; i <= h; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= r; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= h; ++i)
    for (std::size_t j = 1; j <= r; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0u : 1u),
                           at(i - 1, j) + 1, at(i, j - 1) + 1});
  EditCounts counts;
  std::size_t i = h, j = r;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0u : 1u)) {
      if (hyp[i - 1] != ref[j - 1]) ++counts.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++counts.insertions;
      --i;
    } else {
      ++counts.deletions;
      --j;
    }
  }
  return counts;
}

inline std::vector<int> strip_reserved(std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens)
    if (!is_reserved_token(t)) out.push_back(t);
  return out;
}

struct UtteranceScore {
  std::vector<int> hypothesis;
  std::vector<int> reference;
  EditCounts edits;

  /// Percentage; may exceed 100 when insertions dominate.
  double cer() const {
    return reference.empty() ? (edits.total() ? 100.0 : 0.0)
                             : 100.0 * static_cast<double>(edits.total()) / static_cast<double>(reference.size());
  }
};

struct EvalReport {
  std::vector<UtteranceScore> utterances;
  std::size_t total_edits = 0;
  std::size_t total_reference = 0;

  double corpus_cer() const {
    return total_reference ? 100.0 * static_cast<double>(total_edits) / static_cast<double>(total_reference)
                           : 0.0;
  }
};

inline EvalReport score_cer(const std::vector<std::vector<int>>& hyps,
                            const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) {
    throw ContractError("score_cer: " + std::to_string(hyps.size()) + " hypotheses for " +
                        std::to_string(refs.size()) + " references");
  }
  EvalReport report;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    UtteranceScore u{strip_reserved(hyps[i]), strip_reserved(refs[i]), {}};
    u.edits = edit_distance(u.hypothesis, u.reference);
    report.total_edits += u.edits.total();
    report.total_reference += u.reference.size();
    report.utterances.push_back(std::move(u));
  }
  return report;
}

/// Fraction of reference positions whose token the hypothesis reproduces at
/// the same index (reserved tokens stripped from both).
inline double token_accuracy(const std::vector<std::vector<int>>& hyps,
                             const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) throw ContractError("token_accuracy: list length mismatch");
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const std::vector<int> h = strip_reserved(hyps[i]), r = strip_reserved(refs[i]);
    for (std::size_t k = 0; k < r.size(); ++k) correct += k < h.size() && h[k] == r[k];
    total += r.size();
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 1.0;
}

struct DatasetEvaluation {
  std::vector<std::vector<int>> hypotheses;
  std::vector<std::vector<int>> references;
  EvalReport report;
  double accuracy = 0.0;
};

template <typename T>
DatasetEvaluation evaluate_greedy(const Transformer<T>& model, const ToyDataset& ds,
                                  std::size_t batch_size = 32) {
  DatasetEvaluation ev;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    std::size_t longest = 0;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) {
      idx.push_back(i);
      longest = std::max(longest, ds.samples[i].labels.size());
    }
    auto hyps = model.greedy_decode(make_feature_batch(ds, idx), longest + 5);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      ev.hypotheses.push_back(std::move(hyps[k]));
      ev.references.push_back(ds.samples[idx[k]].labels);
    }
  }
  ev.report = score_cer(ev.hypotheses, ev.references);
  ev.accuracy = token_accuracy(ev.hypotheses, ev.references);
  return ev;
}

enum class AttentionSource { EncoderSelf, DecoderSelf, Cross };

inline const char* attention_source_name(AttentionSource s) {
  switch (s) {
    case AttentionSource::EncoderSelf: return "encoder-self";
    case AttentionSource::DecoderSelf: return "decoder-self";
    case AttentionSource::Cross: return "cross";
  }
  return "?";
}

/// One layer's attention for a single utterance, averaged over heads.
struct AttentionRecord {
  AttentionSource source = AttentionSource::EncoderSelf;
  std::size_t layer = 0;
  std::size_t rows = 0, cols = 0;
  std::vector<double> matrix;  // rows x cols
  std::vector<std::string> row_labels, col_labels;

  double at(std::size_t r, std::size_t c) const { return matrix[r * cols + c]; }
};

/// attn: [B, h, Tq, Tk]; keeps batch member `b`, first `rows` x `cols`.
template <typename T>
AttentionRecord head_average(const Tensor<T>& attn, std::size_t b, std::size_t rows,
                             std::size_t cols, AttentionSource source, std::size_t layer) {
  const std::size_t heads = attn.dim(1), tq = attn.dim(2), tk = attn.dim(3);
  AttentionRecord rec;
  rec.source = source;
  rec.layer = layer;
  rec.rows = rows;
  rec.cols = cols;
  rec.matrix.assign(rows * cols, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < rows; ++q)
      for (std::size_t k = 0; k < cols; ++k)
        rec.matrix[q * cols + k] += static_cast<double>(attn.data()[((b * heads + h) * tq + q) * tk + k]);
  for (double& v : rec.matrix) v /= static_cast<double>(heads);
  return rec;
}

inline std::string token_label(int id) {
  switch (id) {
    case kPadId: return "<pad>";
    case kSosId: return "<sos>";
    case kEosId: return "<eos>";
    default: return "t" + std::to_string(id);
  }
}

/// Last-layer encoder, decoder and cross attention for one utterance. The
/// decoder is fed sos plus the greedy hypothesis, so each row is the query
/// that predicted the next token (the last row predicted eos).
template <typename T>
std::vector<AttentionRecord> collect_attention(const Transformer<T>& model, const FeatureBatch& single,
                                               std::size_t max_len) {
  if (single.batch != 1) throw ContractError("collect_attention expects a single utterance");
  NoGradGuard no_grad;
  const std::vector<int> hyp = model.greedy_decode(single, max_len).at(0);
  std::vector<int> dec_in{kSosId};
  dec_in.insert(dec_in.end(), hyp.begin(), hyp.end());
  const EncoderOutput<T> enc = model.encode(single);
  const DecoderOutput<T> dec =
      model.decode_teacher_forced(dec_in, 1, dec_in.size(), {dec_in.size()}, enc);
  const std::size_t frames = single.lengths[0], chars = dec_in.size();

  std::vector<std::string> frame_labels, char_labels;
  for (std::size_t t = 0; t < frames; ++t) frame_labels.push_back("f" + std::to_string(t));
  for (int id : dec_in) char_labels.push_back(token_label(id));

  std::vector<AttentionRecord> out;
  out.push_back(head_average(enc.self_attns.back(), 0, frames, frames, AttentionSource::EncoderSelf,
                             enc.self_attns.size() - 1));
  out.back().row_labels = out.back().col_labels = frame_labels;
  out.push_back(head_average(dec.self_attns.back(), 0, chars, chars, AttentionSource::DecoderSelf,
                             dec.self_attns.size() - 1));
  out.back().row_labels = out.back().col_labels = char_labels;
  out.push_back(head_average(dec.cross_attns.back(), 0, chars, frames, AttentionSource::Cross,
                             dec.cross_attns.size() - 1));
  out.back().row_labels = char_labels;
  out.back().col_labels = frame_labels;
  return out;
}

/// Header row: corner label then column labels; each following row: row
/// label then values with 9 significant digits.
inline std::string attention_csv(const AttentionRecord& rec) {
  std::string s = "query\\key";
  for (const auto& c : rec.col_labels) s += "," + c;
  s += '\n';
  char buf[32];
  for (std::size_t r = 0; r < rec.rows; ++r) {
    s += rec.row_labels.at(r);
    for (std::size_t c = 0; c < rec.cols; ++c) {
      std::snprintf(buf, sizeof(buf), ",%.9g", rec.at(r, c));
      s += buf;
    }
    s += '\n';
  }
  return s;
}

inline std::string attention_file_name(const AttentionRecord& rec) {
  switch (rec.source) {
    case AttentionSource::EncoderSelf: return "encoder_self.csv";
    case AttentionSource::DecoderSelf: return "decoder_self.csv";
    case AttentionSource::Cross: return "cross.csv";
  }
  return "attention.csv";
}

inline std::vector<std::string> write_attention_csvs(const std::vector<AttentionRecord>& records,
                                                     const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  for (const auto& rec : records) {
    const std::string path = (std::filesystem::path(out_dir) / attention_file_name(rec)).string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << attention_csv(rec);
    if (!out) throw std::runtime_error("write to " + path + " failed");
    paths.push_back(path);
  }
  return paths;
}

/// Fraction of adjacent row pairs whose argmax column does not decrease.
inline double monotonic_fraction(const AttentionRecord& rec) {
  if (rec.rows < 2) return 1.0;
  auto argmax = [&](std::size_t r) {
    const auto begin = rec.matrix.begin() + static_cast<std::ptrdiff_t>(r * rec.cols);
    return static_cast<std::size_t>(std::max_element(begin, begin + static_cast<std::ptrdiff_t>(rec.cols)) - begin);
  };
  std::size_t ok = 0;
  for (std::size_t r = 0; r + 1 < rec.rows; ++r) ok += argmax(r + 1) >= argmax(r);
  return static_cast<double>(ok) / static_cast<double>(rec.rows - 1);
}

}  // namespace ssan
