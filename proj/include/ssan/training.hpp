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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ssan/batch.hpp"
#include "ssan/checkpoint.hpp"
#include "ssan/features.hpp"
#include "ssan/model.hpp"
#include "ssan/tensor.hpp"

namespace ssan {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LrBranches {
  double decay;   // scale * d^-0.5 * step^-0.5
  double warmup;  // scale * d^-0.5 * step * warmup^-1.5
};

/// Both arms of the schedule, written as scale * (d * warmup)^-0.5 times
/// sqrt(warmup / step) or step / warmup, so the arms agree bitwise at
/// step == warmup.
inline LrBranches lr_schedule_branches(std::size_t step, std::size_t d_model, std::size_t warmup,
                                       double scale) {
  if (step == 0) throw ContractError("lr_schedule: step must be >= 1");
  if (warmup == 0) throw ContractError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  const double base = scale / std::sqrt(static_cast<double>(d_model)) / std::sqrt(w);
  return {base * std::sqrt(w / s), base * (s / w)};
}

/// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double lr_schedule(std::size_t step, std::size_t d_model, std::size_t warmup, double scale) {
  const LrBranches b = lr_schedule_branches(step, d_model, warmup, scale);
  return std::min(b.decay, b.warmup);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
};

/// Dense Adam with bias correction. Moments are kept in the parameter's
/// precision so optimizer state can be checkpointed exactly.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig config = {})
      : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), T{0});
      second_.emplace_back(p.numel(), T{0});
    }
  }

  void step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (p.grad().size() != p.numel() || first_[i].size() != p.numel()) {
        throw ContractError("adam: state does not match parameter " + std::to_string(i));
      }
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const double g = p.grad()[k];
        const double m = config_.beta1 * first_[i][k] + (1.0 - config_.beta1) * g;
        const double v = config_.beta2 * second_[i][k] + (1.0 - config_.beta2) * g * g;
        first_[i][k] = static_cast<T>(m);
        second_[i][k] = static_cast<T>(v);
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + config_.eps);
        p.data()[k] = static_cast<T>(p.data()[k] - update);
      }
    }
  }

  std::size_t steps() const { return steps_; }
  void set_steps(std::size_t n) { steps_ = n; }
  std::vector<std::vector<T>>& first_moments() { return first_; }
  std::vector<std::vector<T>>& second_moments() { return second_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> first_, second_;
  std::size_t steps_ = 0;
};

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Rescales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename T>
double clip_global_norm(std::vector<Tensor<T>>& params, double max_norm = 5.0) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params)
      for (T& g : p.grad()) g = static_cast<T>(g * factor);
  }
  return norm;
}

/// Cross-entropy against (1 - s) on the target and s / (V - 1) on every
/// other class, averaged over positions whose target is not pad.
template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, std::span<const int> targets,
                            double smoothing, int pad_id = kPadId) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) throw DimensionError("label_smoothed_ce: one target per logits row required");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("label_smoothed_ce: smoothing must be in [0, 1)");
  if (vocab < 2) throw ContractError("label_smoothed_ce: need at least two classes");
  const double on = 1.0 - smoothing;
  const double off = smoothing / static_cast<double>(vocab - 1);

  std::size_t count = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw ContractError("label_smoothed_ce: target outside vocabulary");
    ++count;
  }
  if (count == 0) throw ContractError("label_smoothed_ce: every target is padding");

  auto probs = std::make_shared<std::vector<T>>(logits.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const T* z = logits.data().data() + r * vocab;
    const double peak = *std::max_element(z, z + vocab);
    double denom = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) denom += std::exp(static_cast<double>(z[c]) - peak);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < vocab; ++c) {
      const double logp = static_cast<double>(z[c]) - peak - log_denom;
      (*probs)[r * vocab + c] = static_cast<T>(std::exp(logp));
      const double q = static_cast<std::size_t>(targets[r]) == c ? on : off;
      total -= q * logp;
    }
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  return detail::make_result<T>(
      Shape{1}, std::vector<T>{static_cast<T>(total * inv_count)}, "label_smoothed_ce",
      {logits.node()},
      [probs, targets = std::vector<int>(targets.begin(), targets.end()), vocab, rows, on, off,
       pad_id, inv_count](Node<T>& self) {
        Node<T>& nz = *self.inputs[0];
        const double g = static_cast<double>(self.grad[0]) * inv_count;
        for (std::size_t r = 0; r < rows; ++r) {
          if (targets[r] == pad_id) continue;
          for (std::size_t c = 0; c < vocab; ++c) {
            const double q = static_cast<std::size_t>(targets[r]) == c ? on : off;
            nz.grad[r * vocab + c] += static_cast<T>(g * ((*probs)[r * vocab + c] - q));
          }
        }
      });
}

struct TrainingConfig {
  std::size_t warmup_steps = 8000;
  double lr_scale = 1.0;
  double grad_clip_norm = 5.0;
  AdamConfig adam;
  double label_smoothing = 0.1;
  std::size_t batch_size = 32;
  std::size_t max_steps = 3000;
  std::uint64_t seed = 1;
  std::size_t eval_interval = 100;
  std::size_t patience = 10;  // evaluations without dev improvement
  bool spec_augment = false;
  SpecAugmentConfig augment;

  void validate() const {
    if (warmup_steps < 1) throw ContractError("training: warmup_steps must be >= 1");
    if (!(grad_clip_norm > 0.0)) throw ContractError("training: grad_clip_norm must be > 0");
    if (batch_size == 0) throw ContractError("training: batch_size must be positive");
    if (eval_interval == 0) throw ContractError("training: eval_interval must be positive");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ContractError("training: label_smoothing must be in [0, 1)");
  }
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;      // after clipping; this is the logged value
  double raw_grad_norm = 0.0;  // before clipping
  std::optional<double> dev_loss;
};

inline constexpr const char* kMetricsHeader = "step,loss,lr,grad_norm,dev_loss";

inline std::string format_metrics_row(const MetricsRow& row) {
  std::ostringstream os;
  os << std::setprecision(9) << row.step << ',' << row.loss << ',' << row.lr << ','
     << row.grad_norm << ',';
  if (row.dev_loss) os << *row.dev_loss;
  return os.str();
}

struct TrainResult {
  std::vector<MetricsRow> metrics;
  double best_dev_loss = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ULL + a * 0xBF58476D1CE4E5B9ULL + b * 0x94D049BB133111EBULL;
  x ^= x >> 31;
  x *= 0xD6E8FEB86659FD93ULL;
  x ^= x >> 32;
  return x;
}

}  // namespace detail

/// Teacher-forced training on a toy dataset. Batch order, dropout masks and
/// augmentation are pure functions of (seed, step), so resuming from saved
/// state reproduces the uninterrupted run exactly.
class Trainer {
 public:
  Trainer(ModelConfig model_config, TrainingConfig config, const ToyDataset& train,
          const ToyDataset& dev)
      : config_(std::move(config)),
        model_(std::move(model_config), config_.seed),
        params_(model_.weights().parameters()),
        optimizer_(params_, config_.adam),
        train_(train),
        dev_(dev) {
    config_.validate();
    if (train_.size() == 0) throw ContractError("trainer: empty training set");
    if (train_.task.input_dim() != model_.config().input_dim) {
      throw ContractError("trainer: stacked feature width " + std::to_string(train_.task.input_dim()) +
                          " != model input_dim " + std::to_string(model_.config().input_dim));
    }
    if (train_.task.vocab > model_.config().vocab_size) {
      throw ContractError("trainer: task vocabulary exceeds model vocab_size");
    }
  }

  const TrainingConfig& config() const { return config_; }
  Transformer<float>& model() { return model_; }
  const Transformer<float>& model() const { return model_; }
  std::size_t completed_steps() const { return optimizer_.steps(); }

  /// Indices of the training samples used at a 1-based step.
  std::vector<std::size_t> batch_indices(std::size_t step) const {
    std::vector<std::size_t> out;
    const std::size_t n = train_.size();
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
      const std::size_t pos = (step - 1) * config_.batch_size + i;
      out.push_back(epoch_permutation(pos / n)[pos % n]);
    }
    return out;
  }

  MetricsRow step() {
    const std::size_t step_no = optimizer_.steps() + 1;
    const std::vector<std::size_t> idx = batch_indices(step_no);
    std::mt19937_64 aug_rng(detail::mix_seed(config_.seed, step_no, 0xA));
    const FeatureBatch fb = make_feature_batch(train_, idx,
                                               config_.spec_augment ? &config_.augment : nullptr,
                                               &aug_rng);
    const TeacherForcing tf = teacher_forcing(make_token_batch(train_, idx));
    DropoutContext drop(model_.config().dropout, detail::mix_seed(config_.seed, step_no, 0xD));

    for (auto& p : params_) p.zero_grad();
    const EncoderOutput<float> enc = model_.encode(fb, &drop);
    const DecoderOutput<float> dec = model_.decode_teacher_forced(tf, enc, &drop);
    const Tensor<float> loss = label_smoothed_ce(dec.logits, tf.targets, config_.label_smoothing);
    if (!std::isfinite(loss.item())) throw TrainingError(nonfinite_diagnostic(loss, step_no));
    backward(loss);

    MetricsRow row;
    row.step = step_no;
    row.loss = loss.item();
    row.raw_grad_norm = clip_global_norm(params_, config_.grad_clip_norm);
    row.grad_norm = global_grad_norm(params_);
    row.lr = lr_schedule(step_no, model_.config().d_model, config_.warmup_steps, config_.lr_scale);
    optimizer_.step(row.lr);
    return row;
  }

  /// Token-weighted mean teacher-forced loss on the dev set, without dropout.
  double dev_loss() const {
    NoGradGuard no_grad;
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < dev_.size(); start += config_.batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(dev_.size(), start + config_.batch_size); ++i) idx.push_back(i);
      const TeacherForcing tf = teacher_forcing(make_token_batch(dev_, idx));
      const EncoderOutput<float> enc = model_.encode(make_feature_batch(dev_, idx));
      const DecoderOutput<float> dec = model_.decode_teacher_forced(tf, enc);
      std::size_t n = 0;
      for (std::size_t len : tf.lengths) n += len;
      total += static_cast<double>(label_smoothed_ce(dec.logits, tf.targets, config_.label_smoothing).item()) *
               static_cast<double>(n);
      tokens += n;
    }
    return tokens ? total / static_cast<double>(tokens) : std::numeric_limits<double>::quiet_NaN();
  }

  /// Runs to max_steps or early stop. Writes metrics CSV rows to `metrics`
  /// (header first when the trainer has not stepped yet) and, when `out_dir`
  /// is non-empty, best.ckpt plus resumable state. The best weights are
  /// restored into the model at the end.
  TrainResult run(std::ostream* metrics = nullptr, const std::string& out_dir = {}) {
    TrainResult result;
    if (metrics && completed_steps() == 0) *metrics << kMetricsHeader << '\n';
    std::vector<std::vector<float>> best;
    std::size_t bad_evals = 0;
    while (completed_steps() < config_.max_steps) {
      MetricsRow row = step();
      if (row.step % config_.eval_interval == 0 || row.step == config_.max_steps) {
        row.dev_loss = dev_.size() ? dev_loss() : row.loss;
        if (*row.dev_loss < result.best_dev_loss) {
          result.best_dev_loss = *row.dev_loss;
          result.best_step = row.step;
          bad_evals = 0;
          best = snapshot();
          if (!out_dir.empty()) save_checkpoint(model_.weights(), (std::filesystem::path(out_dir) / "best.ckpt").string());
        } else {
          ++bad_evals;
        }
      }
      if (metrics) *metrics << format_metrics_row(row) << '\n' << std::flush;
      result.metrics.push_back(row);
      ++result.steps_run;
      if (bad_evals >= config_.patience) {
        result.early_stopped = true;
        break;
      }
    }
    if (!out_dir.empty()) save_state(out_dir);
    if (!best.empty()) restore(best);
    return result;
  }

  /// model.ckpt holds weights; optimizer.ckpt holds moments and step count
  /// in the same record format.
  void save_state(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    save_checkpoint(model_.weights(), (std::filesystem::path(dir) / "model.ckpt").string());
    write_checkpoint_file((std::filesystem::path(dir) / "optimizer.ckpt").string(), optimizer_records());
  }

  void load_state(const std::string& dir) {
    ModelWeights<float>& w = model_.weights();
    load_checkpoint((std::filesystem::path(dir) / "model.ckpt").string(), w);
    const auto records = read_checkpoint_file((std::filesystem::path(dir) / "optimizer.ckpt").string());
    const auto named = w.named_parameters();
    bool have_step = false;
    for (const auto& r : records) {
      if (r.name == "adam.step") {
        optimizer_.set_steps(static_cast<std::size_t>(r.values.at(0)));
        have_step = true;
        continue;
      }
      const bool first = r.name.rfind("adam.m.", 0) == 0;
      const bool second = r.name.rfind("adam.v.", 0) == 0;
      if (!first && !second) throw CheckpointError("unexpected optimizer record " + r.name);
      const std::string pname = r.name.substr(7);
      std::size_t i = 0;
      while (i < named.size() && named[i].name != pname) ++i;
      if (i == named.size()) throw CheckpointError("optimizer state for unknown parameter " + pname);
      auto& slot = first ? optimizer_.first_moments()[i] : optimizer_.second_moments()[i];
      if (r.values.size() != slot.size()) throw CheckpointError("optimizer state shape mismatch for " + pname);
      std::copy(r.values.begin(), r.values.end(), slot.begin());
    }
    if (!have_step) throw CheckpointError("optimizer state lacks adam.step");
  }

 private:
  const std::vector<std::size_t>& epoch_permutation(std::size_t epoch) const {
    if (!perm_epoch_ || *perm_epoch_ != epoch) {
      perm_.resize(train_.size());
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(detail::mix_seed(config_.seed, epoch, 0xE));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      perm_epoch_ = epoch;
    }
    return perm_;
  }

  std::string nonfinite_diagnostic(const Tensor<float>& loss, std::size_t step_no) const {
    std::string msg = "non-finite loss at step " + std::to_string(step_no) + "; first non-finite tensor: ";
    for (const auto& [name, t] : model_.weights().named_parameters())
      for (float v : t.data())
        if (!std::isfinite(v)) return msg + "parameter " + name;
    return msg + "output of op '" + first_nonfinite_op(loss) + "'";
  }

  std::vector<CheckpointRecord> optimizer_records() const {
    std::vector<CheckpointRecord> out;
    out.push_back({"adam.step", {1}, {static_cast<float>(optimizer_.steps())}});
    const auto named = model_.weights().named_parameters();
    for (std::size_t i = 0; i < named.size(); ++i) {
      out.push_back({"adam.m." + named[i].name, named[i].tensor.shape(), optimizer_.first_moments()[i]});
      out.push_back({"adam.v." + named[i].name, named[i].tensor.shape(), optimizer_.second_moments()[i]});
    }
    return out;
  }

  std::vector<std::vector<float>> snapshot() const {
    std::vector<std::vector<float>> out;
    for (const auto& p : params_) out.emplace_back(p.data().begin(), p.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<float>>& values) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      std::copy(values[i].begin(), values[i].end(), params_[i].data().begin());
  }

  TrainingConfig config_;
  Transformer<float> model_;
  std::vector<Tensor<float>> params_;
  Adam<float> optimizer_;
  const ToyDataset& train_;
  const ToyDataset& dev_;
  mutable std::vector<std::size_t> perm_;
  mutable std::optional<std::size_t> perm_epoch_;
};

}  // namespace ssan
