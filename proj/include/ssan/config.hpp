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

// Flat key=value run configuration. Lines are `dotted.key = value`, `#`
// starts a comment, blank lines are ignored. Unknown keys are rejected.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssan/features.hpp"
#include "ssan/model.hpp"
#include "ssan/training.hpp"

namespace ssan {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  ToyTaskConfig task;
  std::size_t train_size = 2000;
  std::size_t dev_size = 200;
  std::uint64_t train_seed = 11;
  std::uint64_t dev_seed = 12;
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig train;
  DataConfig data;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("invalid integer for " + key + ": '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("invalid number for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("invalid boolean for " + key + ": '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    auto size = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& key, const std::string& v) {
        member(c) = parse_int<std::size_t>(key, v);
      });
    };
    auto u64 = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& key, const std::string& v) {
        member(c) = parse_int<std::uint64_t>(key, v);
      });
    };
    auto real = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& key, const std::string& v) {
        member(c) = parse_real(key, v);
      });
    };
    auto flag = [](auto member) {
      return Setter([member](RunConfig& c, const std::string& key, const std::string& v) {
        member(c) = parse_bool(key, v);
      });
    };
    using R = RunConfig;
    k["model.encoder_layers"] = size([](R& c) -> auto& { return c.model.encoder_layers; });
    k["model.decoder_layers"] = size([](R& c) -> auto& { return c.model.decoder_layers; });
    k["model.d_model"] = size([](R& c) -> auto& { return c.model.d_model; });
    k["model.heads"] = size([](R& c) -> auto& { return c.model.heads; });
    k["model.d_ffn"] = size([](R& c) -> auto& { return c.model.d_ffn; });
    k["model.variant"] = [](R& c, const std::string& key, const std::string& v) {
      if (v == "san") {
        c.model.variant = AttentionVariant::San;
      } else if (v == "ssan") {
        c.model.variant = AttentionVariant::Ssan;
      } else {
        throw ConfigError("invalid value for " + key + ": '" + v + "' (san or ssan)");
      }
    };
    k["model.encoder_fsmn.look_back"] = size([](R& c) -> auto& { return c.model.encoder_fsmn.look_back; });
    k["model.encoder_fsmn.look_ahead"] = size([](R& c) -> auto& { return c.model.encoder_fsmn.look_ahead; });
    k["model.decoder_fsmn.look_back"] = size([](R& c) -> auto& { return c.model.decoder_fsmn.look_back; });
    k["model.decoder_fsmn.look_ahead"] = size([](R& c) -> auto& { return c.model.decoder_fsmn.look_ahead; });
    k["model.input_dim"] = size([](R& c) -> auto& { return c.model.input_dim; });
    k["model.vocab_size"] = size([](R& c) -> auto& { return c.model.vocab_size; });
    k["model.dropout"] = real([](R& c) -> auto& { return c.model.dropout; });
    // Accepted under the model section too; the loss reads the training value.
    k["model.label_smoothing"] = real([](R& c) -> auto& { return c.train.label_smoothing; });

    k["train.warmup_steps"] = size([](R& c) -> auto& { return c.train.warmup_steps; });
    k["train.lr_scale"] = real([](R& c) -> auto& { return c.train.lr_scale; });
    k["train.grad_clip_norm"] = real([](R& c) -> auto& { return c.train.grad_clip_norm; });
    k["train.adam.beta1"] = real([](R& c) -> auto& { return c.train.adam.beta1; });
    k["train.adam.beta2"] = real([](R& c) -> auto& { return c.train.adam.beta2; });
    k["train.adam.eps"] = real([](R& c) -> auto& { return c.train.adam.eps; });
    k["train.label_smoothing"] = real([](R& c) -> auto& { return c.train.label_smoothing; });
    k["train.batch_size"] = size([](R& c) -> auto& { return c.train.batch_size; });
    k["train.max_steps"] = size([](R& c) -> auto& { return c.train.max_steps; });
    k["train.seed"] = u64([](R& c) -> auto& { return c.train.seed; });
    k["train.eval_interval"] = size([](R& c) -> auto& { return c.train.eval_interval; });
    k["train.patience"] = size([](R& c) -> auto& { return c.train.patience; });
    k["train.spec_augment"] = flag([](R& c) -> auto& { return c.train.spec_augment; });
    k["train.augment.time_masks"] = size([](R& c) -> auto& { return c.train.augment.time_masks; });
    k["train.augment.max_time_width"] = size([](R& c) -> auto& { return c.train.augment.max_time_width; });
    k["train.augment.freq_masks"] = size([](R& c) -> auto& { return c.train.augment.freq_masks; });
    k["train.augment.max_freq_width"] = size([](R& c) -> auto& { return c.train.augment.max_freq_width; });

    k["data.kind"] = [](R& c, const std::string& key, const std::string& v) {
      try {
        c.data.task.kind = parse_toy_task(v);
      } catch (const ContractError& e) {
        throw ConfigError("invalid value for " + key + ": " + e.what());
      }
    };
    k["data.vocab"] = size([](R& c) -> auto& { return c.data.task.vocab; });
    k["data.min_len"] = size([](R& c) -> auto& { return c.data.task.min_len; });
    k["data.max_len"] = size([](R& c) -> auto& { return c.data.task.max_len; });
    k["data.frame_dim"] = size([](R& c) -> auto& { return c.data.task.frame_dim; });
    k["data.noise"] = real([](R& c) -> auto& { return c.data.task.noise; });
    k["data.task_seed"] = u64([](R& c) -> auto& { return c.data.task.task_seed; });
    k["data.train_size"] = size([](R& c) -> auto& { return c.data.train_size; });
    k["data.dev_size"] = size([](R& c) -> auto& { return c.data.dev_size; });
    k["data.train_seed"] = u64([](R& c) -> auto& { return c.data.train_seed; });
    k["data.dev_seed"] = u64([](R& c) -> auto& { return c.data.dev_seed; });
    k["data.stack.left"] = size([](R& c) -> auto& { return c.data.task.stacking.left; });
    k["data.stack.right"] = size([](R& c) -> auto& { return c.data.task.stacking.right; });
    k["data.stack.rate"] = size([](R& c) -> auto& { return c.data.task.stacking.rate; });
    return k;
  }();
  return keys;
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_keys()) out.push_back(k);
  return out;
}

/// Applies one `key=value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

inline void apply_assignment(RunConfig& cfg, const std::string& line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + line + "'");
  const std::string key = detail::trim(line.substr(0, eq));
  const std::string value = detail::trim(line.substr(eq + 1));
  if (key.empty()) throw ConfigError(where + ": empty key");
  try {
    set_config_value(cfg, key, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    apply_assignment(cfg, line, source + ":" + std::to_string(lineno));
  }
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  return parse_config(in, path);
}

/// Config serialized back to key=value lines (every key, sorted).
inline std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  const ModelConfig& m = c.model;
  os << "model.variant = " << variant_name(m.variant) << '\n'
     << "model.encoder_layers = " << m.encoder_layers << '\n'
     << "model.decoder_layers = " << m.decoder_layers << '\n'
     << "model.d_model = " << m.d_model << '\n'
     << "model.heads = " << m.heads << '\n'
     << "model.d_ffn = " << m.d_ffn << '\n'
     << "model.encoder_fsmn.look_back = " << m.encoder_fsmn.look_back << '\n'
     << "model.encoder_fsmn.look_ahead = " << m.encoder_fsmn.look_ahead << '\n'
     << "model.decoder_fsmn.look_back = " << m.decoder_fsmn.look_back << '\n'
     << "model.decoder_fsmn.look_ahead = " << m.decoder_fsmn.look_ahead << '\n'
     << "model.input_dim = " << m.input_dim << '\n'
     << "model.vocab_size = " << m.vocab_size << '\n'
     << "model.dropout = " << m.dropout << '\n';
  const TrainingConfig& t = c.train;
  os << "train.warmup_steps = " << t.warmup_steps << '\n'
     << "train.lr_scale = " << t.lr_scale << '\n'
     << "train.grad_clip_norm = " << t.grad_clip_norm << '\n'
     << "train.adam.beta1 = " << t.adam.beta1 << '\n'
     << "train.adam.beta2 = " << t.adam.beta2 << '\n'
     << "train.adam.eps = " << t.adam.eps << '\n'
     << "train.label_smoothing = " << t.label_smoothing << '\n'
     << "train.batch_size = " << t.batch_size << '\n'
     << "train.max_steps = " << t.max_steps << '\n'
     << "train.seed = " << t.seed << '\n'
     << "train.eval_interval = " << t.eval_interval << '\n'
     << "train.patience = " << t.patience << '\n'
     << "train.spec_augment = " << (t.spec_augment ? "true" : "false") << '\n';
  const DataConfig& d = c.data;
  os << "data.kind = " << toy_task_name(d.task.kind) << '\n'
     << "data.vocab = " << d.task.vocab << '\n'
     << "data.min_len = " << d.task.min_len << '\n'
     << "data.max_len = " << d.task.max_len << '\n'
     << "data.noise = " << d.task.noise << '\n'
     << "data.train_size = " << d.train_size << '\n'
     << "data.dev_size = " << d.dev_size << '\n';
  return os.str();
}

}  // namespace ssan
