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

// Command-line front end: train, eval, count-params, dump-attention.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ssan/checkpoint.hpp"
#include "ssan/config.hpp"
#include "ssan/eval.hpp"
#include "ssan/features.hpp"
#include "ssan/model.hpp"
#include "ssan/training.hpp"

namespace ssan {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// `kind:count:seed[:index]`, or `dev` / `train` for the configured splits.
struct DataSpec {
  ToyTaskKind kind = ToyTaskKind::Copy;
  std::size_t count = 1;
  std::uint64_t seed = 0;
  std::size_t index = 0;
};

namespace detail {

inline DataSpec parse_data_spec(const std::string& text, const DataConfig& data) {
  if (text == "dev") return {data.task.kind, data.dev_size, data.dev_seed, 0};
  if (text == "train") return {data.task.kind, data.train_size, data.train_seed, 0};
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 3 || parts.size() > 4) {
    throw ConfigError("data spec must be kind:count:seed[:index], dev or train; got '" + text + "'");
  }
  DataSpec spec;
  try {
    spec.kind = parse_toy_task(parts[0]);
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  spec.count = parse_int<std::size_t>("data spec count", parts[1]);
  spec.seed = parse_int<std::uint64_t>("data spec seed", parts[2]);
  if (parts.size() == 4) spec.index = parse_int<std::size_t>("data spec index", parts[3]);
  if (spec.count == 0 || spec.index >= spec.count) throw ConfigError("data spec index outside count");
  return spec;
}

inline ToyDataset dataset_for(const DataSpec& spec, const DataConfig& data) {
  ToyTaskConfig task = data.task;
  task.kind = spec.kind;
  return make_toy_task(task, spec.count, spec.seed);
}

inline void print_audit(std::ostream& out, const std::string& title, const ParamAudit& a) {
  auto row = [&out](const std::string& name, std::size_t n) {
    out << "  " << std::left << std::setw(28) << name << std::right << std::setw(12) << n << '\n';
  };
  out << title << '\n';
  row("embeddings", a.embeddings);
  row("encoder attention", a.encoder_attention);
  row("encoder ffn", a.encoder_ffn);
  row("decoder self-attention", a.decoder_self_attention);
  row("cross-attention", a.cross_attention);
  row("decoder ffn", a.decoder_ffn);
  row("layer norms", a.layer_norms);
  row("output projection", a.output_projection);
  row("total", a.total());
  row("total (tied embedding)", a.tied_total());
  row("total ((N1+N2)d taps)", a.total_without_current_tap());
  out << "  total (M)                   " << std::fixed << std::setprecision(2)
      << static_cast<double>(a.total()) / 1e6 << '\n';
  out.unsetf(std::ios::floatfield);
}

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

/// File, then SSAN_SEED, then --set overrides and --seed.
inline RunConfig resolve_config(const CommonOptions& opts) {
  RunConfig cfg = load_config_file(opts.config_path);
  if (const char* env = std::getenv("SSAN_SEED"); env && *env) {
    cfg.train.seed = parse_int<std::uint64_t>("SSAN_SEED", env);
  }
  for (const auto& o : opts.overrides) apply_assignment(cfg, o, "--set");
  if (opts.seed) cfg.train.seed = *opts.seed;
  try {
    cfg.model.validate();
    cfg.train.validate();
    cfg.data.task.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline Transformer<float> load_model(const RunConfig& cfg, const std::string& ckpt) {
  Transformer<float> model(cfg.model, 0);
  load_checkpoint(ckpt, model.weights());
  return model;
}

}  // namespace detail

inline int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SAN / SSAN transformer toolkit", "ssan"};
  app.require_subcommand(1);

  detail::CommonOptions common;
  std::string out_dir = "run", ckpt, data_spec, input_spec, compare_path;

  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key=value config file")->required();
    sub->add_option("--set", common.overrides, "override, key=value (repeatable)");
  };

  CLI::App* train = app.add_subcommand("train", "train on the configured toy task");
  add_common(train);
  train->add_option("--seed", common.seed, "random seed (overrides SSAN_SEED and file)");
  train->add_option("--out", out_dir, "output directory");

  CLI::App* eval = app.add_subcommand("eval", "greedy-decode a dataset and score CER");
  add_common(eval);
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--data", data_spec, "kind:count:seed, dev or train")->required();

  CLI::App* count = app.add_subcommand("count-params", "parameter audit from the config");
  add_common(count);
  count->add_option("--compare", compare_path, "second config; reports reduction relative to --config");

  CLI::App* dump = app.add_subcommand("dump-attention", "export last-layer attention matrices");
  add_common(dump);
  dump->add_option("--ckpt", ckpt, "checkpoint")->required();
  dump->add_option("--input", input_spec, "kind:count:seed[:index]")->required();
  dump->add_option("--out", out_dir, "output directory")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = detail::resolve_config(common);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*count) {
      const ParamAudit a = count_params(cfg.model);
      detail::print_audit(out, std::string("model (") + variant_name(cfg.model.variant) + ")", a);
      if (!compare_path.empty()) {
        detail::CommonOptions other = common;
        other.config_path = compare_path;
        const RunConfig cmp = detail::resolve_config(other);
        const ParamAudit b = count_params(cmp.model);
        detail::print_audit(out, std::string("compare (") + variant_name(cmp.model.variant) + ")", b);
        const ParamComparison c = compare_params(a, b);
        out << "delta " << c.delta() << '\n'
            << "reduction " << std::fixed << std::setprecision(2) << 100.0 * c.reduction() << "%\n";
        out.unsetf(std::ios::floatfield);
      }
      return kExitOk;
    }

    if (*train) {
      std::filesystem::create_directories(out_dir);
      const ToyDataset train_set = make_toy_task(cfg.data.task, cfg.data.train_size, cfg.data.train_seed);
      const ToyDataset dev_set = make_toy_task(cfg.data.task, cfg.data.dev_size, cfg.data.dev_seed);
      {
        std::ofstream used((std::filesystem::path(out_dir) / "config.used").string());
        used << format_config(cfg);
      }
      std::ofstream metrics((std::filesystem::path(out_dir) / "metrics.csv").string(), std::ios::trunc);
      if (!metrics) throw std::runtime_error("cannot write metrics log in " + out_dir);
      Trainer trainer(cfg.model, cfg.train, train_set, dev_set);
      const TrainResult r = trainer.run(&metrics, out_dir);
      out << "steps " << r.steps_run << (r.early_stopped ? " (early stop)" : "") << '\n'
          << "best dev loss " << std::setprecision(6) << r.best_dev_loss << " at step " << r.best_step
          << '\n'
          << "checkpoint " << (std::filesystem::path(out_dir) / "best.ckpt").string() << '\n';
      return kExitOk;
    }

    if (*eval) {
      const DataSpec spec = detail::parse_data_spec(data_spec, cfg.data);
      const Transformer<float> model = detail::load_model(cfg, ckpt);
      const DatasetEvaluation ev = evaluate_greedy(model, detail::dataset_for(spec, cfg.data));
      out << "utterances " << ev.hypotheses.size() << '\n'
          << std::fixed << std::setprecision(2) << "CER " << ev.report.corpus_cer() << "%\n"
          << "token accuracy " << 100.0 * ev.accuracy << "%\n";
      out.unsetf(std::ios::floatfield);
      return kExitOk;
    }

    if (*dump) {
      const DataSpec spec = detail::parse_data_spec(input_spec, cfg.data);
      const Transformer<float> model = detail::load_model(cfg, ckpt);
      const ToyDataset ds = detail::dataset_for(spec, cfg.data);
      const std::size_t idx[] = {spec.index};
      const FeatureBatch single = make_feature_batch(ds, idx);
      const auto records = collect_attention(model, single, ds.samples[spec.index].labels.size() + 5);
      for (const auto& path : write_attention_csvs(records, out_dir)) out << "wrote " << path << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  return cli_main(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace ssan
