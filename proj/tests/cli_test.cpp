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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssan/cli.hpp"

namespace ssan {
namespace {

namespace fs = std::filesystem;

const std::string kConfigs = SSAN_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv("SSAN_SEED");
    dir_ = fs::temp_directory_path() /
           ("ssan_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.cfg") << "# tiny copy model\n"
                                        "model.variant = ssan\n"
                                        "model.encoder_layers = 1\n"
                                        "model.decoder_layers = 1\n"
                                        "model.d_model = 16\n"
                                        "model.heads = 2\n"
                                        "model.d_ffn = 32\n"
                                        "model.encoder_fsmn.look_back = 2\n"
                                        "model.encoder_fsmn.look_ahead = 1\n"
                                        "model.decoder_fsmn.look_back = 2\n"
                                        "model.decoder_fsmn.look_ahead = 0\n"
                                        "model.vocab_size = 10\n"
                                        "train.warmup_steps = 10\n"
                                        "train.batch_size = 4\n"
                                        "train.max_steps = 6\n"
                                        "train.eval_interval = 3\n"
                                        "data.vocab = 10\n"
                                        "data.min_len = 2\n"
                                        "data.max_len = 4\n"
                                        "data.train_size = 16\n"
                                        "data.dev_size = 4\n";
  }
  void TearDown() override {
    unsetenv("SSAN_SEED");
    fs::remove_all(dir_);
  }

  std::string tiny() const { return (dir_ / "tiny.cfg").string(); }

  fs::path dir_;
};

TEST_F(CliTest, CountParamsPrintsAuditAndTotal) {
  const CliRun r = run({"count-params", "--config", kConfigs + "/san_10_3.cfg"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("encoder attention"), std::string::npos);
  EXPECT_NE(r.out.find(std::to_string(count_params(load_config_file(kConfigs + "/san_10_3.cfg").model).total())),
            std::string::npos);
}

TEST_F(CliTest, CompareReportsReductionFromAudit) {
  const CliRun r = run({"count-params", "--config", kConfigs + "/san_10_3.cfg", "--compare", kConfigs + "/ssan_10_3.cfg"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const ParamComparison c = compare_params(count_params(load_config_file(kConfigs + "/san_10_3.cfg").model),
                                           count_params(load_config_file(kConfigs + "/ssan_10_3.cfg").model));
  std::ostringstream want;
  want << "reduction " << std::fixed << std::setprecision(2) << 100.0 * c.reduction() << "%";
  EXPECT_NE(r.out.find(want.str()), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("delta " + std::to_string(c.delta())), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(run({"count-params"}).code, kExitUsage);
  EXPECT_EQ(run({"count-params", "--config", tiny(), "--bogus"}).code, kExitUsage);
  EXPECT_EQ(run({"count-params", "--config", (dir_ / "absent.cfg").string()}).code, kExitUsage);
  EXPECT_EQ(run({"eval", "--config", tiny(), "--ckpt", "x", "--data", "nonsense"}).code, kExitUsage);
  EXPECT_EQ(run({"count-params", "--config", tiny(), "--set", "model.heads=3"}).code, kExitUsage);
}

TEST_F(CliTest, UnknownConfigKeyIsNamed) {
  std::ofstream(dir_ / "bad.cfg") << "model.d_model = 64\nmodel.colour = blue\n";
  const CliRun r = run({"count-params", "--config", (dir_ / "bad.cfg").string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("model.colour"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find(":2"), std::string::npos) << r.err;
}

TEST_F(CliTest, RuntimeErrorsExitOne) {
  const CliRun r = run({"eval", "--config", tiny(), "--ckpt", (dir_ / "missing.ckpt").string(), "--data", "copy:2:1"});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_NE(r.err.find("missing.ckpt"), std::string::npos) << r.err;
}

TEST_F(CliTest, SeedPrecedence) {
  detail::CommonOptions opts;
  opts.config_path = tiny();
  EXPECT_EQ(detail::resolve_config(opts).train.seed, 1u);
  opts.overrides = {"train.seed=3"};
  EXPECT_EQ(detail::resolve_config(opts).train.seed, 3u);
  opts.overrides.clear();
  setenv("SSAN_SEED", "5", 1);
  EXPECT_EQ(detail::resolve_config(opts).train.seed, 5u);
  opts.seed = 9;
  EXPECT_EQ(detail::resolve_config(opts).train.seed, 9u);
}

TEST_F(CliTest, TrainTwiceWithSameSeedGivesSameLog) {
  const fs::path a = dir_ / "a", b = dir_ / "b", c = dir_ / "c";
  ASSERT_EQ(run({"train", "--config", tiny(), "--seed", "7", "--out", a.string()}).code, kExitOk);
  ASSERT_EQ(run({"train", "--config", tiny(), "--seed", "7", "--out", b.string()}).code, kExitOk);
  ASSERT_EQ(run({"train", "--config", tiny(), "--seed", "8", "--out", c.string()}).code, kExitOk);
  const std::string log = slurp(a / "metrics.csv");
  EXPECT_EQ(log, slurp(b / "metrics.csv"));
  EXPECT_NE(log, slurp(c / "metrics.csv"));
  EXPECT_EQ(log.substr(0, log.find('\n')), kMetricsHeader);
  EXPECT_TRUE(fs::exists(a / "best.ckpt"));
  EXPECT_TRUE(fs::exists(a / "model.ckpt"));
  EXPECT_TRUE(fs::exists(a / "optimizer.ckpt"));
  EXPECT_NE(slurp(a / "config.used").find("train.seed = 7"), std::string::npos);
}

TEST_F(CliTest, EvalAndDumpAttentionOnTrainedCheckpoint) {
  const fs::path out = dir_ / "run";
  ASSERT_EQ(run({"train", "--config", tiny(), "--out", out.string()}).code, kExitOk);
  const std::string ckpt = (out / "best.ckpt").string();

  const CliRun ev = run({"eval", "--config", tiny(), "--ckpt", ckpt, "--data", "dev"});
  ASSERT_EQ(ev.code, kExitOk) << ev.err;
  EXPECT_NE(ev.out.find("CER "), std::string::npos);
  EXPECT_NE(ev.out.find("utterances 4"), std::string::npos);

  const fs::path dump = dir_ / "attn";
  const CliRun d = run({"dump-attention", "--config", tiny(), "--ckpt", ckpt, "--input", "copy:3:5:2", "--out", dump.string()});
  ASSERT_EQ(d.code, kExitOk) << d.err;
  for (const char* f : {"encoder_self.csv", "decoder_self.csv", "cross.csv"}) EXPECT_TRUE(fs::exists(dump / f)) << f;

  // output path occupied by a regular file
  std::ofstream(dir_ / "blocker") << "x";
  const CliRun bad = run({"dump-attention", "--config", tiny(), "--ckpt", ckpt, "--input", "copy:3:5", "--out",
                       (dir_ / "blocker").string()});
  EXPECT_EQ(bad.code, kExitRuntime);

  // checkpoint for a different shape
  const CliRun mismatch = run({"eval", "--config", tiny(), "--set", "model.d_ffn=48", "--ckpt", ckpt, "--data", "dev"});
  EXPECT_EQ(mismatch.code, kExitRuntime);
  EXPECT_NE(mismatch.err.find("ffn"), std::string::npos) << mismatch.err;
}

TEST_F(CliTest, ConfigRoundTripsThroughFormat) {
  RunConfig cfg = load_config_file(kConfigs + "/toy_copy_ssan.cfg");
  const RunConfig again = parse_config_text(format_config(cfg));
  EXPECT_EQ(format_config(again), format_config(cfg));
  EXPECT_EQ(again.model.variant, AttentionVariant::Ssan);
  EXPECT_EQ(again.model.encoder_fsmn, (FsmnOrders{3, 3}));
  EXPECT_EQ(again.data.train_size, 2000u);
}

}  // namespace
}  // namespace ssan
