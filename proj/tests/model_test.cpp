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

#include <random>
#include <set>

#include "oracles.hpp"
#include "ssan/gradcheck.hpp"
#include "ssan/model.hpp"

namespace ssan {
namespace {

ModelConfig small_config(AttentionVariant variant) {
  ModelConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 1;
  c.d_model = 8;
  c.heads = 2;
  c.d_ffn = 12;
  c.variant = variant;
  c.encoder_fsmn = {2, 1};
  c.decoder_fsmn = {2, 0};
  c.input_dim = 5;
  c.vocab_size = 9;
  c.dropout = 0.0;
  return c;
}

FeatureBatch random_features(std::size_t dim, const std::vector<std::size_t>& lengths, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<std::vector<float>> seqs;
  for (std::size_t len : lengths) {
    std::vector<float> s(len * dim);
    for (float& v : s) v = n(rng);
    seqs.push_back(std::move(s));
  }
  return FeatureBatch::from_sequences(seqs, dim);
}

template <typename T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

TEST(ModelConfigTest, ValidationRejectsBadShapes) {
  ModelConfig c = small_config(AttentionVariant::Ssan);
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_config(AttentionVariant::Ssan);
  c.decoder_fsmn.look_ahead = 1;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_config(AttentionVariant::San);
  c.vocab_size = 3;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(ModelTest, ZeroedSublayersReduceToNormalizedInput) {
  ModelConfig c = small_config(AttentionVariant::San);
  c.encoder_layers = 1;
  Transformer<double> model(c, 3);
  auto& enc = model.weights().encoder[0];
  for (double& v : std::get<SanWeights<double>>(enc.self_attn).wo.data()) v = 0.0;
  for (double& v : enc.ffn.w2.data()) v = 0.0;
  std::mt19937_64 rng(1);
  FeatureBatch fb = random_features(c.input_dim, {4}, rng);
  const auto hidden = values(model.encode(fb).hidden);

  // Oracle: project, add the sinusoid, normalize each row.
  const auto& w = model.weights();
  const Tensor<double> pe = positional_encoding<double>(1, 4, c.d_model);
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> row(c.d_model);
    for (std::size_t e = 0; e < c.d_model; ++e) {
      double acc = w.input_bias.data()[e];
      for (std::size_t i = 0; i < c.input_dim; ++i)
        acc += static_cast<double>(fb.features[t * c.input_dim + i]) * w.input_proj.data()[i * c.d_model + e];
      row[e] = acc + pe.data()[t * c.d_model + e];
    }
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v / c.d_model;
    for (double v : row) var += (v - mean) * (v - mean) / c.d_model;
    for (std::size_t e = 0; e < c.d_model; ++e)
      EXPECT_NEAR(hidden[t * c.d_model + e], (row[e] - mean) / std::sqrt(var + 1e-6), 1e-12);
  }
}

TEST(ModelTest, PositionalEncodingSinusoid) {
  const Tensor<double> pe = positional_encoding<double>(2, 3, 4);
  EXPECT_EQ(pe.data()[0], 0.0);  // sin(0)
  EXPECT_EQ(pe.data()[1], 1.0);  // cos(0)
  EXPECT_NEAR(pe.data()[4], std::sin(1.0), 1e-15);
  EXPECT_NEAR(pe.data()[6], std::sin(1.0 / 100.0), 1e-15);
  EXPECT_EQ(pe.data()[12], pe.data()[0]);  // same for every batch member
}

TEST(ModelTest, EmptySequenceAndBadTokenAreContractErrors) {
  ModelConfig c = small_config(AttentionVariant::Ssan);
  Transformer<double> model(c, 4);
  Tensor<double> feats({1, 3, c.input_dim});
  EXPECT_THROW(model.encode(feats, {0}), ContractError);
  std::mt19937_64 rng(2);
  const auto enc = model.encode(random_features(c.input_dim, {3}, rng));
  const std::vector<int> bad{kSosId, static_cast<int>(c.vocab_size)};
  EXPECT_THROW(model.decode_teacher_forced(bad, 1, 2, {2}, enc), ContractError);
  EXPECT_THROW(model.encode(Tensor<double>({1, 3, c.input_dim + 1}), {3}), DimensionError);
}

TEST(ModelProperty, DecoderIsCausalForBothVariants) {
  for (AttentionVariant variant : {AttentionVariant::San, AttentionVariant::Ssan}) {
    ModelConfig c = small_config(variant);
    Transformer<double> model(c, 5);
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> tok(3, static_cast<int>(c.vocab_size) - 1);
    const auto enc = model.encode(random_features(c.input_dim, {6, 4}, rng));
    const std::size_t steps = 7;
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<int> tokens(2 * steps);
      for (int& t : tokens) t = tok(rng);
      tokens[0] = tokens[steps] = kSosId;
      const auto base = values(model.decode_teacher_forced(tokens, 2, steps, {steps, steps}, enc).logits);
      const std::size_t cut = static_cast<std::size_t>(trial) % steps;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = cut + 1; t < steps; ++t) tokens[b * steps + t] = tok(rng);
      const auto pert = values(model.decode_teacher_forced(tokens, 2, steps, {steps, steps}, enc).logits);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t t = 0; t <= cut; ++t)
          for (std::size_t v = 0; v < c.vocab_size; ++v) {
            const std::size_t i = (b * steps + t) * c.vocab_size + v;
            ASSERT_EQ(pert[i], base[i]) << variant_name(variant) << " t=" << t;
          }
    }
  }
}

TEST(ModelProperty, EncoderIgnoresAppendedPadding) {
  for (AttentionVariant variant : {AttentionVariant::San, AttentionVariant::Ssan}) {
    ModelConfig c = small_config(variant);
    Transformer<float> model(c, 6);
    std::mt19937_64 rng(4);
    FeatureBatch alone = random_features(c.input_dim, {5}, rng);
    std::vector<float> longer(9 * c.input_dim, 0.5f);
    FeatureBatch padded = FeatureBatch::from_sequences({alone.features, longer}, c.input_dim);
    const auto a = values(model.encode(alone).hidden);
    const auto b = values(model.encode(padded).hidden);
    for (std::size_t i = 0; i < 5 * c.d_model; ++i) EXPECT_NEAR(a[i], b[i], 1e-5) << variant_name(variant);
  }
}

TEST(ModelProperty, SeededDropoutForwardIsDeterministic) {
  ModelConfig c = small_config(AttentionVariant::Ssan);
  c.dropout = 0.3;
  Transformer<float> model(c, 7);
  std::mt19937_64 rng(5);
  FeatureBatch fb = random_features(c.input_dim, {5, 3}, rng);
  DropoutContext d1(c.dropout, 99), d2(c.dropout, 99), d3(c.dropout, 100);
  const auto a = values(model.encode(fb, &d1).hidden);
  const auto b = values(model.encode(fb, &d2).hidden);
  const auto e = values(model.encode(fb, &d3).hidden);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, e);
}

TEST(ModelProperty, CountParamsMatchesInstantiatedWeights) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> layers(1, 3), heads(1, 3), unit(1, 4), order(0, 3), vocab(4, 20);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.variant = trial % 2 ? AttentionVariant::Ssan : AttentionVariant::San;
    c.encoder_layers = layers(rng);
    c.decoder_layers = layers(rng);
    c.heads = heads(rng);
    c.d_model = c.heads * unit(rng) * 2;
    c.d_ffn = unit(rng) * 8;
    c.encoder_fsmn = {order(rng), order(rng)};
    c.decoder_fsmn = {order(rng), 0};
    c.input_dim = unit(rng) * 5;
    c.vocab_size = vocab(rng);
    const ModelWeights<float> w = init_weights<float>(c, static_cast<std::uint64_t>(trial));
    EXPECT_EQ(count_params(c).total(), w.element_count()) << "trial " << trial;
  }
}

TEST(ModelProperty, VariantParityMatchesClosedForm) {
  ModelConfig san = small_config(AttentionVariant::San);
  san.d_model = 16;
  ModelConfig ssan = san;
  ssan.variant = AttentionVariant::Ssan;
  const long long d = 16;
  auto replaced = [d](FsmnOrders o) {
    return 3 * d * d - 2 * static_cast<long long>(o.taps()) * d;
  };
  const long long expected = static_cast<long long>(san.encoder_layers) * replaced(san.encoder_fsmn) +
                             static_cast<long long>(san.decoder_layers) * replaced(san.decoder_fsmn);
  EXPECT_EQ(compare_params(count_params(san), count_params(ssan)).delta(), expected);
  // cross-attention is projection-based in both
  EXPECT_EQ(count_params(san).cross_attention, count_params(ssan).cross_attention);
}

TEST(ModelProperty, AuditComponentsSumToTotal) {
  ModelConfig c;
  c.variant = AttentionVariant::Ssan;
  const ParamAudit a = count_params(c);
  EXPECT_EQ(a.total(), a.embeddings + a.encoder_attention + a.encoder_ffn + a.decoder_self_attention +
                           a.cross_attention + a.decoder_ffn + a.layer_norms + a.output_projection);
  EXPECT_EQ(a.tied_total(), a.total() - c.vocab_size * c.d_model);
  // two norms per encoder layer, three per decoder layer, one final norm each
  EXPECT_EQ(a.layer_norms, (2 * 6 + 3 * 3 + 2) * 2 * 512u);
}

TEST(ModelProperty, ReportedSizesNearPublishedFigures) {
  ModelConfig san;
  san.encoder_layers = 10;
  ModelConfig ssan = san;
  ssan.variant = AttentionVariant::Ssan;
  const ParamAudit a = count_params(san), b = count_params(ssan);
  EXPECT_NEAR(static_cast<double>(a.total()), 46e6, 4.6e6);
  EXPECT_NEAR(static_cast<double>(b.total()), 36e6, 3.6e6);
  EXPECT_NEAR(100.0 * compare_params(a, b).reduction(), 21.7, 3.0);
}

TEST(ModelProperty, NamedParametersAreUniqueAndCoverEverything) {
  ModelConfig c = small_config(AttentionVariant::Ssan);
  const ModelWeights<float> w = init_weights<float>(c, 1);
  std::set<std::string> names;
  std::size_t total = 0;
  for (const auto& p : w.named_parameters()) {
    EXPECT_TRUE(names.insert(p.name).second) << p.name;
    total += p.tensor.numel();
  }
  EXPECT_EQ(total, count_params(c).total());
  EXPECT_TRUE(names.count("encoder.layer0.attn.q_coeffs.back_taps"));
}

TEST(ModelProperty, GradientsMatchFiniteDifferences) {
  ModelConfig c = small_config(AttentionVariant::Ssan);
  c.d_model = 6;
  c.d_ffn = 7;
  c.encoder_layers = 1;
  Transformer<double> model(c, 8);
  std::mt19937_64 rng(7);
  Tensor<double> feats = testing::random_tensor({2, 4, c.input_dim}, rng);
  const std::vector<int> tokens{kSosId, 4, 5, kSosId, 6, 0};
  Tensor<double> probe = testing::random_tensor({2, 3, c.vocab_size}, rng);
  auto loss = [&] {
    const auto enc = model.encode(feats, {4, 3});
    return probe_loss(model.decode_teacher_forced(tokens, 2, 3, {3, 2}, enc).logits, probe);
  };
  std::vector<Tensor<double>> params;
  std::vector<std::string> names;
  for (const auto& p : model.weights().named_parameters()) {
    params.push_back(p.tensor);
    names.push_back(p.name);
  }
  const GradCheckResult r = check_gradients(loss, params, names);
  for (const auto& e : r.entries) EXPECT_LT(e.relative_error, 1e-4) << e.name;
}

TEST(ModelTest, GreedyDecodeStopsAtMaxLenAndSkipsReserved) {
  ModelConfig c = small_config(AttentionVariant::San);
  Transformer<float> model(c, 9);
  std::mt19937_64 rng(8);
  const auto hyps = model.greedy_decode(random_features(c.input_dim, {5, 2}, rng), 4);
  ASSERT_EQ(hyps.size(), 2u);
  for (const auto& h : hyps) {
    EXPECT_LE(h.size(), 4u);
    for (int t : h) EXPECT_GE(t, kReservedTokens);
  }
}

}  // namespace
}  // namespace ssan
