// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "model_fixtures.hpp"

using namespace layalign;
using namespace layalign::fixtures;

namespace {

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

void randomize_bridge(LayAlignModel<double>& model, std::uint64_t seed) {
  std::uint64_t s = seed;
  for (auto& [name, t] : model.trainable_parameters()) fill_normal(t, 0.5, ++s);
}

struct Batch {
  std::vector<TokenizedExample> rows;
  std::vector<std::vector<std::int32_t>> user, targets;
  explicit Batch(std::uint64_t seed, std::size_t n = 3) : rows(random_examples(n, seed)) {
    for (const auto& r : rows) {
      user.push_back(r.source);
      targets.push_back(r.target);
    }
  }
};

}  // namespace

TEST(Model, GateZeroEquivalence) {
  LayAlignModel<double> model(tiny_config());
  // Randomize everything except the gates.
  std::uint64_t s = 1;
  for (auto& [name, t] : model.trainable_parameters()) {
    if (name.rfind("gates", 0) != 0) fill_normal(t, 0.5, ++s);
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Batch b(seed);
    const auto stack = model.encode(pointers(b.rows));
    for (Stage st : {Stage::kTranslation, Stage::kTask}) {
      const auto full = model.run(stack, st, b.user, b.targets);
      const auto ref = model.run(stack, st, b.user, b.targets, false, true);
      EXPECT_LE(max_abs_diff(full.output.logits, ref.output.logits), 1e-6);
    }
  }
}

TEST(Model, PerturbingFusedStatesRequiresOpenGates) {
  LayAlignModel<double> model(tiny_config());
  randomize_bridge(model, 2);
  Batch b(3);
  auto stack = model.encode(pointers(b.rows));
  const auto base = model.run(stack, Stage::kTask, b.user, b.targets).output.logits;
  auto perturbed = stack;
  perturbed.states[1] = add(stack.states[1], Tensor<double>::full(stack.states[1].shape(), 0.5));
  EXPECT_GT(max_abs_diff(base, model.run(perturbed, Stage::kTask, b.user, b.targets).output.logits), 1e-6);
  for (auto& g : model.gates().values.mutable_data()) g = 0.0;
  const auto closed = model.run(stack, Stage::kTask, b.user, b.targets).output.logits;
  EXPECT_EQ(max_abs_diff(closed, model.run(perturbed, Stage::kTask, b.user, b.targets).output.logits), 0.0);
}

TEST(Model, AblationWiringIndependence) {
  ModelConfig cfg = tiny_config();
  cfg.ablation.no_aligner = true;
  LayAlignModel<double> no_aligner(cfg);
  randomize_bridge(no_aligner, 4);
  cfg = tiny_config();
  cfg.ablation.no_adapter = true;
  LayAlignModel<double> no_adapter(cfg);
  randomize_bridge(no_adapter, 5);
  Batch b(6);
  for (std::size_t layer = 0; layer <= 3; ++layer) {
    for (auto* model : {&no_aligner, &no_adapter}) {
      const auto stack = model->encode(pointers(b.rows));
      auto p = stack;
      p.states[layer] = add(stack.states[layer], Tensor<double>::full(stack.states[layer].shape(), 1.5));
      const double diff = max_abs_diff(model->run(stack, Stage::kTask, b.user, b.targets).output.logits,
                                       model->run(p, Stage::kTask, b.user, b.targets).output.logits);
      const bool must_ignore = (model == &no_aligner && layer < 3) || (model == &no_adapter && layer == 3);
      if (must_ignore) {
        EXPECT_LE(diff, 1e-7) << layer;
      }
      if (model == &no_aligner && layer == 3) {
        EXPECT_GT(diff, 1e-6);
      }
      if (model == &no_adapter && layer < 3) {
        EXPECT_GT(diff, 1e-6);
      }
    }
  }
}

TEST(Model, NoLlmInputUsesTranslationLayout) {
  ModelConfig cfg = tiny_config();
  cfg.ablation.no_llm_input = true;
  LayAlignModel<double> model(cfg);
  Batch b(7);
  const auto fwd = model.forward(pointers(b.rows), Stage::kTask);
  EXPECT_EQ(fwd.input.user_len, 0u);
}

TEST(Model, TrainableSetExactness) {
  struct Case {
    const char* flags;
    TrainableSet expect;
  };
  for (const Case& c : {Case{"", {true, true, true}}, Case{"no_adapter", {false, true, true}},
                        Case{"no_aligner", {true, false, false}}, Case{"no_gate", {true, true, false}}}) {
    ModelConfig cfg = tiny_config();
    cfg.ablation.apply(c.flags);
    LayAlignModel<double> model(cfg);
    randomize_bridge(model, 8);
    if (!cfg.ablation.no_aligner && !cfg.ablation.no_gate) {
      for (auto& g : model.gates().values.mutable_data()) g = 0.3;
    }
    const TrainableSet ts = model.trainable_set();
    EXPECT_EQ(ts.adapter, c.expect.adapter) << c.flags;
    EXPECT_EQ(ts.aligner, c.expect.aligner) << c.flags;
    EXPECT_EQ(ts.gates, c.expect.gates) << c.flags;
    Batch b(9);
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(model.loss(model.forward(pointers(b.rows), Stage::kTask)));
    }
    for (const auto& [name, t] : model.named_parameters()) {
      const bool adapter = name.rfind("adapter.", 0) == 0;
      const bool aligner = name.rfind("aligner.", 0) == 0;
      const bool gates = name.rfind("gates.", 0) == 0;
      const bool should = (adapter && ts.adapter) || (aligner && ts.aligner) || (gates && ts.gates);
      if (!should) {
        EXPECT_FALSE(t.has_grad()) << c.flags << " " << name;
        continue;
      }
      ASSERT_TRUE(t.has_grad()) << c.flags << " " << name;
      double norm = 0;
      for (double g : t.grad()) norm += g * g;
      EXPECT_GT(norm, 0.0) << c.flags << " " << name;
    }
  }
}

TEST(Model, FullLossGradientMatchesFiniteDifferences) {
  LayAlignModel<double> model(tiny_config());
  randomize_bridge(model, 10);
  Batch b(11);
  std::vector<Tensor<double>> params;
  for (const auto& [name, t] : model.trainable_parameters()) params.push_back(t);
  const auto r = oracle::check_gradients(
      params, [&] { return model.loss(model.forward(pointers(b.rows), Stage::kTask)); }, 4);
  EXPECT_GE(r.checked, 20u);
  EXPECT_LT(r.worst_relative, 1e-3);
}

TEST(Model, DynamicGateTrainsNets) {
  ModelConfig cfg = tiny_config();
  cfg.ablation.dynamic_gate = true;
  LayAlignModel<double> model(cfg);
  EXPECT_TRUE(model.gates().dynamic());
  randomize_bridge(model, 12);
  Batch b(13);
  std::vector<Tensor<double>> params;
  for (const auto& [name, t] : model.gates().named_parameters()) params.push_back(t);
  const auto r = oracle::check_gradients(
      params, [&] { return model.loss(model.forward(pointers(b.rows), Stage::kTask)); }, 4);
  EXPECT_LT(r.worst_relative, 1e-3);
}

TEST(Model, ConfigValidation) {
  ModelConfig cfg = tiny_config();
  cfg.ablation.no_adapter = cfg.ablation.no_aligner = true;
  EXPECT_THROW(LayAlignModel<double>{cfg}, ConfigError);
  cfg = tiny_config();
  cfg.decoder.vocab_size = 31;
  EXPECT_THROW(LayAlignModel<double>{cfg}, ConfigError);
  cfg = tiny_config();
  cfg.decoder.special.sep = cfg.decoder.special.bos;
  EXPECT_THROW(LayAlignModel<double>{cfg}, ConfigError);
  AblationFlags f;
  EXPECT_THROW(f.apply("no_adaptor"), ConfigError);
}

TEST(Model, FrozenDigestIsStableAndSensitive) {
  LayAlignModel<float> a(tiny_config()), b(tiny_config());
  EXPECT_EQ(a.frozen_digest(), b.frozen_digest());
  EXPECT_EQ(a.frozen_digest().size(), 64u);
  auto p = a.frozen_parameters().front().second;
  p.mutable_data()[0] += 1.0f;
  EXPECT_NE(a.frozen_digest(), b.frozen_digest());
  const std::string abc = "abc";
  EXPECT_EQ(sha256_hex(std::span(reinterpret_cast<const unsigned char*>(abc.data()), abc.size())),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
