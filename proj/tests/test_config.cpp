// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <map>

#include "layalign/config.hpp"
#include "layalign/errors.hpp"

using namespace layalign;

namespace {

std::function<const char*(const char*)> fake_env(const std::map<std::string, std::string>& vars) {
  return [vars](const char* name) -> const char* {
    auto it = vars.find(name);
    return it == vars.end() ? nullptr : it->second.c_str();
  };
}

std::vector<std::string> keys(const std::map<std::string, std::string>& vars) {
  std::vector<std::string> out;
  for (const auto& [k, v] : vars) out.push_back(k);
  return out;
}

}  // namespace

TEST(RunConfig, DefaultsRoundTrip) {
  const RunConfig d = RunConfig::defaults();
  const RunConfig back = RunConfig::from_json(d.to_json());
  EXPECT_EQ(back.to_json(), d.to_json());
  EXPECT_NO_THROW(d.validate());
}

TEST(RunConfig, UnknownKeysFailLoudly) {
  EXPECT_THROW(RunConfig::from_json(R"({"stage1": {"lr": 1}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"model": {"bridge": {"adapterr": "mlp"}}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"synth": {"languages": [{"name": "q", "tiers": "x"}]}})"),
               ConfigError);
  try {
    RunConfig::from_json(R"({"model": {"decoder": {"widht": 3}}})");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.decoder.widht"), std::string::npos);
  }
}

TEST(RunConfig, TypeMismatchAndBadValues) {
  EXPECT_THROW(RunConfig::from_json(R"({"seed": "one"})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"model": {"ablation": ["no_alinger"]}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"model": {"bridge": {"adapter": "deep"}}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json("[1]"), ConfigError);
  EXPECT_THROW(RunConfig::from_json("{"), ConfigError);
  RunConfig c = RunConfig::from_json(R"({"lexicon_prior": 1.5})");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, PartialFilesMergeOntoDefaults) {
  const RunConfig c = RunConfig::from_json(
      R"({"stage2": {"epochs": 4}, "synth": {"stage1_counts": {"high": 5, "mid": 3, "low": 1}},
          "model": {"ablation": ["no_aligner", "skip_stage1"], "bridge": {"layers": "first:3"}}})");
  EXPECT_EQ(c.stage2.epochs, 4u);
  EXPECT_EQ(c.stage2.learning_rate, RunConfig::defaults().stage2.learning_rate);
  EXPECT_EQ(c.synth.stage1_counts.size(), 3u);
  EXPECT_TRUE(c.model.ablation.no_aligner);
  EXPECT_TRUE(c.model.ablation.skip_stage1);
  EXPECT_EQ(c.model.bridge.selection.to_string(), "first:3");
}

TEST(RunConfig, EnvironmentOverrides) {
  const std::map<std::string, std::string> vars = {{"LAYALIGN_STAGE1__LEARNING_RATE", "0.5"},
                                                   {"LAYALIGN_OUTPUT_DIR", "elsewhere"},
                                                   {"LAYALIGN_MODEL__BRIDGE__ADAPTER", "linear"}};
  const std::string text = apply_env_overrides(RunConfig::defaults().to_json(), fake_env(vars), keys(vars));
  const RunConfig c = RunConfig::from_json(text);
  EXPECT_EQ(c.stage1.learning_rate, 0.5);
  EXPECT_EQ(c.output_dir, "elsewhere");
  EXPECT_EQ(c.model.bridge.adapter, AdapterKind::kLinear);

  const std::map<std::string, std::string> typo = {{"LAYALIGN_STAGE1__LR", "1"}};
  EXPECT_THROW(apply_env_overrides(RunConfig::defaults().to_json(), fake_env(typo), keys(typo)),
               ConfigError);
}

TEST(RunConfig, DigestTracksModelButNotSchedule) {
  RunConfig a = RunConfig::defaults();
  a.model.encoder.vocab_size = a.model.decoder.vocab_size = 100;
  const std::string base = config_digest(a.effective_model(), a.lexicon_prior);
  EXPECT_EQ(base.size(), 64u);

  RunConfig b = a;
  b.stage1.learning_rate = 1.0;
  b.model.ablation.skip_stage1 = true;
  EXPECT_EQ(config_digest(b.effective_model(), b.lexicon_prior), base);

  RunConfig c = a;
  c.model.ablation.no_aligner = true;
  EXPECT_NE(config_digest(c.effective_model(), c.lexicon_prior), base);
  RunConfig d = a;
  d.seed = 2;
  EXPECT_NE(config_digest(d.effective_model(), d.lexicon_prior), base);
  EXPECT_NE(config_digest(a.effective_model(), 0.1), base);
}

TEST(RunConfig, PathResolution) {
  RunConfig c = RunConfig::defaults();
  c.output_dir = "o";
  EXPECT_EQ(c.resolved_corpus_dir(), "o/corpus");
  EXPECT_EQ(c.resolved_backbone(), "o/pretrain.ckpt");
  c.backbone = "none";
  EXPECT_EQ(c.resolved_backbone(), "");
  c.corpus_dir = "data";
  EXPECT_EQ(c.resolved_corpus_dir(), "data");
}
