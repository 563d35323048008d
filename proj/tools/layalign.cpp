// SPDX-License-Identifier: Apache-2.0
// layalign: command-line front end for corpus generation, training,
// evaluation and analysis.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "layalign/commands.hpp"
#include "layalign/errors.hpp"

namespace {

using namespace layalign;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ablate;
  std::string layers;
  bool dynamic_gate = false;
  bool no_llm_input = false;
  bool force = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration");
  app->add_option("--seed", c.seed, "Run seed (corpus, initialization, shuffling)");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--ablate", c.ablate, "Comma separated ablation flags");
  app->add_option("--layers", c.layers, "Encoder states for the aligner: all, first:K, middle:K, last:K, "
                                       "last-hidden, average or an index list");
  app->add_flag("--dynamic-gate", c.dynamic_gate, "Per-position gates computed from the hidden state");
  app->add_flag("--no-llm-input", c.no_llm_input, "Drop the plain-token user segment in the task stage");
  app->add_flag("--force", c.force, "Accept checkpoints written under a different configuration");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = RunConfig::load(c.config.empty() ? std::nullopt : std::optional<std::string>(c.config),
                                  [](const char* name) { return std::getenv(name); });
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.ablate.empty()) cfg.model.ablation.apply(c.ablate);
  if (!c.layers.empty()) cfg.model.bridge.selection = LayerSelection::parse(c.layers);
  if (c.dynamic_gate) cfg.model.ablation.dynamic_gate = true;
  if (c.no_llm_input) cfg.model.ablation.no_llm_input = true;
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Layer-wise aligned bridging of a frozen encoder and a frozen decoder"};
  app.require_subcommand(1);
  Common common;
  CommandContext ctx;
  ctx.log = &std::cout;

  auto* gen = app.add_subcommand("gen-synth", "Write the synthetic cipher corpus");
  add_common(gen, common);

  auto* pre = app.add_subcommand("pretrain", "Pretrain the base-language decoder");
  add_common(pre, common);

  int stage = 1;
  std::string resume;
  auto* train = app.add_subcommand("train", "Run one bridge training stage");
  add_common(train, common);
  train->add_option("--stage", stage, "1 (translation) or 2 (task)")->check(CLI::IsMember({1, 2}));
  train->add_option("--resume", resume, "Checkpoint to continue from");

  std::string checkpoint, split = "eval";
  auto* eval = app.add_subcommand("eval", "Exact-match accuracy per language");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  eval->add_option("--split", split, "Corpus split: eval, stage1, stage2 or parallel");

  std::string dataset = "parallel", trace;
  auto* an = app.add_subcommand("analyze", "Representation and gate diagnostics");
  add_common(an, common);
  an->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  an->add_option("--dataset", dataset, "Corpus split with ids shared across languages");
  an->add_option("--trace", trace, "Loss CSV for the gate trajectory");

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const RunConfig cfg = resolve(common);
  ctx.force = common.force;
  if (*gen) {
    cmd_gen_synth(cfg, ctx);
  } else if (*pre) {
    cmd_pretrain(cfg, ctx);
  } else if (*train) {
    cmd_train(cfg, stage, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume), ctx);
  } else if (*eval) {
    cmd_eval(cfg, checkpoint, split, ctx);
  } else if (*an) {
    cmd_analyze(cfg, checkpoint, dataset,
                trace.empty() ? std::nullopt : std::optional<std::filesystem::path>(trace), ctx);
  } else if (*show) {
    std::cout << cfg.to_json();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const layalign::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const layalign::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const layalign::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const layalign::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
