// SPDX-License-Identifier: Apache-2.0
#pragma once

// The pipeline behind each CLI subcommand. Every command reads its inputs
// from the corpus directory and earlier checkpoints and writes only under
// the configured output directory.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "layalign/analysis.hpp"
#include "layalign/checkpoint.hpp"
#include "layalign/config.hpp"

namespace layalign {

/// Vocabulary, tier map and (when present) lexicon of a corpus directory.
struct CorpusInfo {
  std::filesystem::path dir;
  Vocabulary vocab;
  std::map<std::string, std::string> tiers;
  std::optional<Lexicon> lexicon;
};

CorpusInfo load_corpus_info(const std::filesystem::path& dir);

/// Model config with vocabulary sizes of 0 filled in from the corpus.
ModelConfig resolve_model_config(const RunConfig& config, const Vocabulary& vocab);

/// Builds the model, applies the lexicon prior to its encoder and loads the
/// pretrained decoder named by the config, if any.
std::unique_ptr<LayAlignModel<float>> build_model(const RunConfig& config, const CorpusInfo& corpus);

struct CommandContext {
  bool force = false;         // accept a config digest mismatch
  std::ostream* log = nullptr;
};

struct TrainOutcome {
  StageResult result;
  std::filesystem::path checkpoint;
  std::string metadata;
};

void cmd_gen_synth(const RunConfig& config, const CommandContext& ctx = {});

/// Pretrains the decoder on the base-language records and writes
/// <out>/pretrain.ckpt and <out>/pretrain_loss.csv.
StageResult cmd_pretrain(const RunConfig& config, const CommandContext& ctx = {});

/// Writes <out>/stage<k>.ckpt (after every epoch), stage<k>_loss.csv and
/// stage<k>_gates.csv. Stage 2 without `resume` trains from the initial
/// bridge and records skip_stage1 in the metadata.
TrainOutcome cmd_train(const RunConfig& config, int stage,
                       const std::optional<std::filesystem::path>& resume,
                       const CommandContext& ctx = {});

/// Split is a corpus file stem (eval, stage1, stage2, parallel). Writes
/// <out>/eval_<split>.csv and <out>/predictions_<split>.csv.
EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::string& split, const CommandContext& ctx = {});

/// Writes the diagnostics CSVs into <out>/analysis. A loss CSV given as
/// `trace` adds the gate trajectory.
DiagnosticsReport cmd_analyze(const RunConfig& config, const std::filesystem::path& checkpoint,
                              const std::string& dataset,
                              const std::optional<std::filesystem::path>& trace,
                              const CommandContext& ctx = {});

/// JSON object with the reference stage hyperparameters.
std::string reference_hyperparameters_json();

}  // namespace layalign
