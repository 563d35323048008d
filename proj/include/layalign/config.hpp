// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: a JSON document with a fixed schema. Files and
// environment overrides are merged onto the defaults, and any key that is
// not part of the schema is a ConfigError.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "layalign/data.hpp"
#include "layalign/model.hpp"
#include "layalign/train.hpp"

namespace layalign {

struct EvalOptions {
  std::size_t max_new_tokens = 6;
  std::size_t batch_size = 64;
};

struct DiagnosticsOptions {
  bool include_soft_prompt = false;
  std::size_t batch_size = 64;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  std::string corpus_dir;  // empty: <output_dir>/corpus
  std::string backbone;    // pretrained decoder; empty: <output_dir>/pretrain.ckpt, "none": random
  ModelConfig model;       // vocab sizes of 0 are taken from the corpus
  double lexicon_prior = 0.7;
  SynthSpec synth;
  PretrainPlan pretrain;
  StagePlan stage1;
  StagePlan stage2;
  EvalOptions eval;
  DiagnosticsOptions diagnostics;

  /// The calibrated synthetic configuration.
  static RunConfig defaults();

  /// Strict parse of a complete document (as produced by to_json).
  static RunConfig from_json(const std::string& text);
  std::string to_json() const;

  /// defaults <- file (if any) <- environment overrides, then validate().
  static RunConfig load(const std::optional<std::string>& path,
                        const std::function<const char*(const char*)>& getenv = nullptr);

  void validate() const;

  /// Model configuration with the run seed folded into the three init seeds.
  ModelConfig effective_model() const;
  std::string resolved_corpus_dir() const;
  std::string resolved_backbone() const;  // empty for "none"
};

/// JSON of `defaults` with `patch` merged in. Keys absent from the defaults
/// are rejected with their dotted path; leaf types must match. Tier count
/// maps and lists are replaced as a whole.
std::string merge_config_json(const std::string& defaults, const std::string& patch,
                              const std::string& origin);

/// Applies LAYALIGN_<PATH> variables, path segments joined by "__"
/// (LAYALIGN_STAGE1__LEARNING_RATE=1e-3). Values are parsed as JSON and
/// fall back to plain strings.
std::string apply_env_overrides(const std::string& json_text,
                                const std::function<const char*(const char*)>& getenv,
                                const std::vector<std::string>& names);

/// Names of LAYALIGN_* variables in the process environment.
std::vector<std::string> layalign_env_names();

/// SHA-256 over the canonical JSON of everything that defines the frozen and
/// trainable modules: dims, bridge layout, wiring flags, seeds, vocabulary
/// sizes and the lexicon prior. Training-schedule flags are excluded.
std::string config_digest(const ModelConfig& model, double lexicon_prior);

/// SHA-256 over the decoder dimensions and seed, stamped on backbone checkpoints.
std::string decoder_digest(const ModelConfig& model);

/// Compact JSON of the config without its filesystem paths, for metadata
/// that must not depend on where a run was written.
std::string run_config_record(const RunConfig& config);

/// Compact JSON of a stage plan including its stage number and seed.
std::string stage_plan_json(const StagePlan& plan);

std::string adapter_kind_name(AdapterKind k);
AdapterKind parse_adapter_kind(const std::string& name);

}  // namespace layalign
