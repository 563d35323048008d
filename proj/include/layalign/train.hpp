// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decoder pretraining, the two bridge training stages and exact-match
// evaluation.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "layalign/data.hpp"
#include "layalign/model.hpp"

namespace layalign {

struct StagePlan {
  Stage stage = Stage::kTranslation;
  std::size_t epochs = 3;
  std::size_t batch_size = 128;
  double learning_rate = 4e-5;
  double warmup_ratio = 0.05;
  double clip_norm = 0.0;
  std::uint64_t seed = 1;
  std::size_t snapshot_every = 10;  // gate snapshot period in the loss trace
  std::size_t max_steps = 0;        // 0 = no cap
  double cross_lr_scale = 1.0;      // learning-rate multiplier for aligner and gate parameters

  /// Reference hyperparameters: lr 4e-5 (translation) or 3e-5 (task), batch
  /// 128, 3 epochs, warmup ratio 0.05.
  static StagePlan reference(Stage stage);
  void validate() const;
  /// ceil(n / batch) updates per epoch times epochs, capped by max_steps.
  std::size_t total_steps(std::size_t n_examples) const;
};

struct LossRecord {
  std::size_t step = 0;  // global update index, continues across stages
  int stage = 1;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::vector<double> gates;  // empty when this row carries no snapshot
};

/// Per-update loss log. Gate values are taken before the update of that
/// row, so the first snapshot of a fresh model is the initialization.
struct LossTrace {
  std::size_t n_gates = 0;
  std::vector<LossRecord> rows;

  std::string to_csv() const;
  static LossTrace parse_csv(const std::string& text);
};

struct StageResult {
  LossTrace trace;
  std::size_t steps = 0;
  double final_loss = 0.0;           // mean loss of the last epoch
  std::vector<double> epoch_means;
};

/// Called after every completed epoch with the result so far.
using EpochCallback = std::function<void(std::size_t epoch, const StageResult& partial)>;

/// Trains the bridge parameters on tokenized records. `first_step` offsets
/// the global step numbering of the trace. Throws NumericError when a loss
/// becomes non-finite.
template <class T>
StageResult train_stage(LayAlignModel<T>& model, const std::vector<TokenizedExample>& data,
                        const StagePlan& plan, std::size_t first_step = 0,
                        const EpochCallback& on_epoch = {});

/// Records for base-language decoder pretraining. The decoder is fed its
/// own token embeddings of the source in place of a soft prompt, both with
/// and without the plain-token user segment, so that it learns to read
/// the prompt slots before being frozen.
struct PretrainPlan {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 2e-3;
  double warmup_ratio = 0.05;
  double clip_norm = 1.0;
  double prompt_noise = 0.0;  // std of Gaussian noise added to the prompt embeddings
  std::uint64_t seed = 5;
  std::size_t max_steps = 0;
  void validate() const;
};

struct PretrainExample {
  TokenizedExample example;
  Stage stage = Stage::kTranslation;
  std::vector<std::int32_t> user;  // task layout only
};

/// Translation records yield the translation layout. Task records yield the
/// translation layout, the task layout with the prompt as user segment, and
/// the task layout with a user segment of random non-special tokens, which
/// stands in for input text the decoder cannot read.
std::vector<PretrainExample> pretrain_examples(const std::vector<ParallelExample>& records,
                                               const Vocabulary& vocab, std::uint64_t seed = 1);

template <class T>
StageResult pretrain_decoder(Decoder<T>& decoder, const std::vector<PretrainExample>& data,
                             const PretrainPlan& plan);

struct Prediction {
  std::string lang;
  std::string id;
  std::string expected;
  std::string predicted;
  bool correct = false;
};

struct EvalBucket {
  std::string name;
  std::string tier;  // "high", "low", ..., "unseen" or "aggregate"
  std::size_t examples = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy;  // percent
};

struct EvalReport {
  std::vector<EvalBucket> languages;  // sorted by name
  std::optional<double> avg, lrl, hrl;
  std::vector<Prediction> predictions;

  const EvalBucket& language(const std::string& name) const;
  /// Columns: bucket,tier,examples,correct,accuracy. Aggregate rows follow
  /// the languages; a missing aggregate is written as an empty cell.
  std::string to_csv() const;
  static EvalReport parse_csv(const std::string& text);
};

/// Aggregates unweighted means of per-language accuracies. Languages whose
/// tier is not in `tiers` form "unseen" buckets outside every aggregate.
EvalReport aggregate(const std::vector<Prediction>& predictions,
                     const std::map<std::string, std::string>& tiers);

template <class T>
EvalReport evaluate(const LayAlignModel<T>& model, const std::vector<TokenizedExample>& data,
                    const Vocabulary& vocab, const std::map<std::string, std::string>& tiers,
                    Stage stage, std::size_t max_new_tokens = 8, std::size_t batch_size = 64);

}  // namespace layalign
