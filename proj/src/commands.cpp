// SPDX-License-Identifier: Apache-2.0
#include "layalign/commands.hpp"

#include <cmath>
#include <ostream>

#include <nlohmann/json.hpp>

#include "layalign/errors.hpp"

namespace layalign {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void say(const CommandContext& ctx, const std::string& line) {
  if (ctx.log != nullptr) *ctx.log << line << "\n" << std::flush;
}

std::string sha256_of(const std::string& bytes) {
  return sha256_hex({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
}

fs::path out_dir(const RunConfig& c) { return fs::path(c.output_dir); }

void check_digest(const Checkpoint& ckpt, const std::string& expected, const fs::path& path,
                  const CommandContext& ctx) {
  if (ckpt.config_digest == expected) return;
  if (ctx.force) {
    say(ctx, "warning: config digest of " + path.string() + " does not match; continuing (--force)");
    return;
  }
  throw ConfigError("config digest mismatch: " + path.string() +
                    " was written under a different model configuration (use --force to override)");
}

std::vector<ParallelExample> read_split(const CorpusInfo& corpus, const std::string& split,
                                        std::optional<Stage> expected = std::nullopt) {
  return read_corpus(corpus.dir / (split + ".jsonl"), expected);
}

Stage layout_of(const std::vector<ParallelExample>& records, const std::string& split) {
  if (records.empty()) throw InputError("split '" + split + "' is empty");
  const Stage s = records.front().stage;
  for (const auto& r : records) {
    if (r.stage != s) throw InputError("split '" + split + "' mixes translation and task records");
  }
  return s;
}

std::unique_ptr<LayAlignModel<float>> model_from_checkpoint(const RunConfig& config,
                                                            const CorpusInfo& corpus,
                                                            const fs::path& path,
                                                            const CommandContext& ctx) {
  const Checkpoint ckpt = load_checkpoint(path);
  const ModelConfig mc = resolve_model_config(config, corpus.vocab);
  check_digest(ckpt, config_digest(mc, config.lexicon_prior), path, ctx);
  auto model = std::make_unique<LayAlignModel<float>>(mc);
  apply_tensors(ckpt, model->named_parameters(), true);
  return model;
}

std::string predictions_csv(const EvalReport& r) {
  std::string out = "lang,id,expected,predicted,correct\n";
  for (const auto& p : r.predictions) {
    out += p.lang + "," + p.id + "," + p.expected + "," + p.predicted + "," + (p.correct ? "1" : "0") + "\n";
  }
  return out;
}

json reference_json() {
  json j;
  for (Stage s : {Stage::kTranslation, Stage::kTask}) {
    const StagePlan p = StagePlan::reference(s);
    j[s == Stage::kTranslation ? "stage1" : "stage2"] = {{"learning_rate", p.learning_rate},
                                                       {"batch_size", p.batch_size},
                                                       {"epochs", p.epochs},
                                                       {"warmup_ratio", p.warmup_ratio}};
  }
  return j;
}

}  // namespace

std::string reference_hyperparameters_json() { return reference_json().dump(); }

CorpusInfo load_corpus_info(const fs::path& dir) {
  CorpusInfo c;
  c.dir = dir;
  c.vocab = Vocabulary::load(dir / "vocab.txt");
  c.tiers = read_tiers(dir / "tiers.json");
  if (fs::exists(dir / "lexicon.json")) c.lexicon = read_lexicon(dir / "lexicon.json");
  return c;
}

ModelConfig resolve_model_config(const RunConfig& config, const Vocabulary& vocab) {
  ModelConfig m = config.effective_model();
  if (m.encoder.vocab_size == 0) m.encoder.vocab_size = vocab.size();
  if (m.decoder.vocab_size == 0) m.decoder.vocab_size = vocab.size();
  if (m.encoder.vocab_size < vocab.size() || m.decoder.vocab_size < vocab.size()) {
    throw ConfigError("model vocab_size " + std::to_string(m.encoder.vocab_size) +
                      " is smaller than the corpus vocabulary (" + std::to_string(vocab.size()) + ")");
  }
  m.validate();
  return m;
}

std::unique_ptr<LayAlignModel<float>> build_model(const RunConfig& config, const CorpusInfo& corpus) {
  const ModelConfig mc = resolve_model_config(config, corpus.vocab);
  auto model = std::make_unique<LayAlignModel<float>>(mc);
  if (corpus.lexicon && config.lexicon_prior > 0.0) {
    model->encoder().blend_token_embeddings(lexicon_pairs(*corpus.lexicon, corpus.vocab),
                                            config.lexicon_prior);
  }
  const std::string backbone = config.resolved_backbone();
  if (!backbone.empty()) {
    if (!fs::exists(backbone)) {
      throw IoError("backbone checkpoint " + backbone +
                    " not found (run `layalign pretrain` first, or set backbone to \"none\")");
    }
    const Checkpoint ckpt = load_checkpoint(backbone);
    if (ckpt.config_digest != decoder_digest(mc)) {
      throw ConfigError("backbone " + backbone + " was pretrained for a different decoder configuration");
    }
    apply_tensors(ckpt, model->decoder().named_parameters(), true);
  }
  return model;
}

void cmd_gen_synth(const RunConfig& config, const CommandContext& ctx) {
  SynthSpec spec = config.synth;
  spec.seed = config.seed;
  const SynthCorpus corpus = generate_synthetic_corpus(spec);
  const fs::path dir = config.resolved_corpus_dir();
  write_synthetic_corpus(corpus, dir);
  say(ctx, "wrote corpus to " + dir.string() + " (" + std::to_string(corpus.vocab.size()) +
               " tokens, " + std::to_string(corpus.stage1.size()) + " stage-1 and " +
               std::to_string(corpus.stage2.size()) + " stage-2 records)");
}

StageResult cmd_pretrain(const RunConfig& config, const CommandContext& ctx) {
  const CorpusInfo corpus = load_corpus_info(config.resolved_corpus_dir());
  const ModelConfig mc = resolve_model_config(config, corpus.vocab);
  const auto records = read_split(corpus, "pretrain");
  Decoder<float> decoder(mc.decoder, mc.decoder_seed);
  PretrainPlan plan = config.pretrain;
  plan.seed = config.seed;
  say(ctx, "pretraining decoder on " + std::to_string(records.size()) + " records");
  const StageResult r = pretrain_decoder(decoder, pretrain_examples(records, corpus.vocab), plan);
  if (!std::isfinite(r.final_loss)) throw NumericError("pretraining ended with a non-finite loss");

  Checkpoint ckpt;
  ckpt.stage = "pretrain";
  ckpt.step = r.steps;
  ckpt.config_digest = decoder_digest(mc);
  ckpt.metadata = json{{"stage", "pretrain"},
                       {"final_loss", r.final_loss},
                       {"steps", r.steps},
                       {"corpus_sha256", sha256_of(read_file(corpus.dir / "pretrain.jsonl"))}}
                      .dump();
  ckpt.tensors = capture_tensors(decoder.named_parameters());
  fs::create_directories(out_dir(config));
  save_checkpoint(ckpt, out_dir(config) / "pretrain.ckpt");
  write_file_atomic(out_dir(config) / "pretrain_loss.csv", r.trace.to_csv());
  say(ctx, "pretrain final loss " + format_double(r.final_loss));
  return r;
}

TrainOutcome cmd_train(const RunConfig& config, int stage, const std::optional<fs::path>& resume,
                       const CommandContext& ctx) {
  if (stage != 1 && stage != 2) throw ConfigError("--stage must be 1 or 2");
  const AblationFlags& flags = config.model.ablation;
  if (stage == 1 && flags.skip_stage1) throw ConfigError("stage 1 is disabled by skip_stage1");
  if (stage == 2 && flags.skip_stage2) throw ConfigError("stage 2 is disabled by skip_stage2");

  const CorpusInfo corpus = load_corpus_info(config.resolved_corpus_dir());
  auto model = build_model(config, corpus);
  const std::string digest = config_digest(model->config(), config.lexicon_prior);

  std::size_t first_step = 0;
  json resumed = nullptr;
  if (resume) {
    const std::string bytes = read_file(*resume);
    Checkpoint ckpt;
    try {
      ckpt = parse_checkpoint(bytes);
    } catch (const InputError& e) {
      throw InputError(resume->string() + ": " + e.what());
    }
    check_digest(ckpt, digest, *resume, ctx);
    apply_tensors(ckpt, model->named_parameters(), true);
    first_step = ckpt.step;
    resumed = {{"stage", ckpt.stage}, {"step", ckpt.step}, {"sha256", sha256_of(bytes)}};
  }

  std::vector<std::string> ablation = flags.active();
  if (stage == 2 && !resume && !flags.skip_stage1) {
    ablation.push_back("skip_stage1");
    std::sort(ablation.begin(), ablation.end());
  }

  StagePlan plan = stage == 1 ? config.stage1 : config.stage2;
  plan.stage = stage == 1 ? Stage::kTranslation : Stage::kTask;
  plan.seed = config.seed;
  const std::string split = stage == 1 ? "stage1" : "stage2";
  const auto records = read_split(corpus, split, plan.stage);
  const auto data = tokenize(records, corpus.vocab);
  const std::string corpus_sha = sha256_of(read_file(corpus.dir / (split + ".jsonl")));

  const fs::path dir = out_dir(config);
  fs::create_directories(dir);
  const fs::path ckpt_path = dir / (split + ".ckpt");
  const std::string tag = "stage" + std::to_string(stage);

  const auto metadata = [&](const StageResult& r, std::size_t epochs_done, bool complete) {
    return json{{"stage", tag},
                {"ablation", ablation},
                {"plan", json::parse(stage_plan_json(plan))},
                {"reference_hyperparameters", reference_json()},
                {"epochs_completed", epochs_done},
                {"complete", complete},
                {"steps", r.steps},
                {"final_loss", r.final_loss},
                {"gates", model->gates().snapshot()},
                {"resumed_from", resumed},
                {"corpus_sha256", corpus_sha},
                {"config", json::parse(run_config_record(config))}}
        .dump();
  };
  const auto save = [&](const StageResult& r, std::size_t epochs_done, bool complete) {
    Checkpoint ckpt;
    ckpt.stage = tag;
    ckpt.step = first_step + r.steps;
    ckpt.config_digest = digest;
    ckpt.metadata = metadata(r, epochs_done, complete);
    ckpt.tensors = capture_tensors(model->named_parameters());
    save_checkpoint(ckpt, ckpt_path);
    return ckpt.metadata;
  };

  say(ctx, tag + ": " + std::to_string(data.size()) + " records, " +
               std::to_string(plan.total_steps(data.size())) + " updates");
  const StageResult r = train_stage(*model, data, plan, first_step,
                                    [&](std::size_t epoch, const StageResult& partial) {
                                      save(partial, epoch + 1, false);
                                      say(ctx, tag + " epoch " + std::to_string(epoch + 1) +
                                                   " mean loss " + format_double(partial.epoch_means.back()));
                                    });
  if (!std::isfinite(r.final_loss)) throw NumericError(tag + " ended with a non-finite loss");

  TrainOutcome out;
  out.metadata = save(r, r.epoch_means.size(), true);
  out.checkpoint = ckpt_path;
  out.result = r;
  write_file_atomic(dir / (split + "_loss.csv"), r.trace.to_csv());
  const GateTrajectory g = gate_trajectory(r.trace);
  std::string gates = "step";
  for (std::size_t i = 0; i < g.series.size(); ++i) gates += ",gate_" + std::to_string(i + 1);
  gates += "\n";
  for (std::size_t k = 0; k < g.steps.size(); ++k) {
    gates += std::to_string(g.steps[k]);
    for (const auto& s : g.series) gates += "," + format_double(s[k]);
    gates += "\n";
  }
  write_file_atomic(dir / (split + "_gates.csv"), gates);
  return out;
}

EvalReport cmd_eval(const RunConfig& config, const fs::path& checkpoint, const std::string& split,
                    const CommandContext& ctx) {
  const CorpusInfo corpus = load_corpus_info(config.resolved_corpus_dir());
  auto model = model_from_checkpoint(config, corpus, checkpoint, ctx);
  const auto records = read_split(corpus, split);
  const Stage layout = layout_of(records, split);
  const EvalReport r = evaluate(*model, tokenize(records, corpus.vocab), corpus.vocab, corpus.tiers,
                                layout, config.eval.max_new_tokens, config.eval.batch_size);
  const fs::path dir = out_dir(config);
  fs::create_directories(dir);
  write_file_atomic(dir / ("eval_" + split + ".csv"), r.to_csv());
  write_file_atomic(dir / ("predictions_" + split + ".csv"), predictions_csv(r));
  for (const auto& b : r.languages) {
    say(ctx, b.name + " (" + b.tier + "): " + std::to_string(b.correct) + "/" +
                 std::to_string(b.examples) + " = " + (b.accuracy ? format_double(*b.accuracy) : "n/a"));
  }
  const auto show = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("n/a"); };
  say(ctx, "Avg " + show(r.avg) + "  Lrl " + show(r.lrl) + "  Hrl " + show(r.hrl));
  return r;
}

DiagnosticsReport cmd_analyze(const RunConfig& config, const fs::path& checkpoint,
                              const std::string& dataset, const std::optional<fs::path>& trace,
                              const CommandContext& ctx) {
  const CorpusInfo corpus = load_corpus_info(config.resolved_corpus_dir());
  auto model = model_from_checkpoint(config, corpus, checkpoint, ctx);
  const auto data = tokenize(read_split(corpus, dataset), corpus.vocab);
  std::optional<LossTrace> loss;
  if (trace) loss = LossTrace::parse_csv(read_file(*trace));
  AnalysisOptions opt;
  opt.base_language = config.synth.base_language;
  opt.pooling.include_soft_prompt = config.diagnostics.include_soft_prompt;
  opt.batch_size = config.diagnostics.batch_size;
  const DiagnosticsReport r = analyze(*model, data, loss ? &*loss : nullptr, opt);
  write_report(r, out_dir(config) / "analysis");
  for (std::size_t i = 0; i < r.cosine.size(); ++i) {
    say(ctx, "cosine " + r.cosine_pairs[i].first + "/" + r.cosine_pairs[i].second + " " +
                 format_double(r.cosine[i].mean));
  }
  if (r.pca.warning) say(ctx, "warning: " + *r.pca.warning);
  return r;
}

}  // namespace layalign
