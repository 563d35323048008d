// SPDX-License-Identifier: Apache-2.0
#include "layalign/config.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <nlohmann/json.hpp>

#include "layalign/errors.hpp"

extern char** environ;

namespace layalign {

using json = nlohmann::json;

namespace {

constexpr const char* kEnvPrefix = "LAYALIGN_";

// Objects whose keys are data (tier names) rather than schema.
const std::set<std::string> kOpenMaps = {"synth.stage1_counts", "synth.stage2_counts"};

json encoder_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_positions", c.max_positions}};
}

json decoder_json(const DecoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_positions", c.max_positions}};
}

json bridge_json(const BridgeConfig& b) {
  return {{"adapter", adapter_kind_name(b.adapter)},
          {"fusion_hidden", b.fusion_hidden},
          {"separate_kv_heads", b.separate_kv_heads},
          {"fusion_plus", b.fusion_plus},
          {"layers", b.selection.to_string()}};
}

json model_json(const ModelConfig& m) {
  return {{"encoder", encoder_json(m.encoder)},
          {"decoder", decoder_json(m.decoder)},
          {"bridge", bridge_json(m.bridge)},
          {"ablation", m.ablation.active()},
          {"encoder_seed", m.encoder_seed},
          {"decoder_seed", m.decoder_seed},
          {"bridge_seed", m.bridge_seed}};
}

json synth_json(const SynthSpec& s) {
  json langs = json::array();
  for (const auto& l : s.languages) {
    json j = {{"name", l.name}, {"tier", l.tier}, {"cipher", l.cipher}, {"shared_script", l.shared_script}};
    j["mapping"] = l.mapping;
    langs.push_back(j);
  }
  return {{"base_language", s.base_language},
          {"base_words", s.base_words},
          {"languages", langs},
          {"stage1_counts", s.stage1_counts},
          {"stage2_counts", s.stage2_counts},
          {"tasks", s.tasks},
          {"eval_items", s.eval_items},
          {"parallel_sentences", s.parallel_sentences},
          {"pretrain_sentences", s.pretrain_sentences},
          {"pretrain_task_copies", s.pretrain_task_copies},
          {"min_len", s.min_len},
          {"max_len", s.max_len}};
}

json stage_json(const StagePlan& p) {
  return {{"epochs", p.epochs},
          {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate},
          {"warmup_ratio", p.warmup_ratio},
          {"clip_norm", p.clip_norm},
          {"snapshot_every", p.snapshot_every},
          {"max_steps", p.max_steps},
          {"cross_lr_scale", p.cross_lr_scale}};
}

json pretrain_json(const PretrainPlan& p) {
  return {{"epochs", p.epochs},           {"batch_size", p.batch_size},
          {"learning_rate", p.learning_rate}, {"warmup_ratio", p.warmup_ratio},
          {"clip_norm", p.clip_norm},     {"prompt_noise", p.prompt_noise},
          {"max_steps", p.max_steps}};
}

json run_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"corpus_dir", c.corpus_dir},
          {"backbone", c.backbone},
          {"model", model_json(c.model)},
          {"lexicon_prior", c.lexicon_prior},
          {"synth", synth_json(c.synth)},
          {"pretrain", pretrain_json(c.pretrain)},
          {"stage1", stage_json(c.stage1)},
          {"stage2", stage_json(c.stage2)},
          {"eval", {{"max_new_tokens", c.eval.max_new_tokens}, {"batch_size", c.eval.batch_size}}},
          {"diagnostics",
           {{"include_soft_prompt", c.diagnostics.include_soft_prompt},
            {"batch_size", c.diagnostics.batch_size}}}};
}

// Typed field access; the document was merged onto the defaults, so every
// key exists and has the default's JSON type class.
template <class V>
V get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void read_encoder(const json& j, EncoderConfig& c) {
  c.vocab_size = get<std::size_t>(j, "vocab_size", "model.encoder");
  c.d_model = get<std::size_t>(j, "d_model", "model.encoder");
  c.n_layers = get<std::size_t>(j, "n_layers", "model.encoder");
  c.n_heads = get<std::size_t>(j, "n_heads", "model.encoder");
  c.d_ff = get<std::size_t>(j, "d_ff", "model.encoder");
  c.max_positions = get<std::size_t>(j, "max_positions", "model.encoder");
}

void read_decoder(const json& j, DecoderConfig& c) {
  c.vocab_size = get<std::size_t>(j, "vocab_size", "model.decoder");
  c.d_model = get<std::size_t>(j, "d_model", "model.decoder");
  c.n_layers = get<std::size_t>(j, "n_layers", "model.decoder");
  c.n_heads = get<std::size_t>(j, "n_heads", "model.decoder");
  c.d_ff = get<std::size_t>(j, "d_ff", "model.decoder");
  c.max_positions = get<std::size_t>(j, "max_positions", "model.decoder");
}

void read_stage(const json& j, StagePlan& p, const std::string& where) {
  p.epochs = get<std::size_t>(j, "epochs", where);
  p.batch_size = get<std::size_t>(j, "batch_size", where);
  p.learning_rate = get<double>(j, "learning_rate", where);
  p.warmup_ratio = get<double>(j, "warmup_ratio", where);
  p.clip_norm = get<double>(j, "clip_norm", where);
  p.snapshot_every = get<std::size_t>(j, "snapshot_every", where);
  p.max_steps = get<std::size_t>(j, "max_steps", where);
  p.cross_lr_scale = get<double>(j, "cross_lr_scale", where);
}

const char* type_class(const json& j) {
  if (j.is_object()) return "object";
  if (j.is_array()) return "list";
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  return "null";
}

void merge_into(json& base, const json& patch, const std::string& path, const std::string& origin) {
  for (const auto& [key, value] : patch.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError(origin + ": unknown key '" + here + "'");
    json& slot = base[key];
    if (std::string(type_class(slot)) != type_class(value)) {
      throw ConfigError(origin + ": '" + here + "' must be a " + type_class(slot) + ", got " +
                        type_class(value));
    }
    if (slot.is_object() && !kOpenMaps.count(here)) {
      merge_into(slot, value, here, origin);
    } else {
      slot = value;
    }
  }
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::string adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::kLinear: return "linear";
    case AdapterKind::kPlus: return "plus";
    case AdapterKind::kMlp: return "mlp";
  }
  return "linear";
}

AdapterKind parse_adapter_kind(const std::string& name) {
  if (name == "linear") return AdapterKind::kLinear;
  if (name == "plus") return AdapterKind::kPlus;
  if (name == "mlp") return AdapterKind::kMlp;
  throw ConfigError("unknown adapter '" + name + "' (expected linear, plus or mlp)");
}

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model.encoder.vocab_size = 0;
  c.model.decoder.vocab_size = 0;
  c.model.decoder.d_model = 64;
  c.model.decoder.n_layers = 4;
  c.model.decoder.n_heads = 4;
  c.model.decoder.d_ff = 128;
  c.model.decoder.max_positions = 48;
  c.model.bridge.adapter = AdapterKind::kMlp;
  c.model.bridge.fusion_hidden = 64;
  c.synth = SynthSpec::defaults();
  c.synth.tasks = {"arithmetic", "copy", "classification"};
  c.pretrain.epochs = 5;
  c.stage1 = StagePlan::reference(Stage::kTranslation);
  c.stage1.epochs = 10;
  c.stage1.batch_size = 32;
  c.stage1.learning_rate = 3e-3;
  c.stage2 = StagePlan::reference(Stage::kTask);
  c.stage2.epochs = 10;
  c.stage2.batch_size = 32;
  c.stage2.learning_rate = 1e-3;
  return c;
}

std::string RunConfig::to_json() const { return run_json(*this).dump(2) + "\n"; }

RunConfig RunConfig::from_json(const std::string& text) {
  const std::string merged = merge_config_json(RunConfig::defaults().to_json(), text, "config");
  const json j = json::parse(merged);
  RunConfig c = RunConfig::defaults();
  c.seed = get<std::uint64_t>(j, "seed", "");
  c.output_dir = get<std::string>(j, "output_dir", "");
  c.corpus_dir = get<std::string>(j, "corpus_dir", "");
  c.backbone = get<std::string>(j, "backbone", "");
  c.lexicon_prior = get<double>(j, "lexicon_prior", "");

  const json& m = j.at("model");
  read_encoder(m.at("encoder"), c.model.encoder);
  read_decoder(m.at("decoder"), c.model.decoder);
  const json& b = m.at("bridge");
  c.model.bridge.adapter = parse_adapter_kind(get<std::string>(b, "adapter", "model.bridge"));
  c.model.bridge.fusion_hidden = get<std::size_t>(b, "fusion_hidden", "model.bridge");
  c.model.bridge.separate_kv_heads = get<bool>(b, "separate_kv_heads", "model.bridge");
  c.model.bridge.fusion_plus = get<bool>(b, "fusion_plus", "model.bridge");
  c.model.bridge.selection = LayerSelection::parse(get<std::string>(b, "layers", "model.bridge"));
  c.model.ablation = AblationFlags{};
  for (const auto& flag : get<std::vector<std::string>>(m, "ablation", "model")) c.model.ablation.apply(flag);
  c.model.encoder_seed = get<std::uint64_t>(m, "encoder_seed", "model");
  c.model.decoder_seed = get<std::uint64_t>(m, "decoder_seed", "model");
  c.model.bridge_seed = get<std::uint64_t>(m, "bridge_seed", "model");

  const json& s = j.at("synth");
  c.synth.base_language = get<std::string>(s, "base_language", "synth");
  c.synth.base_words = get<std::vector<std::string>>(s, "base_words", "synth");
  c.synth.languages.clear();
  for (const auto& l : s.at("languages")) {
    if (!l.is_object()) throw ConfigError("synth.languages entries must be objects");
    static const std::set<std::string> keys = {"name", "tier", "cipher", "shared_script", "mapping"};
    for (const auto& [k, v] : l.items()) {
      if (!keys.count(k)) throw ConfigError("config: unknown key 'synth.languages[]." + k + "'");
    }
    SynthLanguage lang;
    lang.name = get<std::string>(l, "name", "synth.languages[]");
    if (l.contains("tier")) lang.tier = get<std::string>(l, "tier", "synth.languages[]");
    if (l.contains("cipher")) lang.cipher = get<std::string>(l, "cipher", "synth.languages[]");
    if (l.contains("shared_script")) lang.shared_script = get<bool>(l, "shared_script", "synth.languages[]");
    if (l.contains("mapping")) {
      lang.mapping = get<std::map<std::string, std::string>>(l, "mapping", "synth.languages[]");
    }
    c.synth.languages.push_back(std::move(lang));
  }
  c.synth.stage1_counts = get<std::map<std::string, std::size_t>>(s, "stage1_counts", "synth");
  c.synth.stage2_counts = get<std::map<std::string, std::size_t>>(s, "stage2_counts", "synth");
  c.synth.tasks = get<std::vector<std::string>>(s, "tasks", "synth");
  c.synth.eval_items = get<std::size_t>(s, "eval_items", "synth");
  c.synth.parallel_sentences = get<std::size_t>(s, "parallel_sentences", "synth");
  c.synth.pretrain_sentences = get<std::size_t>(s, "pretrain_sentences", "synth");
  c.synth.pretrain_task_copies = get<std::size_t>(s, "pretrain_task_copies", "synth");
  c.synth.min_len = get<std::size_t>(s, "min_len", "synth");
  c.synth.max_len = get<std::size_t>(s, "max_len", "synth");

  const json& p = j.at("pretrain");
  c.pretrain.epochs = get<std::size_t>(p, "epochs", "pretrain");
  c.pretrain.batch_size = get<std::size_t>(p, "batch_size", "pretrain");
  c.pretrain.learning_rate = get<double>(p, "learning_rate", "pretrain");
  c.pretrain.warmup_ratio = get<double>(p, "warmup_ratio", "pretrain");
  c.pretrain.clip_norm = get<double>(p, "clip_norm", "pretrain");
  c.pretrain.prompt_noise = get<double>(p, "prompt_noise", "pretrain");
  c.pretrain.max_steps = get<std::size_t>(p, "max_steps", "pretrain");
  read_stage(j.at("stage1"), c.stage1, "stage1");
  read_stage(j.at("stage2"), c.stage2, "stage2");
  c.eval.max_new_tokens = get<std::size_t>(j.at("eval"), "max_new_tokens", "eval");
  c.eval.batch_size = get<std::size_t>(j.at("eval"), "batch_size", "eval");
  c.diagnostics.include_soft_prompt = get<bool>(j.at("diagnostics"), "include_soft_prompt", "diagnostics");
  c.diagnostics.batch_size = get<std::size_t>(j.at("diagnostics"), "batch_size", "diagnostics");
  return c;
}

std::string merge_config_json(const std::string& defaults, const std::string& patch,
                              const std::string& origin) {
  json base = json::parse(defaults);
  json p;
  try {
    p = json::parse(patch);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": malformed JSON (" + e.what() + ")");
  }
  if (!p.is_object()) throw ConfigError(origin + ": top level must be an object");
  merge_into(base, p, "", origin);
  return base.dump(2) + "\n";
}

std::vector<std::string> layalign_env_names() {
  std::vector<std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry(*e);
    if (entry.rfind(kEnvPrefix, 0) != 0) continue;
    out.push_back(entry.substr(0, entry.find('=')));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string apply_env_overrides(const std::string& json_text,
                                const std::function<const char*(const char*)>& getenv,
                                const std::vector<std::string>& names) {
  json doc = json::parse(json_text);
  const std::string prefix = kEnvPrefix;
  for (const auto& name : names) {
    if (name.rfind(prefix, 0) != 0) continue;
    const char* raw = getenv(name.c_str());
    if (raw == nullptr) continue;
    std::vector<std::string> path;
    std::string rest = name.substr(prefix.size());
    for (std::size_t pos; (pos = rest.find("__")) != std::string::npos;) {
      path.push_back(lower(rest.substr(0, pos)));
      rest = rest.substr(pos + 2);
    }
    path.push_back(lower(rest));
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = std::string(raw);
    }
    json patch = value;
    for (auto it = path.rbegin(); it != path.rend(); ++it) patch = json{{*it, patch}};
    merge_into(doc, patch, "", "environment variable " + name);
  }
  return doc.dump(2) + "\n";
}

RunConfig RunConfig::load(const std::optional<std::string>& path,
                          const std::function<const char*(const char*)>& getenv) {
  std::string text = RunConfig::defaults().to_json();
  if (path) {
    text = merge_config_json(text, read_file(*path), *path);
  }
  if (getenv) text = apply_env_overrides(text, getenv, layalign_env_names());
  RunConfig c = from_json(text);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  ModelConfig m = effective_model();
  if (m.encoder.vocab_size == 0) m.encoder.vocab_size = 64;
  if (m.decoder.vocab_size == 0) m.decoder.vocab_size = 64;
  if ((model.encoder.vocab_size == 0) != (model.decoder.vocab_size == 0)) {
    throw ConfigError("encoder and decoder vocab_size must both be set or both be 0");
  }
  m.validate();
  if (!(lexicon_prior >= 0.0 && lexicon_prior <= 1.0)) {
    throw ConfigError("lexicon_prior must be in [0, 1]");
  }
  synth.validate();
  pretrain.validate();
  stage1.validate();
  stage2.validate();
  if (eval.max_new_tokens == 0 || eval.batch_size == 0 || diagnostics.batch_size == 0) {
    throw ConfigError("eval and diagnostics sizes must be positive");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ModelConfig RunConfig::effective_model() const {
  ModelConfig m = model;
  m.encoder_seed += seed;
  m.decoder_seed += seed;
  m.bridge_seed += seed;
  return m;
}

std::string RunConfig::resolved_corpus_dir() const {
  return corpus_dir.empty() ? output_dir + "/corpus" : corpus_dir;
}

std::string RunConfig::resolved_backbone() const {
  if (backbone == "none") return "";
  return backbone.empty() ? output_dir + "/pretrain.ckpt" : backbone;
}

std::string config_digest(const ModelConfig& model, double lexicon_prior) {
  json j = model_json(model);
  json wiring = json::array();
  for (const auto& f : model.ablation.active()) {
    if (f != "skip_stage1" && f != "skip_stage2") wiring.push_back(f);
  }
  j["ablation"] = wiring;
  j["lexicon_prior"] = lexicon_prior;
  const std::string text = j.dump();
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

std::string decoder_digest(const ModelConfig& model) {
  json j = {{"decoder", decoder_json(model.decoder)}, {"decoder_seed", model.decoder_seed}};
  const std::string text = j.dump();
  return sha256_hex({reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

std::string run_config_record(const RunConfig& config) {
  json j = run_json(config);
  j.erase("output_dir");
  j.erase("corpus_dir");
  j.erase("backbone");
  return j.dump();
}

std::string stage_plan_json(const StagePlan& plan) {
  json j = stage_json(plan);
  j["stage"] = plan.stage == Stage::kTranslation ? 1 : 2;
  j["seed"] = plan.seed;
  return j.dump();
}

}  // namespace layalign
