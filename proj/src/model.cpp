// SPDX-License-Identifier: Apache-2.0
#include "layalign/model.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <sstream>

namespace layalign {

void AblationFlags::apply(const std::string& list) {
  std::stringstream ss(list);
  std::string name;
  while (std::getline(ss, name, ',')) {
    if (name.empty()) continue;
    if (name == "no_adapter") {
      no_adapter = true;
    } else if (name == "no_aligner") {
      no_aligner = true;
    } else if (name == "no_llm_input") {
      no_llm_input = true;
    } else if (name == "skip_stage1") {
      skip_stage1 = true;
    } else if (name == "skip_stage2") {
      skip_stage2 = true;
    } else if (name == "dynamic_gate") {
      dynamic_gate = true;
    } else if (name == "no_gate") {
      no_gate = true;
    } else {
      throw ConfigError("unknown ablation flag '" + name + "'");
    }
  }
}

std::vector<std::string> AblationFlags::active() const {
  std::vector<std::string> out;
  if (no_adapter) out.emplace_back("no_adapter");
  if (no_aligner) out.emplace_back("no_aligner");
  if (no_llm_input) out.emplace_back("no_llm_input");
  if (skip_stage1) out.emplace_back("skip_stage1");
  if (skip_stage2) out.emplace_back("skip_stage2");
  if (dynamic_gate) out.emplace_back("dynamic_gate");
  if (no_gate) out.emplace_back("no_gate");
  return out;
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (encoder.vocab_size != decoder.vocab_size) {
    throw ConfigError("encoder and decoder must share one vocabulary");
  }
  if (ablation.no_adapter && ablation.no_aligner) {
    throw ConfigError("no_adapter together with no_aligner leaves nothing to train");
  }
  if (ablation.skip_stage1 && ablation.skip_stage2) {
    throw ConfigError("skip_stage1 together with skip_stage2 skips all training");
  }
  if (ablation.dynamic_gate && ablation.no_gate) {
    throw ConfigError("dynamic_gate and no_gate are mutually exclusive");
  }
  bridge.selection.resolve(encoder.n_layers);
}

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

template <class T>
LayAlignModel<T>::LayAlignModel(const ModelConfig& config)
    : config_(validated(config)),
      encoder_(config.encoder, config.encoder_seed),
      decoder_(config.decoder, config.decoder_seed, false),
      bridge_rng_(config.bridge_seed),
      adapter_(config.bridge.adapter, config.encoder.d_model, config.decoder.d_model, bridge_rng_),
      aligner_(config.bridge, config.encoder.n_layers, config.encoder.d_model,
               config.decoder.d_model, config.decoder.n_layers, bridge_rng_),
      gates_(config.ablation.dynamic_gate
                 ? GateVector<T>::make_dynamic(config.decoder.n_layers, config.decoder.d_model,
                                               true)
                 : GateVector<T>::make_static(config.decoder.n_layers, true)) {
  const TrainableSet ts = trainable_set();
  for (auto& [name, t] : adapter_.named_parameters()) Tensor<T>(t).set_requires_grad(ts.adapter);
  for (auto& [name, t] : aligner_.named_parameters()) {
    const bool frozen_logits =
        name == "aligner.mixing_logits" && config_.bridge.selection.frozen_uniform();
    Tensor<T>(t).set_requires_grad(ts.aligner && !frozen_logits);
  }
  for (auto& [name, t] : gates_.named_parameters()) Tensor<T>(t).set_requires_grad(ts.gates);
}

template <class T>
Stage LayAlignModel<T>::effective_stage(Stage stage) const {
  return stage == Stage::kTask && config_.ablation.no_llm_input ? Stage::kTranslation : stage;
}

template <class T>
LayerStack<T> LayAlignModel<T>::encode(const std::vector<const TokenizedExample*>& rows) const {
  std::vector<std::vector<std::int32_t>> seqs;
  seqs.reserve(rows.size());
  for (const auto* r : rows) seqs.push_back(r->source);
  return encoder_.forward(TokenBatch::from_sequences(seqs, config_.decoder.special.pad));
}

template <class T>
ModelForward<T> LayAlignModel<T>::run(const LayerStack<T>& stack, Stage stage,
                                      const std::vector<std::vector<std::int32_t>>& user_tokens,
                                      const std::vector<std::vector<std::int32_t>>& targets,
                                      bool diagnostics, bool disable_cross_attention) const {
  const AblationFlags& ab = config_.ablation;
  const Stage layout = effective_stage(stage);
  Tensor<T> soft_prompt;
  if (!ab.no_adapter) soft_prompt = adapter_(stack);
  ModelForward<T> fwd;
  fwd.input = decoder_.assemble_input(layout, soft_prompt, stack.mask,
                                      layout == Stage::kTask ? &user_tokens : nullptr, targets);
  CrossInputs<T> cross;
  FusedKV<T> fused;
  if (!ab.no_aligner && !disable_cross_attention) {
    fused = aligner_.fuse_all(stack);
    cross.fused = &fused;
    cross.key_valid = &stack.mask;
    cross.gates = &gates_;
    cross.unit_gates = ab.no_gate;
  }
  fwd.output = decoder_.forward(fwd.input, cross, diagnostics);
  return fwd;
}

template <class T>
ModelForward<T> LayAlignModel<T>::forward(const std::vector<const TokenizedExample*>& rows,
                                          Stage stage, bool diagnostics) const {
  std::vector<std::vector<std::int32_t>> user, targets;
  for (const auto* r : rows) {
    user.push_back(r->source);
    targets.push_back(r->target);
  }
  return run(encode(rows), stage, user, targets, diagnostics);
}

template <class T>
Tensor<T> LayAlignModel<T>::loss(const ModelForward<T>& fwd) const {
  return cross_entropy(fwd.output.logits, fwd.input.targets, fwd.input.loss_mask);
}

template <class T>
std::vector<std::vector<std::int32_t>> LayAlignModel<T>::generate(
    const std::vector<const TokenizedExample*>& rows, Stage stage,
    std::size_t max_new_tokens) const {
  NoGradScope<T> no_grad;
  const LayerStack<T> stack = encode(rows);
  std::vector<std::vector<std::int32_t>> user;
  for (const auto* r : rows) user.push_back(r->source);
  const std::size_t vocab = config_.decoder.vocab_size;
  const auto next = [&](const std::vector<std::vector<std::int32_t>>& generated) {
    const ModelForward<T> fwd = run(stack, stage, user, generated);
    const AssembledInput<T>& in = fwd.input;
    std::vector<T> out(rows.size() * vocab);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      std::size_t last = 0;
      for (std::size_t t = 0; t < in.length; ++t) {
        if (in.valid[b * in.length + t]) last = t;
      }
      const T* src = fwd.output.logits.data().data() + (b * in.length + last) * vocab;
      std::copy(src, src + vocab, out.begin() + static_cast<std::ptrdiff_t>(b * vocab));
    }
    return out;
  };
  return greedy_generate<T>(rows.size(), vocab, next, max_new_tokens,
                            config_.decoder.special.eos);
}

template <class T>
TrainableSet LayAlignModel<T>::trainable_set() const {
  const AblationFlags& ab = config_.ablation;
  TrainableSet ts;
  ts.adapter = !ab.no_adapter;
  ts.aligner = !ab.no_aligner;
  ts.gates = !ab.no_aligner && !ab.no_gate;
  return ts;
}

template <class T>
NamedParams<T> LayAlignModel<T>::trainable_parameters() const {
  NamedParams<T> out;
  for (const auto& p : named_parameters()) {
    if (p.second.requires_grad()) out.push_back(p);
  }
  return out;
}

template <class T>
NamedParams<T> LayAlignModel<T>::frozen_parameters() const {
  NamedParams<T> out = encoder_.named_parameters();
  for (auto& p : decoder_.named_parameters()) out.push_back(std::move(p));
  return out;
}

template <class T>
NamedParams<T> LayAlignModel<T>::named_parameters() const {
  NamedParams<T> out = frozen_parameters();
  for (auto& p : adapter_.named_parameters()) out.push_back(std::move(p));
  for (auto& p : aligner_.named_parameters()) out.push_back(std::move(p));
  for (auto& p : gates_.named_parameters()) out.push_back(std::move(p));
  return out;
}

template <class T>
std::string LayAlignModel<T>::frozen_digest() const {
  return parameter_digest(frozen_parameters());
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

template <class T>
std::string parameter_digest(const NamedParams<T>& params) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : params) {
    buf.insert(buf.end(), name.begin(), name.end());
    buf.push_back(0);
    for (std::size_t d : t.shape()) {
      const auto e = static_cast<std::uint64_t>(d);
      const auto* p = reinterpret_cast<const unsigned char*>(&e);
      buf.insert(buf.end(), p, p + sizeof e);
    }
    for (T v : t.data()) {
      const float f = static_cast<float>(v);
      unsigned char b[4];
      std::memcpy(b, &f, 4);
      buf.insert(buf.end(), b, b + 4);
    }
  }
  return sha256_hex(buf);
}

template class LayAlignModel<float>;
template class LayAlignModel<double>;
template std::string parameter_digest(const NamedParams<float>&);
template std::string parameter_digest(const NamedParams<double>&);

}  // namespace layalign
