// SPDX-License-Identifier: Apache-2.0
#pragma once

// The full bridged model: frozen encoder, adapter, layer-wise aligner, gates
// and frozen decoder, wired according to a set of ablation flags.

#include <cstdint>
#include <string>
#include <vector>

#include "layalign/bridge.hpp"
#include "layalign/decoder.hpp"
#include "layalign/encoder.hpp"

namespace layalign {

struct AblationFlags {
  bool no_adapter = false;    // no soft prompt; T_0 = [<bos>; <sep>; ...]
  bool no_aligner = false;    // no fused K/V, cross-attention removed
  bool no_llm_input = false;  // task stage uses the translation layout
  bool skip_stage1 = false;
  bool skip_stage2 = false;
  bool dynamic_gate = false;  // per-position tanh gate
  bool no_gate = false;       // g_i fixed to 1; known to destabilize training

  /// Comma separated subset of the names above ("no_adapter,skip_stage1").
  void apply(const std::string& list);
  std::vector<std::string> active() const;
  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  BridgeConfig bridge;
  AblationFlags ablation;
  std::uint64_t encoder_seed = 11;
  std::uint64_t decoder_seed = 23;
  std::uint64_t bridge_seed = 37;

  void validate() const;
};

/// Which bridge parts the optimizer may update.
struct TrainableSet {
  bool adapter = false;
  bool aligner = false;
  bool gates = false;
};

/// One tokenized record.
struct TokenizedExample {
  std::vector<std::int32_t> source;  // encoder input (and LLM input in the task stage)
  std::vector<std::int32_t> target;  // supervised English side, ends with <eos>
  std::string lang;
  std::string id;
};

template <class T>
struct ModelForward {
  AssembledInput<T> input;
  DecoderOutput<T> output;
};

template <class T>
class LayAlignModel {
 public:
  explicit LayAlignModel(const ModelConfig& config);

  LayerStack<T> encode(const std::vector<const TokenizedExample*>& rows) const;

  /// Full forward from an already computed encoder stack. `targets` are
  /// appended teacher-forced; `disable_cross_attention` gives the reference
  /// model with CA removed from every layer.
  ModelForward<T> run(const LayerStack<T>& stack, Stage stage,
                      const std::vector<std::vector<std::int32_t>>& user_tokens,
                      const std::vector<std::vector<std::int32_t>>& targets,
                      bool diagnostics = false, bool disable_cross_attention = false) const;

  /// Encodes and runs a batch with each row's own source and target.
  ModelForward<T> forward(const std::vector<const TokenizedExample*>& rows, Stage stage,
                          bool diagnostics = false) const;

  /// Masked next-token cross-entropy over target positions.
  Tensor<T> loss(const ModelForward<T>& fwd) const;

  /// Greedy answers for every row, without the trailing <eos>.
  std::vector<std::vector<std::int32_t>> generate(
      const std::vector<const TokenizedExample*>& rows, Stage stage,
      std::size_t max_new_tokens) const;

  TrainableSet trainable_set() const;
  NamedParams<T> trainable_parameters() const;
  NamedParams<T> frozen_parameters() const;  // encoder and decoder
  NamedParams<T> named_parameters() const;   // everything, checkpoint order

  /// SHA-256 over the names and payload bytes of the frozen parameters.
  std::string frozen_digest() const;

  const ModelConfig& config() const { return config_; }
  Encoder<T>& encoder() { return encoder_; }
  const Encoder<T>& encoder() const { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }
  const Decoder<T>& decoder() const { return decoder_; }
  Adapter<T>& adapter() { return adapter_; }
  const Adapter<T>& adapter() const { return adapter_; }
  LayerWiseAligner<T>& aligner() { return aligner_; }
  const LayerWiseAligner<T>& aligner() const { return aligner_; }
  GateVector<T>& gates() { return gates_; }
  const GateVector<T>& gates() const { return gates_; }

 private:
  Stage effective_stage(Stage stage) const;

  ModelConfig config_;
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  std::mt19937_64 bridge_rng_;
  Adapter<T> adapter_;
  LayerWiseAligner<T> aligner_;
  GateVector<T> gates_;
};

/// Lowercase hex SHA-256 of an arbitrary byte string.
std::string sha256_hex(std::span<const unsigned char> bytes);

/// SHA-256 over (name, shape, little-endian float32 payload) of each parameter.
template <class T>
std::string parameter_digest(const NamedParams<T>& params);

}  // namespace layalign
