// SPDX-License-Identifier: Apache-2.0
#pragma once

// Toy decoder language model with gated fusion attention. Every layer runs
//
//   a   = LN_attn(T_{i-1})
//   T'  = T_{i-1} + SA(a) + g_i * CA(a, H_i^K, H_i^V)
//   T_i = T' + FFN(LN_ff(T'))
//
// where SA and CA use the same W^Q, W^K, W^V, W^O of the layer.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "layalign/bridge.hpp"
#include "layalign/nn.hpp"

namespace layalign {

struct SpecialTokens {
  std::int32_t pad = 0;
  std::int32_t bos = 1;
  std::int32_t sep = 2;
  std::int32_t eos = 3;
  std::int32_t unk = 4;
};

struct DecoderConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;  // m
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_positions = 128;
  SpecialTokens special;

  void validate() const;
};

enum class Stage { kTranslation, kTask };

/// Learnable per-layer gates. The static form holds m raw scalars; the
/// dynamic form holds one Linear(d_dec, 1) per layer whose tanh output gates
/// each position. Both start at exactly zero.
template <class T>
struct GateVector {
  Tensor<T> values;             // [m], static gates
  std::vector<Linear<T>> nets;  // dynamic gates, empty when static

  static GateVector make_static(std::size_t m, bool trainable);
  static GateVector make_dynamic(std::size_t m, std::size_t d_dec, bool trainable);

  bool dynamic() const { return !nets.empty(); }
  std::size_t size() const { return dynamic() ? nets.size() : values.numel(); }
  std::vector<double> snapshot() const;  // static values, or gate-net biases
  NamedParams<T> named_parameters() const;
};

/// T_0 plus the bookkeeping the decoder and the loss need.
template <class T>
struct AssembledInput {
  Tensor<T> t0;                         // [batch, len, d_dec]
  std::vector<std::uint8_t> valid;      // [batch * len]
  std::vector<std::int32_t> positions;  // position ids, count of earlier valid slots
  std::vector<std::int32_t> targets;    // next-token targets per slot
  std::vector<std::uint8_t> loss_mask;  // slots whose prediction is supervised
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t prompt_begin = 0;  // first soft-prompt slot
  std::size_t prompt_len = 0;    // p (0 when no soft prompt)
  std::size_t user_begin = 0;    // first slot after <sep>
  std::size_t user_len = 0;      // q, padded
  std::size_t target_begin = 0;  // first teacher-forced target slot
};

/// Per-layer attention norm statistics for one forward pass.
struct LayerNormStats {
  std::vector<double> example_ratio;  // per example: mean over valid positions of |g CA| / |SA|
  double mean_sa_norm = 0.0;
  double mean_ca_norm = 0.0;  // of g * CA
  std::size_t skipped = 0;    // positions with |SA| == 0
};

struct DecoderDiagnostics {
  std::vector<LayerNormStats> layers;
};

/// Cross-attention inputs for a whole forward pass.
template <class T>
struct CrossInputs {
  const FusedKV<T>* fused = nullptr;
  const std::vector<std::uint8_t>* key_valid = nullptr;  // [batch * src_len]
  const GateVector<T>* gates = nullptr;
  bool unit_gates = false;  // fixed g_i = 1 with no learnable gate
};

template <class T>
struct DecoderOutput {
  Tensor<T> logits;  // [batch, len, vocab]
  Tensor<T> hidden;  // T_m before the final norm
  std::optional<DecoderDiagnostics> diagnostics;
};

template <class T>
class Decoder {
 public:
  Decoder(const DecoderConfig& config, std::uint64_t seed, bool trainable = false);

  /// translation: [<bos>; I_map; <sep>; targets], task: [<bos>; I_map; <sep>; user; targets].
  /// `soft_prompt` may be undefined (no adapter), in which case p = 0. Every
  /// target sequence is appended after the user segment and supervised.
  AssembledInput<T> assemble_input(Stage stage, const Tensor<T>& soft_prompt,
                                   const std::vector<std::uint8_t>& prompt_valid,
                                   const std::vector<std::vector<std::int32_t>>* user_tokens,
                                   const std::vector<std::vector<std::int32_t>>& targets) const;

  /// Attention output of layer `layer` (0-based) followed by its feed-forward block.
  /// With `k`/`v` undefined the layer is a plain self-attention layer.
  Tensor<T> ga_layer(std::size_t layer, const Tensor<T>& t_prev, const AssembledInput<T>& in,
                     const Tensor<T>& k, const Tensor<T>& v,
                     const std::vector<std::uint8_t>* key_valid, const Tensor<T>& gate,
                     LayerNormStats* stats) const;

  /// Same wiring with a per-position gate tanh(net(LN_attn(T_{i-1}))).
  Tensor<T> ga_layer_dynamic(std::size_t layer, const Tensor<T>& t_prev,
                             const AssembledInput<T>& in, const Tensor<T>& k,
                             const Tensor<T>& v, const std::vector<std::uint8_t>& key_valid,
                             const Linear<T>& gate_net, LayerNormStats* stats) const;

  /// Runs all m layers and the output head. `cross.fused == nullptr`
  /// removes cross-attention entirely.
  DecoderOutput<T> forward(const AssembledInput<T>& in, const CrossInputs<T>& cross,
                           bool diagnostics = false) const;

  const DecoderConfig& config() const { return config_; }
  NamedParams<T> named_parameters() const;
  void set_trainable(bool on);

  /// Token embedding lookup, [leading..., d_dec].
  Tensor<T> embed(std::span<const std::int32_t> ids, Shape leading) const;

 private:
  struct Layer {
    LayerNormParams<T> ln_attn;
    Linear<T> wq, wk, wv, wo;
    LayerNormParams<T> ln_ff;
    Linear<T> ff_in, ff_out;
  };

  Tensor<T> attention_block(const Layer& l, const Tensor<T>& a, const AssembledInput<T>& in,
                            const Tensor<T>& k, const Tensor<T>& v,
                            const std::vector<std::uint8_t>* key_valid,
                            const std::function<Tensor<T>(const Tensor<T>&)>& apply_gate,
                            LayerNormStats* stats) const;
  void check_finite(const Tensor<T>& t, std::size_t layer) const;

  DecoderConfig config_;
  Tensor<T> token_embedding_;
  Tensor<T> position_embedding_;
  std::vector<Layer> layers_;
  LayerNormParams<T> ln_final_;
  Linear<T> head_;
};

/// Batched greedy decoding. `next_logits` receives the tokens generated so far
/// for every row and returns [batch * vocab] logits for the next position.
/// Rows stop at `eos` (not included) or after `max_new_tokens`.
template <class T>
std::vector<std::vector<std::int32_t>> greedy_generate(
    std::size_t batch, std::size_t vocab,
    const std::function<std::vector<T>(const std::vector<std::vector<std::int32_t>>&)>&
        next_logits,
    std::size_t max_new_tokens, std::int32_t eos);

}  // namespace layalign
