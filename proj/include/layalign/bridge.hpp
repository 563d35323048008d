// SPDX-License-Identifier: Apache-2.0
#pragma once

// Trainable alignment between the frozen encoder and the frozen decoder:
//
//   Adapter           maps the last encoder state H_n to soft prompts I_map.
//   LayerWiseAligner  mixes a selection of encoder states with per-decoder-layer
//                     softmax weights and projects the mixture through a fusion
//                     network shared by every decoder layer, yielding the keys
//                     and values the decoder cross-attends to.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "layalign/encoder.hpp"
#include "layalign/nn.hpp"

namespace layalign {

enum class AdapterKind {
  kLinear,  // one position-wise Linear(d_enc, d_dec)
  kPlus,    // Linear(d_enc, d_enc) -> SiLU -> Linear(d_enc, d_dec)
  kMlp,     // Linear(d_enc, d_dec) -> ReLU -> Linear(d_dec, d_dec)
};

/// Which encoder states H_0..H_n the aligner mixes.
struct LayerSelection {
  enum class Kind {
    kAllButLast,  // H_0..H_{n-1} (default)
    kFirstK,      // H_0..H_{k-1}
    kMiddleK,     // k states centred in H_0..H_n
    kLastK,       // H_{n-k+1}..H_n
    kLastHidden,  // {H_n}
    kAverage,     // H_0..H_n with frozen uniform weights
    kExplicit,    // user supplied indices
  };
  Kind kind = Kind::kAllButLast;
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  /// Sorted state indices for an encoder with `n_layers` layers. Throws
  /// ConfigError for empty or out-of-range selections.
  std::vector<std::size_t> resolve(std::size_t n_layers) const;
  bool frozen_uniform() const { return kind == Kind::kAverage; }

  /// "all", "first:K", "middle:K", "last:K", "last-hidden", "average" or a
  /// comma separated index list such as "0,2,4".
  static LayerSelection parse(const std::string& spec);
  std::string to_string() const;
};

struct BridgeConfig {
  AdapterKind adapter = AdapterKind::kLinear;
  std::size_t fusion_hidden = 128;
  bool separate_kv_heads = false;
  bool fusion_plus = false;  // extra Linear(d_enc, d_enc) + SiLU ahead of the fusion network
  LayerSelection selection;
};

template <class T>
class Adapter {
 public:
  Adapter(AdapterKind kind, std::size_t d_enc, std::size_t d_dec, std::mt19937_64& rng);

  /// I_map = Adapter(H_n), shape [batch, src_len, d_dec].
  Tensor<T> operator()(const LayerStack<T>& stack) const;

  NamedParams<T> named_parameters() const;
  std::size_t parameter_count() const;
  std::size_t d_enc() const { return d_enc_; }

 private:
  AdapterKind kind_;
  std::size_t d_enc_;
  Linear<T> hidden_;  // kPlus and kMlp
  Linear<T> out_;
};

template <class T>
struct FusedKV {
  std::vector<Tensor<T>> keys;    // one [batch, src_len, d_dec] per decoder layer
  std::vector<Tensor<T>> values;  // aliases `keys` unless separate heads are on
  std::size_t size() const { return keys.size(); }
};

template <class T>
class LayerWiseAligner {
 public:
  LayerWiseAligner(const BridgeConfig& config, std::size_t n_enc_layers, std::size_t d_enc,
                   std::size_t d_dec, std::size_t m_dec_layers, std::mt19937_64& rng);

  /// Keys/values for every decoder layer in one pass.
  FusedKV<T> fuse_all(const LayerStack<T>& stack) const;

  /// (H_i^K, H_i^V) for decoder layer i, 1-based.
  std::pair<Tensor<T>, Tensor<T>> fuse(const LayerStack<T>& stack, std::size_t layer) const;

  /// As fuse() but mixing only the given state indices (softmax restricted to them).
  std::pair<Tensor<T>, Tensor<T>> fuse_subset(const LayerStack<T>& stack, std::size_t layer,
                                              const std::vector<std::size_t>& subset) const;

  /// m x |selection| matrix of mixing weights, rows sum to one.
  std::vector<std::vector<double>> weight_matrix() const;

  /// Mixing logits over all n+1 states, [m, n+1]; only selected columns are used.
  Tensor<T>& mixing_logits() { return logits_; }
  const Tensor<T>& mixing_logits() const { return logits_; }
  const std::vector<std::size_t>& selected_states() const { return selected_; }

  NamedParams<T> named_parameters() const;
  std::size_t parameter_count() const;

 private:
  Tensor<T> mixing_weights(const std::vector<std::size_t>& subset) const;  // [m, |subset|]
  Tensor<T> stacked_states(const LayerStack<T>& stack,
                           const std::vector<std::size_t>& subset) const;
  Tensor<T> fusion_network(const Tensor<T>& mixed, const Linear<T>& head) const;
  void check_stack(const LayerStack<T>& stack) const;

  BridgeConfig config_;
  std::size_t n_enc_layers_, d_enc_, d_dec_, m_dec_layers_;
  std::vector<std::size_t> selected_;
  Tensor<T> logits_;
  Linear<T> pre_;  // fusion_plus only
  Linear<T> fc1_;
  Linear<T> fc2_;     // K (and tied V) head
  Linear<T> fc2_v_;   // separate V head
};

}  // namespace layalign
