// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frozen toy transformer encoder standing in for the multilingual encoder.
// It exposes every hidden state H_0 (embeddings) .. H_n (last layer output).

#include <cstdint>
#include <utility>
#include <vector>

#include "layalign/nn.hpp"

namespace layalign {

struct EncoderConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_positions = 64;

  void validate() const;
};

/// Row-major id matrix with a validity mask (0 = padding).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  /// Right-pads every sequence with `pad_id`.
  static TokenBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                   std::int32_t pad_id);
};

/// All n+1 encoder states for one batch, each [batch, src_len, d_enc].
template <class T>
struct LayerStack {
  std::vector<Tensor<T>> states;
  std::vector<std::uint8_t> mask;  // [batch * src_len]
  std::size_t batch = 0;
  std::size_t length = 0;

  std::size_t n_layers() const { return states.size() - 1; }
  const Tensor<T>& last() const { return states.back(); }
  std::size_t width() const { return states.front().dim(2); }
};

/// Rejects stacks that are empty or whose entries disagree in shape.
template <class T>
void validate_stack(const LayerStack<T>& stack);

template <class T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, std::uint64_t seed);

  /// Runs without recording gradients; the encoder is never trained.
  LayerStack<T> forward(const TokenBatch& tokens) const;

  const EncoderConfig& config() const { return config_; }
  NamedParams<T> named_parameters() const;

  /// Stand-in for multilingual pretraining: for every (base id, surface id)
  /// pair, E[surface] <- rho * E[base] + sqrt(1 - rho^2) * E[surface].
  /// Pairs with equal ids are skipped. Throws ConfigError for rho outside
  /// [0, 1] and ContractError for ids outside the vocabulary.
  void blend_token_embeddings(const std::vector<std::pair<std::int32_t, std::int32_t>>& pairs,
                              double rho);

 private:
  struct Layer {
    LayerNormParams<T> ln_attn;
    Linear<T> wq, wk, wv, wo;
    LayerNormParams<T> ln_ff;
    Linear<T> ff_in, ff_out;
  };

  EncoderConfig config_;
  Tensor<T> token_embedding_;
  Tensor<T> position_embedding_;
  std::vector<Layer> layers_;
};

enum class SimilarityReference { kEmbedding, kLast };

struct LayerSimilarityProfile {
  std::vector<double> mean_cosine;  // one entry per state H_0..H_n
  std::size_t skipped = 0;          // (layer, position) pairs with a zero vector
};

/// Mean over valid positions of cos(H_i[pos], H_ref[pos]) for every layer i.
template <class T>
LayerSimilarityProfile layer_similarity_profile(const LayerStack<T>& stack,
                                                SimilarityReference reference);

}  // namespace layalign
