// SPDX-License-Identifier: Apache-2.0
#include "layalign/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace layalign {

void EncoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("encoder needs at least one layer");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("encoder d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (vocab_size == 0 || d_ff == 0 || max_positions == 0) {
    throw ConfigError("encoder vocab_size, d_ff and max_positions must be positive");
  }
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                      std::int32_t pad_id) {
  TokenBatch tb;
  tb.batch = seqs.size();
  for (const auto& s : seqs) tb.length = std::max(tb.length, s.size());
  if (tb.batch == 0 || tb.length == 0) throw InputError("empty token batch");
  tb.ids.assign(tb.batch * tb.length, pad_id);
  tb.mask.assign(tb.batch * tb.length, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    if (seqs[b].empty()) throw InputError("sequence " + std::to_string(b) + " is empty");
    for (std::size_t t = 0; t < seqs[b].size(); ++t) {
      tb.ids[b * tb.length + t] = seqs[b][t];
      tb.mask[b * tb.length + t] = 1;
    }
  }
  return tb;
}

template <class T>
void validate_stack(const LayerStack<T>& stack) {
  if (stack.states.size() < 2) throw ContractError("layer stack needs H_0..H_n with n >= 1");
  const Shape& s0 = stack.states.front().shape();
  if (s0.size() != 3 || s0[0] != stack.batch || s0[1] != stack.length) {
    throw ContractError("layer stack H_0 has shape " + to_string(s0));
  }
  for (const auto& h : stack.states) {
    if (h.shape() != s0) throw ContractError("layer stack entries disagree in shape");
  }
  if (stack.mask.size() != stack.batch * stack.length) {
    throw ContractError("layer stack mask has wrong length");
  }
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  token_embedding_ = Tensor<T>::randn({config_.vocab_size, d}, 1.0, rng);
  position_embedding_ = Tensor<T>::randn({config_.max_positions, d}, 0.1, rng);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    Layer l;
    l.ln_attn = LayerNormParams<T>::make(d, false);
    l.wq = make_linear<T>(d, d, true, w_std, rng, false);
    l.wk = make_linear<T>(d, d, true, w_std, rng, false);
    l.wv = make_linear<T>(d, d, true, w_std, rng, false);
    l.wo = make_linear<T>(d, d, true, w_std, rng, false);
    l.ln_ff = LayerNormParams<T>::make(d, false);
    l.ff_in = make_linear<T>(d, config_.d_ff, true, w_std, rng, false);
    l.ff_out = make_linear<T>(config_.d_ff, d, true,
                              1.0 / std::sqrt(static_cast<double>(config_.d_ff)), rng, false);
    layers_.push_back(std::move(l));
  }
}

template <class T>
LayerStack<T> Encoder<T>::forward(const TokenBatch& tokens) const {
  NoGradScope<T> no_grad;
  const std::size_t b = tokens.batch, len = tokens.length;
  if (tokens.ids.size() != b * len || tokens.mask.size() != b * len) {
    throw InputError("token batch ids/mask do not match its shape");
  }
  if (len > config_.max_positions) {
    throw InputError("source length " + std::to_string(len) + " exceeds max_positions " +
                     std::to_string(config_.max_positions));
  }
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const auto id = tokens.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw InputError("encoder token id " + std::to_string(id) + " at batch row " +
                       std::to_string(i / len) + ", position " + std::to_string(i % len) +
                       " outside vocabulary of size " + std::to_string(config_.vocab_size));
    }
  }
  std::vector<std::int32_t> positions(b * len);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<std::int32_t>(i % len);
  }
  LayerStack<T> stack;
  stack.batch = b;
  stack.length = len;
  stack.mask = tokens.mask;
  Tensor<T> h = add(embedding(token_embedding_, tokens.ids, {b, len}),
                    embedding(position_embedding_, positions, {b, len}));
  stack.states.push_back(h);
  const Tensor<T> mask = self_attention_mask<T>(b, len, tokens.mask, false);
  const std::size_t heads = config_.n_heads;
  for (const Layer& l : layers_) {
    const Tensor<T> x = l.ln_attn(h);
    const Tensor<T> att = attend(split_heads(l.wq(x), heads), split_heads(l.wk(x), heads),
                                 split_heads(l.wv(x), heads), mask);
    h = add(h, l.wo(merge_heads(att)));
    h = add(h, l.ff_out(relu(l.ff_in(l.ln_ff(h)))));
    stack.states.push_back(h);
  }
  return stack;
}

template <class T>
NamedParams<T> Encoder<T>::named_parameters() const {
  NamedParams<T> out;
  out.emplace_back("encoder.token_embedding", token_embedding_);
  out.emplace_back("encoder.position_embedding", position_embedding_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "encoder.layer" + std::to_string(i);
    const Layer& l = layers_[i];
    l.ln_attn.collect(p + ".ln_attn", out);
    l.wq.collect(p + ".wq", out);
    l.wk.collect(p + ".wk", out);
    l.wv.collect(p + ".wv", out);
    l.wo.collect(p + ".wo", out);
    l.ln_ff.collect(p + ".ln_ff", out);
    l.ff_in.collect(p + ".ff_in", out);
    l.ff_out.collect(p + ".ff_out", out);
  }
  return out;
}

template <class T>
LayerSimilarityProfile layer_similarity_profile(const LayerStack<T>& stack,
                                                SimilarityReference reference) {
  validate_stack(stack);
  const std::size_t n_states = stack.states.size();
  const std::size_t ref = reference == SimilarityReference::kEmbedding ? 0 : n_states - 1;
  const std::size_t d = stack.width();
  const std::size_t positions = stack.batch * stack.length;
  LayerSimilarityProfile profile;
  profile.mean_cosine.assign(n_states, 0.0);
  const T* r = stack.states[ref].data().data();
  for (std::size_t i = 0; i < n_states; ++i) {
    const T* h = stack.states[i].data().data();
    double total = 0;
    std::size_t counted = 0;
    for (std::size_t p = 0; p < positions; ++p) {
      if (stack.mask[p] == 0) continue;
      double dot = 0, nh = 0, nr = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double a = h[p * d + j], c = r[p * d + j];
        dot += a * c;
        nh += a * a;
        nr += c * c;
      }
      if (nh == 0.0 || nr == 0.0) {
        ++profile.skipped;
        continue;
      }
      total += dot / (std::sqrt(nh) * std::sqrt(nr));
      ++counted;
    }
    profile.mean_cosine[i] = counted == 0 ? 0.0 : total / static_cast<double>(counted);
  }
  return profile;
}

template <class T>
void Encoder<T>::blend_token_embeddings(
    const std::vector<std::pair<std::int32_t, std::int32_t>>& pairs, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("lexicon prior strength must be in [0, 1]");
  const std::size_t d = config_.d_model;
  const auto vocab = static_cast<std::int32_t>(config_.vocab_size);
  const double keep = std::sqrt(1.0 - rho * rho);
  auto e = token_embedding_.mutable_data();
  for (const auto& [base, surface] : pairs) {
    if (base < 0 || base >= vocab || surface < 0 || surface >= vocab) {
      throw ContractError("lexicon pair outside the encoder vocabulary");
    }
    if (base == surface) continue;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = rho * static_cast<double>(e[base * d + j]) +
                       keep * static_cast<double>(e[surface * d + j]);
      e[surface * d + j] = static_cast<T>(v);
    }
  }
}

template class Encoder<float>;
template class Encoder<double>;
template void validate_stack(const LayerStack<float>&);
template void validate_stack(const LayerStack<double>&);
template LayerSimilarityProfile layer_similarity_profile(const LayerStack<float>&,
                                                         SimilarityReference);
template LayerSimilarityProfile layer_similarity_profile(const LayerStack<double>&,
                                                         SimilarityReference);

}  // namespace layalign
