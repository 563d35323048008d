// SPDX-License-Identifier: Apache-2.0
#include "layalign/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace layalign {

void DecoderConfig::validate() const {
  if (n_layers < 1) throw ConfigError("decoder needs at least one layer");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("decoder d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (vocab_size == 0 || d_ff == 0 || max_positions == 0) {
    throw ConfigError("decoder vocab_size, d_ff and max_positions must be positive");
  }
  const std::set<std::int32_t> ids = {special.pad, special.bos, special.sep, special.eos,
                                      special.unk};
  if (ids.size() != 5) throw ConfigError("special token ids must be distinct");
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw ConfigError("special token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

template <class T>
GateVector<T> GateVector<T>::make_static(std::size_t m, bool trainable) {
  GateVector g;
  g.values = Tensor<T>::zeros({m}, trainable);
  return g;
}

template <class T>
GateVector<T> GateVector<T>::make_dynamic(std::size_t m, std::size_t d_dec, bool trainable) {
  GateVector g;
  for (std::size_t i = 0; i < m; ++i) {
    Linear<T> l;
    l.weight = Tensor<T>::zeros({d_dec, 1}, trainable);
    l.bias = Tensor<T>::zeros({1}, trainable);
    g.nets.push_back(std::move(l));
  }
  return g;
}

template <class T>
std::vector<double> GateVector<T>::snapshot() const {
  std::vector<double> out;
  if (dynamic()) {
    for (const auto& n : nets) out.push_back(std::tanh(static_cast<double>(n.bias.data()[0])));
  } else {
    for (T v : values.data()) out.push_back(static_cast<double>(v));
  }
  return out;
}

template <class T>
NamedParams<T> GateVector<T>::named_parameters() const {
  NamedParams<T> out;
  if (dynamic()) {
    for (std::size_t i = 0; i < nets.size(); ++i) {
      nets[i].collect("gates.net" + std::to_string(i), out);
    }
  } else {
    out.emplace_back("gates.values", values);
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
Decoder<T>::Decoder(const DecoderConfig& config, std::uint64_t seed, bool trainable)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  token_embedding_ = Tensor<T>::randn({config_.vocab_size, d}, 0.5, rng, trainable);
  position_embedding_ = Tensor<T>::randn({config_.max_positions, d}, 0.1, rng, trainable);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    Layer l;
    l.ln_attn = LayerNormParams<T>::make(d, trainable);
    l.wq = make_linear<T>(d, d, false, w_std, rng, trainable);
    l.wk = make_linear<T>(d, d, false, w_std, rng, trainable);
    l.wv = make_linear<T>(d, d, false, w_std, rng, trainable);
    l.wo = make_linear<T>(d, d, false, out_std, rng, trainable);
    l.ln_ff = LayerNormParams<T>::make(d, trainable);
    l.ff_in = make_linear<T>(d, config_.d_ff, false, w_std, rng, trainable);
    l.ff_out = make_linear<T>(config_.d_ff, d, false,
                              1.0 / std::sqrt(static_cast<double>(config_.d_ff) *
                                              2.0 * static_cast<double>(config_.n_layers)),
                              rng, trainable);
    layers_.push_back(std::move(l));
  }
  ln_final_ = LayerNormParams<T>::make(d, trainable);
  head_ = make_linear<T>(d, config_.vocab_size, false, w_std, rng, trainable);
}

template <class T>
Tensor<T> Decoder<T>::embed(std::span<const std::int32_t> ids, Shape leading) const {
  return embedding(token_embedding_, ids, std::move(leading));
}

template <class T>
AssembledInput<T> Decoder<T>::assemble_input(
    Stage stage, const Tensor<T>& soft_prompt, const std::vector<std::uint8_t>& prompt_valid,
    const std::vector<std::vector<std::int32_t>>* user_tokens,
    const std::vector<std::vector<std::int32_t>>& targets) const {
  const std::size_t b = targets.size();
  if (b == 0) throw ContractError("assemble_input needs at least one row");
  std::size_t p = 0;
  if (soft_prompt.defined()) {
    if (soft_prompt.rank() != 3 || soft_prompt.dim(0) != b ||
        soft_prompt.dim(2) != config_.d_model) {
      throw ShapeError("soft prompt has shape " + to_string(soft_prompt.shape()) +
                       ", expected [" + std::to_string(b) + ", p, " +
                       std::to_string(config_.d_model) + "]");
    }
    p = soft_prompt.dim(1);
    if (prompt_valid.size() != b * p) throw ContractError("soft prompt mask has wrong length");
  }
  const bool task = stage == Stage::kTask;
  if (task && (user_tokens == nullptr || user_tokens->size() != b)) {
    throw ContractError("task stage requires user tokens for every row");
  }
  std::size_t q = 0, r = 0;
  if (task) {
    for (const auto& u : *user_tokens) q = std::max(q, u.size());
  }
  for (const auto& t : targets) r = std::max(r, t.size());

  AssembledInput<T> in;
  in.batch = b;
  in.length = 2 + p + q + r;
  in.prompt_begin = 1;
  in.prompt_len = p;
  in.user_begin = 2 + p;
  in.user_len = q;
  in.target_begin = 2 + p + q;
  if (in.length > config_.max_positions) {
    throw InputError("decoder sequence length " + std::to_string(in.length) +
                     " exceeds max_positions " + std::to_string(config_.max_positions));
  }
  const std::size_t len = in.length, tail = 1 + q + r;
  const SpecialTokens& sp = config_.special;

  std::vector<std::int32_t> head_ids(b, sp.bos), tail_ids(b * tail, sp.pad);
  in.valid.assign(b * len, 0);
  for (std::size_t row = 0; row < b; ++row) {
    std::uint8_t* v = &in.valid[row * len];
    v[0] = 1;
    for (std::size_t j = 0; j < p; ++j) v[1 + j] = prompt_valid[row * p + j];
    v[1 + p] = 1;
    std::int32_t* ids = &tail_ids[row * tail];
    ids[0] = sp.sep;
    if (task) {
      const auto& u = (*user_tokens)[row];
      for (std::size_t j = 0; j < u.size(); ++j) {
        ids[1 + j] = u[j];
        v[in.user_begin + j] = 1;
      }
    }
    for (std::size_t j = 0; j < targets[row].size(); ++j) {
      ids[1 + q + j] = targets[row][j];
      v[in.target_begin + j] = 1;
    }
  }

  in.positions.assign(b * len, 0);
  in.targets.assign(b * len, sp.pad);
  in.loss_mask.assign(b * len, 0);
  for (std::size_t row = 0; row < b; ++row) {
    std::int32_t pos = 0;
    std::size_t last_valid = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t i = row * len + t;
      in.positions[i] = pos;
      if (!in.valid[i]) continue;
      ++pos;
      if (t >= in.target_begin) {
        in.targets[row * len + last_valid] = tail_ids[row * tail + (t - p - 1)];
        in.loss_mask[row * len + last_valid] = 1;
      }
      last_valid = t;
    }
  }

  std::vector<Tensor<T>> parts;
  parts.push_back(embed(head_ids, {b, 1}));
  if (p > 0) parts.push_back(soft_prompt);
  parts.push_back(embed(tail_ids, {b, tail}));
  in.t0 = add(concat(parts, 1), embedding(position_embedding_, in.positions, {b, len}));
  return in;
}

template <class T>
void Decoder<T>::check_finite(const Tensor<T>& t, std::size_t layer) const {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError("non-finite activation in decoder layer " + std::to_string(layer + 1));
    }
  }
}

namespace {

template <class T>
void accumulate_stats(const Tensor<T>& sa, const Tensor<T>& gca,
                      const std::vector<std::uint8_t>& valid, std::size_t batch,
                      std::size_t len, LayerNormStats& stats) {
  const std::size_t d = sa.dim(2);
  stats.example_ratio.assign(batch, 0.0);
  double sa_total = 0, ca_total = 0;
  std::size_t positions = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    double ratio_sum = 0;
    std::size_t counted = 0;
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t i = b * len + t;
      if (!valid[i]) continue;
      double ns = 0, nc = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double s = sa.data()[i * d + j];
        const double c = gca.data()[i * d + j];
        ns += s * s;
        nc += c * c;
      }
      ns = std::sqrt(ns);
      nc = std::sqrt(nc);
      sa_total += ns;
      ca_total += nc;
      ++positions;
      if (ns == 0.0) {
        ++stats.skipped;
        continue;
      }
      ratio_sum += nc / ns;
      ++counted;
    }
    stats.example_ratio[b] = counted == 0 ? 0.0 : ratio_sum / static_cast<double>(counted);
  }
  if (positions > 0) {
    stats.mean_sa_norm = sa_total / static_cast<double>(positions);
    stats.mean_ca_norm = ca_total / static_cast<double>(positions);
  }
}

}  // namespace

template <class T>
Tensor<T> Decoder<T>::attention_block(const Layer& l, const Tensor<T>& a,
                                      const AssembledInput<T>& in, const Tensor<T>& k,
                                      const Tensor<T>& v,
                                      const std::vector<std::uint8_t>* key_valid,
                                      const std::function<Tensor<T>(const Tensor<T>&)>& apply_gate,
                                      LayerNormStats* stats) const {
  const std::size_t h = config_.n_heads, b = in.batch, len = in.length;
  const Tensor<T> q = split_heads(l.wq(a), h);
  const Tensor<T> self_mask = self_attention_mask<T>(b, len, in.valid, true);
  const Tensor<T> sa =
      l.wo(merge_heads(attend(q, split_heads(l.wk(a), h), split_heads(l.wv(a), h), self_mask)));
  if (!k.defined()) {
    if (stats != nullptr) accumulate_stats(sa, scale(sa, T(0)), in.valid, b, len, *stats);
    return sa;
  }
  if (k.rank() != 3 || k.dim(0) != b || k.dim(2) != config_.d_model || v.shape() != k.shape()) {
    throw ShapeError("fused keys/values have shape " + to_string(k.shape()) + " / " +
                     to_string(v.shape()) + " for a batch of " + std::to_string(b));
  }
  const std::size_t src = k.dim(1);
  if (key_valid == nullptr || key_valid->size() != b * src) {
    throw ContractError("cross-attention needs a key mask of " + std::to_string(b * src));
  }
  const Tensor<T> cross_mask = cross_attention_mask<T>(b, len, src, *key_valid);
  const Tensor<T> kc = split_heads(l.wk(k), h);
  const Tensor<T> vc = k.node() == v.node() ? split_heads(l.wv(k), h) : split_heads(l.wv(v), h);
  const Tensor<T> ca = l.wo(merge_heads(attend(q, kc, vc, cross_mask)));
  const Tensor<T> gca = apply_gate(ca);
  if (stats != nullptr) accumulate_stats(sa, gca, in.valid, b, len, *stats);
  return add(sa, gca);
}

template <class T>
Tensor<T> Decoder<T>::ga_layer(std::size_t layer, const Tensor<T>& t_prev,
                               const AssembledInput<T>& in, const Tensor<T>& k,
                               const Tensor<T>& v, const std::vector<std::uint8_t>* key_valid,
                               const Tensor<T>& gate, LayerNormStats* stats) const {
  if (layer >= layers_.size()) {
    throw ContractError("decoder layer " + std::to_string(layer) + " does not exist");
  }
  const Layer& l = layers_[layer];
  const auto apply = [&](const Tensor<T>& ca) { return gate.defined() ? mul(ca, gate) : ca; };
  Tensor<T> h = add(t_prev, attention_block(l, l.ln_attn(t_prev), in, k, v, key_valid, apply,
                                            stats));
  h = add(h, l.ff_out(relu(l.ff_in(l.ln_ff(h)))));
  check_finite(h, layer);
  return h;
}

template <class T>
Tensor<T> Decoder<T>::ga_layer_dynamic(std::size_t layer, const Tensor<T>& t_prev,
                                       const AssembledInput<T>& in, const Tensor<T>& k,
                                       const Tensor<T>& v,
                                       const std::vector<std::uint8_t>& key_valid,
                                       const Linear<T>& gate_net, LayerNormStats* stats) const {
  if (layer >= layers_.size()) {
    throw ContractError("decoder layer " + std::to_string(layer) + " does not exist");
  }
  const Layer& l = layers_[layer];
  const Tensor<T> a = l.ln_attn(t_prev);
  const Tensor<T> g = tanh(gate_net(a));  // [B, L, 1]
  const auto apply = [&](const Tensor<T>& ca) { return mul(ca, g); };
  Tensor<T> h = add(t_prev, attention_block(l, a, in, k, v, &key_valid, apply, stats));
  h = add(h, l.ff_out(relu(l.ff_in(l.ln_ff(h)))));
  check_finite(h, layer);
  return h;
}

template <class T>
DecoderOutput<T> Decoder<T>::forward(const AssembledInput<T>& in, const CrossInputs<T>& cross,
                                     bool diagnostics) const {
  const std::size_t m = layers_.size();
  if (cross.fused != nullptr) {
    if (cross.fused->size() != m) {
      throw ConfigError("fused K/V has " + std::to_string(cross.fused->size()) +
                        " layers, decoder has " + std::to_string(m));
    }
    if (!cross.unit_gates && (cross.gates == nullptr || cross.gates->size() != m)) {
      throw ConfigError("gate vector does not match the " + std::to_string(m) +
                        " decoder layers");
    }
  }
  DecoderOutput<T> out;
  if (diagnostics) out.diagnostics.emplace().layers.resize(m);
  Tensor<T> h = in.t0;
  for (std::size_t i = 0; i < m; ++i) {
    LayerNormStats* stats = diagnostics ? &out.diagnostics->layers[i] : nullptr;
    if (cross.fused == nullptr) {
      h = ga_layer(i, h, in, Tensor<T>(), Tensor<T>(), nullptr, Tensor<T>(), stats);
    } else if (!cross.unit_gates && cross.gates->dynamic()) {
      h = ga_layer_dynamic(i, h, in, cross.fused->keys[i], cross.fused->values[i],
                           *cross.key_valid, cross.gates->nets[i], stats);
    } else {
      const Tensor<T> gate =
          cross.unit_gates ? Tensor<T>() : slice(cross.gates->values, 0, i, i + 1);
      h = ga_layer(i, h, in, cross.fused->keys[i], cross.fused->values[i], cross.key_valid, gate,
                   stats);
    }
  }
  out.hidden = h;
  out.logits = head_(ln_final_(h));
  return out;
}

template <class T>
NamedParams<T> Decoder<T>::named_parameters() const {
  NamedParams<T> out;
  out.emplace_back("decoder.token_embedding", token_embedding_);
  out.emplace_back("decoder.position_embedding", position_embedding_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
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
  ln_final_.collect("decoder.ln_final", out);
  head_.collect("decoder.head", out);
  return out;
}

template <class T>
void Decoder<T>::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) {
    Tensor<T> handle = t;
    handle.set_requires_grad(on);
    if (!on) handle.zero_grad();
  }
}

template <class T>
std::vector<std::vector<std::int32_t>> greedy_generate(
    std::size_t batch, std::size_t vocab,
    const std::function<std::vector<T>(const std::vector<std::vector<std::int32_t>>&)>&
        next_logits,
    std::size_t max_new_tokens, std::int32_t eos) {
  if (max_new_tokens == 0) throw ContractError("max_new_tokens must be at least 1");
  std::vector<std::vector<std::int32_t>> generated(batch);
  std::vector<bool> done(batch, false);
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    const std::vector<T> logits = next_logits(generated);
    if (logits.size() != batch * vocab) throw ContractError("next_logits returned wrong size");
    bool all_done = true;
    for (std::size_t b = 0; b < batch; ++b) {
      if (done[b]) continue;
      const T* row = logits.data() + b * vocab;
      const auto best = static_cast<std::int32_t>(std::max_element(row, row + vocab) - row);
      if (best == eos) {
        done[b] = true;
      } else {
        generated[b].push_back(best);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return generated;
}

template struct GateVector<float>;
template struct GateVector<double>;
template class Decoder<float>;
template class Decoder<double>;
template std::vector<std::vector<std::int32_t>> greedy_generate<float>(
    std::size_t, std::size_t,
    const std::function<std::vector<float>(const std::vector<std::vector<std::int32_t>>&)>&,
    std::size_t, std::int32_t);
template std::vector<std::vector<std::int32_t>> greedy_generate<double>(
    std::size_t, std::size_t,
    const std::function<std::vector<double>(const std::vector<std::vector<std::int32_t>>&)>&,
    std::size_t, std::int32_t);

}  // namespace layalign
