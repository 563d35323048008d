// SPDX-License-Identifier: Apache-2.0
#include "layalign/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace layalign {

std::vector<std::size_t> LayerSelection::resolve(std::size_t n_layers) const {
  const std::size_t states = n_layers + 1;
  std::vector<std::size_t> out;
  auto need_k = [&]() {
    if (k == 0 || k > states) {
      throw ConfigError("layer selection size " + std::to_string(k) + " invalid for " +
                        std::to_string(states) + " encoder states");
    }
  };
  switch (kind) {
    case Kind::kAllButLast:
      for (std::size_t i = 0; i < n_layers; ++i) out.push_back(i);
      break;
    case Kind::kFirstK:
      need_k();
      for (std::size_t i = 0; i < k; ++i) out.push_back(i);
      break;
    case Kind::kMiddleK: {
      need_k();
      const std::size_t start = (states - k) / 2;
      for (std::size_t i = start; i < start + k; ++i) out.push_back(i);
      break;
    }
    case Kind::kLastK:
      need_k();
      for (std::size_t i = states - k; i < states; ++i) out.push_back(i);
      break;
    case Kind::kLastHidden:
      out.push_back(n_layers);
      break;
    case Kind::kAverage:
      for (std::size_t i = 0; i < states; ++i) out.push_back(i);
      break;
    case Kind::kExplicit:
      out = indices;
      std::sort(out.begin(), out.end());
      if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
        throw ConfigError("layer selection lists a state twice");
      }
      for (std::size_t i : out) {
        if (i >= states) {
          throw ConfigError("layer selection index " + std::to_string(i) + " beyond H_" +
                            std::to_string(n_layers));
        }
      }
      break;
  }
  if (out.empty()) throw ConfigError("layer selection is empty");
  return out;
}

LayerSelection LayerSelection::parse(const std::string& spec) {
  LayerSelection sel;
  auto parse_k = [&](const std::string& rest) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(rest, &used);
      if (used != rest.size()) throw std::invalid_argument(rest);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("bad layer count in selection '" + spec + "'");
    }
  };
  if (spec.empty()) throw ConfigError("layer selection is empty");
  if (spec == "all") return sel;
  if (spec == "last-hidden") {
    sel.kind = Kind::kLastHidden;
    return sel;
  }
  if (spec == "average") {
    sel.kind = Kind::kAverage;
    return sel;
  }
  const auto colon = spec.find(':');
  if (colon != std::string::npos) {
    const std::string head = spec.substr(0, colon);
    sel.k = parse_k(spec.substr(colon + 1));
    if (head == "first") {
      sel.kind = Kind::kFirstK;
    } else if (head == "middle") {
      sel.kind = Kind::kMiddleK;
    } else if (head == "last") {
      sel.kind = Kind::kLastK;
    } else {
      throw ConfigError("unknown layer selection '" + spec + "'");
    }
    if (sel.k == 0) throw ConfigError("layer selection '" + spec + "' is empty");
    return sel;
  }
  sel.kind = Kind::kExplicit;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ConfigError("empty entry in layer selection '" + spec + "'");
    sel.indices.push_back(parse_k(item));
  }
  if (sel.indices.empty()) throw ConfigError("layer selection is empty");
  return sel;
}

std::string LayerSelection::to_string() const {
  switch (kind) {
    case Kind::kAllButLast: return "all";
    case Kind::kFirstK: return "first:" + std::to_string(k);
    case Kind::kMiddleK: return "middle:" + std::to_string(k);
    case Kind::kLastK: return "last:" + std::to_string(k);
    case Kind::kLastHidden: return "last-hidden";
    case Kind::kAverage: return "average";
    case Kind::kExplicit: {
      std::string s;
      for (std::size_t i = 0; i < indices.size(); ++i) {
        if (i != 0) s += ",";
        s += std::to_string(indices[i]);
      }
      return s;
    }
  }
  return "all";
}

// ---------------------------------------------------------------------------

template <class T>
Adapter<T>::Adapter(AdapterKind kind, std::size_t d_enc, std::size_t d_dec, std::mt19937_64& rng)
    : kind_(kind), d_enc_(d_enc) {
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d_enc));
  if (kind_ == AdapterKind::kMlp) {
    hidden_ = make_linear<T>(d_enc, d_dec, true, std_in, rng, true);
    out_ = make_linear<T>(d_dec, d_dec, true, 1.0 / std::sqrt(static_cast<double>(d_dec)), rng, true);
    return;
  }
  if (kind_ == AdapterKind::kPlus) hidden_ = make_linear<T>(d_enc, d_enc, true, std_in, rng, true);
  out_ = make_linear<T>(d_enc, d_dec, true, std_in, rng, true);
}

template <class T>
Tensor<T> Adapter<T>::operator()(const LayerStack<T>& stack) const {
  validate_stack(stack);
  if (stack.width() != d_enc_) {
    throw ConfigError("adapter expects d_enc " + std::to_string(d_enc_) + ", encoder states have " +
                      std::to_string(stack.width()));
  }
  const Tensor<T>& h = stack.last();
  if (kind_ == AdapterKind::kPlus) return out_(silu(hidden_(h)));
  if (kind_ == AdapterKind::kMlp) return out_(relu(hidden_(h)));
  return out_(h);
}

template <class T>
NamedParams<T> Adapter<T>::named_parameters() const {
  NamedParams<T> out;
  if (kind_ != AdapterKind::kLinear) hidden_.collect("adapter.hidden", out);
  out_.collect("adapter.out", out);
  return out;
}

template <class T>
std::size_t Adapter<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------

template <class T>
LayerWiseAligner<T>::LayerWiseAligner(const BridgeConfig& config, std::size_t n_enc_layers,
                                      std::size_t d_enc, std::size_t d_dec,
                                      std::size_t m_dec_layers, std::mt19937_64& rng)
    : config_(config),
      n_enc_layers_(n_enc_layers),
      d_enc_(d_enc),
      d_dec_(d_dec),
      m_dec_layers_(m_dec_layers),
      selected_(config.selection.resolve(n_enc_layers)) {
  if (m_dec_layers == 0) throw ConfigError("aligner needs at least one decoder layer");
  if (config.fusion_hidden == 0) throw ConfigError("fusion_hidden must be positive");
  logits_ = Tensor<T>::zeros({m_dec_layers, n_enc_layers + 1}, !config.selection.frozen_uniform());
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d_enc));
  const double std_hidden = 1.0 / std::sqrt(static_cast<double>(config.fusion_hidden));
  if (config.fusion_plus) pre_ = make_linear<T>(d_enc, d_enc, true, std_in, rng, true);
  fc1_ = make_linear<T>(d_enc, config.fusion_hidden, true, std_in, rng, true);
  fc2_ = make_linear<T>(config.fusion_hidden, d_dec, true, std_hidden, rng, true);
  if (config.separate_kv_heads) {
    fc2_v_ = make_linear<T>(config.fusion_hidden, d_dec, true, std_hidden, rng, true);
  }
}

template <class T>
void LayerWiseAligner<T>::check_stack(const LayerStack<T>& stack) const {
  validate_stack(stack);
  if (stack.n_layers() != n_enc_layers_ || stack.width() != d_enc_) {
    throw ConfigError("aligner built for " + std::to_string(n_enc_layers_) + " layers of width " +
                      std::to_string(d_enc_) + ", got " + std::to_string(stack.n_layers()) +
                      " of width " + std::to_string(stack.width()));
  }
}

template <class T>
Tensor<T> LayerWiseAligner<T>::mixing_weights(const std::vector<std::size_t>& subset) const {
  // Gather the subset columns of the [m, n+1] logits, then softmax per row.
  std::vector<std::int32_t> ids(subset.begin(), subset.end());
  const Tensor<T> cols = permute(logits_, {1, 0});                 // [n+1, m]
  const Tensor<T> picked = embedding(cols, ids, {subset.size()});  // [k, m]
  return softmax(permute(picked, {1, 0}), -1);                     // [m, k]
}

template <class T>
Tensor<T> LayerWiseAligner<T>::stacked_states(const LayerStack<T>& stack,
                                              const std::vector<std::size_t>& subset) const {
  std::vector<Tensor<T>> rows;
  const std::size_t flat = stack.batch * stack.length * d_enc_;
  for (std::size_t idx : subset) rows.push_back(reshape(stack.states[idx], {1, flat}));
  return rows.size() == 1 ? rows.front() : concat(rows, 0);  // [k, B*S*d_enc]
}

template <class T>
Tensor<T> LayerWiseAligner<T>::fusion_network(const Tensor<T>& mixed, const Linear<T>& head) const {
  Tensor<T> x = mixed;
  if (config_.fusion_plus) x = silu(pre_(x));
  return head(relu(fc1_(x)));
}

template <class T>
FusedKV<T> LayerWiseAligner<T>::fuse_all(const LayerStack<T>& stack) const {
  check_stack(stack);
  const std::size_t m = m_dec_layers_, b = stack.batch, s = stack.length;
  const Tensor<T> weights = mixing_weights(selected_);
  const Tensor<T> mixed =
      reshape(matmul(weights, stacked_states(stack, selected_)), {m, b, s, d_enc_});
  Tensor<T> pre = mixed;
  if (config_.fusion_plus) pre = silu(pre_(pre));
  const Tensor<T> hidden = relu(fc1_(pre));
  const Tensor<T> keys = fc2_(hidden);  // [m, B, S, d_dec]
  const Tensor<T> values = config_.separate_kv_heads ? fc2_v_(hidden) : keys;
  FusedKV<T> out;
  for (std::size_t i = 0; i < m; ++i) {
    out.keys.push_back(reshape(slice(keys, 0, i, i + 1), {b, s, d_dec_}));
    out.values.push_back(config_.separate_kv_heads
                             ? reshape(slice(values, 0, i, i + 1), {b, s, d_dec_})
                             : out.keys.back());
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> LayerWiseAligner<T>::fuse(const LayerStack<T>& stack,
                                                          std::size_t layer) const {
  return fuse_subset(stack, layer, selected_);
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> LayerWiseAligner<T>::fuse_subset(
    const LayerStack<T>& stack, std::size_t layer, const std::vector<std::size_t>& subset) const {
  check_stack(stack);
  if (layer < 1 || layer > m_dec_layers_) {
    throw ContractError("decoder layer index " + std::to_string(layer) + " outside 1.." +
                        std::to_string(m_dec_layers_));
  }
  if (subset.empty()) throw ConfigError("fuse_subset with an empty subset");
  for (std::size_t idx : subset) {
    if (idx > n_enc_layers_) throw ConfigError("subset index beyond H_n");
  }
  const std::size_t b = stack.batch, s = stack.length;
  const Tensor<T> row = slice(mixing_weights(subset), 0, layer - 1, layer);  // [1, k]
  const Tensor<T> mixed = reshape(matmul(row, stacked_states(stack, subset)), {b, s, d_enc_});
  const Tensor<T> k = fusion_network(mixed, fc2_);
  const Tensor<T> v = config_.separate_kv_heads ? fusion_network(mixed, fc2_v_) : k;
  return {k, v};
}

template <class T>
std::vector<std::vector<double>> LayerWiseAligner<T>::weight_matrix() const {
  NoGradScope<T> no_grad;
  const Tensor<T> w = mixing_weights(selected_);
  const std::size_t m = w.dim(0), k = w.dim(1);
  std::vector<std::vector<double>> out(m, std::vector<double>(k));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i][j] = w.data()[i * k + j];
  }
  return out;
}

template <class T>
NamedParams<T> LayerWiseAligner<T>::named_parameters() const {
  NamedParams<T> out;
  out.emplace_back("aligner.mixing_logits", logits_);
  if (config_.fusion_plus) pre_.collect("aligner.pre", out);
  fc1_.collect("aligner.fc1", out);
  fc2_.collect("aligner.fc2", out);
  if (config_.separate_kv_heads) fc2_v_.collect("aligner.fc2_v", out);
  return out;
}

template <class T>
std::size_t LayerWiseAligner<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

template class Adapter<float>;
template class Adapter<double>;
template class LayerWiseAligner<float>;
template class LayerWiseAligner<double>;

}  // namespace layalign
