// SPDX-License-Identifier: Apache-2.0
#include "layalign/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "layalign/kernels.hpp"

namespace layalign {

namespace {

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T>
void record(const Tensor<T>& out, std::vector<NodePtr<T>> inputs, std::function<void()> fn) {
  Tape<T>::active()->record(out.node(), std::move(inputs), std::move(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for rank " +
                        std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulPlan {
  Shape out_shape;
  std::size_t m = 0, n = 0, k = 0;
  std::vector<std::size_t> a_off, b_off;  // per batch, in elements
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs, bool trans_b) {
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(as) + " and " +
                     to_string(bs));
  }
  const std::size_t p = as[as.size() - 2], q = as[as.size() - 1];
  const std::size_t bq = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::size_t r = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (q != bq) {
    throw ShapeError("matmul inner extents differ: " + to_string(as) + " x " + to_string(bs) +
                     (trans_b ? "^T" : ""));
  }
  MatmulPlan plan;
  plan.k = q;
  plan.n = r;
  Shape ab(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
  if (bb.empty()) {
    // Fold every a row into one gemm.
    plan.m = numel(ab) * p;
    plan.out_shape = ab;
    plan.out_shape.push_back(p);
    plan.out_shape.push_back(r);
    plan.a_off = {0};
    plan.b_off = {0};
    return plan;
  }
  plan.m = p;
  const std::size_t rank = std::max(ab.size(), bb.size());
  Shape out(rank);
  Shape ap(rank, 1), bp(rank, 1);
  std::copy(ab.begin(), ab.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - ab.size()));
  std::copy(bb.begin(), bb.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - bb.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ShapeError("matmul batch extents not broadcastable: " + to_string(as) + " x " +
                       to_string(bs));
    }
    out[i] = std::max(ap[i], bp[i]);
  }
  const auto as_str = strides_of(ap), bs_str = strides_of(bp);
  const std::size_t batches = numel(out);
  const std::size_t a_block = p * q, b_block = q * r;
  plan.a_off.resize(batches);
  plan.b_off.resize(batches);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t bidx = 0; bidx < batches; ++bidx) {
    std::size_t ao = 0, bo = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      if (ap[d] != 1) ao += idx[d] * as_str[d];
      if (bp[d] != 1) bo += idx[d] * bs_str[d];
    }
    plan.a_off[bidx] = ao * a_block;
    plan.b_off[bidx] = bo * b_block;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  plan.out_shape = out;
  plan.out_shape.push_back(p);
  plan.out_shape.push_back(r);
  return plan;
}

template <class T>
void batched_gemm(const kernels::GemmShape& g, const MatmulPlan& plan, const T* a, const T* b,
                  T* c) {
  const auto batches = static_cast<std::ptrdiff_t>(plan.a_off.size());
  const std::size_t c_block = g.m * g.n;
  if (batches == 1) {
    kernels::parallel::gemm(g, a, b, c, false);
    return;
  }
  const std::size_t work = g.m * g.n * g.k * plan.a_off.size();
#pragma omp parallel for schedule(static) if (work > (1u << 15))
  for (std::ptrdiff_t i = 0; i < batches; ++i) {
    const auto bi = static_cast<std::size_t>(i);
    kernels::parallel::gemm(g, a + plan.a_off[bi], b + plan.b_off[bi], c + bi * c_block, false);
  }
}

template <class T>
Tensor<T> matmul_impl(const Tensor<T>& a, const Tensor<T>& b, bool trans_b) {
  const MatmulPlan plan = plan_matmul(a.shape(), b.shape(), trans_b);
  std::vector<T> out(numel(plan.out_shape));
  const std::size_t batches = plan.a_off.size();
  const std::size_t c_block = plan.m * plan.n;
  std::vector<std::size_t> c_off(batches);
  for (std::size_t i = 0; i < batches; ++i) c_off[i] = i * c_block;

  kernels::GemmShape fwd{plan.m, plan.n, plan.k, false, trans_b};
  batched_gemm(fwd, plan, a.data().data(), b.data().data(), out.data());

  const bool track = tracking({&a, &b});
  Tensor<T> result(plan.out_shape, std::move(out), track);
  if (!track) return result;

  auto an = a.node(), bn = b.node(), on = result.node();
  record<T>(result, {an, bn}, [an, bn, on, plan, trans_b, c_off]() {
    const T* g = on->grad.data();
    const std::size_t batches = plan.a_off.size();
    if (an->requires_grad) {
      T* ga = an->grad_buffer();
      // dA = dC * op(B)^T
      kernels::GemmShape s{plan.m, plan.k, plan.n, false, !trans_b};
      for (std::size_t i = 0; i < batches; ++i) {
        kernels::parallel::gemm(s, g + c_off[i], bn->data.data() + plan.b_off[i],
                                ga + plan.a_off[i], true);
      }
    }
    if (bn->requires_grad) {
      T* gb = bn->grad_buffer();
      for (std::size_t i = 0; i < batches; ++i) {
        if (!trans_b) {
          // dB[q,r] += A^T dC
          kernels::GemmShape s{plan.k, plan.n, plan.m, true, false};
          kernels::parallel::gemm(s, an->data.data() + plan.a_off[i], g + c_off[i],
                                  gb + plan.b_off[i], true);
        } else {
          // dB[r,q] += dC^T A
          kernels::GemmShape s{plan.n, plan.k, plan.m, true, false};
          kernels::parallel::gemm(s, g + c_off[i], an->data.data() + plan.a_off[i],
                                  gb + plan.b_off[i], true);
        }
      }
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// broadcasting

struct BroadcastPlan {
  Shape out;
  enum class Kind { kSame, kScalarB, kSuffixB, kGeneral } kind = Kind::kSame;
  std::vector<std::size_t> ia, ib;
};

BroadcastPlan plan_broadcast(const Shape& as, const Shape& bs) {
  BroadcastPlan plan;
  if (as == bs) {
    plan.out = as;
    return plan;
  }
  const std::size_t rank = std::max(as.size(), bs.size());
  Shape ap(rank, 1), bp(rank, 1), out(rank);
  std::copy(as.begin(), as.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - as.size()));
  std::copy(bs.begin(), bs.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - bs.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ShapeError("cannot broadcast " + to_string(as) + " with " + to_string(bs));
    }
    out[i] = std::max(ap[i], bp[i]);
  }
  plan.out = out;
  if (ap == out && numel(bs) == 1) {
    plan.kind = BroadcastPlan::Kind::kScalarB;
    return plan;
  }
  if (ap == out) {
    // b a suffix of a (bias-like), possibly with leading ones.
    std::size_t lead = 0;
    while (lead < rank && bp[lead] == 1) ++lead;
    bool suffix = true;
    for (std::size_t i = lead; i < rank; ++i) suffix = suffix && bp[i] == out[i];
    if (suffix) {
      plan.kind = BroadcastPlan::Kind::kSuffixB;
      return plan;
    }
  }
  plan.kind = BroadcastPlan::Kind::kGeneral;
  const auto sa = strides_of(ap), sb = strides_of(bp);
  const std::size_t n = numel(out);
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      if (ap[d] != 1) oa += idx[d] * sa[d];
      if (bp[d] != 1) ob += idx[d] * sb[d];
    }
    plan.ia[lin] = oa;
    plan.ib[lin] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = numel(plan->out);
  const std::size_t nb = b.numel();
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  auto index_a = [&](std::size_t i) {
    return plan->kind == BroadcastPlan::Kind::kGeneral ? plan->ia[i] : i;
  };
  auto index_b = [&](std::size_t i) -> std::size_t {
    switch (plan->kind) {
      case BroadcastPlan::Kind::kSame: return i;
      case BroadcastPlan::Kind::kScalarB: return 0;
      case BroadcastPlan::Kind::kSuffixB: return i % nb;
      case BroadcastPlan::Kind::kGeneral: return plan->ib[i];
    }
    return 0;
  };
  std::vector<T> out(n);
  if (plan->kind == BroadcastPlan::Kind::kSame) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = kind == BinaryKind::kAdd ? ad[i] + bd[i]
               : kind == BinaryKind::kSub ? ad[i] - bd[i]
                                         : ad[i] * bd[i];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T x = ad[index_a(i)], y = bd[index_b(i)];
      out[i] = kind == BinaryKind::kAdd ? x + y : kind == BinaryKind::kSub ? x - y : x * y;
    }
  }
  const bool track = tracking({&a, &b});
  Tensor<T> result(plan->out, std::move(out), track);
  if (!track) return result;
  auto an = a.node(), bn = b.node(), on = result.node();
  record<T>(result, {an, bn}, [an, bn, on, plan, kind, nb]() {
    const T* g = on->grad.data();
    const std::size_t n = on->grad.size();
    auto ia = [&](std::size_t i) {
      return plan->kind == BroadcastPlan::Kind::kGeneral ? plan->ia[i] : i;
    };
    auto ib = [&](std::size_t i) -> std::size_t {
      switch (plan->kind) {
        case BroadcastPlan::Kind::kSame: return i;
        case BroadcastPlan::Kind::kScalarB: return 0;
        case BroadcastPlan::Kind::kSuffixB: return i % nb;
        case BroadcastPlan::Kind::kGeneral: return plan->ib[i];
      }
      return 0;
    };
    if (an->requires_grad) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        ga[ia(i)] += kind == BinaryKind::kMul ? g[i] * bn->data[ib(i)] : g[i];
      }
    }
    if (bn->requires_grad) {
      T* gb = bn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T v = kind == BinaryKind::kMul ? g[i] * an->data[ia(i)]
                    : kind == BinaryKind::kSub ? -g[i]
                                               : g[i];
        gb[ib(i)] += v;
      }
    }
  });
  return result;
}

enum class UnaryKind { kRelu, kSilu, kTanh };

template <class T>
Tensor<T> unary(const Tensor<T>& x, UnaryKind kind) {
  const std::size_t n = x.numel();
  const T* xd = x.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = xd[i];
    switch (kind) {
      case UnaryKind::kRelu: out[i] = v > T(0) ? v : T(0); break;
      case UnaryKind::kSilu: out[i] = v / (T(1) + std::exp(-v)); break;
      case UnaryKind::kTanh: out[i] = std::tanh(v); break;
    }
  }
  const bool track = tracking({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on, kind]() {
    const std::size_t n = on->grad.size();
    const T* g = on->grad.data();
    T* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const T v = xn->data[i];
      switch (kind) {
        case UnaryKind::kRelu: gx[i] += v > T(0) ? g[i] : T(0); break;
        case UnaryKind::kSilu: {
          const T s = T(1) / (T(1) + std::exp(-v));
          gx[i] += g[i] * s * (T(1) + v * (T(1) - s));
          break;
        }
        case UnaryKind::kTanh: {
          const T y = on->data[i];
          gx[i] += g[i] * (T(1) - y * y);
          break;
        }
      }
    }
  });
  return result;
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, false);
}

template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  return matmul_impl(a, b, true);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  const bool track = tracking({&x});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on, factor]() {
    T* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i] * factor;
  });
  return result;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, UnaryKind::kRelu);
}
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(x, UnaryKind::kSilu);
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(x, UnaryKind::kTanh);
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  if (inner == 1) {
    kernels::parallel::softmax_rows(xd, out.data(), outer, len);
  } else {
    std::vector<T> row(len), res(len);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) row[j] = xd[(o * len + j) * inner + in];
        kernels::serial::softmax_rows(row.data(), res.data(), 1, len);
        for (std::size_t j = 0; j < len; ++j) out[(o * len + j) * inner + in] = res[j];
      }
    }
  }
  const bool track = tracking({&x});
  Tensor<T> result(s, std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on, outer, inner, len]() {
    T* gx = xn->grad_buffer();
    if (inner == 1) {
      kernels::parallel::softmax_rows_backward(on->data.data(), on->grad.data(), gx, outer, len);
      return;
    }
    std::vector<T> y(len), dy(len), dx(len);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = (o * len + j) * inner + in;
          y[j] = on->data[idx];
          dy[j] = on->grad[idx];
          dx[j] = T(0);
        }
        kernels::serial::softmax_rows_backward(y.data(), dy.data(), dx.data(), 1, len);
        for (std::size_t j = 0; j < len; ++j) gx[(o * len + j) * inner + in] += dx[j];
      }
    }
  });
  return result;
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t cols = x.dim(-1);
  if (gain.numel() != cols || bias.numel() != cols) {
    throw ShapeError("layer_norm gain/bias " + to_string(gain.shape()) + "/" +
                     to_string(bias.shape()) + " do not match last extent of " +
                     to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / cols;
  std::vector<T> out(x.numel());
  auto stats = std::make_shared<std::vector<T>>(2 * rows);
  kernels::parallel::layer_norm_rows(x.data().data(), gain.data().data(), bias.data().data(), eps,
                                     out.data(), stats->data(), stats->data() + rows, rows, cols);
  const bool track = tracking({&x, &gain, &bias});
  Tensor<T> result(x.shape(), std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = result.node();
  record<T>(result, {xn, gn, bn}, [xn, gn, bn, on, stats, rows, cols]() {
    kernels::parallel::layer_norm_rows_backward(
        xn->data.data(), gn->data.data(), stats->data(), stats->data() + rows, on->grad.data(),
        xn->requires_grad ? xn->grad_buffer() : nullptr,
        gn->requires_grad ? gn->grad_buffer() : nullptr,
        bn->requires_grad ? bn->grad_buffer() : nullptr, rows, cols);
  });
  return result;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const bool track = tracking({&x});
  Tensor<T> result(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on]() {
    T* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
  });
  return result;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t rank = s.size();
  if (perm.size() != rank) throw ShapeError("permute rank mismatch for " + to_string(s));
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ContractError("permute: not a permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  const auto in_str = strides_of(s);
  std::vector<std::size_t> src_str(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = s[perm[d]];
    src_str[d] = in_str[perm[d]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    (*src)[lin] = off;
    for (std::size_t d = rank; d-- > 0;) {
      off += src_str[d];
      if (++idx[d] < out_shape[d]) break;
      off -= src_str[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*src)[i]];
  const bool track = tracking({&x});
  Tensor<T> result(out_shape, std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on, src]() {
    T* gx = xn->grad_buffer();
    for (std::size_t i = 0; i < on->grad.size(); ++i) gx[(*src)[i]] += on->grad[i];
  });
  return result;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = normalize_axis(axis, s0.size());
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
    if (!ok) throw ShapeError("concat shape mismatch: " + to_string(s0) + " vs " + to_string(s));
    total += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[ax] = total;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const auto& p : parts) {
    starts.push_back(start);
    const std::size_t len = p.shape()[ax];
    const T* pd = p.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(pd + o * len * inner, pd + (o + 1) * len * inner,
                out.data() + (o * total + start) * inner);
    }
    start += len;
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracking({&p});
  Tensor<T> result(out_shape, std::move(out), track);
  if (!track) return result;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  auto on = result.node();
  record<T>(result, nodes, [nodes, on, starts, outer, inner, total, ax]() {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      const std::size_t len = nodes[k]->shape[ax];
      T* g = nodes[k]->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = on->grad.data() + (o * total + starts[k]) * inner;
        T* dst = g + o * len * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    }
  });
  return result;
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const std::size_t ax = normalize_axis(axis, s.size());
  if (begin >= end || end > s[ax]) {
    throw ContractError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") invalid for extent " + std::to_string(s[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax], sub_len = end - begin;
  Shape out_shape = s;
  out_shape[ax] = sub_len;
  std::vector<T> out(numel(out_shape));
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xd + (o * len + begin) * inner, xd + (o * len + end) * inner,
              out.data() + o * sub_len * inner);
  }
  const bool track = tracking({&x});
  Tensor<T> result(out_shape, std::move(out), track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on, outer, inner, len, sub_len, begin]() {
    T* g = xn->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = on->grad.data() + o * sub_len * inner;
      T* dst = g + (o * len + begin) * inner;
      for (std::size_t i = 0; i < sub_len * inner; ++i) dst[i] += src[i];
    }
  });
  return result;
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids, Shape leading) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  if (numel(leading) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for leading shape " +
                     to_string(leading));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  std::vector<T> out(ids.size() * d);
  const T* td = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(td + static_cast<std::size_t>(ids[i]) * d,
              td + (static_cast<std::size_t>(ids[i]) + 1) * d, out.data() + i * d);
  }
  Shape out_shape = std::move(leading);
  out_shape.push_back(d);
  const bool track = tracking({&table});
  Tensor<T> result(out_shape, std::move(out), track);
  if (!track) return result;
  auto tn = table.node(), on = result.node();
  std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
  record<T>(result, {tn}, [tn, on, id_copy, d]() {
    T* g = tn->grad_buffer();
    for (std::size_t i = 0; i < id_copy.size(); ++i) {
      T* dst = g + static_cast<std::size_t>(id_copy[i]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += on->grad[i * d + j];
    }
  });
  return result;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  double total = 0;
  for (T v : x.data()) total += v;
  const bool track = tracking({&x});
  Tensor<T> result({1}, {static_cast<T>(total)}, track);
  if (!track) return result;
  auto xn = x.node(), on = result.node();
  record<T>(result, {xn}, [xn, on]() {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += on->grad[0];
  });
  return result;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.numel())));
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask) {
  const std::size_t vocab = logits.dim(-1);
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows || mask.size() != rows) {
    throw ContractError("cross_entropy: " + std::to_string(rows) + " rows but " +
                        std::to_string(targets.size()) + " targets and " +
                        std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[r]) + " at row " +
                          std::to_string(r) + " outside vocabulary " + std::to_string(vocab));
    }
  }
  if (count == 0) throw ContractError("cross_entropy: every position is masked out (empty loss)");
  const T* x = logits.data().data();
  double loss = 0;
  auto lse = std::make_shared<std::vector<double>>(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask[r] == 0) continue;
    const T* row = x + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    (*lse)[r] = mx + std::log(s);
    loss += (*lse)[r] - static_cast<double>(row[targets[r]]);
  }
  loss /= static_cast<double>(count);
  const bool track = tracking({&logits});
  Tensor<T> result({1}, {static_cast<T>(loss)}, track);
  if (!track) return result;
  auto ln = logits.node(), on = result.node();
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  record<T>(result, {ln}, [ln, on, lse, tg, mk, rows, vocab, count]() {
    T* g = ln->grad_buffer();
    const double scale_by = static_cast<double>(on->grad[0]) / static_cast<double>(count);
    for (std::size_t r = 0; r < rows; ++r) {
      if (mk[r] == 0) continue;
      const T* row = ln->data.data() + r * vocab;
      T* gr = g + r * vocab;
      for (std::size_t j = 0; j < vocab; ++j) {
        const double p = std::exp(static_cast<double>(row[j]) - (*lse)[r]);
        gr[j] += static_cast<T>(scale_by * (p - (static_cast<std::int32_t>(j) == tg[r] ? 1.0 : 0.0)));
      }
    }
  });
  return result;
}

#define LAYALIGN_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> matmul_bt(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> silu(const Tensor<T>&);                                                 \
  template Tensor<T> tanh(const Tensor<T>&);                                                 \
  template Tensor<T> softmax(const Tensor<T>&, int);                                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                       \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);             \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                             \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Shape);      \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>,          \
                                   std::span<const std::uint8_t>);

LAYALIGN_INSTANTIATE_OPS(float)
LAYALIGN_INSTANTIATE_OPS(double)

#undef LAYALIGN_INSTANTIATE_OPS

}  // namespace layalign
