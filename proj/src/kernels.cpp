// SPDX-License-Identifier: Apache-2.0
#include "layalign/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <omp.h>

namespace layalign::kernels {

namespace serial {

template <class T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      T sum = 0;
      for (std::size_t p = 0; p < s.k; ++p) {
        const T av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
        const T bv = s.trans_b ? b[j * s.k + p] : b[p * s.n + j];
        sum += av * bv;
      }
      c[i * s.n + j] = accumulate ? c[i * s.n + j] + sum : sum;
    }
  }
}

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const T inv = static_cast<T>(1.0 / total);
    for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    double dot = 0;
    for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(yr[j]) * dyr[j];
    for (std::size_t j = 0; j < cols; ++j) dxr[j] += yr[j] * (dyr[j] - static_cast<T>(dot));
  }
}

template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T eps, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    double mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += xr[j];
    mu /= static_cast<double>(cols);
    double var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double d = xr[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    mean[r] = static_cast<T>(mu);
    rstd[r] = static_cast<T>(inv);
    for (std::size_t j = 0; j < cols; ++j) {
      y[r * cols + j] = static_cast<T>((xr[j] - mu) * inv) * gain[j] + bias[j];
    }
  }
}

template <class T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd, const T* dy,
                              T* dx, T* dgain, T* dbias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    const T* dyr = dy + r * cols;
    double sum_g = 0;
    double sum_gx = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mean[r]) * rstd[r];
      const double g = static_cast<double>(dyr[j]) * gain[j];
      sum_g += g;
      sum_gx += g * xhat;
      if (dgain != nullptr) dgain[j] += static_cast<T>(dyr[j] * xhat);
      if (dbias != nullptr) dbias[j] += dyr[j];
    }
    if (dx == nullptr) continue;
    const double inv_n = 1.0 / static_cast<double>(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      const double xhat = (static_cast<double>(xr[j]) - mean[r]) * rstd[r];
      const double g = static_cast<double>(dyr[j]) * gain[j];
      dx[r * cols + j] += static_cast<T>(rstd[r] * (g - sum_g * inv_n - xhat * sum_gx * inv_n));
    }
  }
}

}  // namespace serial

namespace parallel {

namespace {

constexpr std::size_t kParallelWork = 1 << 15;

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
  T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t p = 0;
  for (; p + 8 <= n; p += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += x[p + u] * y[p + u];
  }
  T sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; p < n; ++p) sum += x[p] * y[p];
  return sum;
}

template <class T>
void gemm_row(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate, std::size_t i) {
  T* crow = c + i * s.n;
  if (!s.trans_b) {
    if (!accumulate) std::fill(crow, crow + s.n, T(0));
    for (std::size_t p = 0; p < s.k; ++p) {
      const T av = s.trans_a ? a[p * s.m + i] : a[i * s.k + p];
      const T* brow = b + p * s.n;
#pragma omp simd
      for (std::size_t j = 0; j < s.n; ++j) crow[j] += av * brow[j];
    }
    return;
  }
  if (!s.trans_a) {
    const T* arow = a + i * s.k;
    for (std::size_t j = 0; j < s.n; ++j) {
      const T v = dot(arow, b + j * s.k, s.k);
      crow[j] = accumulate ? crow[j] + v : v;
    }
    return;
  }
  for (std::size_t j = 0; j < s.n; ++j) {
    T sum = 0;
    for (std::size_t p = 0; p < s.k; ++p) sum += a[p * s.m + i] * b[j * s.k + p];
    crow[j] = accumulate ? crow[j] + sum : sum;
  }
}

}  // namespace

template <class T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate) {
  const std::size_t work = s.m * s.n * s.k;
  const auto rows = static_cast<std::ptrdiff_t>(s.m);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    gemm_row(s, a, b, c, accumulate, static_cast<std::size_t>(i));
  }
}

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    serial::softmax_rows(x + r * cols, y + r * cols, 1, cols);
  }
}

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    serial::softmax_rows_backward(y + r * cols, dy + r * cols, dx + r * cols, 1, cols);
  }
}

template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T eps, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    serial::layer_norm_rows(x + r * cols, gain, bias, eps, y + r * cols, mean + r, rstd + r, 1,
                            cols);
  }
}

template <class T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd, const T* dy,
                              T* dx, T* dgain, T* dbias, std::size_t rows, std::size_t cols) {
  const auto n = static_cast<std::ptrdiff_t>(rows);
  if (dx != nullptr) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (std::ptrdiff_t r = 0; r < n; ++r) {
      serial::layer_norm_rows_backward(x + r * cols, gain, mean + r, rstd + r, dy + r * cols,
                                       dx + r * cols, static_cast<T*>(nullptr),
                                       static_cast<T*>(nullptr), 1, cols);
    }
  }
  if (dgain == nullptr && dbias == nullptr) return;
  const auto ncols = static_cast<std::ptrdiff_t>(cols);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t j = 0; j < ncols; ++j) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T d = dy[r * cols + j];
      if (dgain != nullptr) {
        const double xhat = (static_cast<double>(x[r * cols + j]) - mean[r]) * rstd[r];
        dgain[j] += static_cast<T>(d * xhat);
      }
      if (dbias != nullptr) dbias[j] += d;
    }
  }
}

}  // namespace parallel

int max_threads() { return omp_get_max_threads(); }

#define LAYALIGN_INSTANTIATE_KERNELS(NS, T)                                                     \
  template void NS::gemm<T>(const GemmShape&, const T*, const T*, T*, bool);                    \
  template void NS::softmax_rows<T>(const T*, T*, std::size_t, std::size_t);                    \
  template void NS::softmax_rows_backward<T>(const T*, const T*, T*, std::size_t, std::size_t); \
  template void NS::layer_norm_rows<T>(const T*, const T*, const T*, T, T*, T*, T*,             \
                                       std::size_t, std::size_t);                               \
  template void NS::layer_norm_rows_backward<T>(const T*, const T*, const T*, const T*,         \
                                                const T*, T*, T*, T*, std::size_t, std::size_t);

LAYALIGN_INSTANTIATE_KERNELS(serial, float)
LAYALIGN_INSTANTIATE_KERNELS(serial, double)
LAYALIGN_INSTANTIATE_KERNELS(parallel, float)
LAYALIGN_INSTANTIATE_KERNELS(parallel, double)

#undef LAYALIGN_INSTANTIATE_KERNELS

}  // namespace layalign::kernels
