// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels behind the tensor ops. Two implementations share one
// signature set:
//
//   serial::   straightforward loops, kept as the reference the tests and the
//              benchmark compare against;
//   parallel:: OpenMP row-partitioned versions used by the library.
//
// Every parallel kernel partitions *output rows* across threads and never
// reduces across threads, so its result does not depend on the thread count.

#include <cstddef>

namespace layalign::kernels {

/// Geometry of C[m,n] (+)= op(A)[m,k] * op(B)[k,n], row-major.
/// With trans_a, A is stored [k,m]; with trans_b, B is stored [n,k].
struct GemmShape {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k = 0;
  bool trans_a = false;
  bool trans_b = false;
};

namespace serial {

template <class T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate);

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

/// dx += y * (dy - <dy, y>) row by row.
template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols);

/// Writes normalized rows to y and per-row mean / reciprocal std to mean, rstd.
template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T eps, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols);

/// Accumulates into dx, dgain, dbias (any of them may be null).
template <class T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd, const T* dy,
                              T* dx, T* dgain, T* dbias, std::size_t rows, std::size_t cols);

}  // namespace serial

namespace parallel {

template <class T>
void gemm(const GemmShape& s, const T* a, const T* b, T* c, bool accumulate);

template <class T>
void softmax_rows(const T* x, T* y, std::size_t rows, std::size_t cols);

template <class T>
void softmax_rows_backward(const T* y, const T* dy, T* dx, std::size_t rows, std::size_t cols);

template <class T>
void layer_norm_rows(const T* x, const T* gain, const T* bias, T eps, T* y, T* mean, T* rstd,
                     std::size_t rows, std::size_t cols);

/// dx is row-parallel; dgain/dbias are reduced column-wise in row order.
template <class T>
void layer_norm_rows_backward(const T* x, const T* gain, const T* mean, const T* rstd, const T* dy,
                              T* dx, T* dgain, T* dbias, std::size_t rows, std::size_t cols);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace layalign::kernels
