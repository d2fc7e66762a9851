#pragma once

// Cache-friendly matrix product used by every convolution and dense layer.
// The reduction order over the inner dimension is fixed, so results are
// bit-reproducible for a given build.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace ps8::detail {

template <class T, int Bytes>
struct SimdVec {
  typedef T type __attribute__((vector_size(Bytes)));
  static constexpr int lanes = Bytes / static_cast<int>(sizeof(T));
};

// C[rows x NV*lanes] += packed A panel (K x MR, interleaved) * B[K x NV*lanes]
template <class T, int Bytes, int MR, int NV>
inline void micro_kernel(std::size_t k, const T* a_panel, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                         int rows) {
  using V = typename SimdVec<T, Bytes>::type;
  constexpr int W = SimdVec<T, Bytes>::lanes;
  V acc[MR][NV];
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v) acc[r][v] = V{};
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    V bv[NV];
    for (int v = 0; v < NV; ++v) std::memcpy(&bv[v], brow + v * W, sizeof(V));
    const T* ap = a_panel + p * MR;
    for (int r = 0; r < MR; ++r) {
      const T av = ap[r];
      for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < rows; ++r) {
    for (int v = 0; v < NV; ++v) {
      V cv;
      std::memcpy(&cv, c + r * ldc + v * W, sizeof(V));
      cv += acc[r][v];
      std::memcpy(c + r * ldc + v * W, &cv, sizeof(V));
    }
  }
}

/// C[m x n] += A[m x k] * B[k x n].
/// A is addressed as a[i * a_rs + p * a_cs], which covers transposed and
/// overlapping (sliding-window) views. B and C are row-major with leading
/// dimensions ldb and ldc.
template <class T>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t a_rs, std::size_t a_cs,
              const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
  constexpr int MR = 6;
  constexpr std::size_t W = SimdVec<T, 64>::lanes;
  constexpr std::size_t H = SimdVec<T, 32>::lanes;
  thread_local std::vector<T> panel;
  panel.resize(k * MR);
  for (std::size_t i = 0; i < m; i += MR) {
    const int rows = static_cast<int>(std::min<std::size_t>(MR, m - i));
    for (std::size_t p = 0; p < k; ++p) {
      T* dst = panel.data() + p * MR;
      for (int r = 0; r < MR; ++r) dst[r] = r < rows ? a[(i + r) * a_rs + p * a_cs] : T{};
    }
    T* crow = c + i * ldc;
    std::size_t j = 0;
    for (; j + 2 * W <= n; j += 2 * W) micro_kernel<T, 64, MR, 2>(k, panel.data(), b + j, ldb, crow + j, ldc, rows);
    for (; j + W <= n; j += W) micro_kernel<T, 64, MR, 1>(k, panel.data(), b + j, ldb, crow + j, ldc, rows);
    for (; j + H <= n; j += H) micro_kernel<T, 32, MR, 1>(k, panel.data(), b + j, ldb, crow + j, ldc, rows);
    for (; j < n; ++j) {
      for (int r = 0; r < rows; ++r) {
        T s{};
        for (std::size_t p = 0; p < k; ++p) s += panel[p * MR + r] * b[p * ldb + j];
        crow[r * ldc + j] += s;
      }
    }
  }
}

}  // namespace ps8::detail
