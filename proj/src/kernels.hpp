#pragma once

// Dense CPU kernels shared by the convolution-style operators. All buffers are
// row-major; every routine accumulates into its output.

#include <algorithm>
#include <cstddef>

namespace dnln::kernels {

// C(M,N) += A(M,K) * B(K,N)
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const double a = A[i * K + p];
      if (a == 0.0) continue;
      const double* b = B + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C(K,N) += A(M,K)^T * B(M,N)
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* b = B + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const double a = A[i * K + p];
      if (a == 0.0) continue;
      double* c = C + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

// C(M,K) += A(M,N) * B(K,N)^T
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t p = 0; p < K; ++p) C[i * K + p] += dot(A + i * N, B + p * N, N);
}

// col((c*k + ky)*k + kx, y*W + x) = in(c, y + ky*dil - pad, x + kx*dil - pad), zero outside.
inline void im2col(const double* in, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                   std::size_t dil, std::size_t pad, double* col) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = in + c * H * W;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = col + ((c * k + ky) * k + kx) * H * W;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky * dil) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx * dil) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          double* r = row + y * w;
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= h || x0 >= x1) {
            for (std::ptrdiff_t x = 0; x < w; ++x) r[x] = 0.0;
            continue;
          }
          const double* src = plane + sy * w + dx;
          for (std::ptrdiff_t x = 0; x < x0; ++x) r[x] = 0.0;
          for (std::ptrdiff_t x = x0; x < x1; ++x) r[x] = src[x];
          for (std::ptrdiff_t x = x1; x < w; ++x) r[x] = 0.0;
        }
      }
    }
  }
}

// Adjoint of im2col: scatters col back onto the image, accumulating.
inline void col2im(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                   std::size_t dil, std::size_t pad, double* out) {
  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = out + c * H * W;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = col + ((c * k + ky) * k + kx) * H * W;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky * dil) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx * dil) - static_cast<std::ptrdiff_t>(pad);
        const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(w, w - dx);
        for (std::ptrdiff_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          const double* r = row + y * w;
          double* dst = plane + sy * w + dx;
          for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x] += r[x];
        }
      }
    }
  }
}

}  // namespace dnln::kernels
