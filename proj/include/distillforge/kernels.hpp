#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#include "distillforge/thread_pool.hpp"

namespace distillforge {

// Dense row-major kernels. Loop order in gemm is (i, k, j): the innermost
// j-loop is a contiguous axpy, which vectorizes without reassociating the
// k-accumulation. Results are therefore bit-identical for any thread count.

template <typename T>
inline void gemm_rows(const T* a, const T* b, T* c, long m, long k, long n, long i0, long i1,
                      bool accumulate) {
    for (long i = i0; i < i1; ++i) {
        T* crow = c + i * n;
        if (!accumulate) std::memset(crow, 0, sizeof(T) * static_cast<std::size_t>(n));
        const T* arow = a + i * k;
        long p = 0;
        for (; p + 4 <= k; p += 4) {
            const T a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
            const T* b0 = b + p * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (long j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; p < k; ++p) {
            const T ap = arow[p];
            const T* brow = b + p * n;
            for (long j = 0; j < n; ++j) crow[j] += ap * brow[j];
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n], or += when accumulate.
template <typename T>
inline void gemm(const T* a, const T* b, T* c, long m, long k, long n, bool accumulate = false) {
    const long work = m * k * n;
    if (work < (1 << 16) || m == 1) {
        gemm_rows(a, b, c, m, k, n, 0, m, accumulate);
        return;
    }
    parallel_for(m, [&](long i0, long i1) { gemm_rows(a, b, c, m, k, n, i0, i1, accumulate); });
}

/// out[n,m] = transpose of a[m,n].
template <typename T>
inline void transpose(const T* a, T* out, long m, long n) {
    constexpr long kBlock = 32;
    for (long ib = 0; ib < m; ib += kBlock)
        for (long jb = 0; jb < n; jb += kBlock) {
            long ie = std::min(m, ib + kBlock), je = std::min(n, jb + kBlock);
            for (long i = ib; i < ie; ++i)
                for (long j = jb; j < je; ++j) out[j * m + i] = a[i * n + j];
        }
}

/// im2col for one image: x[c,h,w] -> cols[c*kh*kw, oh*ow], zero padding `pad`,
/// square stride. Row index is (c, ki, kj) in row-major order.
template <typename T>
inline void im2col(const T* x, T* cols, long c, long h, long w, long kh, long kw, long stride,
                   long pad, long oh, long ow) {
    for (long ch = 0; ch < c; ++ch) {
        const T* xc = x + ch * h * w;
        for (long ki = 0; ki < kh; ++ki) {
            for (long kj = 0; kj < kw; ++kj) {
                T* row = cols + ((ch * kh + ki) * kw + kj) * (oh * ow);
                for (long oy = 0; oy < oh; ++oy) {
                    long iy = oy * stride - pad + ki;
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(ow));
                        continue;
                    }
                    const T* src = xc + iy * w;
                    for (long ox = 0; ox < ow; ++ox) {
                        long ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of im2col: cols[c*kh*kw, oh*ow] += into dx[c,h,w].
template <typename T>
inline void col2im_add(const T* cols, T* dx, long c, long h, long w, long kh, long kw, long stride,
                       long pad, long oh, long ow) {
    for (long ch = 0; ch < c; ++ch) {
        T* xc = dx + ch * h * w;
        for (long ki = 0; ki < kh; ++ki) {
            for (long kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((ch * kh + ki) * kw + kj) * (oh * ow);
                for (long oy = 0; oy < oh; ++oy) {
                    long iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + oy * ow;
                    T* dst = xc + iy * w;
                    for (long ox = 0; ox < ow; ++ox) {
                        long ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace distillforge
