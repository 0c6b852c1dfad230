/* Vectorizable inner loops for the direct 3D convolution kernels.
 *
 * Kept in plain C so the pointers can be declared restrict; without that
 * the compiler has to assume the accumulation tile may alias the input
 * and refuses to vectorize. Reductions keep independent scalar
 * accumulator chains per kernel offset; every loop runs in a fixed order,
 * so results are bitwise reproducible. One macro instantiates
 * float (8 lanes) and double (4 lanes) variants.
 */
#ifndef VOXREP_CONV_INNER_H
#define VOXREP_CONV_INNER_H

#define VX_DEFINE_INNER(T, SUF)                                         \
  /* dst[i] += a * src[i * sstride] */                                        \
  static inline void vx_axpy_##SUF(T *restrict dst, const T *restrict src,    \
                                   T a, long n, long sstride) {               \
    long i;                                                                   \
    if (sstride == 1) {                                                       \
      for (i = 0; i < n; i++) dst[i] += a * src[i];                           \
    } else {                                                                  \
      for (i = 0; i < n; i++) dst[i] += a * src[i * sstride];                 \
    }                                                                         \
  }                                                                           \
  /* dst[i * dstride] += a * src[i] */                                        \
  static inline void vx_axpy_scatter_##SUF(T *restrict dst, long dstride,     \
                                           const T *restrict src, T a,        \
                                           long n) {                          \
    long i;                                                                   \
    if (dstride == 1) {                                                       \
      for (i = 0; i < n; i++) dst[i] += a * src[i];                           \
    } else {                                                                  \
      for (i = 0; i < n; i++) dst[i * dstride] += a * src[i];                 \
    }                                                                         \
  }                                                                           \
  /* fused kz in {0,1,2} pass for unit stride, kernel depth 3 */              \
  static inline void vx_row3_##SUF(T *restrict dst, const T *restrict src,    \
                                   const T *restrict w3, long n) {            \
    const T w0 = w3[0], w1 = w3[1], w2 = w3[2];                               \
    long i;                                                                   \
    for (i = 0; i < n; i++)                                                   \
      dst[i] += w0 * src[i] + w1 * src[i + 1] + w2 * src[i + 2];              \
  }                                                                           \
  /* fused (ky, kz) in 3x3 pass over three consecutive input rows */          \
  static inline void vx_row3x3_##SUF(T *restrict dst, const T *restrict r0,   \
                                     const T *restrict r1,                    \
                                     const T *restrict r2,                    \
                                     const T *restrict w9, long n) {          \
    long i;                                                                   \
    for (i = 0; i < n; i++)                                                   \
      dst[i] += w9[0] * r0[i] + w9[1] * r0[i + 1] + w9[2] * r0[i + 2]         \
              + w9[3] * r1[i] + w9[4] * r1[i + 1] + w9[5] * r1[i + 2]         \
              + w9[6] * r2[i] + w9[7] * r2[i + 1] + w9[8] * r2[i + 2];        \
  }                                                                           \
  /* acc3[kz] += sum_i g[i] * x[i + kz] for kz in {0,1,2}; partial-sum      */\
  /* lanes (fixed width, fixed order) let the compiler keep this in SIMD   */ \
  static inline void vx_dot3_##SUF(const T *restrict g,                       \
                                   const T *restrict x, long n,               \
                                   T *restrict acc3) {                        \
    T p0[VX_LANES_##SUF], p1[VX_LANES_##SUF], p2[VX_LANES_##SUF];             \
    T a0 = 0, a1 = 0, a2 = 0;                                                 \
    long i = 0, j;                                                            \
    if (n >= VX_LANES_##SUF) {                                                \
      for (j = 0; j < VX_LANES_##SUF; j++) { p0[j] = 0; p1[j] = 0; p2[j] = 0; } \
      for (; i + VX_LANES_##SUF <= n; i += VX_LANES_##SUF) {                  \
        for (j = 0; j < VX_LANES_##SUF; j++) {                                \
          p0[j] += g[i + j] * x[i + j];                                       \
          p1[j] += g[i + j] * x[i + j + 1];                                   \
          p2[j] += g[i + j] * x[i + j + 2];                                   \
        }                                                                     \
      }                                                                       \
      for (j = 0; j < VX_LANES_##SUF; j++) { a0 += p0[j]; a1 += p1[j]; a2 += p2[j]; } \
    }                                                                         \
    for (; i < n; i++) {                                                      \
      a0 += g[i] * x[i];                                                      \
      a1 += g[i] * x[i + 1];                                                  \
      a2 += g[i] * x[i + 2];                                                  \
    }                                                                         \
    acc3[0] += a0;                                                            \
    acc3[1] += a1;                                                            \
    acc3[2] += a2;                                                            \
  }                                                                           \
  /* returns sum_i a[i] * b[i * bstride] */                                   \
  static inline T vx_dot_##SUF(const T *restrict a, const T *restrict b,      \
                               long n, long bstride) {                        \
    T acc = 0;                                                                \
    long i;                                                                   \
    if (bstride == 1) {                                                       \
      for (i = 0; i < n; i++) acc += a[i] * b[i];                             \
    } else {                                                                  \
      for (i = 0; i < n; i++) acc += a[i] * b[i * bstride];                   \
    }                                                                         \
    return acc;                                                               \
  }

VX_DEFINE_INNER(float, f32)
VX_DEFINE_INNER(double, f64)

#undef VX_DEFINE_INNER
#endif
