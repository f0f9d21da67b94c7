#ifndef FCNREG_KERNELS_SIMD_H
#define FCNREG_KERNELS_SIMD_H

/* AVX-512 variants of the 4-voxel conv block with register-resident
 * accumulators.  Separate mul/add (no FMA) keeps every element's rounding
 * identical to the scalar kernels, so the accumulation-order contract and
 * the bit-exact oracle tests hold across all paths.  float32 only; other
 * configurations fall back to the portable kernels. */

#if defined(__AVX512F__)
#include <immintrin.h>

#define FCNREG_HAVE_AVX512_CONV 1
#define FCNREG_HEADROW_MAXW_SIMD 128

#define FCNREG_DEF_CONV_VOX4_AVX512(NAME, NV)                                 \
static void NAME(const float *restrict x, const float *restrict wt,           \
                 const float *restrict bias, float *restrict y,               \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    const long Co = (NV) * 16;                                                \
    const long cs = D * H * W;                                                \
    __m512 acc[4][NV];                                                        \
    float tmp[64];                                                            \
    long kd, kh, kw, ic, oc;                                                  \
    int v, n;                                                                 \
    for (n = 0; n < (NV); n++) {                                              \
        const __m512 b = _mm512_loadu_ps(bias + n * 16);                      \
        for (v = 0; v < 4; v++) acc[v][n] = b;                                \
    }                                                                         \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const float *restrict xp =                                    \
                    x + (id * H + ih) * W + ow + kw - 1;                      \
                const float *restrict wp =                                    \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    __m512 wv[NV];                                            \
                    for (n = 0; n < (NV); n++)                                \
                        wv[n] = _mm512_loadu_ps(wp + ic * Co + n * 16);       \
                    for (v = 0; v < 4; v++) {                                 \
                        const __m512 xs = _mm512_set1_ps(xp[ic * cs + v]);    \
                        for (n = 0; n < (NV); n++)                            \
                            acc[v][n] = _mm512_add_ps(                        \
                                acc[v][n], _mm512_mul_ps(xs, wv[n]));         \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (v = 0; v < 4; v++) {                                                 \
        for (n = 0; n < (NV); n++)                                            \
            _mm512_storeu_ps(tmp + n * 16, acc[v][n]);                        \
        for (oc = 0; oc < Co; oc++) y[oc * ocs + v] = tmp[oc];                \
    }                                                                         \
}

FCNREG_DEF_CONV_VOX4_AVX512(fcnreg_conv_vox4_avx512_co32, 2)
FCNREG_DEF_CONV_VOX4_AVX512(fcnreg_conv_vox4_avx512_co64, 4)

/* Wider voxel blocks amortize the weight stream further; register budget:
 * co64 x 6 voxels = 24 accumulators + 4 weight vectors, co32 x 8 = 16 + 2. */
#define FCNREG_DEF_CONV_VOXN_AVX512(NAME, NV, VB)                             \
static void NAME(const float *restrict x, const float *restrict wt,           \
                 const float *restrict bias, float *restrict y,               \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    const long Co = (NV) * 16;                                                \
    const long cs = D * H * W;                                                \
    __m512 acc[VB][NV];                                                       \
    float tmp[64];                                                            \
    long kd, kh, kw, ic, oc;                                                  \
    int v, n;                                                                 \
    for (n = 0; n < (NV); n++) {                                              \
        const __m512 b = _mm512_loadu_ps(bias + n * 16);                      \
        for (v = 0; v < (VB); v++) acc[v][n] = b;                             \
    }                                                                         \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const float *restrict xp =                                    \
                    x + (id * H + ih) * W + ow + kw - 1;                      \
                const float *restrict wp =                                    \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    __m512 wv[NV];                                            \
                    for (n = 0; n < (NV); n++)                                \
                        wv[n] = _mm512_loadu_ps(wp + ic * Co + n * 16);       \
                    for (v = 0; v < (VB); v++) {                              \
                        const __m512 xs = _mm512_set1_ps(xp[ic * cs + v]);    \
                        for (n = 0; n < (NV); n++)                            \
                            acc[v][n] = _mm512_add_ps(                        \
                                acc[v][n], _mm512_mul_ps(xs, wv[n]));         \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (v = 0; v < (VB); v++) {                                              \
        for (n = 0; n < (NV); n++)                                            \
            _mm512_storeu_ps(tmp + n * 16, acc[v][n]);                        \
        for (oc = 0; oc < Co; oc++) y[oc * ocs + v] = tmp[oc];                \
    }                                                                         \
}

FCNREG_DEF_CONV_VOXN_AVX512(fcnreg_conv_vox6_avx512_co64, 4, 6)
FCNREG_DEF_CONV_VOXN_AVX512(fcnreg_conv_vox8_avx512_co32, 2, 8)

/* Channels-last variants: x staged as ((d*H + h)*W + w)*Ci + ci keeps the
 * per-tap scalar loads within one cache line instead of striding the whole
 * channel plane.  Same accumulation order and rounding as every other path. */
#define FCNREG_DEF_CONV_VOXN_CL_AVX512(NAME, NV, VB)                          \
static void NAME(const float *restrict xcl, const float *restrict wt,         \
                 const float *restrict bias, float *restrict y,               \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    const long Co = (NV) * 16;                                                \
    __m512 acc[VB][NV];                                                       \
    float tmp[64];                                                            \
    long kd, kh, kw, ic, oc;                                                  \
    int v, n;                                                                 \
    for (n = 0; n < (NV); n++) {                                              \
        const __m512 b = _mm512_loadu_ps(bias + n * 16);                      \
        for (v = 0; v < (VB); v++) acc[v][n] = b;                             \
    }                                                                         \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const float *restrict xp =                                    \
                    xcl + ((id * H + ih) * W + ow + kw - 1) * Ci;             \
                const float *restrict wp =                                    \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    __m512 wv[NV];                                            \
                    for (n = 0; n < (NV); n++)                                \
                        wv[n] = _mm512_loadu_ps(wp + ic * Co + n * 16);       \
                    for (v = 0; v < (VB); v++) {                              \
                        const __m512 xs = _mm512_set1_ps(xp[v * Ci + ic]);    \
                        for (n = 0; n < (NV); n++)                            \
                            acc[v][n] = _mm512_add_ps(                        \
                                acc[v][n], _mm512_mul_ps(xs, wv[n]));         \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (v = 0; v < (VB); v++) {                                              \
        for (n = 0; n < (NV); n++)                                            \
            _mm512_storeu_ps(tmp + n * 16, acc[v][n]);                        \
        for (oc = 0; oc < Co; oc++) y[oc * ocs + v] = tmp[oc];                \
    }                                                                         \
}

FCNREG_DEF_CONV_VOXN_CL_AVX512(fcnreg_conv_vox6_cl_co64, 4, 6)
FCNREG_DEF_CONV_VOXN_CL_AVX512(fcnreg_conv_vox8_cl_co32, 2, 8)

#define FCNREG_DEF_CONV_VOX1_CL_AVX512(NAME, NV)                              \
static void NAME(const float *restrict xcl, const float *restrict wt,         \
                 const float *restrict bias, float *restrict y,               \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    const long Co = (NV) * 16;                                                \
    __m512 acc[NV];                                                           \
    float tmp[64];                                                            \
    long kd, kh, kw, ic, oc;                                                  \
    int n;                                                                    \
    for (n = 0; n < (NV); n++) acc[n] = _mm512_loadu_ps(bias + n * 16);       \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const long iw = ow + kw - 1;                                  \
                if (iw < 0 || iw >= W) continue;                              \
                const float *restrict xp = xcl + ((id * H + ih) * W + iw) * Ci;\
                const float *restrict wp =                                    \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    const __m512 xs = _mm512_set1_ps(xp[ic]);                 \
                    for (n = 0; n < (NV); n++)                                \
                        acc[n] = _mm512_add_ps(                               \
                            acc[n], _mm512_mul_ps(                            \
                                xs, _mm512_loadu_ps(wp + ic * Co + n * 16))); \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (n = 0; n < (NV); n++) _mm512_storeu_ps(tmp + n * 16, acc[n]);        \
    for (oc = 0; oc < Co; oc++) y[oc * ocs] = tmp[oc];                        \
}

FCNREG_DEF_CONV_VOX1_CL_AVX512(fcnreg_conv_vox1_cl_co32, 2)
FCNREG_DEF_CONV_VOX1_CL_AVX512(fcnreg_conv_vox1_cl_co64, 4)

/* Head forward (Co <= 3): accumulator rows over ow in 16-lane chunks with
 * scalar remainders; per output element the adds keep the (kd, kh, kw, ic)
 * contract order. */
static void fcnreg_conv_headrow_avx512(const float *restrict x,
                                       const float *restrict wt,
                                       const float *restrict bias,
                                       float *restrict yrow,
                                       long Ci, long Co, long D, long H,
                                       long W, long od, long oh, long ocs) {
    float acc[3][FCNREG_HEADROW_MAXW_SIMD];
    long kd, kh, kw, ic, oc, ow, j;
    for (oc = 0; oc < Co; oc++)
        for (ow = 0; ow < W; ow++) acc[oc][ow] = bias[oc];
    for (kd = 0; kd < 3; kd++) {
        const long id = od + kd - 1;
        if (id < 0 || id >= D) continue;
        for (kh = 0; kh < 3; kh++) {
            const long ih = oh + kh - 1;
            if (ih < 0 || ih >= H) continue;
            for (kw = 0; kw < 3; kw++) {
                const long owlo = kw == 0 ? 1 : 0;
                const long owhi = kw == 2 ? W - 1 : W;
                const long n = owhi - owlo;
                const float *restrict xbase =
                    x + (id * H + ih) * W + owlo + kw - 1;
                const float *restrict wp =
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;
                for (ic = 0; ic < Ci; ic++) {
                    const float *restrict xv = xbase + ic * (D * H * W);
                    for (oc = 0; oc < Co; oc++) {
                        const float wsc = wp[ic * Co + oc];
                        const __m512 ws = _mm512_set1_ps(wsc);
                        float *restrict arow = acc[oc] + owlo;
                        j = 0;
                        for (; j + 16 <= n; j += 16) {
                            const __m512 a = _mm512_loadu_ps(arow + j);
                            const __m512 xl = _mm512_loadu_ps(xv + j);
                            _mm512_storeu_ps(
                                arow + j,
                                _mm512_add_ps(a, _mm512_mul_ps(ws, xl)));
                        }
                        for (; j < n; j++)
                            arow[j] += wsc * xv[j];
                    }
                }
            }
        }
    }
    for (oc = 0; oc < Co; oc++) {
        float *restrict yp = yrow + oc * ocs;
        for (ow = 0; ow < W; ow++) yp[ow] = acc[oc][ow];
    }
}
#define FCNREG_HAVE_HEADROW_AVX512 1

/* Single voxel with bounds-checked taps, channel-vectorized; used for the
 * border voxels of the fast stride-1 k=3 path.  Same no-FMA rounding and
 * accumulation order as the block kernels. */
#define FCNREG_DEF_CONV_VOX1_AVX512(NAME, NV)                                 \
static void NAME(const float *restrict x, const float *restrict wt,           \
                 const float *restrict bias, float *restrict y,               \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    const long Co = (NV) * 16;                                                \
    const long cs = D * H * W;                                                \
    __m512 acc[NV];                                                           \
    float tmp[64];                                                            \
    long kd, kh, kw, ic, oc;                                                  \
    int n;                                                                    \
    for (n = 0; n < (NV); n++) acc[n] = _mm512_loadu_ps(bias + n * 16);       \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const long iw = ow + kw - 1;                                  \
                if (iw < 0 || iw >= W) continue;                              \
                const float *restrict xp = x + (id * H + ih) * W + iw;        \
                const float *restrict wp =                                    \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    const __m512 xs = _mm512_set1_ps(xp[ic * cs]);            \
                    for (n = 0; n < (NV); n++)                                \
                        acc[n] = _mm512_add_ps(                               \
                            acc[n], _mm512_mul_ps(                            \
                                xs, _mm512_loadu_ps(wp + ic * Co + n * 16))); \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (n = 0; n < (NV); n++) _mm512_storeu_ps(tmp + n * 16, acc[n]);        \
    for (oc = 0; oc < Co; oc++) y[oc * ocs] = tmp[oc];                        \
}

FCNREG_DEF_CONV_VOX1_AVX512(fcnreg_conv_vox1_avx512_co32, 2)
FCNREG_DEF_CONV_VOX1_AVX512(fcnreg_conv_vox1_avx512_co64, 4)
#define FCNREG_HAVE_VOX1 1

/* Row dot product for the head weight gradient (order-free, so FMA is
 * fine here). */
static inline float fcnreg_dot_row_f32(const float *restrict a,
                                       const float *restrict b, long n) {
    __m512 acc = _mm512_setzero_ps();
    long j = 0;
    for (; j + 16 <= n; j += 16)
        acc = _mm512_fmadd_ps(_mm512_loadu_ps(a + j), _mm512_loadu_ps(b + j), acc);
    if (j < n) {
        const __mmask16 m = (__mmask16)((1u << (n - j)) - 1u);
        acc = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(m, a + j),
                              _mm512_maskz_loadu_ps(m, b + j), acc);
    }
    return _mm512_reduce_add_ps(acc);
}
#define FCNREG_HAVE_DOT_ROW 1

#endif /* __AVX512F__ */

#endif /* FCNREG_KERNELS_SIMD_H */
