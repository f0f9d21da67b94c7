#ifndef FCNREG_KERNELS_C_H
#define FCNREG_KERNELS_C_H

/* Hot convolution kernels.
 *
 * Accumulation-order contract (shared with the pure-numpy backend and the
 * naive test oracles): every output element starts from its bias, then taps
 * are added in (kd, kh, kw) raster order with in-channels ascending inside
 * each tap.  Out-of-bounds taps are skipped, not added as zero.  Compile with
 * -ffp-contract=off so mul and add round separately.
 *
 * Weight layout everywhere: wt[kd][kh][kw][ci][co], C-contiguous.
 */

#include "_kernels_simd.h"

/* Generic single voxel, any kernel size / stride / padding.  `acc` is caller
 * scratch of at least Co elements. */
#define FCNREG_DEF_CONV_VOX_GENERIC(NAME, REAL)                               \
static void NAME(const REAL *restrict x, const REAL *restrict wt,             \
                 const REAL *restrict bias, REAL *restrict y,                 \
                 REAL *restrict acc, long Ci, long Co,                        \
                 long D, long H, long W,                                      \
                 long od, long oh, long ow, long K, long stride,              \
                 long pd, long ph, long pw, long ocs) {                       \
    const long cs = D * H * W;                                                \
    long kd, kh, kw, ic, oc;                                                  \
    for (oc = 0; oc < Co; oc++) acc[oc] = bias[oc];                           \
    for (kd = 0; kd < K; kd++) {                                              \
        const long id = od * stride + kd - pd;                                \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < K; kh++) {                                          \
            const long ih = oh * stride + kh - ph;                            \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < K; kw++) {                                      \
                const long iw = ow * stride + kw - pw;                        \
                if (iw < 0 || iw >= W) continue;                              \
                const REAL *restrict xp = x + (id * H + ih) * W + iw;         \
                const REAL *restrict wp =                                     \
                    wt + ((kd * K + kh) * K + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    const REAL xv = xp[ic * cs];                              \
                    const REAL *restrict wrow = wp + ic * Co;                 \
                    for (oc = 0; oc < Co; oc++)                               \
                        acc[oc] += xv * wrow[oc];                             \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (oc = 0; oc < Co; oc++) y[oc * ocs] = acc[oc];                        \
}

/* Stride-1 k=3 pad-1 block of four w-adjacent voxels with a compile-time
 * channel count, so the accumulators live in vector registers.  Requires
 * 1 <= ow and ow + 3 <= W - 2 (all kw taps in bounds for the block). */
#define FCNREG_DEF_CONV_VOX4(NAME, REAL, CO)                                  \
static void NAME(const REAL *restrict x, const REAL *restrict wt,             \
                 const REAL *restrict bias, REAL *restrict y,                 \
                 long Ci, long D, long H, long W,                             \
                 long od, long oh, long ow, long ocs) {                       \
    REAL acc[4][CO];                                                          \
    const long cs = D * H * W;                                                \
    long kd, kh, kw, ic, oc, v;                                               \
    for (v = 0; v < 4; v++)                                                   \
        for (oc = 0; oc < CO; oc++) acc[v][oc] = bias[oc];                    \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const REAL *restrict xp = x + (id * H + ih) * W + ow + kw - 1;\
                const REAL *restrict wp =                                     \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * CO;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    const REAL xv0 = xp[ic * cs];                             \
                    const REAL xv1 = xp[ic * cs + 1];                         \
                    const REAL xv2 = xp[ic * cs + 2];                         \
                    const REAL xv3 = xp[ic * cs + 3];                         \
                    const REAL *restrict wrow = wp + ic * CO;                 \
                    for (oc = 0; oc < CO; oc++) {                             \
                        acc[0][oc] += xv0 * wrow[oc];                         \
                        acc[1][oc] += xv1 * wrow[oc];                         \
                        acc[2][oc] += xv2 * wrow[oc];                         \
                        acc[3][oc] += xv3 * wrow[oc];                         \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (oc = 0; oc < CO; oc++) {                                             \
        REAL *restrict yp = y + oc * ocs;                                     \
        yp[0] = acc[0][oc];                                                   \
        yp[1] = acc[1][oc];                                                   \
        yp[2] = acc[2][oc];                                                   \
        yp[3] = acc[3][oc];                                                   \
    }                                                                         \
}

/* Stride-1 k=3 pad-1, small channel count (regression heads): per-channel
 * accumulator rows vectorized along w for one whole output row (W <= 128).
 * Borders handled via the per-tap valid ow range, so this covers the full
 * row.  Per output element the adds still run (kd, kh, kw) raster with ic
 * ascending: kw sits above ic in the loop nest. */
#define FCNREG_HEADROW_MAXW 128
#define FCNREG_DEF_CONV_HEADROW(NAME, REAL)                                   \
static void NAME(const REAL *restrict x, const REAL *restrict wt,             \
                 const REAL *restrict bias, REAL *restrict yrow,              \
                 long Ci, long Co, long D, long H, long W,                    \
                 long od, long oh, long ocs) {                                \
    REAL acc[8][FCNREG_HEADROW_MAXW];                                         \
    const long cs = D * H * W;                                                \
    long kd, kh, kw, ic, oc, ow;                                              \
    for (oc = 0; oc < Co; oc++)                                               \
        for (ow = 0; ow < W; ow++) acc[oc][ow] = bias[oc];                    \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long id = od + kd - 1;                                          \
        if (id < 0 || id >= D) continue;                                      \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long ih = oh + kh - 1;                                      \
            if (ih < 0 || ih >= H) continue;                                  \
            for (kw = 0; kw < 3; kw++) {                                      \
                const long owlo = kw == 0 ? 1 : 0;                            \
                const long owhi = kw == 2 ? W - 1 : W;                        \
                const long n = owhi - owlo;                                   \
                const REAL *restrict xbase =                                  \
                    x + (id * H + ih) * W + owlo + kw - 1;                    \
                const REAL *restrict wp =                                     \
                    wt + ((kd * 3 + kh) * 3 + kw) * Ci * Co;                  \
                for (ic = 0; ic < Ci; ic++) {                                 \
                    const REAL *restrict xv = xbase + ic * cs;                \
                    for (oc = 0; oc < Co; oc++) {                             \
                        const REAL wv = wp[ic * Co + oc];                     \
                        REAL *restrict arow = acc[oc] + owlo;                 \
                        long j;                                               \
                        for (j = 0; j < n; j++)                               \
                            arow[j] += wv * xv[j];                            \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
    for (oc = 0; oc < Co; oc++) {                                             \
        REAL *restrict yp = yrow + oc * ocs;                                  \
        for (ow = 0; ow < W; ow++) yp[ow] = acc[oc][ow];                      \
    }                                                                         \
}

FCNREG_DEF_CONV_VOX_GENERIC(fcnreg_conv_vox_f32, float)
FCNREG_DEF_CONV_VOX_GENERIC(fcnreg_conv_vox_f64, double)
FCNREG_DEF_CONV_VOX4(fcnreg_conv_vox4_co32_f32, float, 32)
FCNREG_DEF_CONV_VOX4(fcnreg_conv_vox4_co64_f32, float, 64)
FCNREG_DEF_CONV_VOX4(fcnreg_conv_vox4_co32_f64, double, 32)
FCNREG_DEF_CONV_VOX4(fcnreg_conv_vox4_co64_f64, double, 64)
FCNREG_DEF_CONV_HEADROW(fcnreg_conv_headrow_f32, float)
FCNREG_DEF_CONV_HEADROW(fcnreg_conv_headrow_f64, double)

/* Full conv over one batch item.  Picks the specialized row kernels for the
 * stride-1 k=3 pad-1 configuration the network uses and falls back to the
 * generic voxel loop everywhere else.  `acc` is caller scratch (>= Co). */
#define FCNREG_DEF_CONV3D(NAME, REAL, VOX, VOX4_32, VOX4_64, HEADROW, BVOX)   \
static void NAME(const REAL *restrict x, const REAL *restrict wt,             \
                 const REAL *restrict bias, REAL *restrict y,                 \
                 REAL *restrict acc, long Ci, long Co,                        \
                 long D, long H, long W, long Do, long Ho, long Wo,           \
                 long K, long stride, long pd, long ph, long pw) {            \
    const long ocs = Do * Ho * Wo;                                            \
    long od, oh, ow;                                                          \
    const int fast = (K == 3 && stride == 1 && pd == 1 && ph == 1 &&          \
                      pw == 1 && Do == D && Ho == H && Wo == W);              \
    const int use4 = fast && (Co == 32 || Co == 64) && W >= 7;                \
    const int userow = fast && Co <= 8 && W >= 3 && W <= FCNREG_HEADROW_MAXW; \
    for (od = 0; od < Do; od++) {                                             \
        for (oh = 0; oh < Ho; oh++) {                                         \
            REAL *restrict yrow = y + (od * Ho + oh) * Wo;                    \
            ow = 0;                                                           \
            if (use4) {                                                       \
                BVOX(x, wt, bias, yrow, acc, Ci, Co, D, H, W,                 \
                     od, oh, 0, K, stride, pd, ph, pw, ocs);                  \
                ow = 1;                                                       \
                while (ow + 3 <= W - 2) {                                     \
                    if (Co == 64)                                             \
                        VOX4_64(x, wt, bias, yrow + ow, Ci, D, H, W,          \
                                od, oh, ow, ocs);                             \
                    else                                                      \
                        VOX4_32(x, wt, bias, yrow + ow, Ci, D, H, W,          \
                                od, oh, ow, ocs);                             \
                    ow += 4;                                                  \
                }                                                             \
            } else if (userow) {                                              \
                HEADROW(x, wt, bias, yrow, Ci, Co, D, H, W, od, oh, ocs);     \
                ow = Wo;                                                      \
            }                                                                 \
            for (; ow < Wo; ow++)                                             \
                VOX(x, wt, bias, yrow + ow, acc, Ci, Co, D, H, W,             \
                    od, oh, ow, K, stride, pd, ph, pw, ocs);                  \
        }                                                                     \
    }                                                                         \
}

#ifdef FCNREG_HAVE_AVX512_CONV
/* f32 conv with the AVX-512 block kernels: wide voxel blocks in the
 * interior (with a bit-identical overlapped final block), single-voxel
 * vector kernels at the w borders, vector head rows for Co <= 3. */
static void fcnreg_conv3d_f32(const float *restrict x, const float *restrict xcl,
                              const float *restrict wt,
                              const float *restrict bias, float *restrict y,
                              float *restrict acc, long Ci, long Co,
                              long D, long H, long W, long Do, long Ho, long Wo,
                              long K, long stride, long pd, long ph, long pw) {
    const long ocs = Do * Ho * Wo;
    long od, oh, ow;
    const int fast = (K == 3 && stride == 1 && pd == 1 && ph == 1 &&
                      pw == 1 && Do == D && Ho == H && Wo == W);
    const long VB = Co == 64 ? 6 : 8;
    const int blockco = Co == 32 || Co == 64;
    const int use_wide = fast && blockco && W >= VB + 2 && xcl != 0;
    const int use4 = fast && blockco && W >= 7;
    const int userow = fast && Co <= 3 && W >= 3 && W <= FCNREG_HEADROW_MAXW_SIMD;
    for (od = 0; od < Do; od++) {
        for (oh = 0; oh < Ho; oh++) {
            float *restrict yrow = y + (od * Ho + oh) * Wo;
            ow = 0;
            if (use_wide) {
                if (Co == 64) {
                    fcnreg_conv_vox1_cl_co64(xcl, wt, bias, yrow, Ci,
                                             D, H, W, od, oh, 0, ocs);
                    ow = 1;
                    while (ow + VB - 1 <= W - 2) {
                        fcnreg_conv_vox6_cl_co64(xcl, wt, bias, yrow + ow,
                                                 Ci, D, H, W, od, oh, ow, ocs);
                        ow += VB;
                    }
                    if (ow <= W - 2) {
                        fcnreg_conv_vox6_cl_co64(xcl, wt, bias,
                                                 yrow + (W - 1 - VB), Ci,
                                                 D, H, W, od, oh,
                                                 W - 1 - VB, ocs);
                        ow = W - 1;
                    }
                    fcnreg_conv_vox1_cl_co64(xcl, wt, bias, yrow + W - 1,
                                             Ci, D, H, W, od, oh, W - 1, ocs);
                } else {
                    fcnreg_conv_vox1_cl_co32(xcl, wt, bias, yrow, Ci,
                                             D, H, W, od, oh, 0, ocs);
                    ow = 1;
                    while (ow + VB - 1 <= W - 2) {
                        fcnreg_conv_vox8_cl_co32(xcl, wt, bias, yrow + ow,
                                                 Ci, D, H, W, od, oh, ow, ocs);
                        ow += VB;
                    }
                    if (ow <= W - 2) {
                        fcnreg_conv_vox8_cl_co32(xcl, wt, bias,
                                                 yrow + (W - 1 - VB), Ci,
                                                 D, H, W, od, oh,
                                                 W - 1 - VB, ocs);
                        ow = W - 1;
                    }
                    fcnreg_conv_vox1_cl_co32(xcl, wt, bias, yrow + W - 1,
                                             Ci, D, H, W, od, oh, W - 1, ocs);
                }
                continue;
            }
            if (use4) {
                if (Co == 64)
                    fcnreg_conv_vox1_avx512_co64(x, wt, bias, yrow, Ci,
                                                 D, H, W, od, oh, 0, ocs);
                else
                    fcnreg_conv_vox1_avx512_co32(x, wt, bias, yrow, Ci,
                                                 D, H, W, od, oh, 0, ocs);
                ow = 1;
                while (ow + 3 <= W - 2) {
                    if (Co == 64)
                        fcnreg_conv_vox4_avx512_co64(x, wt, bias, yrow + ow,
                                                     Ci, D, H, W, od, oh, ow, ocs);
                    else
                        fcnreg_conv_vox4_avx512_co32(x, wt, bias, yrow + ow,
                                                     Ci, D, H, W, od, oh, ow, ocs);
                    ow += 4;
                }
                if (ow <= W - 2) {
                    if (Co == 64)
                        fcnreg_conv_vox4_avx512_co64(x, wt, bias,
                                                     yrow + (W - 5), Ci,
                                                     D, H, W, od, oh, W - 5, ocs);
                    else
                        fcnreg_conv_vox4_avx512_co32(x, wt, bias,
                                                     yrow + (W - 5), Ci,
                                                     D, H, W, od, oh, W - 5, ocs);
                    ow = W - 1;
                }
                for (; ow < Wo; ow++) {
                    if (Co == 64)
                        fcnreg_conv_vox1_avx512_co64(x, wt, bias, yrow + ow,
                                                     Ci, D, H, W, od, oh, ow, ocs);
                    else
                        fcnreg_conv_vox1_avx512_co32(x, wt, bias, yrow + ow,
                                                     Ci, D, H, W, od, oh, ow, ocs);
                }
                continue;
            }
            if (userow) {
                fcnreg_conv_headrow_avx512(x, wt, bias, yrow, Ci, Co,
                                           D, H, W, od, oh, ocs);
                continue;
            }
            for (; ow < Wo; ow++)
                fcnreg_conv_vox_f32(x, wt, bias, yrow + ow, acc, Ci, Co,
                                    D, H, W, od, oh, ow, K, stride,
                                    pd, ph, pw, ocs);
        }
    }
}
#else
FCNREG_DEF_CONV3D(fcnreg_conv3d_f32, float, fcnreg_conv_vox_f32,
                  fcnreg_conv_vox4_co32_f32, fcnreg_conv_vox4_co64_f32,
                  fcnreg_conv_headrow_f32, fcnreg_conv_vox_f32)
#endif

FCNREG_DEF_CONV3D(fcnreg_conv3d_f64, double, fcnreg_conv_vox_f64,
                  fcnreg_conv_vox4_co32_f64, fcnreg_conv_vox4_co64_f64,
                  fcnreg_conv_headrow_f64, fcnreg_conv_vox_f64)

/* Weight gradient for stride-1 k=3 pad-1 convs with few output channels
 * (regression heads), where a BLAS matmul degenerates to skinny panels:
 * per (tap, in-channel), lane-partial dot products of gy rows against the
 * shifted x rows.  Order-free (gradients are tolerance-checked). */
#define FCNREG_DEF_CORRW_HEAD(NAME, REAL)                                     \
static void NAME(const REAL *restrict x, const REAL *restrict gy,             \
                 REAL *restrict gw, long B, long Ci, long Co,                 \
                 long D, long H, long W) {                                    \
    const long cs = D * H * W;                                                \
    long kd, kh, kw, ci, b, od, oh, o, j, l;                                  \
    for (kd = 0; kd < 3; kd++) {                                              \
        const long dlo = kd == 0 ? 1 : 0, dhi = kd == 2 ? D - 1 : D;          \
        for (kh = 0; kh < 3; kh++) {                                          \
            const long hlo = kh == 0 ? 1 : 0, hhi = kh == 2 ? H - 1 : H;      \
            for (kw = 0; kw < 3; kw++) {                                      \
                const long wlo = kw == 0 ? 1 : 0, whi = kw == 2 ? W - 1 : W;  \
                const long nj = whi - wlo;                                    \
                for (ci = 0; ci < Ci; ci++) {                                 \
                    for (o = 0; o < Co; o++) {                                \
                        REAL acc[16];                                         \
                        REAL s = 0;                                           \
                        for (l = 0; l < 16; l++) acc[l] = 0;                  \
                        for (b = 0; b < B; b++) {                             \
                            const REAL *restrict xb = x + (b * Ci + ci) * cs; \
                            const REAL *restrict gb =                         \
                                gy + (b * Co + o) * cs;                       \
                            for (od = dlo; od < dhi; od++) {                  \
                                for (oh = hlo; oh < hhi; oh++) {              \
                                    const REAL *restrict xr = xb +            \
                                        ((od + kd - 1) * H + oh + kh - 1)     \
                                        * W + wlo + kw - 1;                   \
                                    const REAL *restrict gr = gb +            \
                                        (od * H + oh) * W + wlo;              \
                                    j = 0;                                    \
                                    for (; j + 16 <= nj; j += 16)             \
                                        for (l = 0; l < 16; l++)              \
                                            acc[l] += gr[j + l] * xr[j + l];  \
                                    for (; j < nj; j++)                       \
                                        s += gr[j] * xr[j];                   \
                                }                                             \
                            }                                                 \
                        }                                                     \
                        for (l = 0; l < 16; l++) s += acc[l];                 \
                        gw[(o * Ci + ci) * 27 + (kd * 3 + kh) * 3 + kw] = s;  \
                    }                                                         \
                }                                                             \
            }                                                                 \
        }                                                                     \
    }                                                                         \
}

#ifdef FCNREG_HAVE_DOT_ROW
static void fcnreg_corrw_head_f32(const float *restrict x,
                                  const float *restrict gy,
                                  float *restrict gw, long B, long Ci,
                                  long Co, long D, long H, long W) {
    const long cs = D * H * W;
    double acc[64 * 3];
    long kd, kh, kw, ci, b, od, oh, o;
    for (kd = 0; kd < 3; kd++) {
        const long dlo = kd == 0 ? 1 : 0, dhi = kd == 2 ? D - 1 : D;
        for (kh = 0; kh < 3; kh++) {
            const long hlo = kh == 0 ? 1 : 0, hhi = kh == 2 ? H - 1 : H;
            for (kw = 0; kw < 3; kw++) {
                const long wlo = kw == 0 ? 1 : 0, whi = kw == 2 ? W - 1 : W;
                const long nj = whi - wlo;
                /* stream x and gy once per tap; per-row dots accumulate into
                 * the (ci, o) table kept hot in L1 */
                for (ci = 0; ci < Ci; ci++)
                    for (o = 0; o < Co; o++) acc[ci * Co + o] = 0.0;
                for (b = 0; b < B; b++) {
                    for (od = dlo; od < dhi; od++) {
                        for (oh = hlo; oh < hhi; oh++) {
                            const long xoff =
                                ((od + kd - 1) * H + oh + kh - 1) * W +
                                wlo + kw - 1;
                            const long goff = (od * H + oh) * W + wlo;
                            for (ci = 0; ci < Ci; ci++) {
                                const float *restrict xr =
                                    x + (b * Ci + ci) * cs + xoff;
                                for (o = 0; o < Co; o++)
                                    acc[ci * Co + o] += fcnreg_dot_row_f32(
                                        gy + (b * Co + o) * cs + goff, xr, nj);
                            }
                        }
                    }
                }
                for (ci = 0; ci < Ci; ci++)
                    for (o = 0; o < Co; o++)
                        gw[(o * Ci + ci) * 27 + (kd * 3 + kh) * 3 + kw] =
                            (float)acc[ci * Co + o];
            }
        }
    }
}
#else
FCNREG_DEF_CORRW_HEAD(fcnreg_corrw_head_f32, float)
#endif
FCNREG_DEF_CORRW_HEAD(fcnreg_corrw_head_f64, double)

#endif /* FCNREG_KERNELS_C_H */
