# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled spatial kernels.

Hot inner loops of the registration engine: 3D convolution forward, pooling,
block downsampling, trilinear warping and field upsampling.  Semantics match
``fcnreg._kernels_np`` element for element; the convolution accumulation
order (bias first, taps in (kd, kh, kw) raster order, in-channels ascending
within a tap, out-of-bounds taps skipped) is a documented contract shared
with the test oracles.
"""

import numpy as np

from libc.math cimport floor

ctypedef fused real:
    float
    double

cdef extern from "_kernels_c.h":
    void fcnreg_conv3d_f32(const float* x, const float* xcl, const float* wt,
                           const float* bias,
                           float* y, float* acc, long Ci, long Co,
                           long D, long H, long W, long Do, long Ho, long Wo,
                           long K, long stride, long pd, long ph, long pw) nogil
    void fcnreg_conv3d_f64(const double* x, const double* wt, const double* bias,
                           double* y, double* acc, long Ci, long Co,
                           long D, long H, long W, long Do, long Ho, long Wo,
                           long K, long stride, long pd, long ph, long pw) nogil


def conv3d_forward(x, w, bias, int stride, pads, out_dims=None):
    """Cross-correlation of (B, Ci, D, H, W) with (Co, Ci, K, K, K) weights."""
    cdef int pd = pads[0], ph = pads[1], pw = pads[2]
    B, Ci, D, H, W = x.shape
    Co, Ciw, K = w.shape[0], w.shape[1], w.shape[2]
    if Ciw != Ci:
        raise ValueError(f"channel mismatch: input has {Ci}, weights expect {Ciw}")
    if out_dims is None:
        out_dims = ((D + 2 * pd - K) // stride + 1,
                    (H + 2 * ph - K) // stride + 1,
                    (W + 2 * pw - K) // stride + 1)
    Do, Ho, Wo = out_dims
    if Do < 1 or Ho < 1 or Wo < 1:
        raise ValueError(f"convolution output dims {out_dims} collapse below 1")
    wt = np.ascontiguousarray(np.transpose(w, (2, 3, 4, 1, 0)))
    if bias is None:
        bias = np.zeros(Co, dtype=x.dtype)
    y = np.empty((B, Co, Do, Ho, Wo), dtype=x.dtype)
    acc = np.empty(Co, dtype=x.dtype)
    if x.dtype == np.float32:
        # channels-last staging feeds the wide AVX-512 path when eligible
        xcl = None
        if (K == 3 and stride == 1 and (pd, ph, pw) == (1, 1, 1)
                and (Do, Ho, Wo) == (D, H, W) and Co in (32, 64)
                and W >= (8 if Co == 64 else 10)):
            xcl = np.ascontiguousarray(np.transpose(x, (0, 2, 3, 4, 1)))
        _conv3d_run_f32(x, xcl, wt, np.ascontiguousarray(bias, dtype=np.float32),
                        y, acc, stride, K, pd, ph, pw)
    else:
        _conv3d_run_f64(x, wt, np.ascontiguousarray(bias, dtype=np.float64), y,
                        acc, stride, K, pd, ph, pw)
    return y


def _conv3d_run_f32(float[:, :, :, :, ::1] x, xcl_arr, float[:, :, :, :, ::1] wt,
                    float[::1] bias, float[:, :, :, :, ::1] y, float[::1] acc,
                    int stride, int K, int pd, int ph, int pw):
    cdef Py_ssize_t b, B = x.shape[0]
    cdef float[:, :, :, :, ::1] xcl
    cdef const float* xclp
    if xcl_arr is None:
        with nogil:
            for b in range(B):
                fcnreg_conv3d_f32(&x[b, 0, 0, 0, 0], NULL, &wt[0, 0, 0, 0, 0],
                                  &bias[0], &y[b, 0, 0, 0, 0], &acc[0],
                                  x.shape[1], y.shape[1],
                                  x.shape[2], x.shape[3], x.shape[4],
                                  y.shape[2], y.shape[3], y.shape[4],
                                  K, stride, pd, ph, pw)
    else:
        xcl = xcl_arr
        with nogil:
            for b in range(B):
                fcnreg_conv3d_f32(&x[b, 0, 0, 0, 0], &xcl[b, 0, 0, 0, 0],
                                  &wt[0, 0, 0, 0, 0],
                                  &bias[0], &y[b, 0, 0, 0, 0], &acc[0],
                                  x.shape[1], y.shape[1],
                                  x.shape[2], x.shape[3], x.shape[4],
                                  y.shape[2], y.shape[3], y.shape[4],
                                  K, stride, pd, ph, pw)


def _conv3d_run_f64(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] wt,
                    double[::1] bias, double[:, :, :, :, ::1] y, double[::1] acc,
                    int stride, int K, int pd, int ph, int pw):
    cdef Py_ssize_t b, B = x.shape[0]
    with nogil:
        for b in range(B):
            fcnreg_conv3d_f64(&x[b, 0, 0, 0, 0], &wt[0, 0, 0, 0, 0], &bias[0],
                              &y[b, 0, 0, 0, 0], &acc[0],
                              x.shape[1], y.shape[1],
                              x.shape[2], x.shape[3], x.shape[4],
                              y.shape[2], y.shape[3], y.shape[4],
                              K, stride, pd, ph, pw)


def maxpool3d_forward(x, int k, int stride):
    """Window max with replicated edges; output dims ceil(dim/stride) for k=3 s=2.

    Returns (y, argmax) where argmax holds flat spatial input indices; ties go
    to the first window position in raster order.
    """
    B, C, D, H, W = x.shape
    cdef int p = (k - 1) // 2
    Do = (D + 2 * p - k) // stride + 1
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    y = np.empty((B, C, Do, Ho, Wo), dtype=x.dtype)
    arg = np.empty((B, C, Do, Ho, Wo), dtype=np.int64)
    _maxpool_run(x, y, arg, k, stride, p)
    return y, arg


def _maxpool_run(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] y,
                 long[:, :, :, :, ::1] arg, int k, int stride, int p):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = y.shape[2], Ho = y.shape[3], Wo = y.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow, id_, ih, iw, d0, d1, h0, h1, w0, w1
    cdef Py_ssize_t best_idx
    cdef real best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    d0 = od * stride - p
                    d1 = d0 + k
                    if d0 < 0: d0 = 0
                    if d1 > D: d1 = D
                    for oh in range(Ho):
                        h0 = oh * stride - p
                        h1 = h0 + k
                        if h0 < 0: h0 = 0
                        if h1 > H: h1 = H
                        for ow in range(Wo):
                            w0 = ow * stride - p
                            w1 = w0 + k
                            if w0 < 0: w0 = 0
                            if w1 > W: w1 = W
                            best = x[b, c, d0, h0, w0]
                            best_idx = (d0 * H + h0) * W + w0
                            for id_ in range(d0, d1):
                                for ih in range(h0, h1):
                                    for iw in range(w0, w1):
                                        v = x[b, c, id_, ih, iw]
                                        if v > best:
                                            best = v
                                            best_idx = (id_ * H + ih) * W + iw
                            y[b, c, od, oh, ow] = best
                            arg[b, c, od, oh, ow] = best_idx


def maxpool3d_backward(gy, arg, in_dims):
    D, H, W = in_dims
    B, C = gy.shape[0], gy.shape[1]
    gx = np.zeros((B, C, D, H, W), dtype=gy.dtype)
    _maxpool_bwd_run(gy, arg, gx)
    return gx


def _maxpool_bwd_run(real[:, :, :, :, ::1] gy, long[:, :, :, :, ::1] arg,
                     real[:, :, :, :, ::1] gx):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]
    cdef Py_ssize_t ssz = gx.shape[2] * gx.shape[3] * gx.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow
    cdef real* gxp
    with nogil:
        for b in range(B):
            for c in range(C):
                gxp = &gx[b, c, 0, 0, 0]
                for od in range(Do):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            gxp[arg[b, c, od, oh, ow]] += gy[b, c, od, oh, ow]


def avgpool3d_forward(x, int k, int stride):
    """In-bounds window mean; same output geometry as maxpool3d_forward."""
    B, C, D, H, W = x.shape
    cdef int p = (k - 1) // 2
    Do = (D + 2 * p - k) // stride + 1
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    y = np.empty((B, C, Do, Ho, Wo), dtype=x.dtype)
    _avgpool_run(x, y, k, stride, p, 0)
    return y


def avgpool3d_backward(gy, in_dims, int k, int stride):
    D, H, W = in_dims
    B, C = gy.shape[0], gy.shape[1]
    cdef int p = (k - 1) // 2
    gx = np.zeros((B, C, D, H, W), dtype=gy.dtype)
    _avgpool_run(gx, gy, k, stride, p, 1)
    return gx


def _avgpool_run(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] y,
                 int k, int stride, int p, int backward):
    # backward=0: y[o] = mean of x window; backward=1: x[window] += y[o]/count
    cdef Py_ssize_t B = y.shape[0], C = y.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = y.shape[2], Ho = y.shape[3], Wo = y.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow, id_, ih, iw, d0, d1, h0, h1, w0, w1
    cdef real s, share
    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    d0 = od * stride - p
                    d1 = d0 + k
                    if d0 < 0: d0 = 0
                    if d1 > D: d1 = D
                    for oh in range(Ho):
                        h0 = oh * stride - p
                        h1 = h0 + k
                        if h0 < 0: h0 = 0
                        if h1 > H: h1 = H
                        for ow in range(Wo):
                            w0 = ow * stride - p
                            w1 = w0 + k
                            if w0 < 0: w0 = 0
                            if w1 > W: w1 = W
                            if backward:
                                share = y[b, c, od, oh, ow] / ((d1 - d0) * (h1 - h0) * (w1 - w0))
                                for id_ in range(d0, d1):
                                    for ih in range(h0, h1):
                                        for iw in range(w0, w1):
                                            x[b, c, id_, ih, iw] += share
                            else:
                                s = 0
                                for id_ in range(d0, d1):
                                    for ih in range(h0, h1):
                                        for iw in range(w0, w1):
                                            s = s + x[b, c, id_, ih, iw]
                                y[b, c, od, oh, ow] = s / ((d1 - d0) * (h1 - h0) * (w1 - w0))


def downsample_avg2(x):
    """2x2x2 block mean with edge truncation; dims ceil-halved.

    In-block accumulation runs in raster order.
    """
    B, C, D, H, W = x.shape
    Do, Ho, Wo = (D + 1) // 2, (H + 1) // 2, (W + 1) // 2
    y = np.empty((B, C, Do, Ho, Wo), dtype=x.dtype)
    _downsample_run(x, y)
    return y


def _downsample_run(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] y):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = y.shape[2], Ho = y.shape[3], Wo = y.shape[4]
    cdef Py_ssize_t b, c, od, oh, ow, id_, ih, iw, d1, h1, w1
    cdef real s
    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    d1 = 2 * od + 2
                    if d1 > D: d1 = D
                    for oh in range(Ho):
                        h1 = 2 * oh + 2
                        if h1 > H: h1 = H
                        for ow in range(Wo):
                            w1 = 2 * ow + 2
                            if w1 > W: w1 = W
                            s = 0
                            for id_ in range(2 * od, d1):
                                for ih in range(2 * oh, h1):
                                    for iw in range(2 * ow, w1):
                                        s = s + x[b, c, id_, ih, iw]
                            y[b, c, od, oh, ow] = s / ((d1 - 2 * od) * (h1 - 2 * oh) * (w1 - 2 * ow))


def warp_trilinear_forward(vol, disp):
    """Sample vol (B, D, H, W) at identity + disp (B, 3, D, H, W).

    Coordinates clamp to the border; interpolation lerps along w, then h,
    then d, each corner pair as a*(1-t) + b*t.
    """
    y = np.empty_like(vol)
    _warp_fwd_run(vol, disp, y)
    return y


cdef inline real _clampc(real v, real hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def _warp_fwd_run(real[:, :, :, ::1] vol, real[:, :, :, :, ::1] disp,
                  real[:, :, :, ::1] y):
    cdef Py_ssize_t B = vol.shape[0], D = vol.shape[1], H = vol.shape[2], W = vol.shape[3]
    cdef Py_ssize_t b, d, h, w, z0, z1, y0, y1, x0, x1
    cdef real zc, yc, xc, td, th, tw, md, mh, mw
    cdef real c00, c01, c10, c11, c0, c1
    with nogil:
        for b in range(B):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        zc = _clampc(d + disp[b, 0, d, h, w], <real>(D - 1))
                        yc = _clampc(h + disp[b, 1, d, h, w], <real>(H - 1))
                        xc = _clampc(w + disp[b, 2, d, h, w], <real>(W - 1))
                        z0 = <Py_ssize_t>floor(zc)
                        y0 = <Py_ssize_t>floor(yc)
                        x0 = <Py_ssize_t>floor(xc)
                        td = zc - z0
                        th = yc - y0
                        tw = xc - x0
                        z1 = z0 + 1 if z0 + 1 < D else D - 1
                        y1 = y0 + 1 if y0 + 1 < H else H - 1
                        x1 = x0 + 1 if x0 + 1 < W else W - 1
                        md = 1 - td
                        mh = 1 - th
                        mw = 1 - tw
                        c00 = vol[b, z0, y0, x0] * mw + vol[b, z0, y0, x1] * tw
                        c01 = vol[b, z0, y1, x0] * mw + vol[b, z0, y1, x1] * tw
                        c10 = vol[b, z1, y0, x0] * mw + vol[b, z1, y0, x1] * tw
                        c11 = vol[b, z1, y1, x0] * mw + vol[b, z1, y1, x1] * tw
                        c0 = c00 * mh + c01 * th
                        c1 = c10 * mh + c11 * th
                        y[b, d, h, w] = c0 * md + c1 * td


def warp_trilinear_backward_disp(vol, disp, gy):
    """Gradient of warp_trilinear_forward w.r.t. disp (zero where clamped)."""
    gdisp = np.empty_like(disp)
    _warp_bwd_run(vol, disp, gy, gdisp)
    return gdisp


def _warp_bwd_run(real[:, :, :, ::1] vol, real[:, :, :, :, ::1] disp,
                  real[:, :, :, ::1] gy, real[:, :, :, :, ::1] gdisp):
    cdef Py_ssize_t B = vol.shape[0], D = vol.shape[1], H = vol.shape[2], W = vol.shape[3]
    cdef Py_ssize_t b, d, h, w, z0, z1, y0, y1, x0, x1
    cdef real zr, yr, xr, zc, yc, xc, td, th, tw, md, mh, mw, g
    cdef real v000, v001, v010, v011, v100, v101, v110, v111
    cdef real c00, c01, c10, c11, c0, c1, dz, dy, dx
    with nogil:
        for b in range(B):
            for d in range(D):
                for h in range(H):
                    for w in range(W):
                        zr = d + disp[b, 0, d, h, w]
                        yr = h + disp[b, 1, d, h, w]
                        xr = w + disp[b, 2, d, h, w]
                        zc = _clampc(zr, <real>(D - 1))
                        yc = _clampc(yr, <real>(H - 1))
                        xc = _clampc(xr, <real>(W - 1))
                        z0 = <Py_ssize_t>floor(zc)
                        y0 = <Py_ssize_t>floor(yc)
                        x0 = <Py_ssize_t>floor(xc)
                        td = zc - z0
                        th = yc - y0
                        tw = xc - x0
                        z1 = z0 + 1 if z0 + 1 < D else D - 1
                        y1 = y0 + 1 if y0 + 1 < H else H - 1
                        x1 = x0 + 1 if x0 + 1 < W else W - 1
                        md = 1 - td
                        mh = 1 - th
                        mw = 1 - tw
                        v000 = vol[b, z0, y0, x0]; v001 = vol[b, z0, y0, x1]
                        v010 = vol[b, z0, y1, x0]; v011 = vol[b, z0, y1, x1]
                        v100 = vol[b, z1, y0, x0]; v101 = vol[b, z1, y0, x1]
                        v110 = vol[b, z1, y1, x0]; v111 = vol[b, z1, y1, x1]
                        c00 = v000 * mw + v001 * tw
                        c01 = v010 * mw + v011 * tw
                        c10 = v100 * mw + v101 * tw
                        c11 = v110 * mw + v111 * tw
                        c0 = c00 * mh + c01 * th
                        c1 = c10 * mh + c11 * th
                        dz = c1 - c0
                        dy = (c01 - c00) * md + (c11 - c10) * td
                        dx = ((v001 - v000) * mh + (v011 - v010) * th) * md + \
                             ((v101 - v100) * mh + (v111 - v110) * th) * td
                        g = gy[b, d, h, w]
                        gdisp[b, 0, d, h, w] = g * dz if 0 < zr < D - 1 else 0
                        gdisp[b, 1, d, h, w] = g * dy if 0 < yr < H - 1 else 0
                        gdisp[b, 2, d, h, w] = g * dx if 0 < xr < W - 1 else 0


def warp_nearest(labels, disp):
    """Nearest-neighbour label warp: round(v + disp) half-up, clamped."""
    out = np.empty_like(labels)
    _warp_nearest_run(labels, disp, out)
    return out


def _warp_nearest_run(int[:, :, ::1] labels, real[:, :, :, ::1] disp,
                      int[:, :, ::1] out):
    cdef Py_ssize_t D = labels.shape[0], H = labels.shape[1], W = labels.shape[2]
    cdef Py_ssize_t d, h, w, zi, yi, xi
    with nogil:
        for d in range(D):
            for h in range(H):
                for w in range(W):
                    zi = <Py_ssize_t>floor(d + <double>disp[0, d, h, w] + 0.5)
                    yi = <Py_ssize_t>floor(h + <double>disp[1, d, h, w] + 0.5)
                    xi = <Py_ssize_t>floor(w + <double>disp[2, d, h, w] + 0.5)
                    if zi < 0: zi = 0
                    if zi > D - 1: zi = D - 1
                    if yi < 0: yi = 0
                    if yi > H - 1: yi = H - 1
                    if xi < 0: xi = 0
                    if xi > W - 1: xi = W - 1
                    out[d, h, w] = labels[zi, yi, xi]


def upsample_trilinear_forward(src, out_dims):
    """Channel-wise trilinear resize of (B, C, d, h, w), endpoint-aligned."""
    B, C = src.shape[0], src.shape[1]
    Do, Ho, Wo = out_dims
    y = np.empty((B, C, Do, Ho, Wo), dtype=src.dtype)
    _upsample_run(src, y, 0)
    return y


def upsample_trilinear_backward(gy, src_dims):
    B, C = gy.shape[0], gy.shape[1]
    d, h, w = src_dims
    gsrc = np.zeros((B, C, d, h, w), dtype=gy.dtype)
    _upsample_run(gsrc, gy, 1)
    return gsrc


def _upsample_run(real[:, :, :, :, ::1] src, real[:, :, :, :, ::1] y, int backward):
    # backward=0: y gathers from src; backward=1: src scatters from y (adjoint)
    cdef Py_ssize_t B = src.shape[0], C = src.shape[1]
    cdef Py_ssize_t d = src.shape[2], h = src.shape[3], w = src.shape[4]
    cdef Py_ssize_t Do = y.shape[2], Ho = y.shape[3], Wo = y.shape[4]
    cdef real sd = (<real>(d - 1) / <real>(Do - 1)) if Do > 1 else 0
    cdef real sh = (<real>(h - 1) / <real>(Ho - 1)) if Ho > 1 else 0
    cdef real sw = (<real>(w - 1) / <real>(Wo - 1)) if Wo > 1 else 0
    cdef Py_ssize_t b, c, od, oh, ow, z0, z1, y0, y1, x0, x1
    cdef real zc, yc, xc, td, th, tw, md, mh, mw, g
    cdef real c00, c01, c10, c11, c0, c1
    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    zc = od * sd
                    z0 = <Py_ssize_t>floor(zc)
                    td = zc - z0
                    z1 = z0 + 1 if z0 + 1 < d else d - 1
                    md = 1 - td
                    for oh in range(Ho):
                        yc = oh * sh
                        y0 = <Py_ssize_t>floor(yc)
                        th = yc - y0
                        y1 = y0 + 1 if y0 + 1 < h else h - 1
                        mh = 1 - th
                        for ow in range(Wo):
                            xc = ow * sw
                            x0 = <Py_ssize_t>floor(xc)
                            tw = xc - x0
                            x1 = x0 + 1 if x0 + 1 < w else w - 1
                            mw = 1 - tw
                            if backward:
                                g = y[b, c, od, oh, ow]
                                src[b, c, z0, y0, x0] += g * md * mh * mw
                                src[b, c, z0, y0, x1] += g * md * mh * tw
                                src[b, c, z0, y1, x0] += g * md * th * mw
                                src[b, c, z0, y1, x1] += g * md * th * tw
                                src[b, c, z1, y0, x0] += g * td * mh * mw
                                src[b, c, z1, y0, x1] += g * td * mh * tw
                                src[b, c, z1, y1, x0] += g * td * th * mw
                                src[b, c, z1, y1, x1] += g * td * th * tw
                            else:
                                c00 = src[b, c, z0, y0, x0] * mw + src[b, c, z0, y0, x1] * tw
                                c01 = src[b, c, z0, y1, x0] * mw + src[b, c, z0, y1, x1] * tw
                                c10 = src[b, c, z1, y0, x0] * mw + src[b, c, z1, y0, x1] * tw
                                c11 = src[b, c, z1, y1, x0] * mw + src[b, c, z1, y1, x1] * tw
                                c0 = c00 * mh + c01 * th
                                c1 = c10 * mh + c11 * th
                                y[b, c, od, oh, ow] = c0 * md + c1 * td


def im2col(x, int k, int stride, pads, out_dims):
    """Unfold conv patches into a (Ci*k^3, B*Do*Ho*Wo) matrix.

    Rows ordered (ci, kd, kh, kw) to match w.reshape(Co, -1); out-of-bounds
    taps are zero-filled.  Backs the GEMM-based backward passes.
    """
    cdef int pd = pads[0], ph = pads[1], pw = pads[2]
    B, Ci, D, H, W = x.shape
    Do, Ho, Wo = out_dims
    cols = np.empty((Ci * k * k * k, B * Do * Ho * Wo), dtype=x.dtype)
    _im2col_run(x, cols, k, stride, pd, ph, pw, Do, Ho, Wo)
    return cols


def _im2col_run(real[:, :, :, :, ::1] x, real[:, ::1] cols, int k, int stride,
                int pd, int ph, int pw, Py_ssize_t Do, Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t ci, kd, kh, kw, b, od, oh, ow, id_, ih, iw, row, wlo, whi, j
    cdef real* dst
    cdef const real* src
    with nogil:
        for ci in range(Ci):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        row = ((ci * k + kd) * k + kh) * k + kw
                        # valid ow range: 0 <= ow*stride + kw - pw < W
                        wlo = 0
                        while wlo < Wo and wlo * stride + kw - pw < 0:
                            wlo += 1
                        whi = Wo
                        while whi > wlo and (whi - 1) * stride + kw - pw >= W:
                            whi -= 1
                        for b in range(B):
                            for od in range(Do):
                                id_ = od * stride + kd - pd
                                dst = &cols[row, ((b * Do + od) * Ho) * Wo]
                                if id_ < 0 or id_ >= D:
                                    for j in range(Ho * Wo):
                                        dst[j] = 0
                                    continue
                                for oh in range(Ho):
                                    ih = oh * stride + kh - ph
                                    dst = &cols[row, (((b * Do + od) * Ho) + oh) * Wo]
                                    if ih < 0 or ih >= H:
                                        for j in range(Wo):
                                            dst[j] = 0
                                        continue
                                    for j in range(wlo):
                                        dst[j] = 0
                                    src = &x[b, ci, id_, ih, 0]
                                    if stride == 1:
                                        for j in range(wlo, whi):
                                            dst[j] = src[j + kw - pw]
                                    else:
                                        for j in range(wlo, whi):
                                            dst[j] = src[j * stride + kw - pw]
                                    for j in range(whi, Wo):
                                        dst[j] = 0


def col2im_add(contrib, y, int k, int stride, pads, src_dims):
    """Scatter-add tap contributions (Co*k^3, md*mh*mw) into y (Co, Do, Ho, Wo).

    Output position r = q*stride + tap - pad; rows ordered (co, kd, kh, kw).
    """
    cdef int pd = pads[0], ph = pads[1], pw = pads[2]
    md, mh, mw = src_dims
    _col2im_run(contrib, y, k, stride, pd, ph, pw, md, mh, mw)


def _col2im_run(real[:, ::1] contrib, real[:, :, :, ::1] y, int k, int stride,
                int pd, int ph, int pw, Py_ssize_t md, Py_ssize_t mh, Py_ssize_t mw):
    cdef Py_ssize_t Co = y.shape[0], Do = y.shape[1], Ho = y.shape[2], Wo = y.shape[3]
    cdef Py_ssize_t co, kd, kh, kw, qd, qh, qw, rd, rh, rw, row
    cdef const real* src
    with nogil:
        for co in range(Co):
            for kd in range(k):
                for kh in range(k):
                    for kw in range(k):
                        row = ((co * k + kd) * k + kh) * k + kw
                        for qd in range(md):
                            rd = qd * stride + kd - pd
                            if rd < 0 or rd >= Do:
                                continue
                            for qh in range(mh):
                                rh = qh * stride + kh - ph
                                if rh < 0 or rh >= Ho:
                                    continue
                                src = &contrib[row, (qd * mh + qh) * mw]
                                for qw in range(mw):
                                    rw = qw * stride + kw - pw
                                    if rw < 0 or rw >= Wo:
                                        continue
                                    y[co, rd, rh, rw] += src[qw]


def conv3d_backward_w_head(x, gy):
    """Weight gradient for stride-1 k=3 pad-1 convs with <= 4 output
    channels; see backend dispatch."""
    B, Ci, D, H, W = x.shape
    Co = gy.shape[1]
    gw = np.empty((Co, Ci, 3, 3, 3), dtype=x.dtype)
    if x.dtype == np.float32:
        _corrw_head_f32(x, gy, gw.reshape(-1))
    else:
        _corrw_head_f64(x, gy, gw.reshape(-1))
    return gw


cdef extern from "_kernels_c.h":
    void fcnreg_corrw_head_f32(const float* x, const float* gy, float* gw,
                               long B, long Ci, long Co,
                               long D, long H, long W) nogil
    void fcnreg_corrw_head_f64(const double* x, const double* gy, double* gw,
                               long B, long Ci, long Co,
                               long D, long H, long W) nogil


def _corrw_head_f32(float[:, :, :, :, ::1] x, float[:, :, :, :, ::1] gy,
                    float[::1] gw):
    with nogil:
        fcnreg_corrw_head_f32(&x[0, 0, 0, 0, 0], &gy[0, 0, 0, 0, 0], &gw[0],
                              x.shape[0], x.shape[1], gy.shape[1],
                              x.shape[2], x.shape[3], x.shape[4])


def _corrw_head_f64(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] gy,
                    double[::1] gw):
    with nogil:
        fcnreg_corrw_head_f64(&x[0, 0, 0, 0, 0], &gy[0, 0, 0, 0, 0], &gw[0],
                              x.shape[0], x.shape[1], gy.shape[1],
                              x.shape[2], x.shape[3], x.shape[4])


def relu_backward_inplace(gy, ref):
    """Zero gy where the forward output ref is <= 0, in place."""
    if gy.dtype == np.float32:
        _relu_bwd_f32(gy.reshape(-1), ref.reshape(-1))
    else:
        _relu_bwd_f64(gy.reshape(-1), ref.reshape(-1))
    return gy


def _relu_bwd_f32(float[::1] gy, const float[::1] ref):
    cdef Py_ssize_t i, n = gy.shape[0]
    with nogil:
        for i in range(n):
            if ref[i] <= 0:
                gy[i] = 0


def _relu_bwd_f64(double[::1] gy, const double[::1] ref):
    cdef Py_ssize_t i, n = gy.shape[0]
    with nogil:
        for i in range(n):
            if ref[i] <= 0:
                gy[i] = 0


def bn_stats(x):
    """Per-channel sum and sum of squares over (batch, D, H, W), one pass."""
    B, C = x.shape[0], x.shape[1]
    s1 = np.zeros(C, dtype=np.float64)
    s2 = np.zeros(C, dtype=np.float64)
    if x.dtype == np.float32:
        _bn_stats_f32(x, s1, s2)
    else:
        _bn_stats_f64(x, s1, s2)
    return s1, s2


def _bn_stats_f32(float[:, :, :, :, ::1] x, double[::1] s1, double[::1] s2):
    cdef Py_ssize_t b, c, i, B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t n = x.shape[2] * x.shape[3] * x.shape[4]
    cdef double a1, a2, v
    cdef const float* p
    with nogil:
        for b in range(B):
            for c in range(C):
                p = &x[b, c, 0, 0, 0]
                a1 = 0
                a2 = 0
                for i in range(n):
                    v = p[i]
                    a1 += v
                    a2 += v * v
                s1[c] += a1
                s2[c] += a2


def _bn_stats_f64(double[:, :, :, :, ::1] x, double[::1] s1, double[::1] s2):
    cdef Py_ssize_t b, c, i, B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t n = x.shape[2] * x.shape[3] * x.shape[4]
    cdef double a1, a2, v
    cdef const double* p
    with nogil:
        for b in range(B):
            for c in range(C):
                p = &x[b, c, 0, 0, 0]
                a1 = 0
                a2 = 0
                for i in range(n):
                    v = p[i]
                    a1 += v
                    a2 += v * v
                s1[c] += a1
                s2[c] += a2


def bn_apply(x, mean, inv_std, gamma, beta):
    """Return (xhat, out) in one pass: xhat = (x-mean)*inv_std,
    out = gamma*xhat + beta, all per channel."""
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    m = mean.astype(x.dtype)
    i = inv_std.astype(x.dtype)
    g = gamma.astype(x.dtype)
    bb = beta.astype(x.dtype)
    if x.dtype == np.float32:
        _bn_apply_f32(x, xhat, out, m, i, g, bb)
    else:
        _bn_apply_f64(x, xhat, out, m, i, g, bb)
    return xhat, out


def _bn_apply_f32(float[:, :, :, :, ::1] x, float[:, :, :, :, ::1] xhat,
                  float[:, :, :, :, ::1] out, const float[::1] mean,
                  const float[::1] inv_std, const float[::1] gamma,
                  const float[::1] beta):
    cdef Py_ssize_t b, c, i, B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t n = x.shape[2] * x.shape[3] * x.shape[4]
    cdef float m, s, g, be, h
    cdef const float* p
    cdef float* ph
    cdef float* po
    with nogil:
        for b in range(B):
            for c in range(C):
                p = &x[b, c, 0, 0, 0]
                ph = &xhat[b, c, 0, 0, 0]
                po = &out[b, c, 0, 0, 0]
                m = mean[c]; s = inv_std[c]; g = gamma[c]; be = beta[c]
                for i in range(n):
                    h = (p[i] - m) * s
                    ph[i] = h
                    po[i] = g * h + be


def _bn_apply_f64(double[:, :, :, :, ::1] x, double[:, :, :, :, ::1] xhat,
                  double[:, :, :, :, ::1] out, const double[::1] mean,
                  const double[::1] inv_std, const double[::1] gamma,
                  const double[::1] beta):
    cdef Py_ssize_t b, c, i, B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t n = x.shape[2] * x.shape[3] * x.shape[4]
    cdef double m, s, g, be, h
    cdef const double* p
    cdef double* ph
    cdef double* po
    with nogil:
        for b in range(B):
            for c in range(C):
                p = &x[b, c, 0, 0, 0]
                ph = &xhat[b, c, 0, 0, 0]
                po = &out[b, c, 0, 0, 0]
                m = mean[c]; s = inv_std[c]; g = gamma[c]; be = beta[c]
                for i in range(n):
                    h = (p[i] - m) * s
                    ph[i] = h
                    po[i] = g * h + be


def bn_backward_fused(g, xhat, gamma, inv_std):
    """(dgamma, dbeta) reductions plus the input gradient in two passes."""
    C = g.shape[1]
    dgamma = np.zeros(C, dtype=np.float64)
    dbeta = np.zeros(C, dtype=np.float64)
    if g.dtype == np.float32:
        _bn_red_f32(g, xhat, dgamma, dbeta)
    else:
        _bn_red_f64(g, xhat, dgamma, dbeta)
    n = g.shape[0] * g.shape[2] * g.shape[3] * g.shape[4]
    gi = (gamma.astype(np.float64) * inv_std.astype(np.float64))
    c1 = (gi * dgamma / n).astype(g.dtype)
    c2 = (gi * dbeta / n).astype(g.dtype)
    gx = np.empty_like(g)
    gi_t = gi.astype(g.dtype)
    if g.dtype == np.float32:
        _bn_gx_f32(g, xhat, gx, gi_t, c1, c2)
    else:
        _bn_gx_f64(g, xhat, gx, gi_t, c1, c2)
    return gx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)


def _bn_red_f32(float[:, :, :, :, ::1] g, float[:, :, :, :, ::1] xhat,
                double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t b, c, i, B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t n = g.shape[2] * g.shape[3] * g.shape[4]
    cdef double a1, a2
    cdef const float* pg
    cdef const float* px
    with nogil:
        for b in range(B):
            for c in range(C):
                pg = &g[b, c, 0, 0, 0]
                px = &xhat[b, c, 0, 0, 0]
                a1 = 0
                a2 = 0
                for i in range(n):
                    a1 += pg[i] * px[i]
                    a2 += pg[i]
                dgamma[c] += a1
                dbeta[c] += a2


def _bn_red_f64(double[:, :, :, :, ::1] g, double[:, :, :, :, ::1] xhat,
                double[::1] dgamma, double[::1] dbeta):
    cdef Py_ssize_t b, c, i, B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t n = g.shape[2] * g.shape[3] * g.shape[4]
    cdef double a1, a2
    cdef const double* pg
    cdef const double* px
    with nogil:
        for b in range(B):
            for c in range(C):
                pg = &g[b, c, 0, 0, 0]
                px = &xhat[b, c, 0, 0, 0]
                a1 = 0
                a2 = 0
                for i in range(n):
                    a1 += pg[i] * px[i]
                    a2 += pg[i]
                dgamma[c] += a1
                dbeta[c] += a2


def _bn_gx_f32(float[:, :, :, :, ::1] g, float[:, :, :, :, ::1] xhat,
               float[:, :, :, :, ::1] gx, const float[::1] gi,
               const float[::1] c1, const float[::1] c2):
    cdef Py_ssize_t b, c, i, B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t n = g.shape[2] * g.shape[3] * g.shape[4]
    cdef float a, k1, k2
    cdef const float* pg
    cdef const float* px
    cdef float* po
    with nogil:
        for b in range(B):
            for c in range(C):
                pg = &g[b, c, 0, 0, 0]
                px = &xhat[b, c, 0, 0, 0]
                po = &gx[b, c, 0, 0, 0]
                a = gi[c]; k1 = c1[c]; k2 = c2[c]
                for i in range(n):
                    po[i] = pg[i] * a - px[i] * k1 - k2


def _bn_gx_f64(double[:, :, :, :, ::1] g, double[:, :, :, :, ::1] xhat,
               double[:, :, :, :, ::1] gx, const double[::1] gi,
               const double[::1] c1, const double[::1] c2):
    cdef Py_ssize_t b, c, i, B = g.shape[0], C = g.shape[1]
    cdef Py_ssize_t n = g.shape[2] * g.shape[3] * g.shape[4]
    cdef double a, k1, k2
    cdef const double* pg
    cdef const double* px
    cdef double* po
    with nogil:
        for b in range(B):
            for c in range(C):
                pg = &g[b, c, 0, 0, 0]
                px = &xhat[b, c, 0, 0, 0]
                po = &gx[b, c, 0, 0, 0]
                a = gi[c]; k1 = c1[c]; k2 = c2[c]
                for i in range(n):
                    po[i] = pg[i] * a - px[i] * k1 - k2
