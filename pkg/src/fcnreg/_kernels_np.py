"""Pure-numpy spatial kernels.

Fallback used when the compiled extension is unavailable, and the home of the
GEMM-shaped operations (convolution weight gradients, transposed convolution)
that both backends delegate to BLAS via ``tensordot``/``einsum``.

The convolution forward matches the compiled kernels element for element: the
accumulation runs bias first, taps in (kd, kh, kw) raster order, in-channels
ascending within a tap, with out-of-bounds taps skipped.  That makes the
output reproducible by a naive nested loop, at the cost of speed; see
``benchmarks/bench_kernels.py`` for the gap.
"""

from __future__ import annotations

import numpy as np


def _tap_range(n_in, n_out, stride, pad, tap):
    """Output index range [lo, hi) whose input position o*stride + tap - pad
    lands inside [0, n_in), plus the first input position."""
    lo = max(0, -((tap - pad) // stride))
    hi = min(n_out, (n_in - 1 + pad - tap) // stride + 1)
    return lo, hi, lo * stride + tap - pad


def conv3d_forward(x, w, bias, stride, pads, out_dims=None):
    """Cross-correlation of (B, Ci, D, H, W) with (Co, Ci, K, K, K) weights."""
    B, Ci, D, H, W = x.shape
    Co, Ciw, K = w.shape[0], w.shape[1], w.shape[2]
    if Ciw != Ci:
        raise ValueError(f"channel mismatch: input has {Ci}, weights expect {Ciw}")
    pd, ph, pw = pads
    if out_dims is None:
        out_dims = ((D + 2 * pd - K) // stride + 1,
                    (H + 2 * ph - K) // stride + 1,
                    (W + 2 * pw - K) // stride + 1)
    Do, Ho, Wo = out_dims
    if Do < 1 or Ho < 1 or Wo < 1:
        raise ValueError(f"convolution output dims {out_dims} collapse below 1")
    if bias is None:
        bias = np.zeros(Co, dtype=x.dtype)
    y = np.empty((B, Co, Do, Ho, Wo), dtype=x.dtype)
    y[:] = bias.astype(x.dtype).reshape(1, Co, 1, 1, 1)
    for kd in range(K):
        dlo, dhi, dsrc = _tap_range(D, Do, stride, pd, kd)
        if dlo >= dhi:
            continue
        for kh in range(K):
            hlo, hhi, hsrc = _tap_range(H, Ho, stride, ph, kh)
            if hlo >= hhi:
                continue
            for kw in range(K):
                wlo, whi, wsrc = _tap_range(W, Wo, stride, pw, kw)
                if wlo >= whi:
                    continue
                xs = x[:, :,
                       dsrc:dsrc + stride * (dhi - dlo):stride,
                       hsrc:hsrc + stride * (hhi - hlo):stride,
                       wsrc:wsrc + stride * (whi - wlo):stride]
                ysub = y[:, :, dlo:dhi, hlo:hhi, wlo:whi]
                for ic in range(Ci):
                    ysub += w[None, :, ic, kd, kh, kw, None, None, None] * xs[:, ic:ic + 1]
    return y


_WORKBUFS: dict = {}


def _workbuf(shape, dtype, zero=False):
    """Reused scratch arrays for the backward convolutions; page faults once.

    Zeroed buffers keep their borders zero because callers only overwrite
    the interior.  Single-trainer use only (not thread-safe).
    """
    key = (shape, np.dtype(dtype).str, zero)
    buf = _WORKBUFS.get(key)
    if buf is None:
        if len(_WORKBUFS) > 16:
            _WORKBUFS.clear()
        buf = np.zeros(shape, dtype) if zero else np.empty(shape, dtype)
        _WORKBUFS[key] = buf
    return buf


def conv3d_backward_w(x, gy, stride, pads, k):
    """Weight gradient: per-tap BLAS matmuls against a zero-padded copy of x.

    The tap slice is staged per batch item through one reused scratch buffer
    (a contiguous box copy) so the working set stays cache-resident instead
    of churning fresh allocations."""
    B, Ci, D, H, W = x.shape
    Co = gy.shape[1]
    Do, Ho, Wo = gy.shape[2:]
    pd, ph, pw = pads
    xpad = _workbuf((B, Ci, D + 2 * pd, H + 2 * ph, W + 2 * pw), x.dtype, zero=True)
    xpad[:, :, pd:pd + D, ph:ph + H, pw:pw + W] = x
    n = Do * Ho * Wo
    # one GEMM per (kd, kh) over the k w-taps together: wider panels suit BLAS
    scratch = _workbuf((k * Ci, Do, Ho, Wo), x.dtype)
    xmat = scratch.reshape(k * Ci, -1)
    gymats = [gy[b].reshape(Co, n) for b in range(B)]
    gw = np.empty((Co, Ci, k, k, k), dtype=x.dtype)
    acc = np.empty((Co, k * Ci), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            acc[:] = 0
            for b in range(B):
                for kw in range(k):
                    np.copyto(scratch[kw * Ci:(kw + 1) * Ci], xpad[
                        b, :,
                        kd:kd + stride * (Do - 1) + 1:stride,
                        kh:kh + stride * (Ho - 1) + 1:stride,
                        kw:kw + stride * (Wo - 1) + 1:stride])
                acc += gymats[b] @ xmat.T
            gw[:, :, kd, kh, :] = acc.reshape(Co, k, Ci).transpose(0, 2, 1)
    return gw


def check_tconv_dims(x_shape, w, stride, pads, out_dims) -> None:
    """Validate transposed-conv target dims: each axis must land within
    [natural, natural + stride] of the adjoint's natural extent."""
    _, Ci, d, h, w_in = x_shape
    K = w.shape[2]
    if w.shape[1] != Ci:
        raise ValueError(f"channel mismatch: input has {Ci}, weights expect {w.shape[1]}")
    for n_out, n_in, pad in zip(out_dims, (d, h, w_in), pads):
        natural = (n_in - 1) * stride + K - 2 * pad
        if not natural <= n_out <= natural + stride or n_out < 1:
            raise ValueError(
                f"infeasible target dims {tuple(out_dims)} for input "
                f"{(d, h, w_in)} with stride {stride}")


def tconv3d_forward(x, w, bias, stride, pads, out_dims, conv_forward=None):
    """Scatter-add adjoint of conv3d_forward, cropped/padded to out_dims.

    w follows the layer's own (Co, Ci, K, K, K) orientation, Ci being the
    channel count of x.  Pairing with ``conv3d_forward`` for the adjoint
    identity uses the first-two-axes transpose of w.
    """
    check_tconv_dims(x.shape, w, stride, pads, out_dims)
    B, Ci, d, h, w_in = x.shape
    Co, K = w.shape[0], w.shape[2]
    Do, Ho, Wo = out_dims
    pd, ph, pw = pads
    if stride == 1:
        # gather form: correlation with the tap-flipped kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1])
        fwd = conv_forward if conv_forward is not None else conv3d_forward
        return fwd(x, wf, bias, 1, (K - 1 - pd, K - 1 - ph, K - 1 - pw), out_dims)
    y = np.empty((B, Co, Do, Ho, Wo), dtype=x.dtype)
    if bias is None:
        y[:] = 0
    else:
        y[:] = bias.astype(x.dtype).reshape(1, Co, 1, 1, 1)
    # scatter: output position r = q*stride + tap - pad for source position q
    for kd in range(K):
        qd_lo, qd_hi, rd0 = _scatter_range(d, Do, stride, pd, kd)
        if qd_lo >= qd_hi:
            continue
        for kh in range(K):
            qh_lo, qh_hi, rh0 = _scatter_range(h, Ho, stride, ph, kh)
            if qh_lo >= qh_hi:
                continue
            for kw in range(K):
                qw_lo, qw_hi, rw0 = _scatter_range(w_in, Wo, stride, pw, kw)
                if qw_lo >= qw_hi:
                    continue
                xs = x[:, :, qd_lo:qd_hi, qh_lo:qh_hi, qw_lo:qw_hi]
                contrib = np.einsum("oi,bidhw->bodhw", w[:, :, kd, kh, kw], xs,
                                    optimize=True)
                y[:, :,
                  rd0:rd0 + stride * (qd_hi - qd_lo):stride,
                  rh0:rh0 + stride * (qh_hi - qh_lo):stride,
                  rw0:rw0 + stride * (qw_hi - qw_lo):stride] += contrib
    return y


def _scatter_range(n_src, n_out, stride, pad, tap):
    """Source index range [lo, hi) whose output position q*stride + tap - pad
    lands inside [0, n_out), plus the first output position."""
    lo = max(0, -((tap - pad) // stride))
    hi = min(n_src, (n_out - 1 + pad - tap) // stride + 1)
    return lo, hi, lo * stride + tap - pad


def tconv3d_backward_x(gy, w, stride, pads, x_dims, conv_forward=None):
    """Input gradient of tconv3d_forward: a strided correlation of gy."""
    fwd = conv_forward if conv_forward is not None else conv3d_forward
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4))
    return fwd(gy, wt, None, stride, pads, x_dims)


def tconv3d_backward_w(x, gy, stride, pads, k):
    """Weight gradient of tconv3d_forward (roles of x and gy swap)."""
    gw = conv3d_backward_w(gy, x, stride, pads, k)
    return np.ascontiguousarray(gw.transpose(1, 0, 2, 3, 4))


def maxpool3d_forward(x, k, stride):
    """Window max with replicated edges; output dims ceil(dim/stride) for k=3 s=2.

    Returns (y, argmax) with flat spatial input indices; ties go to the first
    window position in raster order.
    """
    B, C, D, H, W = x.shape
    p = (k - 1) // 2
    Do = (D + 2 * p - k) // stride + 1
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    y = np.full((B, C, Do, Ho, Wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((B, C, Do, Ho, Wo), dtype=np.int64)
    for kd in range(k):
        dlo, dhi, dsrc = _tap_range(D, Do, stride, p, kd)
        if dlo >= dhi:
            continue
        idx_d = np.arange(dsrc, dsrc + stride * (dhi - dlo), stride)
        for kh in range(k):
            hlo, hhi, hsrc = _tap_range(H, Ho, stride, p, kh)
            if hlo >= hhi:
                continue
            idx_h = np.arange(hsrc, hsrc + stride * (hhi - hlo), stride)
            for kw in range(k):
                wlo, whi, wsrc = _tap_range(W, Wo, stride, p, kw)
                if wlo >= whi:
                    continue
                idx_w = np.arange(wsrc, wsrc + stride * (whi - wlo), stride)
                xs = x[:, :,
                       dsrc:dsrc + stride * (dhi - dlo):stride,
                       hsrc:hsrc + stride * (hhi - hlo):stride,
                       wsrc:wsrc + stride * (whi - wlo):stride]
                region = np.s_[:, :, dlo:dhi, hlo:hhi, wlo:whi]
                idx = ((idx_d[:, None, None] * H + idx_h[None, :, None]) * W
                       + idx_w[None, None, :])
                better = xs > y[region]
                y[region] = np.where(better, xs, y[region])
                arg[region] = np.where(better, idx, arg[region])
    return y, arg


def maxpool3d_backward(gy, arg, in_dims):
    D, H, W = in_dims
    B, C = gy.shape[0], gy.shape[1]
    gx = np.zeros((B, C, D * H * W), dtype=gy.dtype)
    flat_arg = arg.reshape(B, C, -1)
    flat_gy = gy.reshape(B, C, -1)
    for b in range(B):
        for c in range(C):
            np.add.at(gx[b, c], flat_arg[b, c], flat_gy[b, c])
    return gx.reshape(B, C, D, H, W)


def avgpool3d_forward(x, k, stride):
    """In-bounds window mean; same output geometry as maxpool3d_forward."""
    B, C, D, H, W = x.shape
    p = (k - 1) // 2
    Do = (D + 2 * p - k) // stride + 1
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    y = np.zeros((B, C, Do, Ho, Wo), dtype=x.dtype)
    counts = _window_counts((D, H, W), (Do, Ho, Wo), k, stride, p)
    for kd in range(k):
        dlo, dhi, dsrc = _tap_range(D, Do, stride, p, kd)
        if dlo >= dhi:
            continue
        for kh in range(k):
            hlo, hhi, hsrc = _tap_range(H, Ho, stride, p, kh)
            if hlo >= hhi:
                continue
            for kw in range(k):
                wlo, whi, wsrc = _tap_range(W, Wo, stride, p, kw)
                if wlo >= whi:
                    continue
                y[:, :, dlo:dhi, hlo:hhi, wlo:whi] += x[
                    :, :,
                    dsrc:dsrc + stride * (dhi - dlo):stride,
                    hsrc:hsrc + stride * (hhi - hlo):stride,
                    wsrc:wsrc + stride * (whi - wlo):stride]
    y /= counts.astype(x.dtype)
    return y


def avgpool3d_backward(gy, in_dims, k, stride):
    D, H, W = in_dims
    B, C = gy.shape[0], gy.shape[1]
    p = (k - 1) // 2
    counts = _window_counts((D, H, W), gy.shape[2:], k, stride, p)
    share = gy / counts.astype(gy.dtype)
    gx = np.zeros((B, C, D, H, W), dtype=gy.dtype)
    Do, Ho, Wo = gy.shape[2:]
    # descending tap order visits the windows covering a voxel in ascending
    # raster order, matching the compiled kernel's accumulation
    for kd in reversed(range(k)):
        dlo, dhi, dsrc = _tap_range(D, Do, stride, p, kd)
        if dlo >= dhi:
            continue
        for kh in reversed(range(k)):
            hlo, hhi, hsrc = _tap_range(H, Ho, stride, p, kh)
            if hlo >= hhi:
                continue
            for kw in reversed(range(k)):
                wlo, whi, wsrc = _tap_range(W, Wo, stride, p, kw)
                if wlo >= whi:
                    continue
                gx[:, :,
                   dsrc:dsrc + stride * (dhi - dlo):stride,
                   hsrc:hsrc + stride * (hhi - hlo):stride,
                   wsrc:wsrc + stride * (whi - wlo):stride] += share[
                       :, :, dlo:dhi, hlo:hhi, wlo:whi]
    return gx


def _window_counts(in_dims, out_dims, k, stride, p):
    per_axis = []
    for n_in, n_out in zip(in_dims, out_dims):
        starts = np.arange(n_out) * stride - p
        lo = np.maximum(starts, 0)
        hi = np.minimum(starts + k, n_in)
        per_axis.append(hi - lo)
    cd, ch, cw = per_axis
    return (cd[:, None, None] * ch[None, :, None] * cw[None, None, :])[None, None]


def downsample_avg2(x):
    """2x2x2 block mean with edge truncation; dims ceil-halved.

    In-block accumulation runs in raster order.
    """
    B, C, D, H, W = x.shape
    Do, Ho, Wo = (D + 1) // 2, (H + 1) // 2, (W + 1) // 2
    y = np.zeros((B, C, Do, Ho, Wo), dtype=x.dtype)
    for kd in range(2):
        nd = (D - kd + 1) // 2
        for kh in range(2):
            nh = (H - kh + 1) // 2
            for kw in range(2):
                nw = (W - kw + 1) // 2
                if nd < 1 or nh < 1 or nw < 1:
                    continue
                y[:, :, :nd, :nh, :nw] += x[:, :, kd::2, kh::2, kw::2][:, :, :nd, :nh, :nw]
    counts = _window_counts((D, H, W), (Do, Ho, Wo), 2, 2, 0)
    y /= counts.astype(x.dtype)
    return y


def warp_trilinear_forward(vol, disp):
    """Sample vol (B, D, H, W) at identity + disp (B, 3, D, H, W).

    Coordinates clamp to the border; interpolation lerps along w, then h,
    then d, each corner pair as a*(1-t) + b*t.
    """
    coords = _warp_coords(vol.shape[1:], disp)
    return _trilinear_gather(vol, coords)[0]


def _warp_coords(dims, disp):
    D, H, W = dims
    dt = disp.dtype
    grid_d = np.arange(D, dtype=dt)[None, :, None, None]
    grid_h = np.arange(H, dtype=dt)[None, None, :, None]
    grid_w = np.arange(W, dtype=dt)[None, None, None, :]
    return (grid_d + disp[:, 0], grid_h + disp[:, 1], grid_w + disp[:, 2])


def _trilinear_gather(vol, coords):
    B, D, H, W = vol.shape
    zr, yr, xr = coords
    zc = np.clip(zr, 0, D - 1)
    yc = np.clip(yr, 0, H - 1)
    xc = np.clip(xr, 0, W - 1)
    z0f, y0f, x0f = np.floor(zc), np.floor(yc), np.floor(xc)
    td, th, tw = zc - z0f, yc - y0f, xc - x0f
    z0 = z0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    z1 = np.minimum(z0 + 1, D - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    bb = np.arange(B)[:, None, None, None]
    v000 = vol[bb, z0, y0, x0]
    v001 = vol[bb, z0, y0, x1]
    v010 = vol[bb, z0, y1, x0]
    v011 = vol[bb, z0, y1, x1]
    v100 = vol[bb, z1, y0, x0]
    v101 = vol[bb, z1, y0, x1]
    v110 = vol[bb, z1, y1, x0]
    v111 = vol[bb, z1, y1, x1]
    md, mh, mw = 1 - td, 1 - th, 1 - tw
    c00 = v000 * mw + v001 * tw
    c01 = v010 * mw + v011 * tw
    c10 = v100 * mw + v101 * tw
    c11 = v110 * mw + v111 * tw
    c0 = c00 * mh + c01 * th
    c1 = c10 * mh + c11 * th
    out = c0 * md + c1 * td
    corners = (v000, v001, v010, v011, v100, v101, v110, v111)
    return out, (corners, (td, th, tw), (c00, c01, c10, c11, c0, c1))


def warp_trilinear_backward_disp(vol, disp, gy):
    """Gradient of warp_trilinear_forward w.r.t. disp (zero where clamped)."""
    B, D, H, W = vol.shape
    zr, yr, xr = _warp_coords(vol.shape[1:], disp)
    _, (corners, (td, th, tw), (c00, c01, c10, c11, c0, c1)) = _trilinear_gather(
        vol, (zr, yr, xr))
    v000, v001, v010, v011, v100, v101, v110, v111 = corners
    md, mh, mw = 1 - td, 1 - th, 1 - tw
    dz = c1 - c0
    dy = (c01 - c00) * md + (c11 - c10) * td
    dx = ((v001 - v000) * mh + (v011 - v010) * th) * md + \
         ((v101 - v100) * mh + (v111 - v110) * th) * td
    gz = gy * dz * ((zr > 0) & (zr < D - 1))
    gh = gy * dy * ((yr > 0) & (yr < H - 1))
    gw = gy * dx * ((xr > 0) & (xr < W - 1))
    return np.stack([gz, gh, gw], axis=1).astype(disp.dtype)


def warp_nearest(labels, disp):
    """Nearest-neighbour label warp: round(v + disp) half-up, clamped."""
    D, H, W = labels.shape
    zi = np.floor(np.arange(D, dtype=np.float64)[:, None, None] + disp[0] + 0.5)
    yi = np.floor(np.arange(H, dtype=np.float64)[None, :, None] + disp[1] + 0.5)
    xi = np.floor(np.arange(W, dtype=np.float64)[None, None, :] + disp[2] + 0.5)
    zi = np.clip(zi, 0, D - 1).astype(np.int64)
    yi = np.clip(yi, 0, H - 1).astype(np.int64)
    xi = np.clip(xi, 0, W - 1).astype(np.int64)
    return labels[zi, yi, xi]


def _resize_axis(n_src, n_out, dtype):
    scale = dtype.type(n_src - 1) / dtype.type(n_out - 1) if n_out > 1 else dtype.type(0)
    c = np.arange(n_out, dtype=dtype) * scale
    i0 = np.floor(c)
    t = c - i0
    i0 = i0.astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, t


def upsample_trilinear_forward(src, out_dims):
    """Channel-wise trilinear resize of (B, C, d, h, w), endpoint-aligned."""
    B, C, d, h, w = src.shape
    Do, Ho, Wo = out_dims
    z0, z1, td = _resize_axis(d, Do, src.dtype)
    y0, y1, th = _resize_axis(h, Ho, src.dtype)
    x0, x1, tw = _resize_axis(w, Wo, src.dtype)
    td = td[:, None, None]
    th = th[None, :, None]
    tw = tw[None, None, :]
    md, mh, mw = 1 - td, 1 - th, 1 - tw
    zz0, zz1 = z0[:, None, None], z1[:, None, None]
    yy0, yy1 = y0[None, :, None], y1[None, :, None]
    xx0, xx1 = x0[None, None, :], x1[None, None, :]
    c00 = src[:, :, zz0, yy0, xx0] * mw + src[:, :, zz0, yy0, xx1] * tw
    c01 = src[:, :, zz0, yy1, xx0] * mw + src[:, :, zz0, yy1, xx1] * tw
    c10 = src[:, :, zz1, yy0, xx0] * mw + src[:, :, zz1, yy0, xx1] * tw
    c11 = src[:, :, zz1, yy1, xx0] * mw + src[:, :, zz1, yy1, xx1] * tw
    c0 = c00 * mh + c01 * th
    c1 = c10 * mh + c11 * th
    return c0 * md + c1 * td


def upsample_trilinear_backward(gy, src_dims):
    B, C = gy.shape[0], gy.shape[1]
    d, h, w = src_dims
    Do, Ho, Wo = gy.shape[2:]
    z0, z1, td = _resize_axis(d, Do, gy.dtype)
    y0, y1, th = _resize_axis(h, Ho, gy.dtype)
    x0, x1, tw = _resize_axis(w, Wo, gy.dtype)
    td = td[:, None, None]
    th = th[None, :, None]
    tw = tw[None, None, :]
    md, mh, mw = 1 - td, 1 - th, 1 - tw
    gsrc = np.zeros((B, C, d * h * w), dtype=np.float64)
    gyr = gy.reshape(B, C, -1).astype(np.float64)
    for zi, wd in ((z0, md), (z1, td)):
        for yi, wh in ((y0, mh), (y1, th)):
            for xi, ww in ((x0, mw), (x1, tw)):
                idx = ((zi[:, None, None] * h + yi[None, :, None]) * w
                       + xi[None, None, :]).ravel()
                weight = (wd * wh * ww).ravel()[None, None, :]
                contrib = gyr * weight
                for b in range(B):
                    for c in range(C):
                        gsrc[b, c] += np.bincount(idx, weights=contrib[b, c],
                                                  minlength=d * h * w)
    return gsrc.reshape(B, C, d, h, w).astype(gy.dtype)
