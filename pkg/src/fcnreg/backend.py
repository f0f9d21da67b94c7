"""Kernel backend selection.

Two interchangeable implementations of the spatial kernels exist: the
compiled extension ``fcnreg._kernels`` (default when built) and the
pure-numpy module ``fcnreg._kernels_np``.  They produce bit-identical
outputs; only speed differs.  The GEMM-shaped operations (convolution
gradients, transposed convolution) always run through BLAS via the numpy
module because ``tensordot`` beats a hand-rolled loop there.

Select explicitly with ``set_backend("numpy")`` or the ``FCNREG_BACKEND``
environment variable.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - build without the extension
    _compiled = None

_SPATIAL_OPS = (
    "conv3d_forward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "avgpool3d_forward",
    "avgpool3d_backward",
    "downsample_avg2",
    "warp_trilinear_forward",
    "warp_trilinear_backward_disp",
    "warp_nearest",
    "upsample_trilinear_forward",
    "upsample_trilinear_backward",
)

# fused elementwise helpers only the compiled module provides; layer code
# falls back to numpy expressions when absent
_OPTIONAL_OPS = ("bn_stats", "bn_apply", "bn_backward_fused", "relu_backward_inplace")


class KernelBackend:
    """Bound kernel namespace; one instance per implementation.

    The backward/transposed convolutions are GEMM-shaped; when the compiled
    module provides ``im2col``/``col2im_add`` they run as a single BLAS
    matmul around those, otherwise through the per-tap tensordot fallback.
    """

    def __init__(self, name: str, impl):
        self.name = name
        self._impl = impl
        self._has_cols = hasattr(impl, "im2col")
        for op in _SPATIAL_OPS:
            setattr(self, op, getattr(impl, op))
        for op in _OPTIONAL_OPS:
            if hasattr(impl, op):
                setattr(self, op, getattr(impl, op))

    def conv3d_backward_x(self, gy, w, stride, pads, x_dims):
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4))
        return _kernels_np.tconv3d_forward(gy, wt, None, stride, pads, x_dims,
                                           conv_forward=self.conv3d_forward)

    def conv3d_backward_w(self, x, gy, stride, pads, k):
        if (self._has_cols and stride == 1 and k == 3 and tuple(pads) == (1, 1, 1)
                and gy.shape[1] <= 4):
            return self._impl.conv3d_backward_w_head(
                np.ascontiguousarray(x), np.ascontiguousarray(gy))
        return _kernels_np.conv3d_backward_w(x, gy, stride, pads, k)

    def tconv3d_forward(self, x, w, bias, stride, pads, out_dims):
        if stride == 1 or not self._has_cols:
            return _kernels_np.tconv3d_forward(x, w, bias, stride, pads, out_dims,
                                               conv_forward=self.conv3d_forward)
        _kernels_np.check_tconv_dims(x.shape, w, stride, pads, out_dims)
        B, Ci = x.shape[0], x.shape[1]
        Co, k = w.shape[0], w.shape[2]
        wm = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(-1, Ci)
        y = np.empty((B, Co) + tuple(out_dims), dtype=x.dtype)
        if bias is None:
            y[:] = 0
        else:
            y[:] = bias.astype(x.dtype).reshape(1, Co, 1, 1, 1)
        src_dims = x.shape[2:]
        for b in range(B):
            contrib = wm @ x[b].reshape(Ci, -1)
            self._impl.col2im_add(contrib, y[b], k, stride, pads, src_dims)
        return y

    def tconv3d_backward_x(self, gy, w, stride, pads, x_dims):
        if self._has_cols:
            B = gy.shape[0]
            Ci, k = w.shape[1], w.shape[2]
            gycol = self._impl.im2col(np.ascontiguousarray(gy), k, stride, pads,
                                      x_dims)
            wm = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)).reshape(Ci, -1)
            gx = (wm @ gycol).reshape(Ci, B, *x_dims)
            return np.ascontiguousarray(gx.transpose(1, 0, 2, 3, 4))
        return _kernels_np.tconv3d_backward_x(gy, w, stride, pads, x_dims,
                                              conv_forward=self.conv3d_forward)

    def tconv3d_backward_w(self, x, gy, stride, pads, k):
        gw = self.conv3d_backward_w(gy, x, stride, pads, k)
        return np.ascontiguousarray(gw.transpose(1, 0, 2, 3, 4))


_BACKENDS: dict[str, KernelBackend] = {"numpy": KernelBackend("numpy", _kernels_np)}
if _compiled is not None:
    _BACKENDS["cython"] = KernelBackend("cython", _compiled)


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def _default_name() -> str:
    requested = os.environ.get("FCNREG_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ValueError(
                f"FCNREG_BACKEND={requested!r} not available; "
                f"choose from {available_backends()}")
        return requested
    return "cython" if "cython" in _BACKENDS else "numpy"


_active = _BACKENDS[_default_name()]


def get_backend() -> KernelBackend:
    return _active


def set_backend(name: str) -> KernelBackend:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {available_backends()}")
    _active = _BACKENDS[name]
    return _active


def kernels() -> KernelBackend:
    """Alias used by the layer modules at call sites."""
    return _active
