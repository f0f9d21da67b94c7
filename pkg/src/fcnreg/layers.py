"""The five layer kernels of the registration FCN, forward and backward.

Each forward returns (output, cache); the matching ``*_backward`` consumes
the cache and the upstream gradient.  Backward passes are exact
reverse-mode derivatives, checked against central finite differences in the
test suite (64-bit, step 1e-5, relative error <= 1e-4).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import backend
from .volume import FeatureMap


@dataclass
class ConvParams:
    """Weights for a (transposed) convolution: (out_ch, in_ch, k, k, k)."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ValueError("conv weights must be 5-D (out, in, k, k, k)")
        k = self.weights.shape[2]
        if self.weights.shape[2:] != (k, k, k) or k % 2 == 0:
            raise ValueError(f"kernel must be cubic with odd size, got {self.weights.shape[2:]}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


@dataclass
class BNParams:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        n = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"BN parameter {name} must match gamma's shape")
        if self.eps <= 0:
            raise ValueError("BN eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("BN momentum must lie in (0, 1)")
        if self.running_var.min() < 0:
            raise ValueError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class ConvCache(NamedTuple):
    x: np.ndarray
    params: ConvParams


class TConvCache(NamedTuple):
    x: np.ndarray
    params: ConvParams
    target_dims: tuple[int, int, int]


class BNCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


class ReluCache(NamedTuple):
    out: np.ndarray


class MaxPoolCache(NamedTuple):
    argmax: np.ndarray
    in_dims: tuple[int, int, int]


class AvgPoolCache(NamedTuple):
    in_dims: tuple[int, int, int]
    k: int
    stride: int


def conv3d(x: FeatureMap, p: ConvParams) -> tuple[FeatureMap, ConvCache]:
    """Cross-correlation (no kernel flip) with zero padding."""
    y = backend.kernels().conv3d_forward(
        np.ascontiguousarray(x.data), p.weights, p.bias, p.stride, p.padding)
    return FeatureMap(y), ConvCache(x.data, p)


def conv3d_backward(cache: ConvCache, gy: FeatureMap, need_gx: bool = True):
    K = backend.kernels()
    x, p = cache.x, cache.params
    g = np.ascontiguousarray(gy.data)
    gx = None
    if need_gx:
        gx = FeatureMap(K.conv3d_backward_x(g, p.weights, p.stride, p.padding,
                                            x.shape[2:]))
    gw = K.conv3d_backward_w(x, g, p.stride, p.padding, p.kernel_size)
    gb = g.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def transposed_conv3d(x: FeatureMap, p: ConvParams,
                      target_dims: tuple[int, int, int]) -> tuple[FeatureMap, TConvCache]:
    """Scatter-add adjoint of conv3d, cropped/padded to exactly target_dims."""
    y = backend.kernels().tconv3d_forward(
        np.ascontiguousarray(x.data), p.weights, p.bias, p.stride, p.padding,
        tuple(target_dims))
    return FeatureMap(y), TConvCache(x.data, p, tuple(target_dims))


def transposed_conv3d_backward(cache: TConvCache, gy: FeatureMap):
    K = backend.kernels()
    x, p = cache.x, cache.params
    g = np.ascontiguousarray(gy.data)
    gx = K.tconv3d_backward_x(g, p.weights, p.stride, p.padding, x.shape[2:])
    gw = K.tconv3d_backward_w(x, g, p.stride, p.padding, p.kernel_size)
    gb = g.sum(axis=(0, 2, 3, 4))
    return FeatureMap(gx), gw, gb


def batchnorm(x: FeatureMap, p: BNParams, mode: str) -> tuple[FeatureMap, BNCache]:
    """Per-channel normalization over (batch, D, H, W).

    Train mode uses batch statistics and updates the running ones in place
    (r <- momentum*r + (1-momentum)*batch); infer mode uses the stored
    running statistics.
    """
    if x.channels != p.channels:
        raise ValueError(f"channel mismatch: input has {x.channels}, BN expects {p.channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"BN mode must be 'train' or 'infer', got {mode!r}")
    data = x.data
    K = backend.kernels()
    if mode == "train":
        n = data.shape[0] * data.shape[2] * data.shape[3] * data.shape[4]
        if hasattr(K, "bn_stats"):
            s1, s2 = K.bn_stats(data)
        else:
            s1 = np.einsum("bcdhw->c", data, dtype=np.float64)
            s2 = np.einsum("bcdhw,bcdhw->c", data, data, dtype=np.float64)
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0)
        p.running_mean[:] = p.momentum * p.running_mean + (1 - p.momentum) * mean
        p.running_var[:] = p.momentum * p.running_var + (1 - p.momentum) * var
    else:
        mean = p.running_mean.astype(np.float64)
        var = p.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    if hasattr(K, "bn_apply"):
        xhat, out = K.bn_apply(data, mean, inv_std, p.gamma, p.beta)
    else:
        xhat = data - mean.astype(data.dtype)[None, :, None, None, None]
        xhat *= inv_std.astype(data.dtype)[None, :, None, None, None]
        out = xhat * p.gamma[None, :, None, None, None]
        out += p.beta[None, :, None, None, None]
    return FeatureMap(out), BNCache(xhat, inv_std.astype(data.dtype), p.gamma)


def batchnorm_backward(cache: BNCache, gy: FeatureMap):
    """Train-mode gradients (batch statistics treated as functions of x)."""
    g = gy.data
    xhat, inv_std, gamma = cache
    K = backend.kernels()
    if hasattr(K, "bn_backward_fused"):
        gx, dgamma, dbeta = K.bn_backward_fused(g, xhat, gamma, inv_std)
        return FeatureMap(gx), dgamma, dbeta
    n = g.shape[0] * g.shape[2] * g.shape[3] * g.shape[4]
    dgamma = np.einsum("bcdhw,bcdhw->c", g, xhat, dtype=np.float64).astype(g.dtype)
    dbeta = np.einsum("bcdhw->c", g, dtype=np.float64).astype(g.dtype)
    gi = (gamma * inv_std).astype(g.dtype)
    gx = g * gi[None, :, None, None, None]
    gx -= xhat * (gi * dgamma / n)[None, :, None, None, None]
    gx -= (gi * dbeta / n)[None, :, None, None, None]
    return FeatureMap(gx), dgamma, dbeta


def relu(x: FeatureMap) -> tuple[FeatureMap, ReluCache]:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    out = np.maximum(x.data, x.data.dtype.type(0))
    # out > 0 iff x > 0, so the output doubles as the backward mask
    return FeatureMap(out), ReluCache(out)


def relu_backward(cache: ReluCache, gy: FeatureMap) -> FeatureMap:
    """May reuse gy's buffer; upstream gradients are single-use."""
    K = backend.kernels()
    if hasattr(K, "relu_backward_inplace"):
        return FeatureMap(K.relu_backward_inplace(np.ascontiguousarray(gy.data),
                                                  cache.out))
    return FeatureMap(np.where(cache.out > 0, gy.data, gy.data.dtype.type(0)))


def maxpool3d(x: FeatureMap, k: int = 3, stride: int = 2) -> tuple[FeatureMap, MaxPoolCache]:
    """Window max; edges replicate so output dims are ceil(dim/2) for k=3 s=2."""
    y, arg = backend.kernels().maxpool3d_forward(np.ascontiguousarray(x.data), k, stride)
    return FeatureMap(y), MaxPoolCache(arg, x.dims)


def maxpool3d_backward(cache: MaxPoolCache, gy: FeatureMap) -> FeatureMap:
    gx = backend.kernels().maxpool3d_backward(
        np.ascontiguousarray(gy.data), cache.argmax, cache.in_dims)
    return FeatureMap(gx)


def avgpool3d(x: FeatureMap, k: int = 3, stride: int = 2) -> tuple[FeatureMap, AvgPoolCache]:
    """In-bounds window mean with the same geometry as maxpool3d."""
    y = backend.kernels().avgpool3d_forward(np.ascontiguousarray(x.data), k, stride)
    return FeatureMap(y), AvgPoolCache(x.dims, k, stride)


def avgpool3d_backward(cache: AvgPoolCache, gy: FeatureMap) -> FeatureMap:
    gx = backend.kernels().avgpool3d_backward(
        np.ascontiguousarray(gy.data), cache.in_dims, cache.k, cache.stride)
    return FeatureMap(gx)
