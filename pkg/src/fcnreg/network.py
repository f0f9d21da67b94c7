"""The registration FCN: assembly, forward, hand-scheduled backprop.

Three architecture variants share a conv trunk:

* ``multires``  - two pooling stages, three regression heads predicting a
  deformation field at full, half and quarter resolution (deep
  self-supervision); deconvolution layers upsample between heads.
* ``no_pool``   - the trunk convolutions only, one full-resolution head.
* ``coarse_interp`` - the pooled trunk with the quarter-resolution head,
  trilinearly upsampled to full resolution; one loss at full resolution.

The graph is fixed, so backpropagation is scheduled by hand instead of
through a general autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import backend
from .layers import (
    BNParams,
    ConvParams,
    avgpool3d,
    avgpool3d_backward,
    batchnorm,
    batchnorm_backward,
    conv3d,
    conv3d_backward,
    maxpool3d,
    maxpool3d_backward,
    relu,
    relu_backward,
    transposed_conv3d,
    transposed_conv3d_backward,
)
from .volume import FeatureMap, Volume, pyramid_dims
from .warp import DeformationField

VARIANTS = ("multires", "no_pool", "coarse_interp")

# (name, kind, out_channels, in_channels); conv kernels are all k=3.
_TRUNK = [
    ("conv1", "conv", 32, 2),
    ("bn1", "bn", 32, None),
    ("conv2", "conv", 64, 32),
    ("bn2", "bn", 64, None),
    ("conv3", "conv", 128, 64),
    ("bn3", "bn", 128, None),
]

_LAYER_TABLES = {
    "multires": _TRUNK + [
        ("reg3", "conv", 3, 128),
        ("deconv1", "tconv", 64, 128),
        ("bn4", "bn", 64, None),
        ("reg2", "conv", 3, 64),
        ("deconv2", "tconv", 32, 64),
        ("bn5", "bn", 32, None),
        ("conv4", "conv", 64, 32),
        ("bn6", "bn", 64, None),
        ("reg1", "conv", 3, 64),
    ],
    "no_pool": _TRUNK + [("reg1", "conv", 3, 128)],
    "coarse_interp": _TRUNK + [("reg3", "conv", 3, 128)],
}


@dataclass
class RegNetParams:
    """All learnable parameters of one architecture variant."""

    variant: str
    layers: dict[str, Any]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        expected = layer_table(self.variant)
        names = [name for name, *_ in expected]
        if list(self.layers) != names:
            raise ValueError(
                f"layer set {list(self.layers)} does not match variant "
                f"{self.variant!r} (expected {names})")
        for name, kind, out_ch, in_ch in expected:
            layer = self.layers[name]
            if kind == "bn":
                if not isinstance(layer, BNParams) or layer.channels != out_ch:
                    raise ValueError(f"layer {name} must be BN over {out_ch} channels")
            else:
                if not isinstance(layer, ConvParams) or \
                        layer.weights.shape[:2] != (out_ch, in_ch):
                    raise ValueError(
                        f"layer {name} must map {in_ch} -> {out_ch} channels")

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in a fixed order."""
        out: dict[str, np.ndarray] = {}
        for name, layer in self.layers.items():
            if isinstance(layer, ConvParams):
                out[f"{name}.weights"] = layer.weights
                out[f"{name}.bias"] = layer.bias
            else:
                out[f"{name}.gamma"] = layer.gamma
                out[f"{name}.beta"] = layer.beta
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Non-trainable state (BN running statistics), fixed order."""
        out: dict[str, np.ndarray] = {}
        for name, layer in self.layers.items():
            if isinstance(layer, BNParams):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        return out


def layer_table(variant: str):
    if variant not in _LAYER_TABLES:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return _LAYER_TABLES[variant]


def loss_level_count(variant: str) -> int:
    return 3 if variant == "multires" else 1


def init_params(variant: str, seed: int, dtype=np.float32) -> RegNetParams:
    """He-style fan-in initialization; regression heads start at exactly zero
    so the initial predicted transform is the identity."""
    rng = np.random.default_rng(seed)
    layers: dict[str, Any] = {}
    for name, kind, out_ch, in_ch in layer_table(variant):
        if kind == "bn":
            layers[name] = BNParams(
                gamma=np.ones(out_ch, dtype=dtype),
                beta=np.zeros(out_ch, dtype=dtype),
                running_mean=np.zeros(out_ch, dtype=dtype),
                running_var=np.ones(out_ch, dtype=dtype),
            )
            continue
        shape = (out_ch, in_ch, 3, 3, 3)
        if name.startswith("reg"):
            weights = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / (in_ch * 27))
            weights = (rng.standard_normal(shape) * std).astype(dtype)
        stride = 2 if kind == "tconv" else 1
        layers[name] = ConvParams(weights=weights, bias=np.zeros(out_ch, dtype=dtype),
                                  stride=stride, padding=(1, 1, 1))
    return RegNetParams(variant=variant, layers=layers)


def _check_input_dims(variant: str, dims) -> None:
    if variant in ("multires", "coarse_interp") and min(dims) < 8:
        raise ValueError(
            f"input dims {tuple(dims)} too small for the pooling depth; "
            "the pooled variants need at least 8 voxels per axis")


def _pool(x, pool_mode):
    if pool_mode == "max":
        return maxpool3d(x, 3, 2)
    if pool_mode == "avg":
        return avgpool3d(x, 3, 2)
    raise ValueError(f"pool_mode must be 'max' or 'avg', got {pool_mode!r}")


def _pool_backward(cache, gy, pool_mode):
    if pool_mode == "max":
        return maxpool3d_backward(cache, gy)
    return avgpool3d_backward(cache, gy)


def forward_batch(params: RegNetParams, fixed: np.ndarray, moving: np.ndarray,
                  mode: str, pool_mode: str = "max"):
    """Batched forward pass on (B, D, H, W) arrays.

    Returns (fields, warped, cache): per-level field arrays (B, 3, d, h, w)
    and warped moving images (B, d, h, w), finest level first.  Each level's
    warp samples the level's own downsampled moving image with the level's
    own field.
    """
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving.shape} dims differ")
    _check_input_dims(params.variant, fixed.shape[1:])
    K = backend.kernels()
    L = params.layers
    dims = pyramid_dims(fixed.shape[1:], 3)
    cache: dict[str, Any] = {"mode": mode, "pool_mode": pool_mode,
                             "in_dims": fixed.shape[1:]}

    x = FeatureMap(np.ascontiguousarray(
        np.stack([fixed, moving], axis=1), dtype=fixed.dtype))

    def conv_block(tag, conv_name, bn_name, inp):
        c, cache[f"{conv_name}.cache"] = conv3d(inp, L[conv_name])
        b, cache[f"{bn_name}.cache"] = batchnorm(c, L[bn_name], mode)
        r, cache[f"{tag}.relu"] = relu(b)
        return r

    variant = params.variant
    if variant == "no_pool":
        r1 = conv_block("blk1", "conv1", "bn1", x)
        r2 = conv_block("blk2", "conv2", "bn2", r1)
        r3 = conv_block("blk3", "conv3", "bn3", r2)
        f0, cache["reg1.cache"] = conv3d(r3, L["reg1"])
        fields = [f0.data]
        moving_levels = [moving]
    else:
        r1 = conv_block("blk1", "conv1", "bn1", x)
        p1, cache["pool1.cache"] = _pool(r1, pool_mode)
        r2 = conv_block("blk2", "conv2", "bn2", p1)
        p2, cache["pool2.cache"] = _pool(r2, pool_mode)
        r3 = conv_block("blk3", "conv3", "bn3", p2)
        f2, cache["reg3.cache"] = conv3d(r3, L["reg3"])
        if variant == "coarse_interp":
            up = K.upsample_trilinear_forward(f2.data, dims[0])
            ratios = np.array([t / s for t, s in zip(dims[0], dims[2])],
                              dtype=up.dtype).reshape(1, 3, 1, 1, 1)
            cache["upsample.src_dims"] = dims[2]
            cache["upsample.ratios"] = ratios
            fields = [up * ratios]
            moving_levels = [moving]
        else:
            d1, cache["deconv1.cache"] = transposed_conv3d(r3, L["deconv1"], dims[1])
            b4, cache["bn4.cache"] = batchnorm(d1, L["bn4"], mode)
            r4, cache["blk4.relu"] = relu(b4)
            f1, cache["reg2.cache"] = conv3d(r4, L["reg2"])
            d2, cache["deconv2.cache"] = transposed_conv3d(r4, L["deconv2"], dims[0])
            b5, cache["bn5.cache"] = batchnorm(d2, L["bn5"], mode)
            r5, cache["blk5.relu"] = relu(b5)
            r6 = conv_block("blk6", "conv4", "bn6", r5)
            f0, cache["reg1.cache"] = conv3d(r6, L["reg1"])
            fields = [f0.data, f1.data, f2.data]
            m0 = moving
            m1 = K.downsample_avg2(m0[:, None])[:, 0]
            m2 = K.downsample_avg2(m1[:, None])[:, 0]
            moving_levels = [m0, m1, m2]

    warped = [K.warp_trilinear_forward(np.ascontiguousarray(m), np.ascontiguousarray(f))
              for m, f in zip(moving_levels, fields)]
    cache["moving_levels"] = moving_levels
    cache["fields"] = fields
    return fields, warped, cache


def backward_batch(params: RegNetParams, cache, g_warped, g_fields):
    """Reverse-mode gradients of the loss w.r.t. every parameter.

    ``g_warped``/``g_fields`` hold per-level upstream gradients (the loss
    module's outputs).  Gradients from the heads accumulate where their
    paths merge in the trunk.
    """
    if cache.get("mode") != "train":
        raise ValueError("backward requires a cache produced by a train-mode forward")
    K = backend.kernels()
    L = params.layers
    pool_mode = cache["pool_mode"]
    variant = params.variant
    grads: dict[str, np.ndarray] = {}

    # total field gradient: regularizer term plus similarity through the warp
    g_field_total = []
    for m, f, gw_l, gf_l in zip(cache["moving_levels"], cache["fields"],
                                g_warped, g_fields):
        g = gf_l + K.warp_trilinear_backward_disp(
            np.ascontiguousarray(m), np.ascontiguousarray(f),
            np.ascontiguousarray(gw_l))
        g_field_total.append(FeatureMap(g.astype(f.dtype, copy=False)))

    def conv_bwd(name, gy, need_gx=True):
        gx, gw, gb = conv3d_backward(cache[f"{name}.cache"], gy, need_gx)
        grads[f"{name}.weights"] = gw
        grads[f"{name}.bias"] = gb
        return gx

    def tconv_bwd(name, gy):
        gx, gw, gb = transposed_conv3d_backward(cache[f"{name}.cache"], gy)
        grads[f"{name}.weights"] = gw
        grads[f"{name}.bias"] = gb
        return gx

    def bn_relu_bwd(tag, bn_name, gy):
        gb_ = relu_backward(cache[f"{tag}.relu"], gy)
        gx, dgamma, dbeta = batchnorm_backward(cache[f"{bn_name}.cache"], gb_)
        grads[f"{bn_name}.gamma"] = dgamma
        grads[f"{bn_name}.beta"] = dbeta
        return gx

    if variant == "no_pool":
        g_r3 = conv_bwd("reg1", g_field_total[0])
        g_c3 = bn_relu_bwd("blk3", "bn3", g_r3)
        g_r2 = conv_bwd("conv3", g_c3)
        g_c2 = bn_relu_bwd("blk2", "bn2", g_r2)
        g_r1 = conv_bwd("conv2", g_c2)
        g_c1 = bn_relu_bwd("blk1", "bn1", g_r1)
        conv_bwd("conv1", g_c1, need_gx=False)
        return grads

    if variant == "coarse_interp":
        g_up = g_field_total[0].data * cache["upsample.ratios"]
        g_f2 = K.upsample_trilinear_backward(
            np.ascontiguousarray(g_up), cache["upsample.src_dims"])
        g_r3 = conv_bwd("reg3", FeatureMap(g_f2))
    else:
        g_r6 = conv_bwd("reg1", g_field_total[0])
        g_c4 = bn_relu_bwd("blk6", "bn6", g_r6)
        g_r5 = conv_bwd("conv4", g_c4)
        g_d2 = bn_relu_bwd("blk5", "bn5", g_r5)
        g_r4 = tconv_bwd("deconv2", g_d2)
        g_r4 = FeatureMap(g_r4.data + conv_bwd("reg2", g_field_total[1]).data)
        g_d1 = bn_relu_bwd("blk4", "bn4", g_r4)
        g_r3 = tconv_bwd("deconv1", g_d1)
        g_r3 = FeatureMap(g_r3.data + conv_bwd("reg3", g_field_total[2]).data)

    g_c3 = bn_relu_bwd("blk3", "bn3", g_r3)
    g_p2 = conv_bwd("conv3", g_c3)
    g_r2 = _pool_backward(cache["pool2.cache"], g_p2, pool_mode)
    g_c2 = bn_relu_bwd("blk2", "bn2", g_r2)
    g_p1 = conv_bwd("conv2", g_c2)
    g_r1 = _pool_backward(cache["pool1.cache"], g_p1, pool_mode)
    g_c1 = bn_relu_bwd("blk1", "bn1", g_r1)
    conv_bwd("conv1", g_c1, need_gx=False)
    return grads


def forward(params: RegNetParams, fixed: Volume, moving: Volume, mode: str,
            pool_mode: str = "max"):
    """Single-pair forward; returns DeformationFields and warped Volumes."""
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed {fixed.dims} and moving {moving.dims} dims differ")
    fields, warped, cache = forward_batch(
        params, fixed.data[None], moving.data[None], mode, pool_mode)
    field_objs = [DeformationField(f[0], level=lvl if len(fields) > 1 else 0)
                  for lvl, f in enumerate(fields)]
    warped_objs = [Volume(w[0]) for w in warped]
    return field_objs, warped_objs, cache


def predict_field(params: RegNetParams, fixed: Volume, moving: Volume,
                  pool_mode: str = "max") -> DeformationField:
    """Infer-mode forward returning the full-resolution field only."""
    fields, _, _ = forward_batch(
        params, fixed.data[None], moving.data[None], "infer", pool_mode)
    return DeformationField(fields[0][0], level=0)
