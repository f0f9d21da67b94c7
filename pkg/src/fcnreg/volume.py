"""Dense 3D volume containers and preprocessing.

Volumes hold scalar intensity grids as (D, H, W) arrays, row-major with W
fastest.  Containers are treated as immutable once constructed; the
operations here are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend


@dataclass(frozen=True)
class Volume:
    """A 3D scalar intensity grid, e.g. the fixed or moving image."""

    data: np.ndarray
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume expects a (D, H, W) array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("Volume intensities must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class FeatureMap:
    """Batched multi-channel activations, laid out (batch, channel, D, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ValueError(
                f"FeatureMap expects a (B, C, D, H, W) array, got shape {self.data.shape}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[2:]


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel non-negative integer labels on the same grid as a Volume."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"LabelVolume expects a (D, H, W) array, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError("LabelVolume data must be integer")
        if self.data.size and self.data.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def as_float32(v: Volume) -> Volume:
    if v.data.dtype == np.float32:
        return v
    return Volume(np.ascontiguousarray(v.data, dtype=np.float32), v.spacing)


def downsample_avg2(v):
    """Halve every axis (ceil) by 2x2x2 block averaging with edge truncation.

    Accepts a Volume or a FeatureMap and returns the same kind.
    """
    K = backend.kernels()
    if isinstance(v, Volume):
        out = K.downsample_avg2(np.ascontiguousarray(v.data)[None, None])[0, 0]
        return Volume(out, v.spacing)
    if isinstance(v, FeatureMap):
        return FeatureMap(K.downsample_avg2(np.ascontiguousarray(v.data)))
    raise TypeError(f"expected Volume or FeatureMap, got {type(v).__name__}")


def pyramid_dims(dims: tuple[int, int, int], levels: int) -> list[tuple[int, int, int]]:
    """Per-level grid dims, level 0 full resolution, each level ceil-halved."""
    out = [tuple(dims)]
    for _ in range(levels - 1):
        out.append(tuple((d + 1) // 2 for d in out[-1]))
    return out


def histogram_match(source: Volume, reference: Volume, bins: int = 256) -> Volume:
    """Monotone intensity remap of source towards the reference's histogram.

    Bins span [min, max] of each image; the mapping linearly interpolates
    between CDF knots, so ranks are preserved (ties allowed).  A constant
    source comes back unchanged (the mapping is undefined there).
    """
    if bins < 2:
        raise ValueError("histogram matching needs at least 2 bins")
    if source.data.size == 0 or reference.data.size == 0:
        raise ValueError("histogram matching needs non-empty volumes")
    src = source.data.astype(np.float64, copy=False)
    ref = reference.data.astype(np.float64, copy=False)
    smin, smax = float(src.min()), float(src.max())
    if smin == smax:
        return Volume(source.data.copy(), source.spacing)
    rmin, rmax = float(ref.min()), float(ref.max())

    src_edges = np.linspace(smin, smax, bins + 1)
    src_cdf = np.concatenate(
        [[0.0], np.cumsum(np.histogram(src, bins=bins, range=(smin, smax))[0])])
    src_cdf /= src_cdf[-1]
    if rmin == rmax:
        mapped = np.full_like(src, rmin)
    else:
        ref_edges = np.linspace(rmin, rmax, bins + 1)
        ref_cdf = np.concatenate(
            [[0.0], np.cumsum(np.histogram(ref, bins=bins, range=(rmin, rmax))[0])])
        ref_cdf /= ref_cdf[-1]
        quantiles = np.interp(src.ravel(), src_edges, src_cdf)
        mapped = np.interp(quantiles, ref_cdf, ref_edges).reshape(src.shape)
    return Volume(mapped.astype(source.data.dtype), source.spacing)
