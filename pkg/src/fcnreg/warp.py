"""Differentiable spatial sampling: apply dense deformation fields to volumes.

Displacements are stored in voxel units of the field's own pyramid level
(order: delta-d, delta-h, delta-w); sampling coordinates that leave the
volume clamp to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .volume import LabelVolume, Volume


@dataclass(frozen=True)
class DeformationField:
    """Dense per-voxel displacement vectors at one pyramid level."""

    disp: np.ndarray  # (3, D, H, W)
    level: int = 0

    def __post_init__(self):
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ValueError(
                f"DeformationField expects a (3, D, H, W) array, got shape {self.disp.shape}")
        if not np.isfinite(self.disp).all():
            raise ValueError("displacements must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.disp.shape[1:]


def warp_trilinear(moving: Volume, field: DeformationField) -> Volume:
    """Trilinear sample of moving at v + disp(v); border-clamped."""
    if moving.dims != field.dims:
        raise ValueError(f"dims mismatch: volume {moving.dims} vs field {field.dims}")
    out = backend.kernels().warp_trilinear_forward(
        np.ascontiguousarray(moving.data)[None],
        np.ascontiguousarray(field.disp)[None])[0]
    return Volume(out, moving.spacing)


def warp_trilinear_grad_disp(moving: Volume, field: DeformationField,
                             gy: np.ndarray) -> np.ndarray:
    """Gradient of warp_trilinear w.r.t. the displacement field.

    Piecewise constant within each trilinear cell; zero where the sampling
    coordinate clamped.  No gradient w.r.t. the moving image is produced.
    """
    return backend.kernels().warp_trilinear_backward_disp(
        np.ascontiguousarray(moving.data)[None],
        np.ascontiguousarray(field.disp)[None],
        np.ascontiguousarray(gy)[None])[0]


def warp_labels_nearest(labels: LabelVolume, field: DeformationField) -> LabelVolume:
    """Labels sampled at round(v + disp(v)), clamped; never blended."""
    if labels.dims != field.dims:
        raise ValueError(f"dims mismatch: labels {labels.dims} vs field {field.dims}")
    lab = np.ascontiguousarray(labels.data, dtype=np.int32)
    out = backend.kernels().warp_nearest(lab, np.ascontiguousarray(field.disp))
    return LabelVolume(out.astype(labels.data.dtype, copy=False))


def upsample_field_trilinear(field: DeformationField,
                             target_dims: tuple[int, int, int]) -> DeformationField:
    """Trilinear field upsampling with displacement rescaling.

    Each channel is interpolated to target_dims, then multiplied by the
    axis-wise dimension ratio so the displacements read in target-level
    voxel units.
    """
    if field.level <= 0:
        raise ValueError("upsample_field_trilinear expects a coarse field (level > 0)")
    src_dims = field.dims
    if any(t < s for t, s in zip(target_dims, src_dims)):
        raise ValueError(f"target dims {tuple(target_dims)} smaller than source {src_dims}")
    up = backend.kernels().upsample_trilinear_forward(
        np.ascontiguousarray(field.disp)[None], tuple(target_dims))[0]
    ratios = np.array([t / s for t, s in zip(target_dims, src_dims)],
                      dtype=up.dtype).reshape(3, 1, 1, 1)
    return DeformationField(up * ratios, level=0)
