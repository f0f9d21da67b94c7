"""Registration quality metrics and the synthetic-deformation generator that
makes desk-scale end-to-end testing possible without clinical data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import LabelVolume, Volume
from .warp import DeformationField, warp_labels_nearest, warp_trilinear


@dataclass(frozen=True)
class DiceReport:
    """Per-label Dice overlap plus the mean over the requested labels."""

    per_label: dict[int, float]
    mean: float
    labels: tuple[int, ...]

    def csv_text(self) -> str:
        lines = [f"{lab},{self.per_label[lab]:.6f}" for lab in self.labels]
        lines.append(f"mean,{self.mean:.6f}")
        return "\n".join(lines) + "\n"


def dice(a: LabelVolume, b: LabelVolume, labels) -> DiceReport:
    """Dice index per label: 2|A∩B| / (|A| + |B|).

    Both-empty counts as 1, exactly one empty as 0.
    """
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    labels = tuple(int(l) for l in labels)
    if not labels:
        raise ValueError("labels list must be non-empty")
    per = {}
    for lab in labels:
        in_a = a.data == lab
        in_b = b.data == lab
        na = int(in_a.sum())
        nb = int(in_b.sum())
        if na == 0 and nb == 0:
            per[lab] = 1.0
        elif na == 0 or nb == 0:
            per[lab] = 0.0
        else:
            per[lab] = 2.0 * int((in_a & in_b).sum()) / (na + nb)
    return DiceReport(per, sum(per.values()) / len(labels), labels)


def endpoint_error(f: DeformationField, g: DeformationField) -> tuple[float, float]:
    """Mean and max Euclidean norm of the per-voxel field difference."""
    if f.dims != g.dims:
        raise ValueError(f"dims mismatch: {f.dims} vs {g.dims}")
    diff = f.disp.astype(np.float64) - g.disp.astype(np.float64)
    norms = np.sqrt((diff * diff).sum(axis=0))
    return float(norms.mean()), float(norms.max())


def mean_volume(volumes: list[Volume]) -> Volume:
    """Voxelwise arithmetic mean of equally sized volumes."""
    if not volumes:
        raise ValueError("mean_volume needs at least one volume")
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise ValueError(f"dims mismatch: {v.dims} vs {dims}")
    acc = np.zeros(dims, dtype=np.float64)
    for v in volumes:
        acc += v.data
    return Volume((acc / len(volumes)).astype(volumes[0].data.dtype),
                  volumes[0].spacing)


def synth_deformation(dims, amplitude: float, smoothness_sigma: float,
                      seed: int) -> DeformationField:
    """Gaussian-smoothed white noise rescaled so the max voxel displacement
    norm equals ``amplitude`` (zero field for amplitude 0)."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if smoothness_sigma <= 0:
        raise ValueError("smoothness sigma must be positive")
    rng = np.random.default_rng(seed)
    disp = rng.standard_normal((3,) + tuple(dims))
    if amplitude == 0:
        return DeformationField(np.zeros_like(disp, dtype=np.float32), level=0)
    for c in range(3):
        disp[c] = gaussian_filter(disp[c], sigma=smoothness_sigma)
    norms = np.sqrt((disp * disp).sum(axis=0))
    peak = norms.max()
    if peak > 0:
        disp *= amplitude / peak
    return DeformationField(disp.astype(np.float32), level=0)


def synth_base_volume(dims, seed: int, n_blobs: int = 10) -> Volume:
    """Sum of randomly placed 3D Gaussian blobs plus a low-frequency ramp,
    normalized to [0, 1]; textured enough that NCC is informative."""
    rng = np.random.default_rng(seed)
    D, H, W = dims
    grid = np.stack(np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                                indexing="ij")).astype(np.float64)
    img = np.zeros((D, H, W), dtype=np.float64)
    for _ in range(n_blobs):
        center = rng.uniform([0, 0, 0], [D - 1, H - 1, W - 1])
        sigma = rng.uniform(min(dims) / 10.0, min(dims) / 4.0)
        amp = rng.uniform(0.4, 1.0)
        d2 = ((grid - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        img += amp * np.exp(-d2 / (2.0 * sigma * sigma))
    ramp = (grid[0] / max(D - 1, 1) + grid[1] / max(H - 1, 1)
            + grid[2] / max(W - 1, 1)) / 3.0
    img += 0.3 * ramp
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return Volume(img.astype(np.float32))


def make_sphere_labels(dims, seed: int, n_spheres: int = 3,
                       radius: float | None = None) -> LabelVolume:
    """Non-overlapping spherical labels 1..n at random interior centers."""
    rng = np.random.default_rng(seed)
    D, H, W = dims
    r = radius if radius is not None else max(2.0, min(dims) / 8.0)
    grid = np.stack(np.meshgrid(np.arange(D), np.arange(H), np.arange(W),
                                indexing="ij")).astype(np.float64)
    labels = np.zeros((D, H, W), dtype=np.int32)
    margin = r + 1
    centers = []
    for lab in range(1, n_spheres + 1):
        for _ in range(100):
            c = rng.uniform([margin] * 3, [D - 1 - margin, H - 1 - margin,
                                           W - 1 - margin])
            if all(np.linalg.norm(c - prev) > 2 * r + 1 for prev in centers):
                break
        centers.append(c)
        d2 = ((grid - c.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        labels[d2 <= r * r] = lab
    return LabelVolume(labels)


def synth_pair(base: Volume, field: DeformationField,
               labels: LabelVolume | None = None):
    """Build a (fixed, moving) pair from a base volume and a known field.

    fixed = base; moving = base warped by the field, so a recovered field
    approximately inverts ``field``.  When labels are given they are warped
    consistently (nearest-neighbour) for overlap evaluation.
    """
    if base.dims != field.dims:
        raise ValueError(f"dims mismatch: {base.dims} vs {field.dims}")
    fixed = base
    moving = warp_trilinear(base, field)
    moving_labels = None
    if labels is not None:
        if labels.dims != field.dims:
            raise ValueError(f"label dims mismatch: {labels.dims} vs {field.dims}")
        moving_labels = warp_labels_nearest(labels, field)
    return fixed, moving, moving_labels
