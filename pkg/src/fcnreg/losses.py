"""The self-supervision objective: NCC similarity, total-variation smoothing,
and their weighted multi-resolution combination.

The composite objective per level is  -NCC(fixed, warped) + lambda * TV(field);
the total is the weight-coefficient sum over pyramid levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume
from .warp import DeformationField

NCC_EPS = 1e-8
CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class LossReport:
    """Per-level and total objective values for one evaluation."""

    ncc: tuple[float, ...]
    tv: tuple[float, ...]
    weighted: tuple[float, ...]
    total: float
    weights: tuple[float, ...]
    lam: float

    def csv_row(self, step: int) -> str:
        ncc = list(self.ncc) + [0.0] * (3 - len(self.ncc))
        tv = list(self.tv) + [0.0] * (3 - len(self.tv))
        vals = [self.total] + ncc + tv
        return ",".join([str(step)] + [f"{v:.9g}" for v in vals])

    @staticmethod
    def csv_header() -> str:
        return "step,total,ncc_l0,ncc_l1,ncc_l2,tv_l0,tv_l1,tv_l2"


def _ncc_arrays(a: np.ndarray, b: np.ndarray, eps: float = NCC_EPS):
    """Global NCC of two equal-shape arrays plus the gradient w.r.t. b."""
    a = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    ac = a - a.mean()
    bc = b64 - b64.mean()
    va = np.sqrt((ac * ac).sum() + eps)
    vb = np.sqrt((bc * bc).sum() + eps)
    cross = (ac * bc).sum()
    value = cross / (va * vb)
    grad = ac / (va * vb) - bc * (cross / (va * vb ** 3))
    return float(value), grad


def ncc(a: Volume, b: Volume):
    """Normalized cross-correlation in [-1, 1] with gradient w.r.t. b's voxels."""
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")
    if a.data.size < 2:
        raise ValueError("NCC needs at least 2 voxels")
    value, grad = _ncc_arrays(a.data, b.data)
    return value, grad.astype(b.data.dtype, copy=False)


def _tv_arrays(disp: np.ndarray, eps_c: float = CHARBONNIER_EPS):
    """Charbonnier-smoothed total variation of a (3, D, H, W) field.

    Forward differences along each axis; differences past the far border do
    not contribute.  The value is averaged over the field's voxel count and
    offset by -eps_c per term so constant fields score exactly zero.
    """
    if eps_c <= 0:
        raise ValueError("Charbonnier epsilon must be positive")
    d = disp.astype(np.float64, copy=False)
    n_vox = d[0].size
    grad = np.zeros_like(d)
    total = 0.0
    for axis in range(3):
        ax = axis + 1
        fwd = np.diff(d, axis=ax)
        root = np.sqrt(fwd * fwd + eps_c * eps_c)
        total += (root - eps_c).sum()
        dterm = fwd / root
        sl_lo = [slice(None)] * 4
        sl_hi = [slice(None)] * 4
        sl_lo[ax] = slice(0, -1)
        sl_hi[ax] = slice(1, None)
        grad[tuple(sl_lo)] -= dterm
        grad[tuple(sl_hi)] += dterm
    return total / n_vox, grad / n_vox


def _tv_arrays_isotropic(disp: np.ndarray, eps_c: float = CHARBONNIER_EPS):
    """Isotropic variant: one Charbonnier term per (voxel, channel) over the
    Euclidean norm of the three axis differences (far-border diffs zero)."""
    if eps_c <= 0:
        raise ValueError("Charbonnier epsilon must be positive")
    d = disp.astype(np.float64, copy=False)
    n_vox = d[0].size
    diffs = []
    for axis in range(3):
        ax = axis + 1
        fwd = np.zeros_like(d)
        sl = [slice(None)] * 4
        sl[ax] = slice(0, -1)
        fwd[tuple(sl)] = np.diff(d, axis=ax)
        diffs.append(fwd)
    sq = sum(f * f for f in diffs)
    root = np.sqrt(sq + eps_c * eps_c)
    total = (root - eps_c).sum()
    grad = np.zeros_like(d)
    for axis, fwd in enumerate(diffs):
        ax = axis + 1
        dterm = fwd / root
        sl_lo = [slice(None)] * 4
        sl_lo[ax] = slice(0, -1)
        sl_hi = [slice(None)] * 4
        sl_hi[ax] = slice(1, None)
        dterm_lo = dterm[tuple(sl_lo)]
        grad[tuple(sl_lo)] -= dterm_lo
        grad[tuple(sl_hi)] += dterm_lo
    return total / n_vox, grad / n_vox


def tv_l1(field: DeformationField, epsilon_c: float = CHARBONNIER_EPS,
          isotropic: bool = False):
    """Total-variation regularizer value and gradient w.r.t. the field."""
    if isotropic:
        value, grad = _tv_arrays_isotropic(field.disp, epsilon_c)
    else:
        value, grad = _tv_arrays(field.disp, epsilon_c)
    return value, grad.astype(field.disp.dtype, copy=False)


def multi_res_loss(fixed_pyramid: list[Volume], warped: list[Volume],
                   fields: list[DeformationField], lam: float,
                   weights: tuple[float, ...], isotropic_tv: bool = False) -> LossReport:
    """Weighted multi-level objective; level 0 is full resolution."""
    report, _, _ = multi_res_loss_grads(
        [v.data for v in fixed_pyramid], [v.data for v in warped],
        [f.disp for f in fields], lam, weights, isotropic_tv)
    return report


def multi_res_loss_grads(fixed_levels, warped_levels, field_levels, lam, weights,
                         isotropic_tv: bool = False):
    """Batched core: arrays (B, d, h, w) / (B, 3, d, h, w) per level.

    Returns (LossReport, per-level gradients w.r.t. warped intensities,
    per-level gradients w.r.t. fields).  NCC and TV average over the batch.
    Unbatched (d, h, w) arrays are promoted to batch 1.
    """
    n_levels = len(fixed_levels)
    if not (len(warped_levels) == len(field_levels) == n_levels):
        raise ValueError("pyramid, warped and field level counts must agree")
    if len(weights) < n_levels:
        raise ValueError(f"need {n_levels} loss weights, got {len(weights)}")
    ncc_vals, tv_vals, weighted = [], [], []
    g_warped, g_fields = [], []
    total = 0.0
    for lvl in range(n_levels):
        fx = np.asarray(fixed_levels[lvl])
        wp = np.asarray(warped_levels[lvl])
        fd = np.asarray(field_levels[lvl])
        if fx.ndim == 3:
            fx, wp, fd = fx[None], wp[None], fd[None]
        if fx.shape != wp.shape or fd.shape[-3:] != fx.shape[-3:]:
            raise ValueError(f"level {lvl} dims mismatch")
        batch = fx.shape[0]
        w_l = float(weights[lvl])
        ncc_sum = 0.0
        tv_sum = 0.0
        gw = np.empty_like(wp)
        gf = np.empty_like(fd)
        for b in range(batch):
            v, g = _ncc_arrays(fx[b], wp[b])
            ncc_sum += v
            gw[b] = (-w_l / batch) * g
            tv_v, tv_g = (_tv_arrays_isotropic(fd[b]) if isotropic_tv
                          else _tv_arrays(fd[b]))
            tv_sum += tv_v
            gf[b] = (w_l * lam / batch) * tv_g
        ncc_mean = ncc_sum / batch
        tv_mean = tv_sum / batch
        term = w_l * (-ncc_mean + lam * tv_mean)
        ncc_vals.append(ncc_mean)
        tv_vals.append(tv_mean)
        weighted.append(term)
        total += term
        g_warped.append(gw)
        g_fields.append(gf)
    report = LossReport(tuple(ncc_vals), tuple(tv_vals), tuple(weighted),
                        total, tuple(float(w) for w in weights[:n_levels]), float(lam))
    return report, g_warped, g_fields
