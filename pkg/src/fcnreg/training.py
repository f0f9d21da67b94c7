"""Self-supervised optimization: Adam, pair sampling, the training loop for
single-pair registration and dataset training, and checkpointing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backend, fileio
from .losses import multi_res_loss_grads
from .network import RegNetParams, backward_batch, forward_batch, init_params, loss_level_count
from .volume import Volume

logger = logging.getLogger(__name__)

VALID_POOL_MODES = ("max", "avg")
VALID_TV_MODES = ("anisotropic", "isotropic")
VALID_WEIGHT_ORDERS = ("fine_to_coarse", "coarse_to_fine")


@dataclass
class TrainConfig:
    """Hyperparameters of one training/optimization run."""

    lam: float = 0.01
    loss_weights: tuple[float, float, float] = (1.0, 0.6, 0.3)
    learning_rate: float = 0.001
    iterations: int = 10000
    batch_size: int = 64
    seed: int = 0
    variant: str = "multires"
    deterministic: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pool_mode: str = "max"
    tv_mode: str = "anisotropic"
    weight_order: str = "fine_to_coarse"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights must have exactly 3 entries")
        if self.pool_mode not in VALID_POOL_MODES:
            raise ValueError(f"pool_mode must be one of {VALID_POOL_MODES}")
        if self.tv_mode not in VALID_TV_MODES:
            raise ValueError(f"tv_mode must be one of {VALID_TV_MODES}")
        if self.weight_order not in VALID_WEIGHT_ORDERS:
            raise ValueError(f"weight_order must be one of {VALID_WEIGHT_ORDERS}")

    def effective_weights(self, variant: str | None = None) -> tuple[float, ...]:
        """Loss weights by pyramid level, level 0 first.

        The single-loss variants always weight their one level by 1."""
        v = variant or self.variant
        if loss_level_count(v) == 1:
            return (1.0,)
        if self.weight_order == "fine_to_coarse":
            return tuple(self.loss_weights)
        return tuple(reversed(self.loss_weights))


@dataclass
class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in tensors.items()},
                   v={k: np.zeros_like(a) for k, a in tensors.items()},
                   t=0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    lr = config.learning_rate
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"{name} with shape {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def sample_pairs(n_images: int, rng: np.random.Generator) -> tuple[int, int]:
    """One uniform draw from the n*(n-1) ordered (fixed, moving) pairs."""
    if n_images < 2:
        raise ValueError("pair sampling needs at least 2 images")
    k = int(rng.integers(n_images * (n_images - 1)))
    i = k // (n_images - 1)
    r = k % (n_images - 1)
    j = r if r < i else r + 1
    return i, j


def _image_pyramids(images: list[Volume], levels: int) -> list[list[np.ndarray]]:
    """Per-image fixed-side pyramids, computed once up front."""
    K = backend.kernels()
    pyramids = []
    for img in images:
        lvl = [np.ascontiguousarray(img.data, dtype=np.float32)]
        for _ in range(levels - 1):
            lvl.append(K.downsample_avg2(lvl[-1][None, None])[0, 0])
        pyramids.append(lvl)
    return pyramids


def train(images: list[Volume], config: TrainConfig,
          checkpoint_fn: Callable[[int, RegNetParams, AdamState], None] | None = None,
          single_pair: bool = False,
          checkpoint_every: int = 500):
    """Run the self-supervised training loop.

    Dataset mode samples ordered (fixed, moving) pairs uniformly each step;
    single-pair mode always trains on (images[0], images[1]) with batch 1 (the
    registration of that pair is the training procedure).  Returns
    (params, adam_state, history) where history is a list of
    (step, LossReport).
    """
    if len(images) < 2:
        raise ValueError("training needs at least 2 images (or one fixed/moving pair)")
    dims = images[0].dims
    for img in images[1:]:
        if img.dims != dims:
            raise ValueError(f"all images must share dims; got {img.dims} vs {dims}")
    levels = loss_level_count(config.variant)
    weights = config.effective_weights()
    isotropic = config.tv_mode == "isotropic"
    rng = np.random.default_rng(config.seed)
    params = init_params(config.variant, config.seed)
    tensors = params.tensors()
    state = AdamState.fresh(tensors)
    pyramids = _image_pyramids(images, levels)
    batch = 1 if single_pair else config.batch_size
    history = []

    for step in range(1, config.iterations + 1):
        if single_pair:
            pair_idx = [(0, 1)]
        else:
            pair_idx = [sample_pairs(len(images), rng) for _ in range(batch)]
        fixed_b = np.stack([pyramids[i][0] for i, _ in pair_idx])
        moving_b = np.stack([pyramids[j][0] for _, j in pair_idx])
        fields, warped, cache = forward_batch(
            params, fixed_b, moving_b, "train", config.pool_mode)
        fixed_levels = [np.stack([pyramids[i][lvl] for i, _ in pair_idx])
                        for lvl in range(levels)]
        report, g_warped, g_fields = multi_res_loss_grads(
            fixed_levels, warped, fields, config.lam, weights, isotropic)
        grads = backward_batch(params, cache, g_warped, g_fields)
        adam_step(tensors, grads, state, config)
        history.append((step, report))
        if step % 100 == 0 or step == 1:
            gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            logger.info("step %d: total=%.6f grad_norm=%.4g", step, report.total, gnorm)
        if checkpoint_fn is not None and (step % checkpoint_every == 0
                                          or step == config.iterations):
            checkpoint_fn(step, params, state)
    return params, state, history


def save_checkpoint(params: RegNetParams, adam_state: AdamState | None,
                    config: TrainConfig, path) -> None:
    fileio.save_checkpoint(path, params, adam_state, config)


def load_checkpoint(path):
    return fileio.load_checkpoint(path)
