"""L-inf perturbations: PGD sign-gradient ascent and uniform random noise.

FGSM is pgd with steps=1, random_init=False, step_size=epsilon; there is no
separate code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError
from .losses import per_sample_cross_entropy
from .models import input_gradient

BUDGET_SLACK = 1e-9


@dataclass
class AttackConfig:
    epsilon: float = 8.0 / 255.0
    step_size: float = 2.0 / 255.0
    steps: int = 10
    restarts: int = 1
    random_init: bool = True
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.norm != "linf":
            raise ConfigurationError("only the linf ball is supported")


def _ascend(model, x0, batch, labels, branch, head_select, cfg, train_stats,
            stats_overrides):
    # projection radius shrunk by a few ulps so that the budget invariant
    # survives the rounding of batch + delta in low-precision dtypes
    radius = max(0.0, cfg.epsilon - 8 * np.finfo(batch.dtype).eps)
    x = x0
    for _ in range(cfg.steps):
        g = input_gradient(model, x, labels, branch, head_select=head_select,
                           train_stats=train_stats,
                           stats_overrides=stats_overrides)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite attack gradient; aborting")
        x = x + cfg.step_size * np.sign(g)
        x = batch + np.clip(x - batch, -radius, radius)
        x = np.clip(x, 0.0, 1.0)
    return x


def pgd(model, batch, labels, branch, head_select, cfg: AttackConfig, rng,
        *, stats_mode="eval", stats_overrides=None):
    """Projected sign-gradient ascent on cross-entropy inside the eps ball.

    stats_mode "eval" attacks the deployed running statistics; "batch" uses
    the perturbed batch's own moments, as during training-time generation.
    Running statistics are never updated. With restarts > 1 the per-sample
    worst case (highest final loss) across restarts is returned.
    """
    if stats_mode not in ("eval", "batch"):
        raise ConfigurationError(f"stats_mode {stats_mode!r}")
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return batch
    train_stats = stats_mode == "batch"

    def final_loss(x):
        logits = model.forward(x, branch, train_mode=train_stats,
                               head_select=head_select,
                               stats_overrides=stats_overrides,
                               update_running=False)
        return per_sample_cross_entropy(logits, labels)

    best_x = None
    best_loss = None
    for _ in range(cfg.restarts):
        if cfg.random_init:
            x0 = batch + rng.uniform(-cfg.epsilon, cfg.epsilon,
                                     size=batch.shape).astype(batch.dtype)
            x0 = np.clip(x0, 0.0, 1.0)
        else:
            x0 = batch
        x = _ascend(model, x0, batch, labels, branch, head_select, cfg,
                    train_stats, stats_overrides)
        if cfg.restarts == 1:
            return x
        loss = final_loss(x)
        if best_x is None:
            best_x, best_loss = x, loss
        else:
            better = loss > best_loss
            best_x = np.where(better[:, None, None, None], x, best_x)
            best_loss = np.maximum(loss, best_loss)
    return best_x


def uniform_noise(batch, magnitude, rng):
    """Add i.i.d. Uniform(-magnitude, magnitude) per pixel, clip to [0,1]."""
    if magnitude < 0:
        raise ConfigurationError("magnitude must be >= 0")
    noise = rng.uniform(-magnitude, magnitude, size=batch.shape)
    return np.clip(batch + noise.astype(batch.dtype), 0.0, 1.0)
