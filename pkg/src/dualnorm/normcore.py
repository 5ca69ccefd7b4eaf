"""Normalization layers with routable statistics and affine parameters.

One layer holds up to two sets of running statistics (NS) and up to two sets
of affine parameters (AP), indexed by the branch of the sample stream that
feeds them. Five routing modes cover the configurations of interest:

========  ===========  ============
mode      stats used   affine used
========  ===========  ============
single    0            0
dual      branch       branch
cross     other        branch
dual_ap   0            branch
dual_ns   branch       0
========  ===========  ============

Batch kind normalizes per channel over (batch, spatial) and keeps running
averages; layer/group/instance kinds normalize per sample and keep no
running state. Variance is population (divide by m) everywhere, including
running updates -- note this differs from frameworks that store unbiased
running variance.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, NumericalError


class BranchTag(Enum):
    CLEAN = 0
    ADV = 1

    @property
    def other(self):
        return BranchTag.ADV if self is BranchTag.CLEAN else BranchTag.CLEAN


class NormKind(Enum):
    BATCH = "bn"
    LAYER = "ln"
    GROUP = "gn"
    INSTANCE = "in"


class NormMode(Enum):
    SINGLE = "single"
    DUAL = "dual"
    CROSS = "cross"
    DUAL_AP_ONLY = "dual_ap"
    DUAL_NS_ONLY = "dual_ns"


@dataclass
class NormConfig:
    kind: NormKind = NormKind.BATCH
    mode: NormMode = NormMode.SINGLE
    eps: float = 1e-5
    momentum: float = 0.1
    group_count: int = 8

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = NormKind(self.kind)
        if isinstance(self.mode, str):
            self.mode = NormMode(self.mode)
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be > 0, got {self.eps}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in [0,1], got {self.momentum}")
        if self.kind is NormKind.GROUP and self.group_count < 1:
            raise ConfigurationError("group_count must be a positive integer")


@dataclass
class NormStats:
    """Per-channel running mean/variance with its update momentum."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.var = np.asarray(self.var)
        if self.mean.shape != self.var.shape:
            raise ConfigurationError("mean/var length mismatch")
        if np.any(self.var < 0):
            raise NumericalError("negative variance entries")

    def copy(self):
        return NormStats(self.mean.copy(), self.var.copy(), self.momentum)


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        if self.gamma.shape != self.beta.shape:
            raise ConfigurationError("gamma/beta length mismatch")

    def copy(self):
        return AffineParams(self.gamma.copy(), self.beta.copy())


def update_running(stats: NormStats, batch_mean, batch_var) -> NormStats:
    """Exponential update r <- (1-momentum)*r + momentum*b, for mean and var."""
    batch_mean = np.asarray(batch_mean)
    batch_var = np.asarray(batch_var)
    if batch_mean.shape != stats.mean.shape or batch_var.shape != stats.var.shape:
        raise ConfigurationError("batch moment shape mismatch")
    if np.any(batch_var < 0):
        raise NumericalError("negative batch variance")
    m = stats.momentum
    return NormStats(
        (1.0 - m) * stats.mean + m * batch_mean,
        (1.0 - m) * stats.var + m * batch_var,
        m,
    )


def _chan_sum(x, channels):
    """Per-channel sum over batch and spatial axes."""
    return x.reshape(x.shape[0], channels, -1).sum(axis=2).sum(axis=0)


def _chan_dot(a, b, channels):
    """Per-channel sum of a*b without materializing the product."""
    a3 = a.reshape(a.shape[0], channels, -1)
    b3 = b.reshape(b.shape[0], channels, -1)
    return np.einsum("ncp,ncp->c", a3, b3)


# how many (stats, affine) sets each mode carries for the batch kind
_SET_COUNTS = {
    NormMode.SINGLE: (1, 1),
    NormMode.DUAL: (2, 2),
    NormMode.CROSS: (2, 2),
    NormMode.DUAL_AP_ONLY: (1, 2),
    NormMode.DUAL_NS_ONLY: (2, 1),
}


class NormLayerState:
    """State + forward/backward of one normalization layer.

    For per-sample kinds (layer/group/instance) only affine sets exist:
    disentangled statistics are undefined without running state, so modes
    cross/dual_ns are rejected and dual degrades to two affine sets.
    """

    def __init__(self, channels: int, config: NormConfig, dtype=np.float32):
        self.channels = channels
        self.config = config
        self.dtype = np.dtype(dtype)
        n_stats, n_affine = _SET_COUNTS[config.mode]
        if config.kind is not NormKind.BATCH:
            if config.mode in (NormMode.CROSS, NormMode.DUAL_NS_ONLY):
                raise ConfigurationError(
                    f"mode {config.mode.value} undefined for per-sample kind "
                    f"{config.kind.value}"
                )
            n_stats = 0
        if config.kind is NormKind.GROUP and channels % config.group_count:
            raise ConfigurationError(
                f"group_count {config.group_count} does not divide {channels} channels"
            )
        self.stats = [
            NormStats(
                np.zeros(channels, dtype=self.dtype),
                np.ones(channels, dtype=self.dtype),
                config.momentum,
            )
            for _ in range(n_stats)
        ]
        self.affine = [
            AffineParams(
                np.ones(channels, dtype=self.dtype),
                np.zeros(channels, dtype=self.dtype),
            )
            for _ in range(n_affine)
        ]
        self.g_gamma = [np.zeros(channels, dtype=self.dtype) for _ in self.affine]
        self.g_beta = [np.zeros(channels, dtype=self.dtype) for _ in self.affine]

    def copy(self):
        return copy.deepcopy(self)

    # ---- routing ------------------------------------------------------

    def routed_ids(self, branch: BranchTag):
        return select_params(self, branch)

    # ---- forward / backward -------------------------------------------

    def forward(self, x, branch, train_mode, *, update=None, stats_override=None,
                capture=None):
        """Normalize `x`; returns (y, ctx) where ctx drives `backward`.

        branch may be a BranchTag or a per-sample int array (values 0/1) for
        concatenated mixed batches; arrays are only meaningful for modes with
        a single stats set (single / dual_ap).
        update: write the batch moments into the routed running set
        (default: follows train_mode; batch kind only).
        stats_override: normalize with these externally supplied moments,
        treated as constants in the backward pass.
        capture: list collecting (mean, var) of the current batch.
        """
        cfg = self.config
        per_sample_branch = isinstance(branch, np.ndarray)
        if per_sample_branch and cfg.mode not in (NormMode.SINGLE, NormMode.DUAL_AP_ONLY):
            raise ConfigurationError(
                f"per-sample branch tags require a single stats set, mode is {cfg.mode.value}"
            )
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ConfigurationError(
                f"expected [N,{self.channels},...] activations, got {x.shape}"
            )
        if x.shape[0] == 0:
            raise ValueError("empty batch")
        # single fused reduction instead of a full isfinite pass; any nan/inf
        # in x makes the sum non-finite
        if not np.isfinite(x.sum()):
            raise NumericalError("non-finite activations entering normalization")

        stats_id, affine_id = select_params(
            self, BranchTag.CLEAN if per_sample_branch else branch
        )

        # resolve the affine vectors (per channel, possibly routed per sample)
        col = (1, self.channels) + (1,) * (x.ndim - 2)
        if per_sample_branch:
            if len(self.affine) < 2:
                gsel = np.zeros(x.shape[0], dtype=np.intp)
            else:
                gsel = np.asarray(branch, dtype=np.intp)
            pcol = (x.shape[0], self.channels) + (1,) * (x.ndim - 2)
            gam = np.stack([a.gamma for a in self.affine])[gsel].reshape(pcol)
            bet = np.stack([a.beta for a in self.affine])[gsel].reshape(pcol)
            sel = gsel
        else:
            ap = self.affine[affine_id]
            gam = ap.gamma.reshape(col)
            bet = ap.beta.reshape(col)
            sel = affine_id

        if cfg.kind is NormKind.BATCH:
            y, ctx = self._forward_batch_kind(
                x, stats_id, train_mode, update, stats_override, capture,
                gam, bet,
            )
        else:
            y, ctx = self._forward_per_sample_kind(x, gam, bet)
        ctx["affine_sel"] = sel
        ctx["gamma_b"] = gam
        return y, ctx

    def _forward_batch_kind(self, x, stats_id, train_mode, update,
                            stats_override, capture, gam, bet):
        cfg = self.config
        col = (1, self.channels) + (1,) * (x.ndim - 2)
        if train_mode and stats_override is None:
            x3 = x.reshape(x.shape[0], self.channels, -1)
            cnt = x3.shape[0] * x3.shape[2]
            bm = x3.mean(axis=2).mean(axis=0)
            sq = np.einsum("ncp,ncp->c", x3, x3) / cnt
            bv = np.maximum(sq - bm * bm, 0.0)  # population variance
            if capture is not None:
                capture.append((bm.copy(), bv.copy()))
            if update is None:
                update = True
            if update and self.stats:
                self.stats[stats_id] = update_running(self.stats[stats_id],
                                                      bm, bv)
            mean, var, through = bm, bv, True
        else:
            if stats_override is not None:
                mean, var = stats_override.mean, stats_override.var
            else:
                st = self.stats[stats_id]
                mean, var = st.mean, st.var
            through = False
        s = 1.0 / np.sqrt(var + cfg.eps)
        # y = x * (gamma*s) + (beta - mean*gamma*s); xhat is rebuilt lazily
        # in backward from (x, mean, s) to save a full pass here
        a = gam * s.reshape(col)
        y = x * a
        y += bet - mean.reshape(col) * a
        return y, {"path": "bn", "x": x, "m": mean, "s": s,
                   "through_moments": through,
                   "count": x.size // self.channels}

    def _forward_per_sample_kind(self, x, gam, bet):
        cfg = self.config
        n = x.shape[0]
        if cfg.kind is NormKind.LAYER:
            gshape = (n, 1, -1)
        elif cfg.kind is NormKind.INSTANCE:
            if x.ndim < 3:
                raise ConfigurationError("instance kind requires spatial dimensions")
            gshape = (n, self.channels, -1)
        else:  # GROUP
            gshape = (n, cfg.group_count, -1)
        xg = x.reshape(gshape)
        m = xg.mean(axis=2, keepdims=True)
        v = xg.var(axis=2, keepdims=True)
        s = 1.0 / np.sqrt(v + cfg.eps)
        xhat = ((xg - m) * s).reshape(x.shape)
        y = xhat * gam + bet
        return y, {"path": "group", "xhat": xhat, "s": s,
                   "through_moments": True, "gshape": gshape}

    def _bn_xhat(self, ctx):
        col = (1, self.channels) + (1,) * (ctx["x"].ndim - 2)
        return (ctx["x"] - ctx["m"].reshape(col)) * ctx["s"].reshape(col)

    def backward(self, dy, ctx, *, accumulate=True):
        """Gradient of forward; accumulates affine grads, returns dx."""
        bn = ctx["path"] == "bn"
        xhat = None
        if accumulate or (bn and ctx["through_moments"]):
            xhat = self._bn_xhat(ctx) if bn else ctx["xhat"]
        if accumulate:
            sel = ctx["affine_sel"]
            if isinstance(sel, np.ndarray):
                for set_id in range(len(self.affine)):
                    rows = sel == set_id
                    if rows.any():
                        self.g_gamma[set_id] += _chan_dot(
                            dy[rows], xhat[rows], self.channels
                        ).astype(self.dtype, copy=False)
                        self.g_beta[set_id] += _chan_sum(
                            dy[rows], self.channels
                        ).astype(self.dtype, copy=False)
            else:
                self.g_gamma[sel] += _chan_dot(dy, xhat, self.channels).astype(
                    self.dtype, copy=False)
                self.g_beta[sel] += _chan_sum(dy, self.channels).astype(
                    self.dtype, copy=False)

        g = dy * ctx["gamma_b"]
        if not ctx["through_moments"]:
            g *= ctx["s"].reshape((1, self.channels) + (1,) * (dy.ndim - 2))
            return g
        if not bn:  # per-sample kinds: moments in the group view
            gg = g.reshape(ctx["gshape"])
            xg = ctx["xhat"].reshape(ctx["gshape"])
            dx = ctx["s"] * (
                gg
                - gg.mean(axis=2, keepdims=True)
                - xg * (gg * xg).mean(axis=2, keepdims=True)
            )
            return dx.reshape(dy.shape)
        col = (1, self.channels) + (1,) * (dy.ndim - 2)
        cnt = ctx["count"]
        mean_g = (_chan_sum(g, self.channels) / cnt).astype(g.dtype, copy=False)
        mean_gx = (_chan_dot(g, xhat, self.channels) / cnt).astype(g.dtype,
                                                                   copy=False)
        g -= mean_g.reshape(col)
        g -= xhat * mean_gx.reshape(col)
        g *= ctx["s"].reshape(col)
        return g

    # ---- parameter plumbing -------------------------------------------

    def zero_grad(self):
        for ga, gb in zip(self.g_gamma, self.g_beta):
            ga.fill(0.0)
            gb.fill(0.0)

    def parameters(self, prefix=""):
        for i, ap in enumerate(self.affine):
            yield f"{prefix}gamma{i}", ap.gamma, self.g_gamma[i]
            yield f"{prefix}beta{i}", ap.beta, self.g_beta[i]


def select_params(state: NormLayerState, branch: BranchTag):
    """Deterministic (stats set, affine set) routing for a branch tag."""
    mode = state.config.mode
    b = branch.value
    if mode is NormMode.SINGLE:
        ids = (0, 0)
    elif mode is NormMode.DUAL:
        ids = (b, b)
    elif mode is NormMode.CROSS:
        ids = (branch.other.value, b)
    elif mode is NormMode.DUAL_AP_ONLY:
        ids = (0, b)
    else:  # DUAL_NS_ONLY
        ids = (b, 0)
    if state.stats and ids[0] >= len(state.stats):
        raise ConfigurationError(
            f"branch {branch.name}: stats set {ids[0]} absent in mode {mode.value}"
        )
    if ids[1] >= len(state.affine):
        raise ConfigurationError(
            f"branch {branch.name}: affine set {ids[1]} absent in mode {mode.value}"
        )
    return ids


def normalize_forward(state: NormLayerState, x, branch, train_mode,
                      stats_override=None):
    """Pure normalization forward: never mutates running statistics."""
    y, _ = state.forward(
        x, branch, train_mode, update=False, stats_override=stats_override
    )
    return y
