"""Test-time statistics machinery over a frozen model.

Snapshot naming follows NS_<data>^<ap>: the statistics obtained by streaming
<data> inputs through the affine set <ap>. Vanilla sets are NS_clean^clean /
NS_adv^adv; the re-calibrated crosses (e.g. NS_clean^adv) isolate the effect
of input domain from the effect of affine-parameter choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import pgd, uniform_noise
from .errors import ConfigurationError
from .models import Model
from .normcore import BranchTag, NormStats, select_params
from .train import Deployment, evaluate

DATA_SOURCES = ("clean", "adv", "noisy")


@dataclass
class StatsSnapshot:
    ap_source: str
    data_source: str
    per_layer: list          # NormStats per norm layer, model order
    layer_names: list
    converged: bool = True
    passes: int = 0

    @property
    def label(self):
        return f"NS_{self.data_source}^{self.ap_source}"


@dataclass
class AffineSnapshot:
    source: str              # "clean" / "adv"
    per_layer: list          # AffineParams per norm layer
    layer_names: list

    @property
    def label(self):
        return f"AP_{self.source}"


@dataclass
class GapEntry:
    layer_index: int
    layer_name: str
    d_mu: float = 0.0
    d_sigma: float = 0.0
    d_gamma: float = 0.0
    d_beta: float = 0.0


@dataclass
class GapReport:
    left: str
    right: str
    kind: str                # "stats" | "affine"
    entries: list = field(default_factory=list)

    def median(self, column):
        return float(np.median([getattr(e, column) for e in self.entries]))


def stats_snapshot(model: Model, branch: BranchTag) -> StatsSnapshot:
    """The stored running statistics routed for `branch` (vanilla NS)."""
    per_layer, names = [], []
    for name, st in model.named_norm_layers():
        if not st.stats:
            raise ConfigurationError(f"layer {name} keeps no running statistics")
        sid, _ = select_params(st, branch)
        per_layer.append(st.stats[sid].copy())
        names.append(name)
    tag = branch.name.lower()
    return StatsSnapshot(tag, tag, per_layer, names)


def affine_snapshot(model: Model, branch: BranchTag) -> AffineSnapshot:
    per_layer, names = [], []
    for name, st in model.named_norm_layers():
        _, aid = select_params(st, branch)
        per_layer.append(st.affine[aid].copy())
        names.append(name)
    return AffineSnapshot(branch.name.lower(), per_layer, names)


def _stats_delta(prev, cur, eps):
    """Scale-relative change between consecutive snapshots."""
    worst = 0.0
    for p, c in zip(prev, cur):
        scale = np.sqrt(p.var + eps)
        worst = max(worst,
                    float(np.max(np.abs(c.mean - p.mean) / scale)),
                    float(np.max(np.abs(c.var - p.var) / (p.var + eps))))
    return worst


def recalibrate(model: Model, ap_choice: BranchTag, data_source: str, dataset,
                attack=None, max_passes: int = 10, tol: float = 1e-3,
                rng=None, batch_size: int = 256) -> StatsSnapshot:
    """Recompute running statistics under a chosen affine set and data source.

    Statistics are reset to (mean 0, var 1) and then accumulated exactly as
    in training (current-batch moments, momentum updates, gradients off)
    until the largest scale-relative per-channel change between consecutive
    passes over the data drops below `tol`, or `max_passes` is reached. The
    input model is never mutated.

    dataset: (x, y) arrays; labels are only needed when data_source="adv",
    where PGD examples are generated once against the deployed (eval-mode)
    configuration of `ap_choice`.
    """
    if data_source not in DATA_SOURCES:
        raise ConfigurationError(f"data_source must be one of {DATA_SOURCES}")
    x, y = dataset
    if rng is None:
        rng = np.random.default_rng(0)

    if data_source == "adv":
        if attack is None:
            raise ConfigurationError("adv data source requires an attack config")
        parts = []
        for i in range(0, len(x), batch_size):
            parts.append(pgd(model, x[i:i + batch_size], y[i:i + batch_size],
                             ap_choice, "default", attack, rng,
                             stats_mode="eval"))
        x = np.concatenate(parts)
    elif data_source == "noisy":
        if attack is None:
            raise ConfigurationError(
                "noisy data source requires an attack config (epsilon = magnitude)"
            )
        x = uniform_noise(x, attack.epsilon, rng)

    work = model.copy()
    states = [st for _, st in work.named_norm_layers()]
    names = [name for name, _ in work.named_norm_layers()]
    for st in states:
        if not st.stats:
            raise ConfigurationError("model keeps no running statistics")
        sid, _ = select_params(st, ap_choice)
        st.stats[sid] = NormStats(
            np.zeros(st.channels, dtype=st.dtype),
            np.ones(st.channels, dtype=st.dtype),
            st.config.momentum,
        )

    def current():
        out = []
        for st in states:
            sid, _ = select_params(st, ap_choice)
            out.append(st.stats[sid].copy())
        return out

    snap = current()
    eps = states[0].config.eps if states else 1e-5
    converged = max_passes == 0
    passes = 0
    for passes in range(1, max_passes + 1):
        for i in range(0, len(x), batch_size):
            work.forward(x[i:i + batch_size], ap_choice, train_mode=True,
                         update_running=True)
        new = current()
        if _stats_delta(snap, new, eps) < tol:
            snap = new
            converged = True
            break
        snap = new
    if not converged:
        warnings.warn(
            f"re-calibration did not converge within {max_passes} passes",
            RuntimeWarning,
        )
    return StatsSnapshot(ap_choice.name.lower(), data_source, snap, names,
                         converged=converged, passes=passes)


def recombine_eval(model: Model, ns_source, ap_choice: BranchTag, test_x,
                   test_y, attack, rng, batch_size: int = 256):
    """Evaluate an arbitrary (NS, AP) pairing.

    ns_source: StatsSnapshot or BranchTag (stored set). The snapshot is
    installed into a copy routed for `ap_choice`; accuracy is then measured
    by the standard harness, PGD white-box against the installed pairing.
    """
    dep = Deployment(branch=ap_choice, ns=ns_source)
    return evaluate(model, dep, test_x, test_y, attack, rng,
                    batch_size=batch_size)


def wasserstein_1d(a, b) -> float:
    """1-Wasserstein distance between equal-size empirical distributions:
    sort both, average the absolute differences of the paired order stats."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"expected equal-length vectors, got {a.shape}, {b.shape}")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def gap_report(left, right) -> GapReport:
    """Per-layer Wasserstein gaps between two snapshots of the same kind.

    Stats snapshots compare mu and sigma (= sqrt of stored variance); affine
    snapshots compare gamma and beta.
    """
    if isinstance(left, StatsSnapshot) != isinstance(right, StatsSnapshot):
        raise ConfigurationError("cannot compare statistics with affine sets")
    if len(left.per_layer) != len(right.per_layer):
        raise ConfigurationError("layer structure mismatch")
    rep = GapReport(left.label, right.label,
                    "stats" if isinstance(left, StatsSnapshot) else "affine")
    for i, (l, r, name) in enumerate(zip(left.per_layer, right.per_layer,
                                         left.layer_names)):
        e = GapEntry(i, name)
        if rep.kind == "stats":
            e.d_mu = wasserstein_1d(l.mean, r.mean)
            e.d_sigma = wasserstein_1d(np.sqrt(l.var), np.sqrt(r.var))
        else:
            e.d_gamma = wasserstein_1d(l.gamma, r.gamma)
            e.d_beta = wasserstein_1d(l.beta, r.beta)
        rep.entries.append(e)
    return rep


def export_channels(sources, layer_name, k, seed):
    """Rows of per-channel values for `k` deterministically sampled channels.

    sources: mapping {variant label: StatsSnapshot | AffineSnapshot}. Every
    variant must contain `layer_name`. Returns dict rows with keys
    (channel, variant, mu, sigma, gamma, beta); fields not applicable to the
    variant kind are None.
    """
    if not sources:
        raise ConfigurationError("no sources given")
    rows = []
    chosen = None
    for label, snap in sources.items():
        if layer_name not in snap.layer_names:
            raise ConfigurationError(
                f"unknown layer {layer_name!r} in source {label!r}"
            )
        li = snap.layer_names.index(layer_name)
        entry = snap.per_layer[li]
        size = (entry.mean if isinstance(entry, NormStats) else entry.gamma).size
        if chosen is None:
            if not 1 <= k <= size:
                raise ConfigurationError(f"k={k} outside [1, {size}]")
            rng = np.random.default_rng(seed)
            chosen = np.sort(rng.choice(size, size=k, replace=False))
        for c in chosen:
            if isinstance(entry, NormStats):
                rows.append({"channel": int(c), "variant": label,
                             "mu": float(entry.mean[c]),
                             "sigma": float(np.sqrt(entry.var[c])),
                             "gamma": None, "beta": None})
            else:
                rows.append({"channel": int(c), "variant": label,
                             "mu": None, "sigma": None,
                             "gamma": float(entry.gamma[c]),
                             "beta": float(entry.beta[c])})
    return rows
