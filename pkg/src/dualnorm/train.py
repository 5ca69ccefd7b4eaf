"""Training regimes over one model: adversarial-only, hybrid clean+adversarial
with every normalization routing, KL-regularized hybrid, and dual-head hybrid.
Also the (clean, robust) evaluation harness used everywhere else.

Regime semantics in `train_step`:

* madry        -- PGD batch, adversarial CE only.
* cross_at     -- single-BN model; a no-gradient clean forward records batch
                  statistics into the (only) running set, the adversarial
                  forward is normalized by those captured statistics and
                  alone produces gradients.
* hybrid       -- alpha-weighted clean+adversarial CE. Modes with two stats
                  sets (dual, dual_ns) run two tagged forwards; modes with a
                  mixture stats set (single, dual_ap) run one concatenated
                  forward so the moments come from the clean+adv mixture.
* cross_hybrid -- hybrid with cross routing (two tagged forwards).
* kl_hybrid    -- single-BN hybrid plus kl_weight * KL(clean || adv) on the
                  softmax outputs.
* dual_linear  -- single-BN trunk, separate linear head per branch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attacks import AttackConfig, pgd
from .errors import ConfigurationError
# hybrid_loss and kl_regularizer are re-exported: they belong to this
# module's public surface alongside the train-step machinery
from .losses import (hybrid_loss, kl_regularizer,  # noqa: F401
                     kl_regularizer_with_grads, softmax_cross_entropy)
from .models import Model, build_model
from .normcore import BranchTag, NormMode, NormStats, select_params

REGIMES = ("madry", "cross_at", "hybrid", "cross_hybrid", "kl_hybrid",
           "dual_linear")

_MODE_FOR_REGIME = {
    "madry": (NormMode.SINGLE,),
    "cross_at": (NormMode.SINGLE,),
    "hybrid": (NormMode.SINGLE, NormMode.DUAL, NormMode.DUAL_AP_ONLY,
               NormMode.DUAL_NS_ONLY),
    "cross_hybrid": (NormMode.CROSS,),
    "kl_hybrid": (NormMode.SINGLE,),
    "dual_linear": (NormMode.SINGLE,),
}

# modes whose statistics come from the clean+adversarial mixture, trained
# with one concatenated forward
_CONCAT_MODES = (NormMode.SINGLE, NormMode.DUAL_AP_ONLY)


@dataclass
class RegimeConfig:
    regime: str = "hybrid"
    alpha: float = 0.5
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must be in [0,1]")
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be >= 0")


@dataclass
class OptimConfig:
    epochs: int = 110
    lr: float = 0.1
    decay_epochs: tuple = (100, 105)
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if any(e >= self.epochs for e in self.decay_epochs) and self.epochs > 0:
            raise ConfigurationError("decay epochs must be < total epochs")

    def lr_at(self, epoch):
        lr = self.lr
        for e in self.decay_epochs:
            if epoch >= e:
                lr *= self.decay_factor
        return lr


class SGD:
    """Momentum SGD with coupled L2 weight decay (decay added to the grad)."""

    def __init__(self, model: Model, cfg: OptimConfig):
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(data)
                         for name, data, _ in model.parameters()}
        self.model = model

    def step(self, lr):
        mu = self.cfg.momentum
        wd = self.cfg.weight_decay
        for name, data, grad in self.model.parameters():
            v = self.velocity[name]
            v *= mu
            v += grad + wd * data
            data -= lr * v


def check_regime(regime: RegimeConfig, model: Model):
    allowed = _MODE_FOR_REGIME[regime.regime]
    mode = model.norm_config.mode
    if mode not in allowed:
        raise ConfigurationError(
            f"regime {regime.regime} requires norm mode in "
            f"{[m.value for m in allowed]}, model has {mode.value}"
        )
    if regime.regime == "dual_linear" and len(model.heads) != 2:
        raise ConfigurationError("dual_linear requires a two-head model")


def train_step(model: Model, batch, labels, regime: RegimeConfig,
               attack: AttackConfig, opt: SGD, rng, *, lr):
    """One optimization step; mutates model and optimizer, returns metrics."""
    check_regime(regime, model)
    reg = regime.regime
    alpha = regime.alpha
    n = len(labels)
    adv_head = "adv" if reg == "dual_linear" else "default"
    metrics = {}

    if reg == "madry":
        adv = pgd(model, batch, labels, BranchTag.ADV, "default", attack, rng,
                  stats_mode="batch")
        logits, rec = model.forward_tape(adv, BranchTag.ADV, train_mode=True)
        loss, d = softmax_cross_entropy(logits, labels)
        model.zero_grad()
        model.backward(rec, d)
        opt.step(lr)
        metrics = {"loss": loss, "ce_adv": loss}

    elif reg == "cross_at":
        adv = pgd(model, batch, labels, BranchTag.ADV, "default", attack, rng,
                  stats_mode="batch")
        # clean forward: statistics only, no gradient
        _, caprec = model.forward_tape(batch, BranchTag.CLEAN, train_mode=True,
                                       update_running=True, capture_stats=True)
        overrides = [NormStats(m, v) for m, v in caprec["capture"]]
        logits, rec = model.forward_tape(adv, BranchTag.ADV, train_mode=True,
                                         update_running=False,
                                         stats_overrides=overrides)
        loss, d = softmax_cross_entropy(logits, labels)
        model.zero_grad()
        model.backward(rec, d)
        opt.step(lr)
        metrics = {"loss": loss, "ce_adv": loss}

    elif reg in ("hybrid", "cross_hybrid") and \
            model.norm_config.mode not in _CONCAT_MODES:
        adv = pgd(model, batch, labels, BranchTag.ADV, "default", attack, rng,
                  stats_mode="batch")
        model.zero_grad()
        logits_c, rec_c = model.forward_tape(batch, BranchTag.CLEAN,
                                             train_mode=True)
        ce_c, d_c = softmax_cross_entropy(logits_c, labels)
        model.backward(rec_c, alpha * d_c)
        del rec_c
        logits_a, rec_a = model.forward_tape(adv, BranchTag.ADV,
                                             train_mode=True)
        ce_a, d_a = softmax_cross_entropy(logits_a, labels)
        model.backward(rec_a, (1.0 - alpha) * d_a)
        opt.step(lr)
        metrics = {"loss": alpha * ce_c + (1 - alpha) * ce_a,
                   "ce_clean": ce_c, "ce_adv": ce_a}

    elif reg == "dual_linear":
        adv = pgd(model, batch, labels, BranchTag.ADV, adv_head, attack, rng,
                  stats_mode="batch")
        xx = np.concatenate([batch, adv])
        tags = np.concatenate([np.zeros(n, dtype=np.intp),
                               np.ones(n, dtype=np.intp)])
        feats, rec = model.forward_tape(xx, tags, train_mode=True,
                                        features_only=True)
        logits_c, hc = model.heads[0].forward(feats[:n])
        logits_a, ha = model.heads[1].forward(feats[n:])
        ce_c, d_c = softmax_cross_entropy(logits_c, labels)
        ce_a, d_a = softmax_cross_entropy(logits_a, labels)
        model.zero_grad()
        df_c = model.heads[0].backward(alpha * d_c, hc, True, True)
        df_a = model.heads[1].backward((1.0 - alpha) * d_a, ha, True, True)
        model.backward(rec, np.concatenate([df_c, df_a]))
        opt.step(lr)
        metrics = {"loss": alpha * ce_c + (1 - alpha) * ce_a,
                   "ce_clean": ce_c, "ce_adv": ce_a}

    else:  # hybrid/kl_hybrid on a mixture-statistics mode: one concat forward
        adv = pgd(model, batch, labels, BranchTag.ADV, "default", attack, rng,
                  stats_mode="batch")
        xx = np.concatenate([batch, adv])
        tags = np.concatenate([np.zeros(n, dtype=np.intp),
                               np.ones(n, dtype=np.intp)])
        logits, rec = model.forward_tape(xx, tags, train_mode=True,
                                         head_select="clean")
        logits_c, logits_a = logits[:n], logits[n:]
        ce_c, d_c = softmax_cross_entropy(logits_c, labels)
        ce_a, d_a = softmax_cross_entropy(logits_a, labels)
        d = np.concatenate([alpha * d_c, (1.0 - alpha) * d_a])
        loss = alpha * ce_c + (1 - alpha) * ce_a
        metrics = {"loss": loss, "ce_clean": ce_c, "ce_adv": ce_a}
        if reg == "kl_hybrid":
            kl, dk_c, dk_a = kl_regularizer_with_grads(logits_c, logits_a)
            d += regime.kl_weight * np.concatenate([dk_c, dk_a])
            metrics["kl"] = kl
            metrics["loss"] = loss + regime.kl_weight * kl
        model.zero_grad()
        model.backward(rec, d)
        opt.step(lr)

    return metrics


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Deployment:
    """Which statistics / affine set / head serve at test time.

    `branch` alone deploys that branch's routed configuration. `ns` swaps in
    other statistics: a BranchTag reads the stored set of that branch, any
    object with `.per_layer` (a stats snapshot) supplies explicit values.
    """

    branch: BranchTag = BranchTag.ADV
    ns: object = None
    head: str = None

    def describe(self):
        parts = [f"branch={self.branch.name.lower()}"]
        if self.ns is not None:
            src = self.ns.name.lower() if isinstance(self.ns, BranchTag) \
                else getattr(self.ns, "label", "snapshot")
            parts.append(f"ns={src}")
        if self.head:
            parts.append(f"head={self.head}")
        return ",".join(parts)


def install_stats(model: Model, ns_source, branch: BranchTag) -> Model:
    """Copy of `model` whose routed stats slot for `branch` holds `ns_source`.

    ns_source: BranchTag (copy from that branch's stored slot) or an object
    with `.per_layer` giving one NormStats per norm layer.
    """
    out = model.copy()
    layers = [nl.state for nl in out.norm_layers]
    if isinstance(ns_source, BranchTag):
        per_layer = []
        for st in layers:
            sid, _ = select_params(st, ns_source)
            per_layer.append(st.stats[sid].copy() if st.stats else None)
    else:
        per_layer = list(ns_source.per_layer)
        if len(per_layer) != len(layers):
            raise ConfigurationError(
                f"snapshot has {len(per_layer)} layers, model has {len(layers)}"
            )
    for st, ns in zip(layers, per_layer):
        if not st.stats:
            continue
        sid, _ = select_params(st, branch)
        if ns.mean.shape != st.stats[sid].mean.shape:
            raise ConfigurationError("snapshot channel shape mismatch")
        st.stats[sid] = NormStats(
            ns.mean.astype(st.dtype, copy=True),
            ns.var.astype(st.dtype, copy=True),
            st.stats[sid].momentum,
        )
    return out


def _accuracy(model, x, y, branch, head, batch_size):
    hits = 0
    for i in range(0, len(y), batch_size):
        logits = model.forward(x[i:i + batch_size], branch, train_mode=False,
                               head_select=head)
        hits += int((logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    return hits / len(y)


def evaluate(model: Model, deployment: Deployment, test_x, test_y,
             attack: AttackConfig, rng, batch_size=256):
    """Clean and white-box-PGD accuracy of the deployed configuration."""
    dep = deployment
    target = model if dep.ns is None else install_stats(model, dep.ns, dep.branch)
    head = dep.head or "default"
    clean_acc = _accuracy(target, test_x, test_y, dep.branch, head, batch_size)
    hits = 0
    for i in range(0, len(test_y), batch_size):
        xb, yb = test_x[i:i + batch_size], test_y[i:i + batch_size]
        adv = pgd(target, xb, yb, dep.branch, head, attack, rng,
                  stats_mode="eval")
        logits = target.forward(adv, dep.branch, train_mode=False,
                                head_select=head)
        hits += int((logits.argmax(axis=1) == yb).sum())
    return {"clean_acc": clean_acc, "robust_acc": hits / len(test_y)}


# ---------------------------------------------------------------------------
# full loop


def train_loop(cfg, data, rng=None):
    """Train per `cfg` (an ExperimentConfig); returns (model, history rows).

    Emits one history row per epoch and deployable branch with the accuracy
    of that branch under the light per-epoch attack. Deterministic given
    cfg.seed; `rng` may override the seed sequence root.
    """
    ss = np.random.SeedSequence(cfg.seed) if rng is None else rng
    if isinstance(ss, np.random.Generator):
        kids = ss.spawn(3)
    else:
        kids = [np.random.default_rng(c) for c in ss.spawn(3)]
    rng_shuffle, rng_attack, rng_eval = kids

    model = build_model(cfg.arch, cfg.norm, heads=cfg.heads, seed=cfg.seed,
                        dtype=cfg.np_dtype())
    check_regime(cfg.regime, model)
    opt = SGD(model, cfg.optim)

    x_tr, y_tr = data.train_x, data.train_y
    x_te, y_te = data.test_x, data.test_y
    ne = min(cfg.epoch_eval_subset, len(y_te)) or len(y_te)
    eval_idx = rng_eval.choice(len(y_te), size=ne, replace=False)
    ex, ey = x_te[eval_idx], y_te[eval_idx]
    epoch_attack = replace(cfg.attack_eval, steps=cfg.epoch_eval_steps,
                           restarts=1)

    branches = [BranchTag.ADV]
    if len(model.heads) == 2 or (model.norm_layers and (
            len(model.norm_layers[0].state.affine) == 2
            or len(model.norm_layers[0].state.stats) == 2)):
        branches = [BranchTag.ADV, BranchTag.CLEAN]

    history = []
    bs = cfg.optim.batch_size
    for epoch in range(cfg.optim.epochs):
        lr = cfg.optim.lr_at(epoch)
        perm = rng_shuffle.permutation(len(y_tr))
        losses = []
        for i in range(0, len(perm), bs):
            idx = perm[i:i + bs]
            m = train_step(model, x_tr[idx], y_tr[idx], cfg.regime,
                           cfg.attack_train, opt, rng_attack, lr=lr)
            losses.append(m["loss"])
        for br in branches:
            res = evaluate(model, Deployment(branch=br), ex, ey,
                           epoch_attack, rng_eval, batch_size=bs)
            history.append({
                "epoch": epoch,
                "regime": cfg.regime.regime,
                "branch": br.name.lower(),
                "clean_acc": res["clean_acc"],
                "pgd_acc": res["robust_acc"],
                "loss": float(np.mean(losses)),
                "lr": lr,
            })
    return model, history
