"""Experiment configuration: presets, INI files, and key=value overrides.

Two presets ship: "paper" mirrors the reference training recipe (ResNet18,
110 epochs, lr 0.1 decayed 10x at epochs 100 and 105, SGD momentum 0.9,
weight decay 5e-4, PGD-10 at eps 8/255 with step 2/255); "desk" is the
scaled-down preset the acceptance suite runs (small CNN, 10k training
images, 30 epochs, PGD-5 training, PGD-20 x3-restart evaluation).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, asdict

import numpy as np

from .attacks import AttackConfig
from .errors import ConfigurationError
from .models import Architecture
from .normcore import NormConfig, NormKind, NormMode
from .train import OptimConfig, RegimeConfig


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    attack_train: AttackConfig = field(default_factory=AttackConfig)
    attack_eval: AttackConfig = field(default_factory=AttackConfig)
    arch: Architecture = field(default_factory=Architecture)
    norm: NormConfig = field(default_factory=NormConfig)
    heads: int = 1
    seed: int = 0
    data_root: str = None
    synthetic: bool = False
    subset: int = None
    test_subset: int = None
    epoch_eval_subset: int = 512
    epoch_eval_steps: int = 5
    deploy_branch: str = "adv"
    out_dir: str = "runs/exp"
    dtype: str = "float32"

    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]

    def finalize(self):
        """Apply cross-field rules and re-validate; returns self."""
        if self.regime.regime == "dual_linear":
            self.heads = 2
            self.norm.mode = NormMode.SINGLE
        if self.deploy_branch not in ("adv", "clean"):
            raise ConfigurationError("deploy_branch must be 'adv' or 'clean'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")
        for sub in (self.regime, self.optim, self.attack_train,
                    self.attack_eval, self.arch, self.norm):
            sub.__post_init__()
        return self

    def to_dict(self):
        d = asdict(self)
        d["norm"]["kind"] = self.norm.kind.value
        d["norm"]["mode"] = self.norm.mode.value
        return d


def preset(name: str) -> ExperimentConfig:
    if name == "paper":
        return ExperimentConfig(
            preset="paper",
            regime=RegimeConfig(regime="hybrid"),
            optim=OptimConfig(),
            attack_train=AttackConfig(steps=10),
            attack_eval=AttackConfig(steps=10),
            arch=Architecture(name="resnet18_cifar", width=1.0),
            norm=NormConfig(mode=NormMode.DUAL),
            epoch_eval_subset=1000,
            epoch_eval_steps=10,
        )
    if name == "desk":
        return ExperimentConfig(
            preset="desk",
            regime=RegimeConfig(regime="hybrid"),
            optim=OptimConfig(epochs=30, decay_epochs=(25, 28)),
            attack_train=AttackConfig(steps=5),
            attack_eval=AttackConfig(steps=20, restarts=3),
            arch=Architecture(name="small_cnn", width=0.5),
            norm=NormConfig(mode=NormMode.DUAL),
            subset=10000,
            test_subset=2000,
            epoch_eval_subset=512,
            epoch_eval_steps=5,
        )
    raise ConfigurationError(f"unknown preset {name!r} (use 'paper' or 'desk')")


def _num(s):
    """Parse a number, accepting fractions like 8/255."""
    s = s.strip()
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


def _int_or_none(s):
    s = s.strip()
    return None if s.lower() in ("", "none") else int(s)


def _attack_setter(which):
    def setter(cfg, key, val):
        atk = getattr(cfg, which)
        if key == "epsilon":
            atk.epsilon = _num(val)
        elif key == "step_size":
            atk.step_size = _num(val)
        elif key == "steps":
            atk.steps = int(val)
        elif key == "restarts":
            atk.restarts = int(val)
        elif key == "random_init":
            atk.random_init = _bool(val)
        else:
            return False
        return True
    return setter


def _apply(cfg: ExperimentConfig, section: str, key: str, val: str):
    ok = True
    if section == "run":
        if key == "regime":
            cfg.regime.regime = val
            cfg.regime.__post_init__()
        elif key == "seed":
            cfg.seed = int(val)
        elif key == "out_dir":
            cfg.out_dir = val
        elif key == "deploy_branch":
            cfg.deploy_branch = val
        elif key == "heads":
            cfg.heads = int(val)
        elif key == "dtype":
            cfg.dtype = val
        elif key == "alpha":
            cfg.regime.alpha = _num(val)
        elif key == "kl_weight":
            cfg.regime.kl_weight = _num(val)
        else:
            ok = False
    elif section == "model":
        if key == "arch":
            cfg.arch.name = val
            cfg.arch.__post_init__()
        elif key == "width":
            cfg.arch.width = _num(val)
        elif key == "classes":
            cfg.arch.classes = int(val)
        elif key == "norm_kind":
            cfg.norm.kind = NormKind(val)
        elif key == "norm_mode":
            cfg.norm.mode = NormMode(val)
        elif key == "group_count":
            cfg.norm.group_count = int(val)
        elif key == "eps":
            cfg.norm.eps = _num(val)
        elif key == "momentum":
            cfg.norm.momentum = _num(val)
        else:
            ok = False
    elif section == "data":
        if key == "root":
            cfg.data_root = val
        elif key == "synthetic":
            cfg.synthetic = _bool(val)
        elif key == "subset":
            cfg.subset = _int_or_none(val)
        elif key == "test_subset":
            cfg.test_subset = _int_or_none(val)
        else:
            ok = False
    elif section == "optim":
        if key == "epochs":
            cfg.optim.epochs = int(val)
        elif key == "lr":
            cfg.optim.lr = _num(val)
        elif key == "decay_epochs":
            cfg.optim.decay_epochs = tuple(
                int(t) for t in val.split(",") if t.strip()
            )
        elif key == "decay_factor":
            cfg.optim.decay_factor = _num(val)
        elif key == "weight_decay":
            cfg.optim.weight_decay = _num(val)
        elif key == "momentum":
            cfg.optim.momentum = _num(val)
        elif key == "batch_size":
            cfg.optim.batch_size = int(val)
        else:
            ok = False
    elif section == "attack_train":
        ok = _attack_setter("attack_train")(cfg, key, val)
    elif section == "attack_eval":
        ok = _attack_setter("attack_eval")(cfg, key, val)
    elif section == "eval":
        if key == "epoch_subset":
            cfg.epoch_eval_subset = int(val)
        elif key == "epoch_steps":
            cfg.epoch_eval_steps = int(val)
        else:
            ok = False
    else:
        raise ConfigurationError(f"unknown config section [{section}]")
    if not ok:
        raise ConfigurationError(f"unknown config key [{section}] {key}")


def load_config(path=None, preset_name=None, overrides=()) -> ExperimentConfig:
    """Build a config from a preset, an INI file, and key=value overrides.

    Override syntax: "section.key=value", e.g. "optim.epochs=0".
    """
    cfg = preset(preset_name or "desk")
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"cannot read config file {path}")
        if parser.has_option("run", "preset"):
            cfg = preset(parser.get("run", "preset"))
        for section in parser.sections():
            for key, val in parser.items(section):
                if section == "run" and key == "preset":
                    continue
                _apply(cfg, section, key, val)
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigurationError(
                f"override {ov!r}: expected section.key=value"
            )
        lhs, val = ov.split("=", 1)
        section, key = lhs.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), val.strip())
    return cfg.finalize()
