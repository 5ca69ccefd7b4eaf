"""Experiment orchestration CLI.

Subcommands: train, eval, recalibrate, probe-gap, export-channels. Every
artifact (metrics CSV, checkpoints, snapshots, probe tables) embeds the
resolved configuration for provenance; CSVs carry it as a leading
"# config: ..." comment line.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .checkpoint import (load_checkpoint, load_snapshot, save_checkpoint,
                         save_snapshot)
from .config import ExperimentConfig, load_config
from .data import load_cifar10, make_synthetic_cifar
from .errors import ConfigurationError
from .normcore import BranchTag
from .probe import (affine_snapshot, export_channels, gap_report, recalibrate,
                    stats_snapshot)
from .train import Deployment, evaluate, train_loop

METRIC_FIELDS = ("epoch", "regime", "branch", "clean_acc", "pgd_acc", "loss",
                 "lr")
GAP_FIELDS = ("layer_index", "layer_name", "d_mu", "d_sigma", "d_gamma",
              "d_beta")
CHANNEL_FIELDS = ("channel", "variant", "mu", "sigma", "gamma", "beta")


def _write_csv(path, rows, fields, config_echo):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config: {json.dumps(config_echo, sort_keys=True)}\n")
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k))
                        for k in fields})


def _branch(s):
    try:
        return BranchTag[s.upper()]
    except KeyError:
        raise ConfigurationError(f"branch must be clean or adv, got {s!r}")


def _load_data(cfg: ExperimentConfig):
    root = cfg.data_root
    if cfg.synthetic:
        root = Path(root) if root else Path(cfg.out_dir) / "synthetic-data"
        if not (root / "test_batch.bin").exists():
            make_synthetic_cifar(root, n_train=cfg.subset or 10000,
                                 n_test=cfg.test_subset or 2000)
        return load_cifar10(root, subset=cfg.subset, seed=cfg.seed,
                            test_subset=cfg.test_subset,
                            dtype=cfg.np_dtype())
    return load_cifar10(root, subset=cfg.subset, seed=cfg.seed,
                        test_subset=cfg.test_subset, dtype=cfg.np_dtype())


def _config_from_args(args):
    return load_config(getattr(args, "config", None),
                       getattr(args, "preset", None),
                       getattr(args, "set", None) or ())


def _attack_from_args(args, base: AttackConfig):
    kw = {}
    if args.epsilon is not None:
        kw["epsilon"] = args.epsilon
    if args.step_size is not None:
        kw["step_size"] = args.step_size
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.restarts is not None:
        kw["restarts"] = args.restarts
    return replace(base, **kw)


def _eval_data_config(args, manifest):
    cfg = ExperimentConfig(**{})
    echo = manifest.get("config") or {}
    cfg.synthetic = args.synthetic or bool(echo.get("synthetic"))
    cfg.data_root = args.data_root or echo.get("data_root")
    cfg.out_dir = args.out_dir or echo.get("out_dir") or "runs/eval"
    cfg.subset = echo.get("subset")
    cfg.test_subset = args.test_subset if args.test_subset is not None \
        else echo.get("test_subset")
    cfg.seed = args.seed if args.seed is not None else echo.get("seed", 0)
    return cfg


def _add_data_flags(p):
    p.add_argument("--data-root", default=None,
                   help="dataset directory (or set DUALNORM_DATA_ROOT)")
    p.add_argument("--synthetic", action="store_true",
                   help="use the synthetic stand-in dataset")
    p.add_argument("--test-subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)


def _add_attack_flags(p):
    p.add_argument("--epsilon", type=_fraction, default=None)
    p.add_argument("--step-size", type=_fraction, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)


def _fraction(s):
    if "/" in s:
        a, b = s.split("/", 1)
        return float(a) / float(b)
    return float(s)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args):
    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = _load_data(cfg)
    model, history = train_loop(cfg, data)
    echo = cfg.to_dict()
    ck = out / "checkpoint.ckpt"
    save_checkpoint(model, ck, config=echo, epoch=cfg.optim.epochs,
                    seed=cfg.seed)
    _write_csv(out / "metrics.csv", history, METRIC_FIELDS, echo)
    if history:
        last = [h for h in history if h["epoch"] == history[-1]["epoch"]]
        for row in last:
            print(f"epoch {row['epoch']} branch {row['branch']}: "
                  f"clean {row['clean_acc']:.4f} pgd {row['pgd_acc']:.4f}")
    print(f"checkpoint: {ck}")
    return 0


def _cmd_eval(args):
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = _eval_data_config(args, manifest)
    data = _load_data(cfg)
    echo = manifest.get("config") or {}
    base = AttackConfig(**(echo.get("attack_eval") or {})) if echo else AttackConfig()
    attack = _attack_from_args(args, base)

    branch = _branch(args.ap or args.branch)
    ns = None
    if args.ns is not None:
        if args.ns in ("clean", "adv"):
            ns = _branch(args.ns)
        else:
            ns = load_snapshot(args.ns)
    dep = Deployment(branch=branch, ns=ns, head=args.head)
    rng = np.random.default_rng(cfg.seed)
    res = evaluate(model, dep, data.test_x, data.test_y, attack, rng)
    print(f"deployment {dep.describe()}: clean_acc {res['clean_acc']:.4f} "
          f"robust_acc {res['robust_acc']:.4f}")
    if args.out:
        row = {"deployment": dep.describe(), **res}
        _write_csv(args.out, [row], ("deployment", "clean_acc", "robust_acc"),
                   {"checkpoint_config": echo, "attack": vars(attack)})
    return 0


def _cmd_recalibrate(args):
    model, manifest = load_checkpoint(args.checkpoint)
    cfg = _eval_data_config(args, manifest)
    data = _load_data(cfg)
    echo = manifest.get("config") or {}
    base = AttackConfig(**(echo.get("attack_eval") or {})) if echo else AttackConfig()
    attack = _attack_from_args(args, base)
    x, y = (data.train_x, data.train_y) if args.split == "train" \
        else (data.test_x, data.test_y)
    rng = np.random.default_rng(cfg.seed)
    snap = recalibrate(model, _branch(args.ap), args.data_source, (x, y),
                       attack=attack, max_passes=args.max_passes,
                       tol=args.tol, rng=rng)
    save_snapshot(snap, args.out, config={"checkpoint_config": echo,
                                          "attack": vars(attack),
                                          "split": args.split})
    status = "converged" if snap.converged else "NOT converged"
    print(f"{snap.label}: {status} after {snap.passes} passes -> {args.out}")
    return 0


def _resolve_source(model, spec_str):
    if spec_str == "none":
        return None
    kind, _, rest = spec_str.partition(":")
    if kind == "ns":
        return stats_snapshot(model, _branch(rest))
    if kind == "ap":
        return affine_snapshot(model, _branch(rest))
    if kind == "snap":
        return load_snapshot(rest)
    raise ConfigurationError(
        f"source {spec_str!r}: expected ns:<branch>, ap:<branch>, "
        f"snap:<path>, or none"
    )


def _cmd_probe_gap(args):
    model, manifest = load_checkpoint(args.checkpoint)
    echo = manifest.get("config") or {}
    merged = {}

    def add(report):
        for e in report.entries:
            row = merged.setdefault(
                e.layer_index,
                {"layer_index": e.layer_index, "layer_name": e.layer_name,
                 "d_mu": None, "d_sigma": None, "d_gamma": None,
                 "d_beta": None},
            )
            if report.kind == "stats":
                row["d_mu"], row["d_sigma"] = e.d_mu, e.d_sigma
            else:
                row["d_gamma"], row["d_beta"] = e.d_gamma, e.d_beta

    compared = []
    left = _resolve_source(model, args.stats_left)
    right = _resolve_source(model, args.stats_right)
    if left is not None and right is not None:
        rep = gap_report(left, right)
        add(rep)
        compared.append(f"{rep.left} vs {rep.right}")
    aleft = _resolve_source(model, args.affine_left)
    aright = _resolve_source(model, args.affine_right)
    if aleft is not None and aright is not None:
        rep = gap_report(aleft, aright)
        add(rep)
        compared.append(f"{rep.left} vs {rep.right}")
    if not merged:
        raise ConfigurationError("nothing to compare (both pairs disabled)")
    rows = [merged[i] for i in sorted(merged)]
    _write_csv(args.out, rows, GAP_FIELDS,
               {"checkpoint_config": echo, "compared": compared})
    print(f"gap table ({'; '.join(compared)}) -> {args.out}")
    return 0


def _cmd_export_channels(args):
    model, manifest = load_checkpoint(args.checkpoint)
    echo = manifest.get("config") or {}
    specs = args.source or ["ns:clean", "ns:adv", "ap:clean", "ap:adv"]
    sources = {}
    for s in specs:
        snap = _resolve_source(model, s)
        if snap is None:
            continue
        sources[snap.label] = snap
    names = [n for n, _ in model.named_norm_layers()]
    if args.layer not in names:
        raise ConfigurationError(
            f"unknown layer {args.layer!r}; available: {', '.join(names)}"
        )
    rows = export_channels(sources, args.layer, args.k, args.seed)
    _write_csv(args.out, rows, CHANNEL_FIELDS,
               {"checkpoint_config": echo, "layer": args.layer,
                "k": args.k, "seed": args.seed})
    print(f"{len(rows)} channel rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="dualnorm",
        description="hybrid adversarial training with routable normalization",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training regime")
    t.add_argument("--config", default=None, help="INI config file")
    t.add_argument("--preset", default=None, choices=("paper", "desk"))
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable)")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint deployment")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--branch", default="adv")
    e.add_argument("--ap", default=None,
                   help="affine/routing branch (defaults to --branch)")
    e.add_argument("--ns", default=None,
                   help="statistics source: clean, adv, or a snapshot path")
    e.add_argument("--head", default=None, choices=("default", "clean", "adv"))
    e.add_argument("--out", default=None, help="write results CSV here")
    _add_attack_flags(e)
    _add_data_flags(e)
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("recalibrate", help="recompute running statistics")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--ap", required=True, help="affine set: clean or adv")
    r.add_argument("--data-source", required=True,
                   choices=("clean", "adv", "noisy"))
    r.add_argument("--split", default="train", choices=("train", "test"))
    r.add_argument("--max-passes", type=int, default=10)
    r.add_argument("--tol", type=float, default=1e-3)
    r.add_argument("--out", required=True)
    _add_attack_flags(r)
    _add_data_flags(r)
    r.set_defaults(func=_cmd_recalibrate)

    g = sub.add_parser("probe-gap", help="layer-wise Wasserstein gap table")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--stats-left", default="ns:clean")
    g.add_argument("--stats-right", default="ns:adv")
    g.add_argument("--affine-left", default="ap:clean")
    g.add_argument("--affine-right", default="ap:adv")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_probe_gap)

    x = sub.add_parser("export-channels", help="per-channel values for plots")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--layer", required=True)
    x.add_argument("--k", type=int, default=20)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--source", action="append",
                   help="ns:<branch>, ap:<branch>, or snap:<path> (repeatable)")
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export_channels)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
