"""Command-line entry point: ``feasnet <command> [options]``.

Exit codes: 0 success, 1 run failure, 2 configuration or precondition error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, checks, net, oracle, training
from .fs import FSConfig, FSError
from .problems import FamilyError, InstanceError, generate_family

log = logging.getLogger("feasnet")

DEFAULTS = {
    "family": {"kind": "qp", "variant": "convex", "n": 50, "n_eq": 25, "n_ineq": 25},
    "dataset": {"train": 1000, "val": 200, "test": 400},
    "fs": {},
    "train": {},
    "eval": {"k_list": [0, 10, 50], "rho_list": [0.0, 5.0, 50.0], "oracle_restarts": 0},
}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    try:
        user = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(user) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, values in user.items():
        cfg[section].update(values)
    return cfg


def _fs_config(cfg: dict) -> FSConfig:
    try:
        return FSConfig(**cfg["fs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad fs section: {exc}") from exc


def _train_config(cfg: dict, seed: int) -> training.TrainConfig:
    params = {"seed": seed, **cfg["train"], "fs": _fs_config(cfg)}
    try:
        return training.TrainConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train section: {exc}") from exc


def _dataset(out: Path) -> bench.Dataset:
    d = out / "dataset"
    if not (d / "manifest.json").exists():
        raise ConfigError(f"no dataset in {d}; run `generate` first")
    return bench.load_dataset(d)


def _oracle(out: Path, ds: bench.Dataset) -> oracle.OracleCache:
    try:
        cache = oracle.load_oracle_cache(out / "oracle", ds.family.seed)
        cache.lookup([int(i.seed) for i in ds.split_instances("test")])
    except (FileNotFoundError, KeyError) as exc:
        raise ConfigError(f"missing oracle cache: {exc}") from exc
    return cache


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args, cfg):
    fam_cfg = dict(cfg["family"])
    try:
        fam = generate_family(fam_cfg.pop("kind"), fam_cfg.pop("variant"), fam_cfg.pop("n"),
                              fam_cfg.pop("n_eq"), fam_cfg.pop("n_ineq"),
                              seed=bench.derive_seed(args.seed, "family"), **fam_cfg)
    except (TypeError, KeyError, FamilyError) as exc:
        raise ConfigError(f"bad family section: {exc}") from exc
    sizes = tuple(int(cfg["dataset"][k]) for k in bench.SPLITS)
    ds = bench.generate_dataset(fam, sizes, bench.derive_seed(args.seed, "dataset"), args.out_dir / "dataset")
    print(f"wrote {len(ds.instances)} instances to {args.out_dir / 'dataset'}")


def cmd_oracle(args, cfg):
    ds = _dataset(args.out_dir)
    cache = oracle.solve_instances(ds.family, ds.split_instances("test"),
                                   restarts=int(cfg["eval"].get("oracle_restarts", 0)))
    path = oracle.save_oracle_cache(cache, args.out_dir / "oracle")
    print(f"solved {len(cache.instance_seeds)} instances "
          f"({int(np.sum(cache.converged))} converged) -> {path}")


def cmd_train(args, cfg):
    ds = _dataset(args.out_dir)
    tcfg = _train_config(cfg, bench.derive_seed(args.seed, "init"))
    rep = training.train(ds.family, ds, tcfg, args.out_dir / "train",
                         log=lambda e: log.info("epoch %d loss %.6g val eq %.3g ineq %.3g",
                                                e.epoch, e.train_loss, e.val_eq, e.val_ineq))
    print(f"trained {len(rep.epochs)} epochs -> {rep.checkpoint}")


def _eval_one(args, ds, cache, params, method, fs_cfg):
    return bench.evaluate(params, ds.family, ds.split_instances("test"), fs_cfg, cache,
                          method=method, seed=args.seed, threads=args.threads)


def cmd_eval(args, cfg):
    ds = _dataset(args.out_dir)
    cache = _oracle(args.out_dir, ds)
    ckpt = args.out_dir / "train" / "model.json"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run `train` first")
    params = net.load_checkpoint(ckpt)
    baseline = cfg["train"].get("baseline", "none")
    method = "learned-fs" if baseline == "none" else baseline
    ev = _eval_one(args, ds, cache, params, method, None if baseline != "none" else _fs_config(cfg))
    bench.write_metrics([ev.row], args.out_dir / "metrics.csv")
    ev.write_instances(args.out_dir / "per_instance.csv")
    r = ev.row
    print(f"{r.method}: eq {r.eq_mean:.3g} ({r.eq_max:.3g}) ineq {r.ineq_mean:.3g} ({r.ineq_max:.3g}) "
          f"gap {100 * r.gap_mean:.3f}% batch {r.batch_s:.3f}s sequential {r.sequential_s:.3f}s")


def cmd_sweep_k(args, cfg):
    ds = _dataset(args.out_dir)
    cache = _oracle(args.out_dir, ds)
    base = _train_config(cfg, bench.derive_seed(args.seed, "init"))
    rows = []
    for k in cfg["eval"]["k_list"]:
        fs_cfg = replace(base.fs, tracked_iters=int(k), max_iters=max(base.fs.max_iters, int(k)))
        rep = training.train(ds.family, ds, replace(base, fs=fs_cfg))
        rows.append(_eval_one(args, ds, cache, rep.params, f"learned-fs-k{k}", base.fs).row)
    path = bench.write_metrics(rows, args.out_dir / "sweep_k.csv")
    print(f"wrote {path}")


def cmd_sweep_rho(args, cfg):
    ds = _dataset(args.out_dir)
    cache = _oracle(args.out_dir, ds)
    base = _train_config(cfg, bench.derive_seed(args.seed, "init"))
    _, f_star = cache.lookup([int(i.seed) for i in ds.split_instances("test")])
    rows = training.rho_sweep(ds.family, ds, base, cfg["eval"]["rho_list"], f_star=f_star)
    path = args.out_dir / "sweep_rho.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "distance", "gap", "violation"])
        for r in rows:
            w.writerow([r.rho, r.distance, r.gap, r.violation])
    print(f"wrote {path}")


def cmd_check(args, cfg):
    results = []
    ops = checks.op_grad_errors(points=20)
    results.append(("grad-check ops", max(ops.values()), max(ops.values()) <= 1e-6))
    phi = checks.violation_grad_errors()
    results.append(("grad-check violation", max(phi.values()), max(phi.values()) <= 1e-6))
    rate = checks.pl_rate_check(instances=10)
    results.append(("PL rate (max ratio)", rate.worst_ratio, rate.worst_ratio <= 1 + 1e-9))
    tb = checks.truncation_bias()
    results.append(("truncation bias slope", tb.slope, tb.slope <= np.log(tb.delta) + 0.05))
    for name, value, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.3g}")
    if not all(ok for *_, ok in results):
        raise RuntimeError("invariant check failed")


COMMANDS = {
    "generate": (cmd_generate, "sample a problem family and dataset"),
    "oracle": (cmd_oracle, "solve and cache the test split"),
    "train": (cmd_train, "train a predictor"),
    "eval": (cmd_eval, "evaluate the trained predictor, write metrics CSV"),
    "sweep-k": (cmd_sweep_k, "train and evaluate over tracked-iteration counts"),
    "sweep-rho": (cmd_sweep_rho, "train and evaluate over distance weights"),
    "check": (cmd_check, "run the numerical invariant suites"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with sections family, dataset, fs, train, eval")
    common.add_argument("--seed", type=int, default=2025, help="root seed for every derived seed")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="artifact directory")
    common.add_argument("--threads", type=int, default=1, help="evaluation workers")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="feasnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, FSError, InstanceError, OSError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
