"""Datasets, seed derivation, and metric aggregation."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import net
from .fs import FSConfig, feasibility_seek
from .net import ModelParams
from .oracle import OracleCache, optimality_gap
from .problems import (Instance, ProblemFamily, check_instance, load_family, objective,
                       sample_instance, save_family, violation_l1)

SPLITS = ("train", "val", "test")
METRIC_FIELDS = ("method", "seed", "eq_mean", "eq_max", "ineq_mean", "ineq_max",
                 "gap_mean", "gap_min", "gap_max", "batch_s", "sequential_s")
INSTANCE_FIELDS = ("index", "instance_seed", "eq", "ineq", "f_hat", "f_star", "gap")


def derive_seed(root: int, *labels) -> int:
    """Deterministic 63-bit child seed of ``root`` named by ``labels``."""
    key = ":".join(str(s) for s in (int(root), *labels)).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


@dataclass
class Dataset:
    family: ProblemFamily
    instances: list[Instance]
    splits: dict[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        self.splits = {k: np.asarray(v, dtype=int) for k, v in self.splits.items()}
        allidx = np.concatenate([self.splits[k] for k in SPLITS])
        if sorted(allidx.tolist()) != list(range(len(self.instances))):
            raise ValueError("splits must be disjoint and cover every instance")

    @property
    def X(self) -> np.ndarray:
        return np.stack([i.x for i in self.instances])

    @property
    def interior(self) -> np.ndarray:
        return np.stack([i.interior for i in self.instances])

    def split(self, name: str) -> np.ndarray:
        return self.X[self.splits[name]]

    def split_instances(self, name: str) -> list[Instance]:
        return [self.instances[i] for i in self.splits[name]]

    def sizes(self) -> dict:
        return {k: int(len(v)) for k, v in self.splits.items()}


def generate_dataset(family: ProblemFamily, sizes: tuple[int, int, int], seed: int,
                     directory=None) -> Dataset:
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError("sizes must be three positive counts (train, val, test)")
    total = int(np.sum(sizes))
    insts = [sample_instance(family, derive_seed(seed, "instance", i)) for i in range(total)]
    cut = np.cumsum(sizes)
    idx = np.arange(total)
    splits = {"train": idx[:cut[0]], "val": idx[cut[0]:cut[1]], "test": idx[cut[1]:]}
    ds = Dataset(family, insts, splits, seed)
    if directory is not None:
        save_dataset(ds, directory)
    return ds


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_family(ds.family, d / "family")
    manifest = {"seed": int(ds.seed), "family_seed": int(ds.family.seed), "count": len(ds.instances),
                "n": ds.family.n, "n_eq": ds.family.n_eq, "sizes": ds.sizes(),
                "instance_seeds": [int(i.seed) for i in ds.instances]}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    ds.X.astype("<f8").tofile(d / "x.f64")
    ds.interior.astype("<f8").tofile(d / "interior.f64")
    (d / "splits.json").write_text(json.dumps({k: v.tolist() for k, v in ds.splits.items()}) + "\n")
    return d


def load_dataset(directory, validate: bool = True) -> Dataset:
    d = Path(directory)
    meta = json.loads((d / "manifest.json").read_text())
    fam = load_family(d / "family")
    S = meta["count"]
    X = np.fromfile(d / "x.f64", dtype="<f8").reshape(S, meta["n_eq"])
    Y = np.fromfile(d / "interior.f64", dtype="<f8").reshape(S, meta["n"])
    insts = [Instance(x, y, s) for x, y, s in zip(X, Y, meta["instance_seeds"])]
    if validate:
        bad = [i for i, inst in enumerate(insts) if not check_instance(fam, inst)]
        if bad:
            raise ValueError(f"{len(bad)} stored instance(s) fail the interior check")
    splits = json.loads((d / "splits.json").read_text())
    ds = Dataset(fam, insts, splits, meta["seed"])
    if ds.sizes() != meta["sizes"]:
        raise ValueError("split sizes do not match the manifest")
    return ds


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class MetricsRow:
    method: str
    seed: int
    eq_mean: float
    eq_max: float
    ineq_mean: float
    ineq_max: float
    gap_mean: float
    gap_min: float
    gap_max: float
    batch_s: float
    sequential_s: float


@dataclass
class Evaluation:
    row: MetricsRow
    y_raw: np.ndarray
    y_hat: np.ndarray
    eq: np.ndarray
    ineq: np.ndarray
    f_hat: np.ndarray
    f_star: np.ndarray
    gap: np.ndarray
    seeds: list = field(default_factory=list)
    sequential_matches: bool = True

    def write_instances(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(INSTANCE_FIELDS)
            for i in range(len(self.eq)):
                w.writerow([i, self.seeds[i], repr(float(self.eq[i])), repr(float(self.ineq[i])),
                            repr(float(self.f_hat[i])), repr(float(self.f_star[i])),
                            repr(float(self.gap[i]))])
        return path


def aggregate(method: str, seed: int, eq, ineq, gap, batch_s: float, sequential_s: float) -> MetricsRow:
    eq, ineq, gap = (np.asarray(a, dtype=np.float64) for a in (eq, ineq, gap))
    return MetricsRow(method, int(seed), float(np.mean(eq)), float(np.max(eq)),
                      float(np.mean(ineq)), float(np.max(ineq)), float(np.mean(gap)),
                      float(np.min(gap)), float(np.max(gap)), float(batch_s), float(sequential_s))


def write_metrics(rows: list[MetricsRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            d = asdict(r)
            w.writerow([d[k] if k in ("method", "seed") else repr(float(d[k])) for k in METRIC_FIELDS])
    return path


def read_metrics(path) -> list[MetricsRow]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRow(r["method"], int(r["seed"]), *(float(r[k]) for k in METRIC_FIELDS[2:])) for r in rows]


def _solve_rows(predict: Callable, family, X, fs_cfg):
    y = predict(X)
    y_hat = y if fs_cfg is None else feasibility_seek(family, X, y, fs_cfg).point
    return y, y_hat


def evaluate(model: ModelParams | Callable, family: ProblemFamily, instances: list[Instance],
             fs_cfg: FSConfig | None, oracle: OracleCache, method: str = "learned-fs", seed: int = 0,
             threads: int = 1, warmup: bool = True) -> Evaluation:
    """Predict, feasibility-seek (skipped when ``fs_cfg`` is None) and score against the oracle.

    ``model`` is a checkpoint or any callable mapping ``X (B, n_eq)`` to ``Y (B, n)``.
    Batch time covers the whole split in chunks over ``threads`` workers;
    sequential time sums one-instance calls.
    """
    seeds = [int(i.seed) for i in instances]
    _, f_star = oracle.lookup(seeds)  # raises KeyError when entries are missing
    predict = model if callable(model) else (lambda X: net.forward(model, X))
    X = np.stack([i.x for i in instances])
    if warmup:
        _solve_rows(predict, family, X[:1], fs_cfg)

    t0 = time.perf_counter()
    if threads <= 1:
        y, y_hat = _solve_rows(predict, family, X, fs_cfg)
    else:
        chunks = np.array_split(np.arange(len(X)), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: _solve_rows(predict, family, X[c], fs_cfg), chunks))
        y = np.concatenate([p[0] for p in parts])
        y_hat = np.concatenate([p[1] for p in parts])
    batch_s = time.perf_counter() - t0

    sequential_s, same = 0.0, True
    for i in range(len(X)):
        t0 = time.perf_counter()
        _, yi = _solve_rows(predict, family, X[i:i + 1], fs_cfg)
        sequential_s += time.perf_counter() - t0
        same &= bool(np.array_equal(yi[0], y_hat[i]))

    eq, ineq = violation_l1(family, y_hat, X)
    f_hat = np.asarray(objective(family, y_hat, X))
    gap = optimality_gap(f_hat, f_star)
    row = aggregate(method, seed, eq, ineq, gap, batch_s, sequential_s)
    return Evaluation(row, y, y_hat, eq, ineq, f_hat, f_star, np.atleast_1d(gap), seeds, same)
