"""End-to-end training of the predictor through the feasibility-seeking step.

The FS loss is ``F = f(y_hat) + rho/2 ||y - y_hat||^2`` with ``y_hat`` the
unrolled solver output, plus ``rho_phi * phi(y)`` on samples whose raw
prediction is wildly infeasible.  Penalty baselines skip the solver and train
on ``f(y) + w_eq ||h||^2 + w_ineq ||g+||^2`` directly.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import net
from .autodiff import Tape
from .fs import FSConfig, feasibility_seek, unroll_fs
from .net import ModelParams
from .problems import ProblemFamily, objective, violation, violation_l1

BASELINES = ("none", "penalty", "adaptive-penalty")
OPTIMIZERS = ("adam", "sgd")


class TrainingError(FloatingPointError):
    pass


@dataclass
class AdaptiveSchedule:
    init: float = 30.0
    max: float = 500.0
    rate: float = 2.0


@dataclass
class TrainConfig:
    rho: float = 5.0
    rho_phi: float = 1.0
    q_threshold: float = 1e3
    optimizer: str = "adam"
    learning_rate: float = 5e-4
    lr_decay: float = 0.5
    lr_decay_steps: int = 2000
    epochs: int = 100
    batch_size: int = 512
    seed: int = 2025
    hidden: tuple = net.DEFAULT_HIDDEN
    fs: FSConfig = field(default_factory=FSConfig)
    baseline: str = "none"
    penalty_weights: tuple = (50.0, 50.0)
    adaptive: AdaptiveSchedule = field(default_factory=AdaptiveSchedule)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.fs, dict):
            self.fs = FSConfig(**self.fs)
        if isinstance(self.adaptive, dict):
            self.adaptive = AdaptiveSchedule(**self.adaptive)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.penalty_weights = tuple(float(w) for w in self.penalty_weights)
        if self.rho < 0 or self.rho_phi < 0:
            raise ValueError("rho and rho_phi must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_decay_steps < 1:
            raise ValueError("batch_size, lr_decay_steps must be >= 1 and epochs >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_eq: float
    val_ineq: float
    val_objective: float
    wall_time: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    params: ModelParams
    checkpoint: Path | None = None
    weights: tuple | None = None  # final penalty weights for penalty baselines

    def losses(self) -> np.ndarray:
        return np.array([e.train_loss for e in self.epochs])

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = list(EpochStats.__dataclass_fields__)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for e in self.epochs:
                w.writerow([getattr(e, c) for c in cols])
        return path


# ---------------------------------------------------------------------------
# losses

def loss_F(family: ProblemFamily, x, y, y_hat, rho: float, rho_phi: float, q_threshold: float):
    """Per-sample F(y, y_hat); the stabilizing term is switched on by forward value of phi(y)."""
    diff = y - y_hat
    F = objective(family, y_hat, x) + (0.5 * rho) * ad.sqnorm(diff)
    if rho_phi > 0:
        phi_y = violation(family, y, x)
        on = (ad.value(phi_y) >= q_threshold).astype(float)
        if on.any():
            F = F + (rho_phi * on) * phi_y
    return F


def penalty_loss(family: ProblemFamily, x, y, weights):
    return objective(family, y, x) + violation(family.with_weights(*weights), y, x)


def batch_loss(family: ProblemFamily, X, params: ModelParams, cfg: TrainConfig, tape: Tape,
               leaves=None, weights=None):
    """Mean loss over the batch ``X`` (B, n_eq).  Returns ``(loss, info)``."""
    X = ad.as_array(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, n_eq) array")
    y = net.forward(params, X, tape, leaves)
    info = {"y": y.value}
    if cfg.baseline == "none":
        res = unroll_fs(family, X, y, cfg.fs, tape)
        per = loss_F(family, X, y, res.point, cfg.rho, cfg.rho_phi, cfg.q_threshold)
        info["y_hat"] = res.point.value
    else:
        per = penalty_loss(family, X, y, weights if weights is not None else cfg.penalty_weights)
    return ad.sum(per) * (1.0 / X.shape[0]), info


def loss_and_grad(family, X, params, cfg, weights=None):
    tape = Tape()
    leaves = net.leaves_for(params, tape)
    loss, info = batch_loss(family, X, params, cfg, tape, leaves, weights)
    grads = tape.backward(loss, [v for pair in leaves for v in pair])
    return float(loss.value), net.leaf_gradient(grads), info


# ---------------------------------------------------------------------------
# optimizers

class Adam:
    def __init__(self, size, betas=(0.9, 0.999), eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def step(self, theta, grad, lr):
        return theta - lr * grad


def make_optimizer(cfg: TrainConfig, size: int):
    return Adam(size, cfg.adam_betas, cfg.adam_eps) if cfg.optimizer == "adam" else SGD()


def lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** (step // cfg.lr_decay_steps)


# ---------------------------------------------------------------------------
# evaluation helpers

def predict(params: ModelParams, family: ProblemFamily, X, fs_cfg: FSConfig | None):
    """Raw prediction and post-FS point (or the raw point again when ``fs_cfg`` is None)."""
    y = net.forward(params, ad.as_array(X))
    if fs_cfg is None:
        return y, y
    return y, feasibility_seek(family, X, y, fs_cfg).point


def _val_stats(family, params, X, fs_cfg):
    _, y_hat = predict(params, family, X, fs_cfg)
    eq, ineq = violation_l1(family, y_hat, X)
    return float(eq.mean()), float(ineq.mean()), float(np.mean(objective(family, y_hat, X)))


def train(family: ProblemFamily, dataset, cfg: TrainConfig, out_dir=None, log=None) -> TrainReport:
    """Minibatch training on ``dataset.split('train')``; validation on ``'val'``."""
    X_train, X_val = dataset.split("train"), dataset.split("val")
    params = net.init_mlp(family.n_eq, cfg.hidden, family.n, cfg.seed)
    opt = make_optimizer(cfg, params.values.size)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    eval_fs = None if cfg.baseline != "none" else cfg.fs
    adaptive = cfg.baseline == "adaptive-penalty"
    weights = (cfg.adaptive.init,) * 2 if adaptive else cfg.penalty_weights
    prev_viol = None
    stats, step = [], 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(X_train))
        total, count = 0.0, 0
        eq_sum, ineq_sum = 0.0, 0.0
        for start in range(0, len(order), cfg.batch_size):
            X = X_train[order[start:start + cfg.batch_size]]
            loss, grad, info = loss_and_grad(family, X, params, cfg, weights)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            params.values = opt.step(params.values, grad, lr_at(cfg, step))
            step += 1
            total += loss * len(X)
            count += len(X)
            if adaptive:
                eq, ineq = violation_l1(family, info["y"], X)
                eq_sum += float(eq.sum())
                ineq_sum += float(ineq.sum())
        if adaptive:
            viol = np.array([eq_sum, ineq_sum]) / count
            if prev_viol is not None:
                w = np.array(weights)
                w = np.where(viol >= prev_viol, np.minimum(w * cfg.adaptive.rate, cfg.adaptive.max), w)
                weights = tuple(float(v) for v in w)
            prev_viol = viol
        val_eq, val_ineq, val_obj = _val_stats(family, params, X_val, eval_fs)
        stats.append(EpochStats(epoch, total / count, val_eq, val_ineq, val_obj,
                                time.perf_counter() - t0))
        if log is not None:
            log(stats[-1])
    report = TrainReport(stats, params, weights=weights)
    if out_dir is not None:
        out = Path(out_dir)
        report.write_csv(out / "train_report.csv")
        report.checkpoint = net.save_checkpoint(params, out / "model")
    return report


@dataclass
class RhoRow:
    rho: float
    distance: float
    gap: float
    violation: float


def rho_sweep(family, dataset, base_cfg: TrainConfig, rhos, f_star=None, split="test") -> list[RhoRow]:
    """Train one model per rho and report mean ``||y - y_hat||``, gap and total L1 violation.

    ``f_star`` holds oracle objective values for ``split``; without it the gap is NaN.
    """
    from .oracle import optimality_gap

    if len(rhos) == 0:
        raise ValueError("rho list is empty")
    X = dataset.split(split)
    rows = []
    for rho in rhos:
        rep = train(family, dataset, replace(base_cfg, rho=float(rho)))
        y, y_hat = predict(rep.params, family, X, base_cfg.fs)
        eq, ineq = violation_l1(family, y_hat, X)
        dist = float(np.mean(np.linalg.norm(y - y_hat, axis=-1)))
        gap = float("nan")
        if f_star is not None:
            gap = float(np.mean(optimality_gap(objective(family, y_hat, X), f_star)))
        rows.append(RhoRow(float(rho), dist, gap, float(np.mean(eq + ineq))))
    return rows
