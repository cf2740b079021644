"""Numerical invariant suites shared by the ``check`` command and the tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fs import FSConfig, fs_gd, pl_constants, unroll_fs
from .problems import KINDS, ProblemFamily, generate_family, sample_instance, violation, violation_grad


def equality_only(fam: ProblemFamily) -> ProblemFamily:
    """Same objective and equalities, no inequality rows and an unbounded box."""
    n = fam.n
    ineq = {"G": np.zeros((0, n)), "rhs": np.zeros(0)}
    return ProblemFamily("qp", "convex", fam.Q, fam.p, fam.A, ineq, np.full(n, -np.inf),
                         np.full(n, np.inf), fam.lam, fam.w_eq, fam.w_ineq, fam.seed)


# ---------------------------------------------------------------------------
# linear rate of GD on the equality-only violation

@dataclass
class RateResult:
    worst_ratio: float  # max_k phi_k / (gamma^k phi_0)
    instances: int
    iters: int


def pl_rate_check(instances: int = 50, iters: int = 200, seed: int = 0, n: int = 20, n_eq: int = 10) -> RateResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        fam = equality_only(generate_family("qp", "convex", n, n_eq, 1, seed=int(rng.integers(2**31))))
        pl = pl_constants(fam)
        x = rng.normal(size=n_eq)
        s0 = rng.normal(scale=3.0, size=n)
        cfg = FSConfig(method="gd", step_size=1.0 / pl.L, max_iters=iters, tol_phi=1e-300, tol_grad=1e-300)
        traj = fs_gd(fam, x, s0, cfg).phi_trajectory
        bound = pl.gamma ** np.arange(len(traj)) * traj[0]
        worst = max(worst, float(np.max(traj / bound)))
    return RateResult(worst, instances, iters)


# ---------------------------------------------------------------------------
# truncation bias of the unrolled Jacobian

@dataclass
class TruncationResult:
    k_values: np.ndarray
    errors: np.ndarray  # ||J_full - J_trunc(K')||_2
    slope: float
    delta: float
    mu: float
    eta: float


def smooth_instance(seed: int = 0, n: int = 6, beta: float = 50.0):
    """A convex QP family with square A (so phi is strongly convex) plus a start point."""
    fam = generate_family("qp", "convex", n, n, n, seed=seed)
    inst = sample_instance(fam, seed)
    rng = np.random.default_rng(seed)
    y0 = inst.interior + rng.normal(scale=0.5, size=n)
    return fam, inst.x, y0


def numeric_hessian(fam, s, x, beta, step=1e-6):
    n = s.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        H[:, j] = (violation_grad(fam, s + e, x, beta) - violation_grad(fam, s - e, x, beta)) / (2 * step)
    return 0.5 * (H + H.T)


def unrolled_jacobian(fam, x, y0, cfg: FSConfig) -> np.ndarray:
    """d s_K / d y0 built row by row from unit-vector backward passes."""
    n = y0.size
    J = np.empty((n, n))
    for i in range(n):
        tape = ad.Tape()
        y = tape.leaf(y0)
        out = unroll_fs(fam, x, y, cfg, tape).point
        root = ad.dot(out, np.eye(n)[i])
        J[i] = tape.backward(root, [y])[0]
    return J


def truncation_bias(seed: int = 0, K: int = 30, k_values=(5, 10, 15, 20, 25), beta: float = 50.0,
                    n: int = 6) -> TruncationResult:
    fam, x, y0 = smooth_instance(seed, n, beta)
    base = FSConfig(method="gd", max_iters=K, tracked_iters=K, tol_phi=1e-300, tol_grad=1e-300,
                    smooth_beta=beta, unroll_method="gd")
    # limit point and curvature there
    limit = fs_gd(fam, x, y0, FSConfig(method="gd", max_iters=20000, tol_phi=1e-300, tol_grad=1e-13,
                                       smooth_beta=beta)).point
    H = numeric_hessian(fam, limit, x, beta)
    eig = np.linalg.eigvalsh(H)
    mu, L = float(eig[0]), float(eig[-1])
    eta = 1.0 / L
    base.step_size = eta
    J_full = unrolled_jacobian(fam, x, y0, base)
    errs = []
    for k in k_values:
        cfg = FSConfig(**{**base.__dict__, "tracked_iters": k})
        errs.append(np.linalg.norm(J_full - unrolled_jacobian(fam, x, y0, cfg), 2))
    errs = np.array(errs)
    ks = np.asarray(k_values, dtype=float)
    slope = float(np.polyfit(ks, np.log(errs), 1)[0])
    return TruncationResult(ks, errs, slope, 1.0 - eta * mu, mu, eta)


# ---------------------------------------------------------------------------
# gradient checks

_UNARY = {
    "sin": ad.sin, "cos": ad.cos, "exp": ad.exp, "square": ad.square, "silu": ad.silu,
    "relu": ad.relu, "softplus": lambda v: ad.softplus(v, 1.0),
    "softplus-sharp": lambda v: ad.softplus(0.02 * v),  # beta = 50 on a matching input scale
    "log": lambda v: ad.log(ad.square(v) + 1.0), "sqrt": lambda v: ad.sqrt(ad.square(v) + 1.0),
}


def op_grad_errors(points: int = 100, seed: int = 0, dim: int = 3) -> dict[str, float]:
    """Worst FD relative error per op over random points (each op projected to a scalar)."""
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(dim, dim))
    w = rng.normal(size=dim)
    fns = {name: (lambda f: lambda v: ad.dot(f(v), w))(f) for name, f in _UNARY.items()}
    fns.update({
        "matvec": lambda v: ad.dot(ad.matvec(M, v), w),
        "dot": lambda v: ad.dot(v, v),
        "norm": lambda v: ad.norm(v),
        "mul": lambda v: ad.dot(v * ad.sin(v), w),
        "div": lambda v: ad.dot(v / (ad.square(v) + 1.0), w),
        "sum": lambda v: ad.sum(ad.square(v)),
    })
    out = {}
    for name, fn in fns.items():
        worst = 0.0
        for _ in range(points):
            p = rng.normal(size=dim)
            if name == "relu":
                p = np.where(np.abs(p) < 0.05, 0.05 * np.sign(p) + p, p)
            worst = max(worst, ad.grad_check(fn, p))
        out[name] = worst
    return out


def violation_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for kind in KINDS:
        for variant in ("convex", "nonconvex", "nonsmooth"):
            fam = generate_family(kind, variant, 6, 3, 3, seed=seed)
            inst = sample_instance(fam, seed)
            y = inst.interior + rng.normal(scale=1.5, size=fam.n)
            out[f"{kind}/{variant}"] = ad.grad_check(lambda v: violation(fam, v, inst.x), y)
    return out
