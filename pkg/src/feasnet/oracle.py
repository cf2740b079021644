"""Reference solvers used to score predictions.

``aug_lagrangian_solve`` is a local augmented-Lagrangian method for every
family; the box ``[L, U]`` is handled as simple bounds by the inner
L-BFGS-B solve while equalities and the core inequalities go through the
multipliers.  ``grid_oracle`` enumerates a grid for n <= 3 and serves as an
independent check on the former.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .problems import (Instance, ProblemFamily, _ineq_body, _ineq_vjp, eq_residual,
                       objective, objective_grad, violation_l1)

MU_INIT = 10.0
MU_MAX = 1e10
DROP_FACTOR = 4.0
GRID_FEAS_TOL = 1e-2


class OracleError(RuntimeError):
    pass


@dataclass
class OracleResult:
    y_star: np.ndarray
    f_star: float
    kkt_residual: float
    eq_violation: float
    ineq_violation: float
    converged: bool
    outer_iters: int


def _measure(fam, y, x):
    eq, ineq = violation_l1(fam, y, x)
    return float(eq), float(ineq)


def _core(fam, y, x):
    return _ineq_body(fam, y, x) if fam.n_ineq else np.zeros(0)


def _lagrangian_grad(fam, y, lam, nu):
    g = objective_grad(fam, y) + fam.A.T @ lam
    if fam.n_ineq:
        g = g + _ineq_vjp(fam, y, nu)
    return g


def _kkt(fam, y, x, lam, nu):
    """Max of projected Lagrangian gradient, violations and complementarity."""
    grad = _lagrangian_grad(fam, y, lam, nu)
    pg = y - np.clip(y - grad, fam.L, fam.U)
    core = _core(fam, y, x)
    h = eq_residual(fam, y, x)
    parts = [np.abs(pg), np.abs(h), np.maximum(core, 0.0), np.abs(nu * core)]
    return float(max(np.max(p, initial=0.0) for p in parts))


def aug_lagrangian_solve(family: ProblemFamily, x, tol: float = 1e-8, max_outer: int = 100,
                         y0=None, inner_iters: int = 2000, kkt_tol: float = 1e-6,
                         restarts: int = 0, seed: int = 0) -> OracleResult:
    """Stops once both L1 violations are <= ``tol`` and the KKT residual is <= ``kkt_tol``.

    ``restarts`` adds that many uniform random starts in the box; the best
    converged local solution wins (useful on nonconvex families).
    """
    best = _al_single(family, x, tol, max_outer, y0, inner_iters, kkt_tol)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        start = rng.uniform(family.L, family.U)
        r = _al_single(family, x, tol, max_outer, start, inner_iters, kkt_tol)
        if (r.converged, -r.f_star) > (best.converged, -best.f_star):
            best = r
    return best


def _al_single(family, x, tol, max_outer, y0, inner_iters, kkt_tol) -> OracleResult:
    fam = family
    x = np.asarray(x, dtype=np.float64)
    y = np.clip(np.zeros(fam.n) if y0 is None else np.array(y0, dtype=np.float64), fam.L, fam.U)
    lam = np.zeros(fam.n_eq)
    nu = np.zeros(fam.n_ineq)
    mu = MU_INIT
    bounds = list(zip(fam.L, fam.U))
    prev_viol = np.inf
    kkt = np.inf
    it = 0
    for it in range(1, max_outer + 1):
        def fun(v, lam=lam, nu=nu, mu=mu):
            h = eq_residual(fam, v, x)
            val = float(objective(fam, v)) + lam @ h + 0.5 * mu * h @ h
            grad = objective_grad(fam, v) + fam.A.T @ (lam + mu * h)
            if fam.n_ineq:
                shifted = np.maximum(_core(fam, v, x) + nu / mu, 0.0)
                val += 0.5 * mu * shifted @ shifted - nu @ nu / (2 * mu)
                grad = grad + _ineq_vjp(fam, v, mu * shifted)
            return val, grad

        res = minimize(fun, y, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": inner_iters, "maxcor": 30, "ftol": 0.0,
                                "gtol": 0.1 * min(tol, kkt_tol), "maxls": 50})
        y = res.x
        h = eq_residual(fam, y, x)
        core = _core(fam, y, x)
        lam = lam + mu * h
        nu = np.maximum(nu + mu * core, 0.0)
        viol = max(np.max(np.abs(h), initial=0.0), np.max(np.maximum(core, 0.0), initial=0.0))
        kkt = _kkt(fam, y, x, lam, nu)
        eq, ineq = _measure(fam, y, x)
        if eq <= tol and ineq <= tol and kkt <= kkt_tol:
            break
        # once feasible to tol only the multipliers need to settle; a larger mu only stalls the inner solve
        if max(eq, ineq) > tol and viol > prev_viol / DROP_FACTOR:
            mu = min(mu * 10.0, MU_MAX)
        prev_viol = viol
    eq, ineq = _measure(fam, y, x)
    ok = bool(eq <= tol and ineq <= tol and kkt <= kkt_tol)
    return OracleResult(y, float(objective(fam, y)), kkt, eq, ineq, ok, it)


# ---------------------------------------------------------------------------
# grid oracle

def _affine_projector(A, x):
    """Return ``proj(Y)`` onto ``{A y = x}`` for rows of ``Y`` and the null-space projector."""
    AAt = A @ A.T
    pinv = A.T @ np.linalg.inv(AAt)
    null = np.eye(A.shape[1]) - pinv @ A

    def proj(Y):
        return Y - (Y @ A.T - x) @ pinv.T

    return proj, null


def grid_oracle(family: ProblemFamily, x, resolution: int = 200, refine_steps: int = 50) -> OracleResult:
    fam = family
    if fam.n > 3:
        raise OracleError("grid oracle supports n <= 3 only")
    if not 2 <= resolution <= 400:
        raise OracleError("resolution must be in [2, 400]")
    x = np.asarray(x, dtype=np.float64)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(fam.L, fam.U)]
    Y = np.array(list(itertools.product(*axes)))
    proj, null = _affine_projector(fam.A, x)
    Y = proj(Y)

    def total_viol(P):
        eq, ineq = violation_l1(fam, P, np.broadcast_to(x, (len(P), fam.n_eq)))
        return eq + ineq

    viol = total_viol(Y)
    keep = viol <= GRID_FEAS_TOL
    if not keep.any():
        raise OracleError("no near-feasible grid point")
    exact = keep & (viol <= 1e-12)
    cand = Y[exact] if exact.any() else Y[keep]
    f = objective(fam, cand)
    y = cand[np.argmin(f)]

    # projected descent along the affine set, never increasing the violation
    fy, vy = float(objective(fam, y)), float(total_viol(y[None])[0])
    step = (fam.U - fam.L).max() / resolution
    for _ in range(refine_steps):
        d = -(null @ objective_grad(fam, y))
        nd = np.linalg.norm(d)
        if nd < 1e-14:
            break
        d = d / nd
        t = step
        while t > 1e-12:
            cand_y = proj((y + t * d)[None])[0]
            fc, vc = float(objective(fam, cand_y)), float(total_viol(cand_y[None])[0])
            if fc < fy and vc <= vy + 1e-12:
                y, fy, vy = cand_y, fc, vc
                break
            t *= 0.5
        else:
            break
    eq, ineq = _measure(fam, y, x)
    return OracleResult(y, fy, float("nan"), eq, ineq, bool(eq + ineq <= GRID_FEAS_TOL), refine_steps)


def optimality_gap(f_hat, f_star):
    """Signed relative gap ``(f_hat - f_star) / |f_star|``; absolute difference where f_star == 0."""
    f_hat = np.asarray(f_hat, dtype=np.float64)
    f_star = np.asarray(f_star, dtype=np.float64)
    denom = np.abs(f_star)
    diff = f_hat - f_star
    gap = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), diff)
    return float(gap) if gap.ndim == 0 else gap


# ---------------------------------------------------------------------------
# sidecar cache

@dataclass
class OracleCache:
    family_seed: int
    instance_seeds: list[int]
    y_star: np.ndarray  # (S, n)
    f_star: np.ndarray  # (S,)
    kkt: np.ndarray
    converged: np.ndarray

    def lookup(self, seeds) -> tuple[np.ndarray, np.ndarray]:
        pos = {s: i for i, s in enumerate(self.instance_seeds)}
        missing = [s for s in seeds if s not in pos]
        if missing:
            raise KeyError(f"missing oracle entries for {len(missing)} instance(s)")
        idx = np.array([pos[s] for s in seeds], dtype=int)
        return self.y_star[idx], self.f_star[idx]


def solve_instances(family: ProblemFamily, instances: list[Instance], tol: float = 1e-8,
                    max_outer: int = 100, restarts: int = 0) -> OracleCache:
    """Solve each instance from its interior point (plus ``restarts`` random starts)."""
    results = [aug_lagrangian_solve(family, inst.x, tol, max_outer, y0=inst.interior,
                                    restarts=restarts, seed=int(inst.seed or 0))
               for inst in instances]
    return OracleCache(int(family.seed), [int(i.seed) for i in instances],
                       np.array([r.y_star for r in results]).reshape(len(results), family.n),
                       np.array([r.f_star for r in results]),
                       np.array([r.kkt_residual for r in results]),
                       np.array([r.converged for r in results]))


def save_oracle_cache(cache: OracleCache, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cache.y_star.astype("<f8").tofile(d / "oracle_y.f64")
    cache.f_star.astype("<f8").tofile(d / "oracle_f.f64")
    meta = {"family_seed": cache.family_seed, "instance_seeds": cache.instance_seeds,
            "n": int(cache.y_star.shape[1]) if cache.y_star.ndim == 2 else 0,
            "kkt": cache.kkt.tolist(), "converged": [bool(c) for c in cache.converged],
            "files": {"y_star": "oracle_y.f64", "f_star": "oracle_f.f64"}}
    path = d / "oracle.json"
    path.write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_oracle_cache(directory, family_seed: int | None = None) -> OracleCache:
    d = Path(directory)
    path = d / "oracle.json"
    if not path.exists():
        raise FileNotFoundError(f"missing oracle cache in {d}")
    meta = json.loads(path.read_text())
    if family_seed is not None and meta["family_seed"] != family_seed:
        raise KeyError("oracle cache belongs to a different family")
    S = len(meta["instance_seeds"])
    y = np.fromfile(d / meta["files"]["y_star"], dtype="<f8").reshape(S, meta["n"])
    f = np.fromfile(d / meta["files"]["f_star"], dtype="<f8")
    return OracleCache(meta["family_seed"], meta["instance_seeds"], y, f,
                       np.array(meta["kkt"]), np.array(meta["converged"]))
