"""Feasibility seeking: minimize the violation function from a warm start.

One solver loop serves three callers.  ``fs_gd`` / ``fs_lbfgs`` run it on
plain arrays; ``unroll_fs`` runs it on a tape, recording the first
``tracked_iters`` iterations as differentiable ops and every later iteration
as ``s + const(step)`` so adjoints pass straight through them.  Because the
arithmetic is shared, the recorded forward value equals the plain result bit
for bit.

All entry points accept a single point ``(n,)`` or a batch ``(B, n)``; each
row keeps its own line search, memory and stopping state.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .problems import ProblemFamily, violation, violation_grad


class FSError(FloatingPointError):
    pass


@dataclass
class FSConfig:
    method: str = "lbfgs"
    step_size: float | None = None  # gd only; None -> 1 / lipschitz_bound
    max_iters: int = 50
    tracked_iters: int = 10
    memory: int = 30
    tol_phi: float = 1e-10
    tol_grad: float = 1e-8
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 30
    unroll_method: str = "gd"
    smooth_beta: float | None = None

    def __post_init__(self):
        if self.method not in ("gd", "lbfgs") or self.unroll_method not in ("gd", "lbfgs"):
            raise ValueError(f"unknown feasibility-seeking method {self.method!r}")
        if not 0 <= self.tracked_iters <= self.max_iters:
            raise ValueError("need 0 <= tracked_iters <= max_iters")
        if self.memory < 1:
            raise ValueError("L-BFGS memory must be >= 1")
        if self.tol_phi <= 0 or self.tol_grad <= 0:
            raise ValueError("tolerances must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be positive")


@dataclass
class FSResult:
    point: np.ndarray | Var
    iters: np.ndarray
    final_phi: np.ndarray
    final_grad_norm: np.ndarray
    converged: np.ndarray
    phi_trajectory: np.ndarray  # (iters_run + 1, B)
    line_search_failed: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    def squeezed(self) -> "FSResult":
        """Drop the batch axis of a single-instance result."""
        pt = self.point
        if isinstance(pt, Var):
            pt = pt.reshape(pt.shape[1:])
        else:
            pt = pt[0]
        return FSResult(pt, int(self.iters[0]), float(self.final_phi[0]),
                        float(self.final_grad_norm[0]), bool(self.converged[0]),
                        self.phi_trajectory[:, 0], bool(self.line_search_failed[0]))


@dataclass
class PLConstants:
    mu: float
    L: float
    gamma: float


def pl_constants(family: ProblemFamily, x=None) -> PLConstants:
    """PL and smoothness constants of the equality part ``w_eq ||A s - x||^2``."""
    sv = np.linalg.svd(family.A, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise np.linalg.LinAlgError("equality matrix is rank deficient")
    mu = 2.0 * family.w_eq * sv[-1] ** 2
    L = 2.0 * family.w_eq * sv[0] ** 2
    return PLConstants(mu, L, 1.0 - mu / L)


def lipschitz_bound(family: ProblemFamily, samples: int = 16, seed: int = 0) -> float:
    """Upper estimate of the gradient Lipschitz constant of the violation function.

    Exact bound for linear constraints; for the nonlinear families a
    power-iteration estimate over random box points, inflated by 1.5.
    """
    eq = 2.0 * family.w_eq * np.linalg.norm(family.A, 2) ** 2
    if family.kind == "qp" and not family.nonconvex:
        G = family.ineq["G"]
        g2 = np.linalg.norm(G, 2) ** 2 if G.size else 0.0
        return eq + 2.0 * family.w_ineq * (g2 + 1.0)
    rng = np.random.default_rng(seed)
    lo = np.where(np.isfinite(family.L), family.L, -1.0)
    hi = np.where(np.isfinite(family.U), family.U, 1.0)
    pts = rng.uniform(lo, hi, size=(samples, family.n))
    x = ad.rowwise_matvec(family.A, pts)
    v = rng.normal(size=pts.shape)
    est = np.zeros(samples)
    eps = 1e-6
    for _ in range(30):
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        hv = (violation_grad(family, pts + eps * v, x) - violation_grad(family, pts - eps * v, x)) / (2 * eps)
        est = np.linalg.norm(hv, axis=1)
        v = hv + 1e-12
    return float(max(eq, 1.5 * est.max()))


# ---------------------------------------------------------------------------
# solver core


def _val(v):
    return v.value if isinstance(v, Var) else v


def _phi(fam, s, x, cfg):
    return violation(fam, s, x, cfg.smooth_beta)


def _grad(fam, s, x, cfg):
    return violation_grad(fam, s, x, cfg.smooth_beta)


def _rownorm(g):
    return np.sqrt(ad.rowwise_dot(g, g))


def _armijo(fam, s, d, x, phi0, slope, idx, cfg):
    """Backtracking from a unit step on rows ``idx``; returns (alpha, ok) on those rows."""
    alpha = np.ones(len(idx))
    ok = np.zeros(len(idx), dtype=bool)
    todo = np.arange(len(idx))
    for _ in range(cfg.max_backtracks + 1):
        rows = idx[todo]
        trial = s[rows] + alpha[todo, None] * d[rows]
        with np.errstate(over="ignore", invalid="ignore"):
            phit = _phi(fam, trial, x[rows], cfg)
            accept = phit <= phi0[rows] + cfg.armijo_c * alpha[todo] * slope[rows]
        accept &= np.isfinite(phit)
        ok[todo[accept]] = True
        todo = todo[~accept]
        if not len(todo):
            break
        alpha[todo] *= cfg.backtrack_factor
    alpha[~ok] = 0.0
    return alpha, ok


def _two_loop(g, pairs, gamma):
    q = g
    alphas = []
    for S, Y, rho in reversed(pairs):
        a = rho * ad.dot(S, q)
        alphas.append(a)
        q = q - ad.expand(a, -1) * Y
    r = ad.expand(gamma, -1) * q
    for (S, Y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * ad.dot(Y, r)
        r = r + S * ad.expand(a - b, -1)
    return -r


def _as_batch(arr_or_var):
    if isinstance(arr_or_var, Var):
        if arr_or_var.value.ndim == 1:
            return arr_or_var.reshape((1,) + arr_or_var.shape), True
        return arr_or_var, False
    a = ad.as_array(arr_or_var)
    if a.ndim == 1:
        return a[None, :], True
    return a, False


def _solve(fam: ProblemFamily, x, s0, cfg: FSConfig, method: str, n_tracked: int) -> FSResult:
    s, single = _as_batch(s0)
    x = ad.as_array(x)
    x = np.broadcast_to(x if x.ndim == 2 else x[None, :], (_val(s).shape[0], fam.n_eq))
    on_tape = isinstance(s, Var)
    tape: Tape | None = s.tape if on_tape else None
    n_tracked = n_tracked if on_tape else 0
    B = _val(s).shape[0]
    eta = cfg.step_size if cfg.step_size is not None else None
    if method == "gd" and eta is None:
        eta = 1.0 / lipschitz_bound(fam)

    g_rec = _grad(fam, s, x, cfg) if n_tracked > 0 else None
    g = g_rec.value if g_rec is not None else _grad(fam, _val(s), x, cfg)
    phi = _phi(fam, _val(s), x, cfg)
    gnorm = _rownorm(g)
    if not np.all(np.isfinite(phi)):
        raise FSError("non-finite violation at the starting point")
    active = (phi > cfg.tol_phi) & (gnorm > cfg.tol_grad)
    iters = np.zeros(B, dtype=int)
    failed = np.zeros(B, dtype=bool)
    traj = [phi.copy()]
    pairs: list = []
    gamma = tape.const(np.ones(B)) if n_tracked > 0 else np.ones(B)

    for k in range(cfg.max_iters):
        if not active.any():
            break
        tracked = k < n_tracked
        s_in = s if tracked else _val(s)
        g_in = g_rec if tracked else g
        if method == "gd":
            d = -g_in
            alpha = np.full(B, eta)
        else:
            if pairs:
                if tracked:
                    d = _two_loop(g_in, pairs, gamma)
                else:
                    d = _two_loop(g_in, [tuple(_val(t) for t in p) for p in pairs], _val(gamma))
            else:
                gam0 = 1.0 / np.maximum(1.0, gnorm)
                d = ad.expand(gam0, -1) * -g_in
            slope = ad.rowwise_dot(g, _val(d))
            bad = ~(slope < 0.0) & active
            if bad.any():
                keep = (~bad).astype(float)[:, None]
                d = d * keep + (-g_in) * (1.0 - keep)
                slope = ad.rowwise_dot(g, _val(d))
            idx = np.flatnonzero(active)
            alpha = np.zeros(B)
            a1, ok = _armijo(fam, _val(s), _val(d), x, phi, slope, idx, cfg)
            alpha[idx] = a1
            if not ok.all():
                rows = idx[~ok]
                fail = np.zeros(B, dtype=bool)
                fail[rows] = True
                keep = (~fail).astype(float)[:, None]
                d = d * keep + (-g_in) * (1.0 - keep)
                slope = ad.rowwise_dot(g, _val(d))
                a2, ok2 = _armijo(fam, _val(s), _val(d), x, phi, slope, rows, cfg)
                alpha[rows] = a2
                failed[rows] = True
                stalled = rows[~ok2]
                active[stalled] = False
        coef = (alpha * active)[:, None]
        if tracked:
            s_new = s + coef * d
        elif on_tape:
            s_new = s + tape.const(coef * _val(d))
        else:
            s_new = s + coef * d
        if not np.all(np.isfinite(_val(s_new))):
            raise FSError(f"non-finite iterate at iteration {k}; step size too large")
        iters += active
        track_next = on_tape and k + 1 < n_tracked
        g_new_rec = _grad(fam, s_new, x, cfg) if track_next else None
        g_new = g_new_rec.value if track_next else _grad(fam, _val(s_new), x, cfg)
        if method == "lbfgs":
            if track_next:
                S, Y = s_new - s, g_new_rec - g_rec
            else:
                S, Y = _val(s_new) - _val(s), g_new - g
            sy = ad.rowwise_dot(_val(S), _val(Y))
            valid = (sy > 1e-10) & active
            vf = valid.astype(float)
            rho = vf / (ad.dot(S, Y) + (1.0 - vf))
            prev = gamma if track_next else _val(gamma)
            gamma = vf * (ad.dot(S, Y) / (ad.dot(Y, Y) + (1.0 - vf))) + (1.0 - vf) * prev
            pairs.append((S, Y, rho))
            if len(pairs) > cfg.memory:
                pairs.pop(0)
        s, g, g_rec = s_new, g_new, g_new_rec
        phi = _phi(fam, _val(s), x, cfg)
        gnorm = _rownorm(g)
        traj.append(phi.copy())
        active &= (phi > cfg.tol_phi) & (gnorm > cfg.tol_grad)

    converged = (phi <= cfg.tol_phi) | (gnorm <= cfg.tol_grad)
    res = FSResult(s, iters, phi, gnorm, converged, np.array(traj), failed)
    return res.squeezed() if single else res


def fs_gd(family: ProblemFamily, x, y0, cfg: FSConfig | None = None) -> FSResult:
    cfg = replace(cfg or FSConfig(), method="gd")
    return _solve(family, x, ad.as_array(y0), cfg, "gd", 0)


def fs_lbfgs(family: ProblemFamily, x, y0, cfg: FSConfig | None = None) -> FSResult:
    cfg = replace(cfg or FSConfig(), method="lbfgs")
    return _solve(family, x, ad.as_array(y0), cfg, "lbfgs", 0)


def feasibility_seek(family: ProblemFamily, x, y0, cfg: FSConfig) -> FSResult:
    """Inference-mode dispatch on ``cfg.method``."""
    return _solve(family, x, ad.as_array(y0), cfg, cfg.method, 0)


def unroll_fs(family: ProblemFamily, x, y0: Var, cfg: FSConfig, tape: Tape | None = None,
              method: str | None = None) -> FSResult:
    """Record the solver on ``y0``'s tape; ``result.point`` is the differentiable output.

    Only the first ``cfg.tracked_iters`` iterations carry gradients; the rest
    are recorded as constant increments (identity Jacobian).  The line-search
    step length is always treated as a constant.
    """
    if not isinstance(y0, Var):
        raise TypeError("unroll_fs needs a tape node as warm start")
    if tape is not None and y0.tape is not tape:
        raise ad.TapeError("warm start is not on the given tape")
    return _solve(family, x, y0, cfg, method or cfg.unroll_method, cfg.tracked_iters)
