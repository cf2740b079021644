"""Parametric QP / QCQP / SOCP families, their constraint functions and the
violation function minimized by the feasibility-seeking step.

Every function taking a decision point ``y`` works on a single point of shape
``(n,)`` or a batch ``(B, n)``, and on plain arrays as well as autodiff
:class:`~feasnet.autodiff.Var` nodes.  Box bounds are folded into the
inequality rows as ``L - y`` and ``y - U``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import as_array, rowwise_matvec

KINDS = ("qp", "qcqp", "socp")
VARIANTS = ("convex", "nonconvex", "nonsmooth")

INTERIOR_MARGIN = 1e-3
SHRINK_FACTOR = 0.9
MAX_SHRINK_STEPS = 200
BOX_INSET = 0.5
DEFAULT_CONE_ROWS = 10
DEFAULT_LAMBDA = 0.1
DEFAULT_WEIGHTS = (10.0, 10.0)


class FamilyError(ValueError):
    pass


class InstanceError(RuntimeError):
    """The sampler could not find a strictly interior point."""


@dataclass
class ProblemFamily:
    kind: str
    variant: str
    Q: np.ndarray
    p: np.ndarray
    A: np.ndarray
    ineq: dict[str, np.ndarray]
    L: np.ndarray
    U: np.ndarray
    lam: float = DEFAULT_LAMBDA
    w_eq: float = DEFAULT_WEIGHTS[0]
    w_ineq: float = DEFAULT_WEIGHTS[1]
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FamilyError(f"unknown kind {self.kind!r}")
        if self.variant not in VARIANTS:
            raise FamilyError(f"unknown variant {self.variant!r}")
        for name in ("Q", "p", "A", "L", "U"):
            setattr(self, name, as_array(getattr(self, name)))
        self.ineq = {k: as_array(v) for k, v in self.ineq.items()}
        n = self.n
        if self.Q.shape != (n, n) or self.A.ndim != 2 or self.A.shape[1] != n:
            raise FamilyError("inconsistent matrix dimensions")
        if self.L.shape != (n,) or self.U.shape != (n,) or not np.all(self.L < self.U):
            raise FamilyError("bounds must satisfy L < U component-wise")
        if self.w_eq <= 0 or self.w_ineq <= 0:
            raise FamilyError("violation weights must be positive")
        self._build_stacks()

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.ineq["rhs"].shape[0]

    @property
    def cone_rows(self) -> int:
        return self.ineq["G"].shape[1] if self.kind == "socp" else 0

    @property
    def nonconvex(self) -> bool:
        return self.variant != "convex"

    def _build_stacks(self):
        n, k = self.n, self.n_ineq
        c = self._cache
        c["At"] = np.ascontiguousarray(self.A.T)
        if self.kind == "qp":
            c["Gt"] = np.ascontiguousarray(self.ineq["G"].T)
        elif self.kind == "qcqp":
            c["Hstack"] = np.ascontiguousarray(self.ineq["H"].reshape(k * n, n))
            c["Gt"] = np.ascontiguousarray(self.ineq["G"].T)
        else:
            m = self.cone_rows
            c["Gstack"] = np.ascontiguousarray(self.ineq["G"].reshape(k * m, n))
            c["GstackT"] = np.ascontiguousarray(c["Gstack"].T)
            c["hflat"] = self.ineq["h"].reshape(k * m)
            c["Ct"] = np.ascontiguousarray(self.ineq["C"].T)

    def with_weights(self, w_eq: float, w_ineq: float) -> "ProblemFamily":
        return ProblemFamily(self.kind, self.variant, self.Q, self.p, self.A, dict(self.ineq),
                             self.L, self.U, self.lam, w_eq, w_ineq, self.seed)


@dataclass(frozen=True)
class Instance:
    x: np.ndarray
    interior: np.ndarray
    seed: int | None = None


# ---------------------------------------------------------------------------
# generation


def _check_dims(n, n_eq, n_ineq):
    if n < 1 or n_eq < 1 or n_ineq < 0:
        raise FamilyError("dimensions must be positive")
    if n < n_eq:
        raise FamilyError(f"n={n} < n_eq={n_eq}: equality system would be overdetermined")


def _spd_objective(rng, n):
    D = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n))
    Q = D.T @ D + n * np.eye(n)
    Q = 0.5 * (Q + Q.T)
    return Q / np.linalg.norm(Q, 2)


def _full_rank(rng, rows, n):
    for _ in range(100):
        A = rng.normal(0.0, 1.0 / np.sqrt(n), size=(rows, n))
        if np.linalg.matrix_rank(A) == rows:
            return A
    raise FamilyError("could not draw a full-row-rank equality matrix")


def generate_family(kind: str, variant: str, n: int, n_eq: int, n_ineq: int, seed: int,
                    *, cone_rows: int = DEFAULT_CONE_ROWS, lam: float = DEFAULT_LAMBDA,
                    weights: tuple[float, float] = DEFAULT_WEIGHTS,
                    bound: float = 5.0, tightness: float = 0.7) -> ProblemFamily:
    """Draw a random family whose every sampled instance is feasible.

    Right-hand sides are set to the constraint body at the box center plus a
    positive margin, so shrinking any point toward the center eventually
    makes it strictly feasible.  ``tightness`` is the quantile of the body
    increase over random box points used as margin: smaller is tighter.
    """
    _check_dims(n, n_eq, n_ineq)
    if kind not in KINDS or variant not in VARIANTS:
        raise FamilyError(f"unknown family {kind}/{variant}")
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(n)
    Q = _spd_objective(rng, n)
    p = rng.normal(0.0, s, size=n)
    A = _full_rank(rng, n_eq, n)
    L = np.full(n, -bound)
    U = np.full(n, bound)
    k = n_ineq
    if kind == "qp":
        ineq = {"G": rng.normal(0.0, s, size=(k, n))}
    elif kind == "qcqp":
        E = rng.normal(0.0, 1.0, size=(k, n, n))
        H = (np.einsum("kji,kjl->kil", E, E) + np.eye(n)) / (4.0 * n * n)
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        ineq = {"H": H, "G": rng.normal(0.0, s, size=(k, n))}
    else:
        m = cone_rows
        ineq = {"G": rng.normal(0.0, s, size=(k, m, n)),
                "h": rng.normal(0.0, s, size=(k, m)),
                "C": rng.normal(0.0, s, size=(k, n))}
    ineq["rhs"] = np.zeros(k)
    fam = ProblemFamily(kind, variant, Q, p, A, ineq, L, U, lam, weights[0], weights[1], seed)

    # calibrate right-hand sides against the variable part of each body
    center = 0.5 * (L + U)
    base = _ineq_body(fam, center, rowwise_matvec(A, center))
    ys = rng.uniform(L + BOX_INSET, U - BOX_INSET, size=(256, n))
    spread = _ineq_body(fam, ys, rowwise_matvec(A, ys)) - base
    margin = np.quantile(spread, tightness, axis=0) if k else np.zeros(0)
    margin = np.maximum(margin, np.maximum(0.05 * spread.std(axis=0) if k else 0.0, 10 * INTERIOR_MARGIN))
    ineq["rhs"] = base + margin
    return ProblemFamily(kind, variant, Q, p, A, ineq, L, U, lam, weights[0], weights[1], seed)


def sample_instance(family: ProblemFamily, seed: int) -> Instance:
    rng = np.random.default_rng(seed)
    center = 0.5 * (family.L + family.U)
    y = rng.uniform(family.L + BOX_INSET, family.U - BOX_INSET)
    for _ in range(MAX_SHRINK_STEPS):
        x = rowwise_matvec(family.A, y)
        if np.all(constraints(family, y, x)[1] <= -INTERIOR_MARGIN):
            return Instance(x=x, interior=y, seed=seed)
        y = center + SHRINK_FACTOR * (y - center)
    raise InstanceError("no strictly interior point found; regenerate the family")


def check_instance(family: ProblemFamily, inst: Instance, atol: float = 1e-10) -> bool:
    h, g = constraints(family, inst.interior, inst.x)
    return bool(np.max(np.abs(h), initial=0.0) <= atol and np.all(g <= -INTERIOR_MARGIN))


# ---------------------------------------------------------------------------
# evaluation (dual path: ndarray or Var)


def _split_last(v, a, b):
    shape = ad.value(v).shape[:-1] + (a, b)
    return ad.reshape(v, shape)


def _rhs_cos_x(fam, x):
    """Nonconvex QP right-hand side ``rhs * cos(x)``; x is cycled if n_eq != n_ineq."""
    x = as_array(x)
    idx = np.arange(fam.n_ineq) % fam.n_eq
    return fam.ineq["rhs"] * np.cos(x[..., idx])


def _ineq_body(fam: ProblemFamily, y, x):
    """Core inequality rows (without box rows), in ``g(y) <= 0`` form."""
    c, q = fam._cache, fam.ineq
    if fam.kind == "qp":
        if fam.nonconvex:
            return ad.matvec(q["G"], ad.sin(y)) - _rhs_cos_x(fam, x)
        return ad.matvec(q["G"], y) - q["rhs"]
    if fam.kind == "qcqp":
        Hy = _split_last(ad.matvec(c["Hstack"], y), fam.n_ineq, fam.n)
        quad = ad.sum(Hy * ad.expand(y, -2), axis=-1)
        lin = ad.matvec(q["G"], ad.cos(y) if fam.nonconvex else y)
        return quad + lin - q["rhs"]
    u = _cone_args(fam, y)
    return ad.norm(u) - ad.matvec(q["C"], y) - q["rhs"]


def _cone_args(fam, y):
    c = fam._cache
    z = ad.cos(y) if fam.nonconvex else y
    return _split_last(ad.matvec(c["Gstack"], z) + c["hflat"], fam.n_ineq, fam.cone_rows)


def _ineq_vjp(fam: ProblemFamily, y, v):
    """``J_body(y)^T v`` for the core inequality rows."""
    c, q = fam._cache, fam.ineq
    if fam.kind == "qp":
        if fam.nonconvex:
            return ad.cos(y) * ad.matvec(c["Gt"], v)
        return ad.matvec(c["Gt"], v)
    if fam.kind == "qcqp":
        Hy = _split_last(ad.matvec(c["Hstack"], y), fam.n_ineq, fam.n)
        quad = 2.0 * ad.sum(Hy * ad.expand(v, -1), axis=-2)
        if fam.nonconvex:
            return quad - ad.sin(y) * ad.matvec(c["Gt"], v)
        return quad + ad.matvec(c["Gt"], v)
    u = _cone_args(fam, y)
    scale = v / ad.maximum(ad.norm(u), ad.NORM_EPS)
    w = ad.reshape(u * ad.expand(scale, -1),
                   ad.value(u).shape[:-2] + (fam.n_ineq * fam.cone_rows,))
    back = ad.matvec(c["GstackT"], w)
    if fam.nonconvex:
        back = -(ad.sin(y) * back)
    return back - ad.matvec(c["Ct"], v)


def objective(fam: ProblemFamily, y, x=None):
    quad = 0.5 * ad.dot(y, ad.matvec(fam.Q, y))
    if fam.nonconvex:
        f = quad + ad.dot(ad.sin(y), fam.p)
    else:
        f = quad + ad.dot(y, fam.p)
    if fam.variant == "nonsmooth":
        f = f + fam.lam * ad.norm(y)
    return f


def objective_grad(fam: ProblemFamily, y, x=None) -> np.ndarray:
    y = as_array(y)
    g = rowwise_matvec(fam.Q, y)
    g = g + (np.cos(y) * fam.p if fam.nonconvex else fam.p)
    if fam.variant == "nonsmooth":
        nrm = np.sqrt(ad.rowwise_dot(y, y))
        g = g + fam.lam * y / np.maximum(nrm, ad.NORM_EPS)[..., None]
    return g


def eq_residual(fam: ProblemFamily, y, x):
    return ad.matvec(fam.A, y) - x


def ineq_parts(fam: ProblemFamily, y, x):
    """(core rows, lower-bound rows, upper-bound rows), each ``<= 0`` when feasible."""
    return _ineq_body(fam, y, x), fam.L - y, y - fam.U


def constraints(fam: ProblemFamily, y, x):
    """Return ``(h, g)`` with box bounds appended to ``g`` as 2n extra rows."""
    y, x = as_array(y), as_array(x)
    if y.shape[-1] != fam.n:
        raise FamilyError(f"expected decision vector of length {fam.n}, got {y.shape[-1]}")
    h = eq_residual(fam, y, x)
    return h, np.concatenate(ineq_parts(fam, y, x), axis=-1)


def violation(fam: ProblemFamily, y, x, smooth_beta: float | None = None):
    """phi = w_eq ||h||^2 + w_ineq ||g+||^2 (softplus instead of max when smoothing)."""
    plus = ad.relu if smooth_beta is None else (lambda z: ad.softplus(z, smooth_beta))
    phi = fam.w_eq * ad.sqnorm(eq_residual(fam, y, x))
    for part in ineq_parts(fam, y, x):
        phi = phi + fam.w_ineq * ad.sqnorm(plus(part))
    return phi


def violation_grad(fam: ProblemFamily, y, x, smooth_beta: float | None = None):
    """Closed-form gradient of :func:`violation` with respect to ``y``.

    Written with the dual-path helpers so that a gradient step recorded on a
    tape stays differentiable (the unrolled solver needs this).
    """
    core, lo, hi = ineq_parts(fam, y, x)
    if smooth_beta is None:
        wgt = ad.relu
    else:
        def wgt(z):
            return ad.softplus(z, smooth_beta) * ad.sigmoid(z, smooth_beta)
    grad = (2.0 * fam.w_eq) * ad.matvec(fam._cache["At"], eq_residual(fam, y, x))
    box = wgt(hi) - wgt(lo)
    total = _ineq_vjp(fam, y, wgt(core)) + box if fam.n_ineq else box
    return grad + (2.0 * fam.w_ineq) * total


def violation_and_grad(fam: ProblemFamily, y, x, smooth_beta: float | None = None):
    return violation(fam, y, x, smooth_beta), violation_grad(fam, y, x, smooth_beta)


def violation_l1(fam: ProblemFamily, y, x) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted ``(||h||_1, ||g+||_1)``; the reporting metric, not phi."""
    h, g = constraints(fam, y, x)
    return np.sum(np.abs(h), axis=-1), np.sum(np.maximum(g, 0.0), axis=-1)


# ---------------------------------------------------------------------------
# persistence

_ARRAY_FIELDS = ("Q", "p", "A", "L", "U")


def save_family(fam: ProblemFamily, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in _ARRAY_FIELDS:
        arr = getattr(fam, name)
        arr.astype("<f8").tofile(d / f"{name}.f64")
        shapes[name] = list(arr.shape)
    for key, arr in fam.ineq.items():
        arr.astype("<f8").tofile(d / f"ineq_{key}.f64")
        shapes[f"ineq_{key}"] = list(arr.shape)
    manifest = {
        "kind": fam.kind, "variant": fam.variant, "n": fam.n, "n_eq": fam.n_eq,
        "n_ineq": fam.n_ineq, "cone_rows": fam.cone_rows, "seed": fam.seed,
        "weights": [fam.w_eq, fam.w_ineq], "lambda": fam.lam, "shapes": shapes,
    }
    (d / "family.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_family(directory: str | Path) -> ProblemFamily:
    d = Path(directory)
    manifest = json.loads((d / "family.json").read_text())
    shapes = manifest["shapes"]

    def read(name):
        return np.fromfile(d / f"{name}.f64", dtype="<f8").reshape(shapes[name])

    ineq = {k[len("ineq_"):]: read(k) for k in shapes if k.startswith("ineq_")}
    w_eq, w_ineq = manifest["weights"]
    return ProblemFamily(manifest["kind"], manifest["variant"], read("Q"), read("p"), read("A"),
                         ineq, read("L"), read("U"), manifest["lambda"], w_eq, w_ineq,
                         manifest["seed"])
