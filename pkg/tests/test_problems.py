import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasnet import autodiff as ad
from feasnet import problems as P
from feasnet.problems import ProblemFamily

ALL = [(k, v) for k in P.KINDS for v in P.VARIANTS]


def toy_family(Q, p, A, G=None, rhs=None, lam=0.1, variant="convex", w=(10.0, 10.0), bound=5.0):
    n = len(p)
    G = np.zeros((0, n)) if G is None else np.atleast_2d(G)
    rhs = np.zeros(0) if rhs is None else np.atleast_1d(rhs)
    return ProblemFamily("qp", variant, np.atleast_2d(Q), np.asarray(p, float), np.atleast_2d(A),
                         {"G": G, "rhs": rhs}, np.full(n, -bound), np.full(n, bound), lam, *w)


def test_generate_shapes_and_rank():
    fam = P.generate_family("qp", "convex", 10, 5, 5, seed=7)
    assert fam.A.shape == (5, 10)
    assert np.linalg.matrix_rank(fam.A) == 5
    assert np.all(np.linalg.eigvalsh(fam.Q) > 0)
    assert np.all(fam.L == -5) and np.all(fam.U == 5)


@pytest.mark.parametrize("kind,variant", ALL)
def test_generate_is_deterministic(kind, variant):
    a = P.generate_family(kind, variant, 8, 3, 4, seed=3)
    b = P.generate_family(kind, variant, 8, 3, 4, seed=3)
    for name in ("Q", "p", "A", "L", "U"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    for key in a.ineq:
        assert np.array_equal(a.ineq[key], b.ineq[key])


def test_generate_rejects_bad_dims():
    with pytest.raises(P.FamilyError):
        P.generate_family("qp", "convex", 3, 5, 1, seed=0)
    with pytest.raises(P.FamilyError):
        P.generate_family("lp", "convex", 3, 1, 1, seed=0)


def test_qcqp_matrices_spd():
    fam = P.generate_family("qcqp", "convex", 6, 2, 3, seed=1)
    for H in fam.ineq["H"]:
        assert np.all(np.linalg.eigvalsh(H) > 0)
    assert P.generate_family("socp", "convex", 6, 2, 3, seed=1).cone_rows == 10


@pytest.mark.parametrize("kind,variant", ALL)
def test_sampled_instances_are_interior(kind, variant):
    fam = P.generate_family(kind, variant, 12, 4, 6, seed=5)
    for s in range(5):
        inst = P.sample_instance(fam, s)
        h, g = P.constraints(fam, inst.interior, inst.x)
        assert np.max(np.abs(h)) <= 1e-10
        assert np.all(g <= -P.INTERIOR_MARGIN)
        assert P.violation(fam, inst.interior, inst.x) <= 1e-16
        assert P.check_instance(fam, inst)
    a, b = P.sample_instance(fam, 1), P.sample_instance(fam, 2)
    assert not np.array_equal(a.x, b.x)


def test_objective_examples():
    fam = toy_family(np.eye(2), [0.0, 0.0], [[1.0, 0.0]])
    assert P.objective(fam, np.array([1.0, 1.0])) == 1.0
    fam = toy_family(np.eye(2), [1.0, -2.0], [[1.0, 0.0]], variant="nonconvex")
    assert P.objective(fam, np.zeros(2)) == 0.0
    fam = toy_family(np.zeros((2, 2)), [0.0, 0.0], [[1.0, 0.0]], lam=1.0, variant="nonsmooth")
    assert P.objective(fam, np.array([3.0, 4.0])) == 5.0


def test_constraints_bounds_rows():
    fam = P.generate_family("qp", "convex", 4, 2, 2, seed=0)
    y = fam.U + 1.0
    h, g = P.constraints(fam, y, np.zeros(2))
    assert g.shape == (2 + 2 * 4,)
    np.testing.assert_array_equal(g[-4:], np.ones(4))
    with pytest.raises(P.FamilyError):
        P.constraints(fam, np.zeros(3), np.zeros(2))


def test_socp_rows_match_direct_evaluation():
    fam = P.generate_family("socp", "convex", 5, 2, 3, seed=2)
    y = np.random.default_rng(0).normal(size=5)
    _, g = P.constraints(fam, y, np.zeros(2))
    q = fam.ineq
    direct = [np.linalg.norm(q["G"][i] @ y + q["h"][i]) - q["C"][i] @ y - q["rhs"][i] for i in range(3)]
    np.testing.assert_allclose(g[:3], direct, rtol=1e-13, atol=1e-13)


def test_nonconvex_qp_rows():
    fam = P.generate_family("qp", "nonconvex", 5, 3, 3, seed=2)
    rng = np.random.default_rng(1)
    y, x = rng.normal(size=5), rng.normal(size=3)
    _, g = P.constraints(fam, y, x)
    direct = fam.ineq["G"] @ np.sin(y) - fam.ineq["rhs"] * np.cos(x)
    np.testing.assert_allclose(g[:3], direct, rtol=1e-13, atol=1e-13)


def test_violation_examples():
    fam = toy_family([[1.0]], [0.0], [[1.0]], w=(1.0, 1.0), bound=np.inf)
    assert P.violation(fam, np.array([3.0]), np.array([1.0])) == 4.0
    eq, ineq = P.violation_l1(fam, np.array([1.0]), np.array([1.0]))
    assert eq == 0.0 and ineq == 0.0


def test_violation_l1_example():
    # h = (-1, 2), g+ = (0, 3)
    fam = toy_family(np.eye(2), [0.0, 0.0], np.eye(2), G=np.eye(2), rhs=[1.0, -3.0], bound=np.inf)
    eq, ineq = P.violation_l1(fam, np.zeros(2), np.array([1.0, -2.0]))
    assert (eq, ineq) == (3.0, 3.0)


@pytest.mark.parametrize("kind,variant", ALL)
def test_violation_matches_direct_sum(kind, variant):
    fam = P.generate_family(kind, variant, 7, 3, 4, seed=9)
    rng = np.random.default_rng(0)
    for _ in range(5):
        y, x = rng.normal(scale=3, size=7), rng.normal(size=3)
        h, g = P.constraints(fam, y, x)
        direct = fam.w_eq * np.sum(h ** 2) + fam.w_ineq * np.sum(np.maximum(g, 0) ** 2)
        phi = P.violation(fam, y, x)
        assert phi >= 0
        np.testing.assert_allclose(phi, direct, rtol=1e-12)
        eq, ineq = P.violation_l1(fam, y, x)
        assert (phi == 0) == (eq == 0 and ineq == 0)


@pytest.mark.parametrize("kind,variant", ALL)
def test_violation_gradient(kind, variant):
    fam = P.generate_family(kind, variant, 6, 3, 3, seed=4)
    inst = P.sample_instance(fam, 0)
    rng = np.random.default_rng(2)
    y = inst.interior + rng.normal(scale=2.0, size=6)
    assert ad.grad_check(lambda v: P.violation(fam, v, inst.x), y) <= 1e-6
    # closed form agrees with the tape
    t = ad.Tape()
    yv = t.leaf(y)
    (g,) = t.backward(P.violation(fam, yv, inst.x), [yv])
    np.testing.assert_allclose(P.violation_grad(fam, y, inst.x), g, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind,variant", ALL)
def test_violation_smoothed_gradient(kind, variant):
    fam = P.generate_family(kind, variant, 6, 3, 3, seed=4)
    inst = P.sample_instance(fam, 0)
    y = inst.interior + np.random.default_rng(3).normal(scale=0.5, size=6)
    t = ad.Tape()
    yv = t.leaf(y)
    (g,) = t.backward(P.violation(fam, yv, inst.x, smooth_beta=50.0), [yv])
    np.testing.assert_allclose(P.violation_grad(fam, y, inst.x, smooth_beta=50.0), g, rtol=1e-9, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(ALL))
def test_feasibility_characterization(seed, kv):
    fam = P.generate_family(*kv, 6, 2, 3, seed=seed % 50)
    rng = np.random.default_rng(seed)
    inst = P.sample_instance(fam, seed)
    y = inst.interior if seed % 2 else inst.interior + rng.normal(size=6)
    h, g = P.constraints(fam, y, inst.x)
    phi = P.violation(fam, y, inst.x)
    feasible = np.max(np.abs(h)) <= 1e-12 and np.max(g) <= 1e-12
    assert (phi <= 1e-20) == feasible


def test_batched_evaluation_matches_rows():
    fam = P.generate_family("socp", "nonconvex", 8, 3, 4, seed=1)
    rng = np.random.default_rng(0)
    Y, X = rng.normal(size=(6, 8)), rng.normal(size=(6, 3))
    phi = P.violation(fam, Y, X)
    grad = P.violation_grad(fam, Y, X)
    for i in range(6):
        assert phi[i] == P.violation(fam, Y[i], X[i])
        assert np.array_equal(grad[i], P.violation_grad(fam, Y[i], X[i]))


@pytest.mark.parametrize("kind,variant", ALL)
def test_family_roundtrip(tmp_path, kind, variant):
    fam = P.generate_family(kind, variant, 6, 2, 3, seed=11)
    P.save_family(fam, tmp_path / "fam")
    back = P.load_family(tmp_path / "fam")
    assert (back.kind, back.variant, back.seed, back.w_eq) == (kind, variant, 11, fam.w_eq)
    y = np.random.default_rng(0).normal(size=6)
    x = np.ones(2)
    assert P.violation(back, y, x) == P.violation(fam, y, x)
    assert (tmp_path / "fam" / "Q.f64").stat().st_size == 6 * 6 * 8
