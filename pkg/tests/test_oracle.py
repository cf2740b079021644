import numpy as np
import pytest

from feasnet import oracle as O
from feasnet import problems as P
from feasnet.problems import ProblemFamily


def qp(Q, p, A, G=None, rhs=None, bound=5.0, variant="convex"):
    n = len(p)
    G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, float))
    rhs = np.zeros(0) if rhs is None else np.atleast_1d(np.asarray(rhs, float))
    return ProblemFamily("qp", variant, np.atleast_2d(np.asarray(Q, float)), np.asarray(p, float),
                         np.atleast_2d(np.asarray(A, float)), {"G": G, "rhs": rhs},
                         np.full(n, -bound), np.full(n, bound), 0.1, 10.0, 10.0)


def test_minimal_norm_closed_form():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 6))
    fam = qp(np.eye(6), np.zeros(6), A, bound=np.inf)
    x = rng.normal(size=3)
    res = O.aug_lagrangian_solve(fam, x)
    assert res.converged
    np.testing.assert_allclose(res.y_star, np.linalg.pinv(A) @ x, atol=1e-6)


def test_one_dimensional_example():
    # min y^2/2 s.t. y = 2 (box [-5, 5])
    fam = qp([[1.0]], [0.0], [[1.0]])
    res = O.aug_lagrangian_solve(fam, np.array([2.0]))
    assert res.converged and abs(res.y_star[0] - 2.0) <= 1e-8 and abs(res.f_star - 2.0) <= 1e-7
    g = O.grid_oracle(fam, np.array([2.0]))
    assert abs(g.f_star - 2.0) <= 1e-8


def test_two_dimensional_example_with_active_inequality():
    # min |y - (2, 2)|^2 / 2 s.t. y1 - y2 = 0, y1 <= 1  ->  y* = (1, 1)
    fam = qp(np.eye(2), [-2.0, -2.0], [[1.0, -1.0]], G=[[1.0, 0.0]], rhs=[1.0])
    res = O.aug_lagrangian_solve(fam, np.zeros(1))
    assert res.converged
    np.testing.assert_allclose(res.y_star, [1.0, 1.0], atol=1e-7)
    assert res.kkt_residual <= 1e-6
    g = O.grid_oracle(fam, np.zeros(1), resolution=101)
    np.testing.assert_allclose(g.y_star, [1.0, 1.0], atol=1e-6)
    assert abs(g.f_star - res.f_star) <= 1e-6


def test_square_above_one():
    # min y^2 s.t. y >= 1 inside the box; the equality row is y = x with a free second coordinate
    fam = qp(np.diag([2.0, 2.0]), [0.0, 0.0], [[0.0, 1.0]], G=[[-1.0, 0.0]], rhs=[-1.0])
    g = O.grid_oracle(fam, np.zeros(1), resolution=201)
    np.testing.assert_allclose(g.y_star, [1.0, 0.0], atol=1e-8)
    assert abs(g.f_star - 1.0) <= 1e-8
    res = O.aug_lagrangian_solve(fam, np.zeros(1))
    assert res.converged and abs(res.f_star - 1.0) <= 1e-6


def test_symmetric_equality_example():
    # f = |y|^2, y1 + y2 = 2  ->  y* = (1, 1), f* = 2
    fam = qp(np.diag([2.0, 2.0]), [0.0, 0.0], [[1.0, 1.0]])
    for res in (O.aug_lagrangian_solve(fam, np.array([2.0])), O.grid_oracle(fam, np.array([2.0]))):
        np.testing.assert_allclose(res.y_star, [1.0, 1.0], atol=1e-6)
        assert abs(res.f_star - 2.0) <= 1e-6


def test_inactive_constraints_give_unconstrained_minimum():
    # unconstrained minimiser (0.5, 0.5) lies on y1 = y2 and inside y1 <= 3
    fam = qp(np.eye(2), [-0.5, -0.5], [[1.0, -1.0]], G=[[1.0, 0.0]], rhs=[3.0])
    res = O.aug_lagrangian_solve(fam, np.zeros(1), y0=np.array([-1.0, -1.0]))
    np.testing.assert_allclose(res.y_star, [0.5, 0.5], atol=1e-7)


def test_gap_examples():
    assert O.optimality_gap(101.0, 100.0) == pytest.approx(0.01)
    assert O.optimality_gap(100.0, 100.0) == 0.0
    assert O.optimality_gap(95.0, 100.0) == pytest.approx(-0.05)
    for f in (-3.5, 1e-9, 7.0, 1e12):
        assert O.optimality_gap(f, f) == 0.0
    assert O.optimality_gap(11.0, 10.0) == pytest.approx(0.1)
    assert O.optimality_gap(-9.0, -10.0) == pytest.approx(0.1)
    assert O.optimality_gap(0.5, 0.0) == 0.5
    np.testing.assert_allclose(O.optimality_gap([1.0, 3.0], [1.0, 2.0]), [0.0, 0.5])


def test_grid_rejects_bad_inputs():
    fam = P.generate_family("qp", "convex", 4, 2, 2, seed=0)
    with pytest.raises(O.OracleError):
        O.grid_oracle(fam, np.zeros(2))
    fam2 = qp([[1.0]], [0.0], [[1.0]])
    with pytest.raises(O.OracleError):
        O.grid_oracle(fam2, np.array([1.0]), resolution=1)


@pytest.mark.parametrize("kind", P.KINDS)
def test_convex_solution_independent_of_start(kind):
    fam = P.generate_family(kind, "convex", 8, 3, 4, seed=2)
    inst = P.sample_instance(fam, 0)
    rng = np.random.default_rng(0)
    fs = []
    for k in range(6):
        y0 = inst.interior if k == 0 else rng.uniform(fam.L, fam.U)
        res = O.aug_lagrangian_solve(fam, inst.x, y0=y0)
        assert res.converged
        fs.append(res.f_star)
    assert max(fs) - min(fs) <= 1e-4 * max(1.0, abs(fs[0]))


@pytest.mark.parametrize("kind,variant", [(k, v) for k in P.KINDS for v in P.VARIANTS])
def test_converged_results_are_feasible(kind, variant):
    fam = P.generate_family(kind, variant, 6, 2, 3, seed=4)
    inst = P.sample_instance(fam, 1)
    res = O.aug_lagrangian_solve(fam, inst.x, y0=inst.interior)
    if res.converged:
        assert res.eq_violation <= 1e-8 and res.ineq_violation <= 1e-8
        assert res.kkt_residual <= 1e-6
        assert res.f_star == P.objective(fam, res.y_star)


def test_not_better_than_feasible_interior():
    fam = P.generate_family("qcqp", "convex", 10, 4, 5, seed=1)
    for s in range(3):
        inst = P.sample_instance(fam, s)
        res = O.aug_lagrangian_solve(fam, inst.x, y0=inst.interior)
        assert res.f_star <= P.objective(fam, inst.interior) + 1e-8


def test_cache_roundtrip_and_lookup(tmp_path):
    fam = P.generate_family("qp", "convex", 5, 2, 2, seed=3)
    insts = [P.sample_instance(fam, s) for s in (4, 9, 1)]
    cache = O.solve_instances(fam, insts)
    O.save_oracle_cache(cache, tmp_path)
    back = O.load_oracle_cache(tmp_path, family_seed=3)
    assert back.instance_seeds == [4, 9, 1]
    assert np.array_equal(back.y_star, cache.y_star) and np.array_equal(back.f_star, cache.f_star)
    y, f = back.lookup([1, 4])
    assert np.array_equal(f, cache.f_star[[2, 0]])
    with pytest.raises(KeyError):
        back.lookup([5])
    with pytest.raises(KeyError):
        O.load_oracle_cache(tmp_path, family_seed=4)
    with pytest.raises(FileNotFoundError):
        O.load_oracle_cache(tmp_path / "nowhere")
