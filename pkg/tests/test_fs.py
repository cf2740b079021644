import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasnet import autodiff as ad
from feasnet import fs
from feasnet import problems as P
from feasnet.checks import equality_only, pl_rate_check, truncation_bias
from feasnet.fs import FSConfig, ProblemFamily


def scalar_family():
    # phi(s) = s^2: h = s - x with x = 0, weight 1, no inequalities
    ineq = {"G": np.zeros((0, 1)), "rhs": np.zeros(0)}
    return ProblemFamily("qp", "convex", np.eye(1), np.zeros(1), np.eye(1), ineq,
                         np.array([-np.inf]), np.array([np.inf]), 0.0, 1.0, 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        FSConfig(max_iters=5, tracked_iters=6)
    with pytest.raises(ValueError):
        FSConfig(memory=0)
    with pytest.raises(ValueError):
        FSConfig(tol_phi=0.0)
    with pytest.raises(ValueError):
        FSConfig(method="newton")


def test_gd_scalar_steps():
    fam = scalar_family()
    cfg = FSConfig(method="gd", step_size=0.25, max_iters=1, tracked_iters=0, tol_phi=1e-300, tol_grad=1e-300)
    assert fs.fs_gd(fam, np.zeros(1), np.ones(1), cfg).point[0] == 0.5
    cfg.max_iters = 2
    res = fs.fs_gd(fam, np.zeros(1), np.ones(1), cfg)
    assert res.point[0] == 0.25
    np.testing.assert_allclose(res.phi_trajectory, [1.0, 0.25, 0.0625])


@pytest.mark.parametrize("method", ["gd", "lbfgs"])
def test_feasible_start_is_fixed_point(method):
    fam = P.generate_family("qcqp", "convex", 8, 3, 3, seed=0)
    inst = P.sample_instance(fam, 0)
    res = fs.feasibility_seek(fam, inst.x, inst.interior, FSConfig(method=method))
    assert res.iters == 0 and res.converged
    assert np.array_equal(res.point, inst.interior)


def test_lbfgs_strictly_convex_quadratic():
    rng = np.random.default_rng(0)
    fam = P.generate_family("qp", "convex", 5, 5, 1, seed=1)
    fam = equality_only(fam)
    x = rng.normal(size=5)
    res = fs.fs_lbfgs(fam, x, rng.normal(size=5), FSConfig(tol_phi=1e-12))
    assert res.final_phi <= 1e-12 and res.iters <= 15
    np.testing.assert_allclose(res.point, np.linalg.solve(fam.A, x), atol=1e-6)


def test_lbfgs_minimal_norm_correction_direction():
    # underdetermined equalities: the limit must satisfy A s = x
    rng = np.random.default_rng(1)
    fam = equality_only(P.generate_family("qp", "convex", 6, 3, 1, seed=2))
    x = rng.normal(size=3)
    res = fs.fs_lbfgs(fam, x, np.zeros(6), FSConfig(tol_phi=1e-20, tol_grad=1e-12))
    np.testing.assert_allclose(fam.A @ res.point, x, atol=1e-9)


def test_lbfgs_monotone_on_qcqp_instances():
    fam = P.generate_family("qcqp", "convex", 10, 4, 5, seed=3)
    rng = np.random.default_rng(0)
    X = np.stack([P.sample_instance(fam, s).x for s in range(100)])
    Y0 = rng.normal(scale=3.0, size=(100, 10))
    res = fs.fs_lbfgs(fam, X, Y0, FSConfig())
    assert np.all(np.diff(res.phi_trajectory, axis=0) <= 0.0)
    assert np.all(res.final_phi >= 0.0)


@pytest.mark.parametrize("kind", P.KINDS)
def test_lbfgs_reaches_feasibility(kind):
    fam = P.generate_family(kind, "convex", 20, 10, 10, seed=4)
    rng = np.random.default_rng(1)
    X = np.stack([P.sample_instance(fam, s).x for s in range(32)])
    res = fs.fs_lbfgs(fam, X, rng.normal(scale=2.0, size=(32, 20)), FSConfig(max_iters=200))
    eq, ineq = P.violation_l1(fam, res.point, X)
    assert eq.max() <= 1e-4 and ineq.max() <= 1e-4


def test_warm_start_dominance():
    fam = P.generate_family("qp", "convex", 10, 5, 5, seed=6)
    inst = P.sample_instance(fam, 0)
    rng = np.random.default_rng(2)
    far = inst.interior + rng.normal(scale=3.0, size=10)
    cfg = FSConfig(max_iters=50)
    # a start taken later on the same descent path has smaller phi
    near = fs.fs_lbfgs(fam, inst.x, far, FSConfig(max_iters=3, tracked_iters=0)).point
    assert P.violation(fam, near, inst.x) <= P.violation(fam, far, inst.x)
    assert fs.fs_lbfgs(fam, inst.x, near, cfg).final_phi <= fs.fs_lbfgs(fam, inst.x, far, cfg).final_phi + 1e-10


def test_pl_constants_examples():
    fam = equality_only(P.generate_family("qp", "convex", 2, 2, 1, seed=0).with_weights(1.0, 1.0))
    fam_i = ProblemFamily("qp", "convex", np.eye(2), np.zeros(2), np.eye(2), fam.ineq, fam.L, fam.U, 0.0, 1.0, 1.0)
    c = fs.pl_constants(fam_i)
    assert (c.mu, c.L, c.gamma) == (2.0, 2.0, 0.0)
    fam_d = ProblemFamily("qp", "convex", np.eye(2), np.zeros(2), np.diag([1.0, 2.0]), fam.ineq,
                          fam.L, fam.U, 0.0, 1.0, 1.0)
    c = fs.pl_constants(fam_d)
    assert np.isclose(c.mu, 2.0) and np.isclose(c.L, 8.0) and np.isclose(c.gamma, 0.75)


def test_pl_constants_match_svd():
    fam = P.generate_family("qp", "convex", 10, 5, 2, seed=12)
    sv = np.linalg.svd(fam.A, compute_uv=False)
    c = fs.pl_constants(fam)
    assert abs(c.mu - 2 * fam.w_eq * sv.min() ** 2) <= 1e-10
    assert abs(c.L - 2 * fam.w_eq * sv.max() ** 2) <= 1e-10


def test_gd_linear_rate():
    assert pl_rate_check(instances=10, iters=200).worst_ratio <= 1.0 + 1e-9


@pytest.mark.parametrize("method", ["gd", "lbfgs"])
@pytest.mark.parametrize("kind,variant", [("qp", "convex"), ("qcqp", "nonconvex"), ("socp", "nonsmooth")])
def test_unroll_forward_is_bit_exact(method, kind, variant):
    fam = P.generate_family(kind, variant, 12, 5, 5, seed=8)
    X = np.stack([P.sample_instance(fam, s).x for s in range(16)])
    Y0 = np.random.default_rng(0).normal(scale=2.0, size=(16, 12))
    cfg = FSConfig(method=method, max_iters=30, tracked_iters=7, unroll_method=method)
    plain = fs.feasibility_seek(fam, X, Y0, cfg)
    tape = ad.Tape()
    rec = fs.unroll_fs(fam, X, tape.leaf(Y0), cfg, tape)
    assert np.array_equal(rec.point.value, plain.point)
    for a, b in zip(tape.replay(), tape.values):
        assert np.array_equal(a, b)
    # a single row solved alone gets the same arithmetic as inside the batch
    single = fs.feasibility_seek(fam, X[3], Y0[3], cfg)
    assert np.array_equal(single.point, plain.point[3])


def test_tracked_iterations_do_not_change_forward():
    fam = P.generate_family("qp", "convex", 8, 4, 4, seed=2)
    inst = P.sample_instance(fam, 0)
    y0 = inst.interior + 1.0
    outs = []
    for k in (20, 10):
        tape = ad.Tape()
        cfg = FSConfig(max_iters=20, tracked_iters=k, tol_phi=1e-300, tol_grad=1e-300)
        outs.append(fs.unroll_fs(fam, inst.x, tape.leaf(y0), cfg).point.value)
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("kind,variant", [(k, v) for k in P.KINDS for v in ("convex", "nonconvex")])
def test_unroll_gradient_matches_fd(kind, variant):
    fam = P.generate_family(kind, variant, 6, 3, 3, seed=1)
    inst = P.sample_instance(fam, 0)
    y0 = inst.interior + np.random.default_rng(0).normal(size=6)
    cfg = FSConfig(method="gd", max_iters=10, tracked_iters=10, tol_phi=1e-300, tol_grad=1e-300)

    def fn(y):
        if isinstance(y, ad.Var):
            return ad.sqnorm(fs.unroll_fs(fam, inst.x, y, cfg).point)
        return float(np.sum(fs.fs_gd(fam, inst.x, y, cfg).point ** 2))

    assert ad.grad_check(fn, y0) <= 1e-5


def test_zero_tracked_iterations_pass_adjoint_through():
    fam = P.generate_family("qp", "convex", 6, 3, 3, seed=1)
    inst = P.sample_instance(fam, 0)
    tape = ad.Tape()
    y = tape.leaf(inst.interior + 0.7)
    out = fs.unroll_fs(fam, inst.x, y, FSConfig(max_iters=20, tracked_iters=0)).point
    w = np.arange(6.0)
    (g,) = tape.backward(ad.dot(out, w), [y])
    np.testing.assert_array_equal(g, w)


def test_unroll_requires_tape_node():
    fam = P.generate_family("qp", "convex", 4, 2, 2, seed=0)
    with pytest.raises(TypeError):
        fs.unroll_fs(fam, np.zeros(2), np.zeros(4), FSConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gd_divergence_raises():
    fam = P.generate_family("qp", "convex", 4, 2, 2, seed=0)
    with pytest.raises(fs.FSError):
        fs.fs_gd(fam, np.zeros(2), np.ones(4) * 3, FSConfig(method="gd", step_size=1e3, max_iters=400,
                                                             tol_phi=1e-300, tol_grad=1e-300))


def test_truncation_error_decays_geometrically():
    res = truncation_bias()
    assert np.all(np.diff(res.errors) <= 0.0)
    assert res.slope <= np.log(res.delta) + 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lbfgs_trajectory_non_increasing(seed):
    fam = P.generate_family(("qp", "qcqp", "socp")[seed % 3], "convex", 8, 3, 4, seed=seed % 17)
    rng = np.random.default_rng(seed)
    x = P.sample_instance(fam, seed).x
    res = fs.fs_lbfgs(fam, x, rng.normal(scale=4.0, size=8), FSConfig())
    assert np.all(np.diff(res.phi_trajectory) <= 0.0)
