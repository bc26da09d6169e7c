import csv

import numpy as np
import pytest

from parbeam.core import gaussian_blob, make_geometry
from parbeam.errors import InvalidArgument, ResourceLimit
from parbeam.radon import Projector, materialize
from parbeam.solvers import (InconsistentRowWarning, LinearProblem, auto_omega, cimmino, jacobi_svd, kaczmarz,
                             landweber, landweber_step, power_method_norm, semi_convergence_sweep, svd_oracle)


@pytest.fixture(scope="module")
def q8():
    g = make_geometry(6, 8)
    P = Projector(g)
    D = materialize(P)
    return g, P, D, svd_oracle(D)


def consistent(rng, m, n, rank=None):
    a = rng.normal(size=(m, n))
    if rank is not None:
        a = rng.normal(size=(m, rank)) @ rng.normal(size=(rank, n))
    return a, a @ rng.normal(size=n)


# ---------------------------------------------------------------- problem / trace

def test_problem_shape_checks(rng):
    a = rng.normal(size=(4, 3))
    with pytest.raises(InvalidArgument):
        LinearProblem(a, np.zeros(5))
    with pytest.raises(InvalidArgument):
        LinearProblem(a, np.zeros(4), truth=np.zeros(2))


def test_problem_rejects_non_adjoint_pair(rng):
    class Bad:
        shape = (4, 3)

        def matvec(self, x):
            return np.ones(4) * x.sum()

        def rmatvec(self, y):
            return np.zeros(3)

    with pytest.raises(InvalidArgument):
        LinearProblem(Bad(), np.zeros(4))


def test_trace_csv(tmp_path, rng):
    a, g = consistent(rng, 5, 3)
    pr = LinearProblem(a, g, truth=np.linalg.lstsq(a, g, rcond=None)[0])
    _, tr = landweber(pr, "auto", 4)
    tr.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["k", "residual", "error", "mae_hu", "ms"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3, 4]
    with pytest.raises(InvalidArgument):
        tr.log(4, pr, np.zeros(3))


# ---------------------------------------------------------------- power method

def test_power_diag():
    assert power_method_norm(np.diag([3.0, 1.0]), 50, 0).sigma == pytest.approx(3.0, rel=1e-6)


def test_power_matches_svd(q8):
    _, P, _, orc = q8
    assert power_method_norm(P, 200, 0).sigma == pytest.approx(orc.s[0], rel=1e-4)


def test_power_seed_independence(q8):
    _, P, _, _ = q8
    a = power_method_norm(P, 200, 0).sigma
    b = power_method_norm(P, 200, 7).sigma
    assert abs(a - b) <= 1e-6 * a


def test_power_zero_operator():
    r = power_method_norm(np.zeros((3, 3)), 10)
    assert r.sigma == 0.0 and r.zero


def test_power_needs_iterations():
    with pytest.raises(InvalidArgument):
        power_method_norm(np.eye(2), 0)


# ---------------------------------------------------------------- landweber

def test_landweber_pinv(rng):
    a, g = consistent(rng, 4, 3)
    s = np.linalg.svd(a, compute_uv=False)[0]
    f, _ = landweber(LinearProblem(a, g), 1 / s ** 2, 500, trace=False)
    assert np.linalg.norm(f - np.linalg.pinv(a) @ g) <= 1e-6


def test_landweber_keeps_kernel_component(rng):
    a, g = consistent(rng, 6, 8, rank=4)
    orc = svd_oracle(a)
    c = orc.proj_ker(rng.normal(size=8))
    s = orc.s[0]
    f, _ = landweber(LinearProblem(a, g, f0=c), 1 / s ** 2, 3000, trace=False)
    assert np.linalg.norm(f - (orc.pinv_apply(g) + c)) <= 1e-6


def test_landweber_closed_form(rng):
    a = rng.normal(size=(20, 12))
    g = rng.normal(size=20)
    orc = svd_oracle(a)
    omega = 1 / orc.s[0] ** 2
    for k in (1, 5, 20):
        f, _ = landweber(LinearProblem(a, g), omega, k, trace=False)
        assert np.linalg.norm(f - orc.landweber_iterate(g, omega, k)) <= 1e-9


def test_landweber_rejects_large_step(rng):
    a, g = consistent(rng, 4, 3)
    s = np.linalg.svd(a, compute_uv=False)[0]
    with pytest.raises(InvalidArgument):
        landweber(LinearProblem(a, g), 2.5 / s ** 2, 5)
    landweber(LinearProblem(a, g), 2.5 / s ** 2, 5, override=True)


def test_landweber_auto_omega(rng):
    a, g = consistent(rng, 5, 4)
    s = power_method_norm(a, 200, 0).sigma
    assert auto_omega(s) == pytest.approx(0.9 * 2 / s ** 2, rel=1e-15)


def test_landweber_contraction(q8, rng):
    g, P, D, orc = q8
    omega = auto_omega(orc.s[0])
    c = np.max(np.abs(1 - omega * orc.s ** 2))
    assert c < 1
    sino = rng.normal(size=g.sino_shape).ravel()
    for _ in range(100):
        f1, f2 = rng.normal(size=(2, g.n * g.n))
        d = orc.proj_support(f1 - f2)
        l1 = landweber_step(P, f1, sino, omega)
        l2 = landweber_step(P, f2, sino, omega)
        assert np.linalg.norm(orc.proj_support(l1 - l2)) <= c * np.linalg.norm(d) + 1e-9


def test_landweber_is_gradient_step(rng):
    g = make_geometry(5, 8)
    P = Projector(g)
    f = rng.normal(size=g.n * g.n)
    y = rng.normal(size=g.sino_shape).ravel()
    omega = 0.01

    def obj(x):
        r = P.matvec(x) - y
        return 0.5 * r @ r

    h = 1e-5
    grad = np.array([(obj(f + h * e) - obj(f - h * e)) / (2 * h) for e in np.eye(f.size)])
    assert np.max(np.abs(landweber_step(P, f, y, omega) - (f - omega * grad))) <= 1e-6


def test_landweber_divergence_demo(rng):
    a = np.random.default_rng(3).normal(size=(30, 20))
    g = a @ np.random.default_rng(4).normal(size=20)
    s = power_method_norm(a).sigma
    _, tr = landweber(LinearProblem(a, g), 3 / s ** 2, 100, override=True)
    assert tr.residuals[-1] >= 10 * tr.residuals[0]
    _, tr = landweber(LinearProblem(a, g), 1 / s ** 2, 100)
    assert tr.residuals[-1] < tr.residuals[0]


# ---------------------------------------------------------------- kaczmarz / cimmino

def test_kaczmarz_exact_solution(rng):
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    x = rng.normal(size=3)
    f, _ = kaczmarz(LinearProblem(a, a @ x), omega=1.0, sweeps=200)
    assert np.linalg.norm(f - x) <= 1e-8


def test_kaczmarz_projection_property(rng):
    a, g = consistent(rng, 5, 4)
    f, _ = kaczmarz(LinearProblem(a[:1], g[:1]), omega=1.0, sweeps=1)
    assert a[0] @ f == pytest.approx(g[0], rel=1e-12)


def test_kaczmarz_zero_relaxation(rng):
    a, g = consistent(rng, 5, 4)
    f0 = rng.normal(size=4)
    f, _ = kaczmarz(LinearProblem(a, g, f0=f0), omega=0.0, sweeps=3)
    assert np.array_equal(f, f0)


def test_kaczmarz_errors(rng):
    a, g = consistent(rng, 4, 3)
    pr = LinearProblem(a, g)
    with pytest.raises(InvalidArgument):
        kaczmarz(pr, blocks=[[0, 1], []], sweeps=1)
    with pytest.raises(InvalidArgument):
        kaczmarz(pr, blocks=[[0, 1], [1, 2, 3]], sweeps=1)
    with pytest.raises(InvalidArgument):
        kaczmarz(pr, omega=2.5)


def test_kaczmarz_skips_inconsistent_zero_row(rng):
    a = rng.normal(size=(4, 3))
    a[2] = 0.0
    x = rng.normal(size=3)
    g = a @ x
    g[2] = 1.0
    with pytest.warns(InconsistentRowWarning):
        f, _ = kaczmarz(LinearProblem(a, g), sweeps=300)
    assert np.linalg.norm(f - x) <= 1e-8


def test_kaczmarz_bound_mode_blocks(rng):
    a = rng.normal(size=(6, 4))
    x = rng.normal(size=4)
    f, _ = kaczmarz(LinearProblem(a, a @ x), blocks=[[0, 1, 2], [3, 4, 5]], mode="bound", sweeps=2000)
    assert np.linalg.norm(f - x) <= 1e-6


def test_cimmino_single_block_is_landweber(rng):
    a, g = consistent(rng, 6, 4)
    pr = LinearProblem(a, g)
    gamma = 1.05 * power_method_norm(a).sigma ** 2
    f1, _ = cimmino(pr, blocks=[np.arange(6)], omega=1.0, iters=25, gamma=gamma)
    f2, _ = landweber(pr, 1.0 / gamma, 25)
    assert np.array_equal(f1, f2)


def test_cimmino_converges_to_pinv(rng):
    a, g = consistent(rng, 6, 4)
    f, _ = cimmino(LinearProblem(a, g), omega=1.0, iters=3000, mode="bound",
                   blocks=[[0, 1], [2, 3], [4, 5]])
    assert np.linalg.norm(f - np.linalg.pinv(a) @ g) <= 1e-6


def test_cimmino_block_order_irrelevant(rng):
    a, g = consistent(rng, 6, 4)
    pr = LinearProblem(a, g)
    f1, _ = cimmino(pr, blocks=[[0, 1], [2, 3], [4, 5]], iters=10)
    f2, _ = cimmino(pr, blocks=[[4, 5], [0, 1], [2, 3]], iters=10)
    assert np.array_equal(f1, f2)


def test_rowsum_mode_runs(q8, rng):
    g, P, _, _ = q8
    f = gaussian_blob(g, 0.3)
    pr = LinearProblem(P, P.forward(f), truth=f)
    _, tr = cimmino(pr, omega=1.0, iters=30, mode="rowsum")
    assert tr.errors[-1] < tr.errors[0]


def test_kernel_component_untouched(q8, rng):
    g, P, D, orc = q8
    f0 = rng.normal(size=g.n * g.n)
    y = rng.normal(size=g.sino_shape).ravel()
    ker0 = orc.proj_ker(f0)
    pr = LinearProblem(P, y, f0=f0)
    sig = orc.s[0]
    for f in (landweber(pr, auto_omega(sig), 5, trace=False, sigma_max=sig)[0],
              kaczmarz(pr, omega=1.0, sweeps=2, trace=False)[0],
              cimmino(pr, omega=1.0, iters=5, mode="bound", trace=False)[0]):
        assert np.linalg.norm(orc.proj_ker(f.ravel()) - ker0) <= 1e-9 * max(1.0, np.linalg.norm(ker0))


# ---------------------------------------------------------------- SVD oracle

def test_svd_identity_and_diag():
    np.testing.assert_allclose(svd_oracle(np.eye(5)).s, np.ones(5), rtol=1e-14)
    np.testing.assert_allclose(svd_oracle(np.diag([3.0, 2.0, 1.0])).s, [3, 2, 1], rtol=1e-14)


def test_svd_reconstruction(rng):
    a = rng.normal(size=(20, 12))
    u, s, v = jacobi_svd(a)
    assert np.linalg.norm(a - u @ np.diag(s) @ v.T) <= 1e-10 * np.linalg.norm(a)
    assert np.all(np.diff(s) <= 0) and np.all(s > 0)
    np.testing.assert_allclose(u.T @ u, np.eye(12), atol=1e-10)
    np.testing.assert_allclose(v.T @ v, np.eye(12), atol=1e-10)


def test_svd_wide_matrix(rng):
    a = rng.normal(size=(5, 9))
    u, s, v = jacobi_svd(a)
    assert np.linalg.norm(a - u @ np.diag(s) @ v.T) <= 1e-10 * np.linalg.norm(a)


def test_svd_projector_invariant(q8):
    _, _, D, orc = q8
    rec = orc.U @ np.diag(orc.s) @ orc.V.T
    assert np.linalg.norm(D.matrix - rec) <= 1e-8 * np.linalg.norm(D.matrix)


def test_svd_cap():
    with pytest.raises(ResourceLimit):
        svd_oracle(np.zeros((10, 10)), cap=8)


# ---------------------------------------------------------------- semi-convergence

def test_sweep_noise_free_monotone():
    g = make_geometry(12, 8)
    P = Projector(g)
    for seed in range(30):
        truth = np.random.default_rng(seed).normal(size=g.image_shape) * g.disk_mask()
        res = semi_convergence_sweep(truth, P, P.forward(truth), 25, 1, seed=seed)
        assert np.all(np.diff(res.mean_error) <= 1e-12)


def test_sweep_single_row(tmp_path):
    g = make_geometry(4, 4)
    P = Projector(g)
    truth = gaussian_blob(g, 0.3)
    res = semi_convergence_sweep(truth, P, P.forward(truth), 1, 1)
    res.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert len(rows) == 2 and rows[1][0] == "1"


def test_sweep_unknown_method():
    g = make_geometry(4, 4)
    P = Projector(g)
    truth = gaussian_blob(g, 0.3)
    with pytest.raises(InvalidArgument):
        semi_convergence_sweep(truth, P, P.forward(truth), 2, 1, method="cg")
