import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmc_es import qp
from gmc_es.acceptance import random_feasible_instance, random_uniform_instance

# hand-solved instances: (instance, xi, u, v)
ORIGIN = qp.QpInstance(d=[2.0, -2.0], A=[[0.0, -1.0], [0.0, 1.0]], b=[0.0, 1.0])
INFEASIBLE_START = qp.QpInstance(d=[0.0, 0.0], A=[[0.0, -1.0], [-2.0, 1.0]], b=[1.0, -1.0])
PROJECTION = qp.QpInstance(d=[1.0, 0.0], C=[[1.0, 1.0]], e=[0.0])

CASES = [
    (qp.QpInstance(d=[2.0, -2.0]), [-2.0, 2.0], [], []),
    (ORIGIN, [-2.0, 1.0], [0.0, 1.0], []),
    (INFEASIBLE_START, [0.4, -0.2], [0.0, 0.2], []),
    (PROJECTION, [-0.5, 0.5], [], [-0.5]),
    (qp.QpInstance(d=[0.0, 0.0]), [0.0, 0.0], [], []),
]


@pytest.mark.parametrize("inst, xi, u, v", CASES)
@pytest.mark.parametrize("solver", [qp.solve, qp.brute_force_solve])
def test_hand_solved_instances(solver, inst, xi, u, v):
    sol = solver(inst)
    assert sol.ok
    np.testing.assert_allclose(sol.xi, xi, atol=1e-12)
    np.testing.assert_allclose(sol.u, u, atol=1e-12)
    np.testing.assert_allclose(sol.v, v, atol=1e-12)
    assert qp.verify_kkt(inst, sol).ok


def test_active_set_reported():
    assert qp.solve(ORIGIN).active_set == (1,)
    assert qp.solve(INFEASIBLE_START).active_set == (1,)


def test_paper2d_optimum_is_stationary():
    t1, t2 = -0.58975, 0.65219
    inst = qp.QpInstance(d=[2 * (t1 + 1), 2 * (t2 - 1)], A=[[0.0, -1.0], [2 * t1, 1.0]],
                         b=[t2, -(-1 + t1 ** 2 + t2)])
    assert np.linalg.norm(qp.solve(inst).xi) <= 1e-3


def test_kkt_report_detects_perturbation():
    sol = qp.solve(ORIGIN)
    bad = qp.QpSolution(xi=sol.xi + [0.1, 0.0], u=sol.u, v=sol.v)
    rep = qp.verify_kkt(ORIGIN, bad)
    assert rep.stationarity >= 0.05 and not rep.ok


def test_kkt_report_flags_negative_multiplier():
    sol = qp.solve(ORIGIN)
    bad = qp.QpSolution(xi=sol.xi, u=np.array([-0.5, 1.0]), v=sol.v)
    rep = qp.verify_kkt(ORIGIN, bad)
    assert rep.dual == pytest.approx(0.5) and not rep.ok


def test_infeasible_detected():
    inst = qp.QpInstance(d=[0.0], A=[[1.0], [-1.0]], b=[-1.0, -1.0])  # x <= -1 and x >= 1
    assert qp.solve(inst).status == qp.INFEASIBLE
    assert qp.brute_force_solve(inst).status == qp.INFEASIBLE


def test_inconsistent_equalities_detected():
    inst = qp.QpInstance(d=[0.0, 0.0], C=[[1.0, 1.0], [1.0, 1.0]], e=[0.0, 1.0])
    assert qp.solve(inst).status == qp.INFEASIBLE


def test_greedy_start_reaches_corner():
    inst = qp.QpInstance(d=[-5.0, -5.0], A=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], b=[1.0, 1.0, 1.5])
    sol = qp.solve(inst)
    assert sol.ok
    np.testing.assert_allclose(sol.xi, qp.brute_force_solve(inst).xi, atol=1e-10)
    np.testing.assert_allclose(sol.xi, [0.75, 0.75], atol=1e-12)


def test_phase_one_fallback(monkeypatch):
    # fixing the most violated row (5x <= 5) leaves 0.1x <= 0 violated; optimum is x = 0
    calls = []
    original = qp._phase1
    monkeypatch.setattr(qp, "_phase1", lambda *a: calls.append(1) or original(*a))
    inst = qp.QpInstance(d=[-10.0], A=[[0.1], [5.0]], b=[0.0, 5.0])
    sol = qp.solve(inst)
    assert calls
    assert sol.ok
    np.testing.assert_allclose(sol.xi, [0.0], atol=1e-12)
    np.testing.assert_allclose(sol.u, [100.0, 0.0], atol=1e-9)


def test_max_iter_status():
    inst = qp.QpInstance(d=[-5.0, -5.0], A=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], b=[1.0, 1.0, 1.5])
    assert qp.solve(inst, max_iter=0).status == qp.MAX_ITER


def test_scaling_row_divides_multiplier():
    lam = 3.0
    scaled = qp.QpInstance(d=ORIGIN.d, A=ORIGIN.A * np.array([[1.0], [lam]]), b=ORIGIN.b * np.array([1.0, lam]))
    a, b = qp.solve(ORIGIN), qp.solve(scaled)
    np.testing.assert_allclose(b.xi, a.xi, atol=1e-12)
    np.testing.assert_allclose(b.u, a.u / np.array([1.0, lam]), atol=1e-12)


def test_general_cost():
    # min 0.5 x^T diag(2, 4) x - (2, 4) x  ->  x = (1, 1); with x1 + x2 <= 1:
    # 2 x1 - 2 + u = 0, 4 x2 - 4 + u = 0, x1 + x2 = 1  ->  u = 4/3, x = (1/3, 2/3)
    inst = qp.QpInstance(d=[0.0, 0.0], H=np.diag([2.0, 4.0]), c=[-2.0, -4.0], A=[[1.0, 1.0]], b=[1.0])
    sol = qp.solve(inst)
    np.testing.assert_allclose(sol.xi, [1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_allclose(sol.u, [4 / 3], atol=1e-12)


@pytest.mark.parametrize("H", [np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 0.0]])])
def test_invalid_hessian_rejected(H):
    with pytest.raises(ValueError):
        qp.QpInstance(d=[0.0, 0.0], H=H)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        qp.QpInstance(d=[0.0, 0.0], A=[[1.0, 0.0]], b=[1.0, 2.0])


def test_brute_force_size_limit():
    with pytest.raises(ValueError):
        qp.brute_force_solve(qp.QpInstance(d=[0.0], A=np.ones((13, 1)), b=np.ones(13)))


seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_matches_oracle_on_degenerate_instances(seed):
    inst = random_feasible_instance(np.random.default_rng(seed))
    sol, ref = qp.solve(inst), qp.brute_force_solve(inst)
    assert sol.ok and ref.ok
    assert np.max(np.abs(sol.xi - ref.xi), initial=0.0) <= 1e-8
    assert qp.verify_kkt(inst, sol).ok


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_matches_oracle_on_uniform_instances(seed):
    inst = random_uniform_instance(np.random.default_rng(seed))
    ref = qp.brute_force_solve(inst)
    sol = qp.solve(inst)
    assert sol.ok == ref.ok
    if ref.ok:
        assert np.max(np.abs(sol.xi - ref.xi), initial=0.0) <= 1e-8
        assert qp.verify_kkt(inst, sol).ok


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    inst = random_feasible_instance(rng)
    perm = rng.permutation(inst.m)
    shuffled = qp.QpInstance(d=inst.d, A=inst.A[perm], b=inst.b[perm], C=inst.C, e=inst.e, H=inst.H)
    a, b = qp.solve(inst), qp.solve(shuffled)
    assert np.max(np.abs(a.xi - b.xi), initial=0.0) <= 1e-10
    # multipliers are only unique for linearly independent active rows
    active = inst.A[list(a.active_set)]
    if active.shape[0] == 0 or np.linalg.matrix_rank(np.vstack([active, inst.C])) == active.shape[0] + inst.l:
        np.testing.assert_allclose(b.u, a.u[perm], atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_solve_is_deterministic(seed):
    inst = random_feasible_instance(np.random.default_rng(seed))
    a, b = qp.solve(inst), qp.solve(inst)
    assert np.array_equal(a.xi, b.xi) and np.array_equal(a.u, b.u) and a.active_set == b.active_set


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_complementarity_and_dual_feasibility(seed):
    inst = random_feasible_instance(np.random.default_rng(seed))
    sol = qp.solve(inst)
    assert np.all(sol.u >= -1e-10)
    slack = inst.A @ sol.xi - inst.b
    assert np.max(np.abs(sol.u * slack), initial=0.0) <= 1e-8
    inactive = [i for i in range(inst.m) if i not in sol.active_set]
    assert np.all(sol.u[inactive] == 0.0)
