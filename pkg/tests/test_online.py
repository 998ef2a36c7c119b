import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outmpc import bundle as bundle_io
from outmpc import lmi, online
from outmpc.model import Measurement, desk1
from outmpc.online import (
    Controller, assemble, max_measured_slice_cost, max_quadratic_on_ellipsoid, shifted_candidate, solve_step,
)


def _meas(y, up=0.0):
    return Measurement(np.array([y]), np.array([up]))


def _qcqp_oracle(prob):
    """The online problem as a convex QCQP, solved by cvxpy/Clarabel."""
    J = cp.Variable(prob.N)
    c = cp.Variable(prob.n_c)
    cons = []
    for q in prob.constraints:
        r = q.a + q.B @ c
        s = (J[q.j] if q.j is not None else q.bound) - q.offset
        cons.append(cp.sum_squares(r) <= s)
    p = cp.Problem(cp.Minimize(cp.sum(J)), cons)
    p.solve(solver=cp.CLARABEL)
    return p.status, J.value, c.value


def test_origin_optimum(desk_bundle):
    prob = assemble(desk_bundle, _meas(0.0))
    res = solve_step(prob, desk_bundle)
    assert res.feasible
    assert np.allclose(res.c_star, 0.0, atol=1e-6)
    offsets = [desk_bundle.table.last("cost", k) for k in range(desk_bundle.spec.horizon)]
    assert np.allclose(res.J_star, offsets, atol=1e-6)
    assert np.allclose(res.u, 0.0, atol=1e-6)


def test_census_desk1(desk_bundle):
    prob = assemble(desk_bundle, _meas(0.05))
    N = desk_bundle.spec.horizon
    assert len(prob.constraints) == 5 * N + 1
    assert prob.census() == {"Sigma": N, "Gamma": N, "Psi": N, "chi": N, "Xi": N, "Sigma_N": 1}


def test_census_horizon_one():
    b = bundle_io.synthesize(desk1(horizon=1), np.array([0.1]))
    prob = assemble(b, _meas(0.05))
    assert [q.name for q in prob.constraints] == ["Sigma[0]", "Gamma[0]", "Psi[0]", "chi[1]", "Xi[1]", "Sigma_N"]
    res = solve_step(prob, b)
    assert res.feasible
    Js, cs = shifted_candidate(res)
    assert np.array_equal(Js, res.J_star) and np.array_equal(cs, np.zeros((1, 1)))


def test_dimension_mismatch(desk_bundle):
    with pytest.raises(lmi.InvalidInput):
        assemble(desk_bundle, Measurement(np.zeros(2), np.zeros(1)))


def test_forced_zero_solution(desk_bundle):
    prob = assemble(desk_bundle, _meas(0.0))
    # leave no room on the direct input and rate blocks: c_0 must vanish
    for q in prob.constraints:
        if q.name in ("Gamma[0]", "Psi[0]"):
            q.bound = q.offset
    res = solve_step(prob, desk_bundle, method="socp")
    assert abs(res.c_star[0, 0]) <= 1e-4
    assert res.min_margin >= -1e-8


@pytest.mark.parametrize("y", [-0.6, -0.3, -0.05, 0.0, 0.1, 0.4, 0.65])
def test_matches_qcqp_oracle(desk_bundle, y):
    prob = assemble(desk_bundle, _meas(y, 0.3 * y))
    res = solve_step(prob, desk_bundle)
    status, J, c = _qcqp_oracle(prob)
    assert status == "optimal" and res.feasible
    assert res.J_sum == pytest.approx(float(np.sum(J)), rel=1e-5)
    assert prob.is_feasible(res.J_star, res.c_star.reshape(-1))


@pytest.mark.parametrize("y", [-0.5, 0.02, 0.3])
def test_lmi_and_socp_paths_agree(desk_bundle, y):
    prob = assemble(desk_bundle, _meas(y))
    a = solve_step(prob, desk_bundle, "lmi")
    b = solve_step(prob, desk_bundle, "socp")
    assert a.J_sum == pytest.approx(b.J_sum, rel=1e-5)
    assert np.allclose(a.c_star, b.c_star, atol=1e-4)


def test_far_measurement_infeasible(desk_bundle):
    res = solve_step(assemble(desk_bundle, _meas(5.0)), desk_bundle)
    assert not res.feasible


def test_block_to_quadratic_equivalence(desk_bundle, rng):
    prob = assemble(desk_bundle, _meas(0.2))
    for _ in range(200):
        J = rng.uniform(0, 5, prob.N)
        c = rng.standard_normal(prob.n_c) * rng.uniform(0, 1)
        for q in prob.constraints:
            blk = q.block(J, c)
            quad = q.margin(J, c)
            eig = lmi.min_eig(blk)
            if abs(quad) > 1e-10:
                assert (eig >= 0) == (quad >= 0)
            # the bordered block and the quadratic margin share their sign through the Schur complement
            assert min(eig, 0.0) >= min(quad, 0.0) - 1e-10


def test_applied_input_admissible(desk_bundle):
    spec = desk_bundle.spec
    for y, up in [(0.5, -0.2), (-0.6, 0.1), (0.2, 0.0)]:
        res = solve_step(assemble(desk_bundle, _meas(y, up)), desk_bundle)
        assert res.feasible
        assert np.linalg.norm(res.u) <= spec.u_max + 1e-8
        assert np.linalg.norm(res.u - up) <= spec.du_max + 1e-8
        assert np.allclose(online.apply(res, _meas(y, up), desk_bundle.K), res.u)


def test_shifted_candidate_pattern():
    prev = online.StepResult(np.zeros(1), np.array([[1.0], [2.0], [3.0]]), np.array([4.0, 5.0, 6.0]),
                             15.0, "optimal", None, 0.0, 0.0)
    J, c = shifted_candidate(prev)
    assert np.array_equal(J, [5.0, 6.0, 6.0])
    assert np.array_equal(c, [[2.0], [3.0], [0.0]])
    prev.c_star = np.zeros((3, 1))
    assert np.array_equal(shifted_candidate(prev)[1], np.zeros((3, 1)))


# ---------------------------------------------------------------------------
# maximum of a quadratic over an ellipsoid

def _brute_max(A, g, S, n=400_000, seed=0):
    r = np.random.default_rng(seed)
    L = np.linalg.cholesky(np.linalg.inv(S))
    d = r.standard_normal((n, A.shape[0]))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    z = d @ L.T
    return float(np.max(np.einsum("ij,jk,ik->i", z, A, z) + 2 * z @ g))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quadratic_on_ellipsoid_matches_sampling(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 4))
    a = r.standard_normal((n, n))
    A = a @ a.T
    s = r.standard_normal((n, n))
    S = s @ s.T + 0.2 * np.eye(n)
    g = r.standard_normal(n) * r.uniform(0, 2)
    exact = max_quadratic_on_ellipsoid(A, g, S)
    brute = _brute_max(A, g, S, n=20_000 if n > 1 else 2_000, seed=seed)
    # the maximum of a convex function is attained on the boundary, so sampling bounds it from below
    assert exact >= brute - 1e-9
    if n < 3:
        # boundary sampling is dense enough in one and two dimensions to pin the maximum
        assert exact <= brute + 0.02 * (1 + abs(brute))


def test_quadratic_on_ellipsoid_cases():
    # scalar: max a z^2 + 2 g z on |z| <= 1 is a + 2|g|
    assert max_quadratic_on_ellipsoid([[2.0]], [0.5], [[1.0]]) == pytest.approx(3.0)
    # hard case: g orthogonal to the top eigenvector
    assert max_quadratic_on_ellipsoid(np.diag([1.0, 1.0]), [0.0, 0.0], np.eye(2)) == pytest.approx(1.0)
    assert max_quadratic_on_ellipsoid(np.diag([2.0, 1.0]), [0.0, 0.1], np.eye(2)) == pytest.approx(2.01, rel=1e-9)
    # singular S with growth along its null space
    assert math.isinf(max_quadratic_on_ellipsoid(np.eye(2), [0.0, 0.0], np.diag([1.0, 0.0])))
    assert max_quadratic_on_ellipsoid(np.diag([1.0, 0.0]), [0.0, 0.0], np.diag([1.0, 0.0])) == pytest.approx(1.0)


def test_v_bound(desk_bundle):
    # DESK1: R_x = I, S = 1 so the slice maximum is y^2 + 1
    assert max_measured_slice_cost(desk_bundle, [0.3]) == pytest.approx(1.09)
    res = solve_step(assemble(desk_bundle, _meas(0.3)), desk_bundle)
    assert res.V_bound == pytest.approx(res.J_sum + 1.09)


# ---------------------------------------------------------------------------
# fallback ladder

def test_fallback_shifted_then_gain(desk_bundle, monkeypatch):
    ctl = Controller(desk_bundle)
    first, _ = ctl.step([0.1])
    assert first.fallback is None
    real = online.solve_step

    def broken(prob, bundle=None, method="lmi"):
        r = real(prob, bundle, method)
        r.status = "numerical_failure"
        return r

    monkeypatch.setattr(online, "solve_step", broken)
    second, _ = ctl.step([0.09])
    assert second.fallback in ("shifted", "gain_only")
    assert ctl.breaches and ctl.breaches[0][0] == 1
    third, _ = ctl.step([5.0])
    assert third.fallback == "gain_only"
    assert np.allclose(third.u, desk_bundle.K @ [5.0])
