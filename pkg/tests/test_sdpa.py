import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outmpc import lmi
from outmpc.lmi import InvalidInput, LmiBuilder, LmiConstraint, LmiProblem, bmat, scalar_times
from outmpc.model import DESK1_Y0
from outmpc.offline import gain_problem, rpi_problem, synthesize_gain
from outmpc.sdpa import export_sdpa, read_sdpa


def _oracle(path):
    """Independent SDPA reader solved by cvxpy: min c.x s.t. sum x_i F_i - F_0 >= 0."""
    lines = [l.split() for l in open(path) if l.strip() and l.strip()[0] not in '*"']
    n, nb = int(lines[0][0]), int(lines[1][0])
    sizes = [int(s) for s in lines[2][:nb]]
    c = np.array([float(v) for v in lines[3][:n]])
    F = [[np.zeros((s, s)) for s in sizes] for _ in range(n + 1)]
    for var, blk, i, j, val in lines[4:]:
        m = F[int(var)][int(blk) - 1]
        m[int(i) - 1, int(j) - 1] = m[int(j) - 1, int(i) - 1] = float(val)
    x = cp.Variable(n)
    cons = []
    for b in range(nb):
        expr = sum(x[i] * F[i + 1][b] for i in range(n)) - F[0][b]
        cons.append(0.5 * (expr + expr.T) >> 0)
    prob = cp.Problem(cp.Minimize(c @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.status, prob.value


def _random_problem(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 4))
    cons = []
    for b in range(int(r.integers(1, 4))):
        d = int(r.integers(1, 4))
        coeffs = {}
        for i in range(n):
            if r.random() < 0.7:
                a = r.standard_normal((d, d))
                coeffs[i] = a + a.T
        a = r.standard_normal((d, d))
        cons.append(LmiConstraint(a + a.T, coeffs, bool(r.random() < 0.3), f"c{b}"))
    names = [f"v{i}" for i in range(n)]
    return LmiProblem(names, r.standard_normal(n), cons, 1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_roundtrip_is_bitwise(tmp_path_factory, seed):
    p = _random_problem(seed)
    path = tmp_path_factory.mktemp("sdpa") / "p.dat-s"
    export_sdpa(p, path)
    q = read_sdpa(path)
    assert q.same_as(p)
    assert [c.name for c in q.constraints] == [c.name for c in p.constraints]
    assert q.eps_strict == p.eps_strict
    # a second write is byte-identical
    path2 = path.with_name("q.dat-s")
    export_sdpa(q, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_roundtrip_without_comments(tmp_path):
    p = _random_problem(7)
    export_sdpa(p, tmp_path / "p.dat-s", comments=False)
    q = read_sdpa(tmp_path / "p.dat-s")
    assert np.array_equal(q.objective, p.objective)
    for a, b in zip(p.constraints, q.constraints):
        assert np.array_equal(a.f0, b.f0)


def test_empty_problem_rejected(tmp_path):
    with pytest.raises(InvalidInput):
        export_sdpa(LmiProblem([], np.zeros(0), []), tmp_path / "e.dat-s")


def test_small_problem_external_oracle(tmp_path):
    b = LmiBuilder()
    t = b.scalar("t")
    y = b.matrix("y", 2, 1)
    b.minimize(t)
    b.add(bmat([[t, y.T], [y, np.eye(2)]]))
    b.add(np.array([[1.0, 1.0]]) @ y - 1.0)
    prob = b.build()
    export_sdpa(prob, tmp_path / "s.dat-s")
    status, value = _oracle(tmp_path / "s.dat-s")
    sol = lmi.solve(prob)
    assert status == "optimal"
    assert value == pytest.approx(0.5, abs=1e-6)
    assert sol.objective_value == pytest.approx(value, abs=1e-6)


@pytest.mark.parametrize("which", ["gain", "rpi"])
def test_desk1_design_problems_external_oracle(tmp_path, desk_config, which):
    sys, spec = desk_config.sys, desk_config.spec
    y0 = np.array([DESK1_Y0])
    if which == "gain":
        prob = gain_problem(sys, spec, y0)
    else:
        prob = rpi_problem(sys, spec, synthesize_gain(sys, spec, y0), y0)
    path = tmp_path / f"{which}.dat-s"
    export_sdpa(prob, path)
    status, value = _oracle(path)
    sol = lmi.solve(read_sdpa(path))
    assert status == "optimal"
    assert sol.ok
    assert sol.objective_value == pytest.approx(value, rel=1e-4, abs=1e-6)
