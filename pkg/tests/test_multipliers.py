import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import grid_min, small_instances
from outmpc.blocks import QuadBlockSet
from outmpc.multipliers import (
    compute_factors, family_caps, family_objective, measured_radius2, solve_all, solve_instance, w_matrix,
)


def test_desk1_two_multiplier_instances_match_grid(desk_bundle):
    r2 = measured_radius2(desk_bundle.sys, desk_bundle.rpi)
    inst = small_instances(desk_bundle)
    assert {f for f, *_ in inst} == {"cost", "input", "rate", "output", "nonmeas"}
    for fam, k, b, cap in inst:
        lower = np.zeros(b.n_mult)
        tau, obj, _ = solve_instance(b, cap, r2, lower)
        gbest, _ = grid_min(b, cap, r2, lower, 4.0 * max(tau.max(), 1.0), points=60)
        assert obj <= gbest * 1.01 + 1e-12, (fam, k, obj, gbest)
        assert gbest <= obj * 1.01 + 1e-12, (fam, k, obj, gbest)


def _one_multiplier_block(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((2, 2))
    E = a @ a.T
    D = r.standard_normal((1, 2))
    F = np.array([[r.uniform(-1.0, 1.0)]])
    s = r.uniform(0.5, 2.0)
    return QuadBlockSet("synthetic", 0, 1, 0, 1, 1, 1, 1, D, E, F, [], [], [], np.array([[-s]]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([None, 3.0]))
def test_one_multiplier_instances_match_grid(seed, cap):
    b = _one_multiplier_block(seed)
    lower = np.zeros(1)
    if cap is not None and b.F[0, 0] >= 0:
        # the pivot needs tau > F/s; keep that below the cap
        b.F[0, 0] = min(b.F[0, 0], 0.5 * cap * -b.S_bar[0, 0])
    tau, obj, _ = solve_instance(b, cap, 1.0, lower)
    gbest, _ = grid_min(b, cap, 1.0, lower, 4.0 * max(tau.max(), 1.0) + 10.0, points=400)
    assert obj == pytest.approx(gbest, rel=0.01)


def test_table_monotone_and_margins(desk_bundle):
    t = desk_bundle.table
    assert t.monotonicity_violations(1e-9) == []
    assert t.margin_violations() == []
    for fam, cap in t.caps.items():
        for k, v in t.values[fam].items():
            assert v[-1] < cap


def test_monotone_flag_only_adds_bounds(desk_bundle):
    b = desk_bundle
    blocks = b.blocks()
    free = solve_all(b.sys, b.spec, b.gain, b.rpi, blocks, monotone=False)
    for fam in free.values:
        for k in free.objectives[fam]:
            # the constrained objective can never beat the unconstrained one
            assert b.table.objectives[fam][k] >= free.objectives[fam][k] * (1 - 1e-6) - 1e-9


def test_factor_reconstruction(desk_bundle):
    blocks = desk_bundle.blocks()
    f = desk_bundle.factors
    for fam, table in blocks.items():
        for k, blk in table.items():
            W = w_matrix(blk, desk_bundle.table.get(fam, k))
            R = f.get(fam, k)
            assert np.allclose(np.triu(R), R)
            assert np.linalg.norm(R.T @ R - W) <= 1e-8 * (1 + np.linalg.norm(W))
    assert f.L is f.factors["cost"] and f.LN is f.factors["terminal"][desk_bundle.spec.horizon]


def test_certificate_holds_on_samples(desk_bundle, rng):
    """q(xi, v) <= tau_r + |R v|^2 for sampled admissible xi."""
    b = desk_bundle
    sys, spec = b.sys, b.spec
    blocks = b.blocks()
    worst = -np.inf
    for fam, table in blocks.items():
        for k, blk in table.items():
            tau = b.table.get(fam, k)
            R = b.factors.get(fam, k)
            for _ in range(200):
                v = rng.standard_normal(blk.n_v)
                xna = rng.uniform(-1, 1, sys.nna) / np.sqrt(spec.s[0, 0])
                x = np.r_[v[: sys.ny], xna]
                cbar = v[sys.ny:]
                # admissible p stage by stage: |p_i| <= |C_K x_i + Dq c_i|
                ps = np.zeros(blk.r * sys.np_)
                for i in range(blk.r):
                    ps[i] = 0.0
                    q = np.sqrt(max(blk.uncertainty_value(i, x, cbar, ps) + ps[i] ** 2, 0.0))
                    ps[i] = q * rng.uniform(-1, 1)
                lhs = blk.value(x, cbar, ps)
                rhs = tau[-1] + np.sum((R @ v) ** 2)
                worst = max(worst, lhs - rhs)
    assert worst <= 1e-8
