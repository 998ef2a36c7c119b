"""Independent reference computations shared by the test modules."""

import numpy as np

from outmpc.multipliers import family_caps, family_objective


def grid_min(b, cap, r2, lower, hi, points=200, rounds=3):
    """Dense grid search over the multiplier box, refined around the best cell."""
    n = b.n_mult
    top = np.array([hi] * n, dtype=float)
    if cap is not None:
        top[-1] = cap * (1 - 1e-9)
    lo = np.asarray(lower, dtype=float).copy()
    best = (np.inf, None)
    for _ in range(rounds):
        axes = [np.linspace(lo[h], top[h], points) for h in range(n)]
        for tau in np.array(np.meshgrid(*axes, indexing="ij")).reshape(n, -1).T:
            val = family_objective(b, tau, cap, r2)
            if val < best[0]:
                best = (val, tau)
        step = (top - lo) / (points - 1)
        lo = np.maximum(np.asarray(lower, dtype=float), best[1] - 2 * step)
        hi_new = best[1] + 2 * step
        if cap is not None:
            hi_new[-1] = min(hi_new[-1], cap * (1 - 1e-9))
        top = hi_new
    return best


def small_instances(bundle):
    blocks = bundle.blocks()
    caps = family_caps(bundle.spec, bundle.rpi.rho)
    out = []
    for fam, table in blocks.items():
        for k, b in table.items():
            if b.n_mult <= 2:
                out.append((fam, k, b, caps.get(fam)))
    return out

