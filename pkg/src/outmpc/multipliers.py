"""S-procedure multipliers for every constraint family and their Cholesky factor tables.

For a family instance with stage multipliers ``tau_0..tau_{r-1}`` and the
unmeasured-state multiplier ``tau_r`` the S-procedure certifies

    q(xi, v) <= tau_r + v' W(tau) v     for every admissible xi,

with ``W(tau) = E + sum tau_i N_i + A' X^-1 A``, ``A = D + sum tau_i M_i`` and
``X = -F - sum tau_i Z_i - tau_r S_bar > 0``.  Online, the certificate
becomes ``bound - tau_r >= |R v|^2`` with ``R' R = W``.

Multiplier selection
--------------------
Minimizing ``max_eig(W)`` alone sends ``tau_r`` to its cap (or to infinity
for the cost family), which leaves no room for ``v``.  Families with a cap
``b`` instead minimize ``max_eig(W) / (b - tau_r)``, i.e. they maximize the
radius of ``v`` certified by the constraint.  The cost family minimizes
``tau_r + r2 * max_eig(W)``, with ``r2`` the squared radius of the measured
state over the invariant ellipsoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lmi
from .blocks import FAMILIES, QuadBlockSet, build_all, family_indices
from .lmi import EigProblem, RatioProblem, cholesky_psd, max_eig

CAPPED = ("input", "rate", "output", "nonmeas", "terminal")


def family_caps(spec, rho: float) -> dict[str, float]:
    return {
        "input": spec.u_max**2,
        "rate": spec.du_max**2,
        "output": spec.x_max**2,
        "nonmeas": 1.0,
        "terminal": float(rho),
    }


@dataclass
class MultiplierTable:
    """``values[family][k]`` holds the multipliers ``[tau_0, ..., tau_r]``."""

    values: dict[str, dict[int, np.ndarray]]
    objectives: dict[str, dict[int, float]] = field(default_factory=dict)
    caps: dict[str, float] = field(default_factory=dict)

    def get(self, family: str, k: int) -> np.ndarray:
        return self.values[family][k]

    def last(self, family: str, k: int) -> float:
        return float(self.values[family][k][-1])

    # names used in the design notes
    @property
    def tau(self):
        return self.values["cost"]

    @property
    def tauN(self):
        v = self.values["terminal"]
        return v[max(v)]

    @property
    def alpha(self):
        return self.values["input"]

    @property
    def beta(self):
        return self.values["rate"]

    @property
    def theta(self):
        return self.values["output"]

    @property
    def eta(self):
        return self.values["nonmeas"]

    def monotonicity_violations(self, tol: float = 0.0) -> list:
        """Pairs ``(family, k, h)`` where ``tau^{k-1}_{h-1} <= tau^k_h`` fails."""
        bad = []
        for fam in FAMILIES:
            if fam == "terminal":
                continue
            table = self.values[fam]
            for k in sorted(table):
                if k - 1 not in table:
                    continue
                prev, cur = table[k - 1], table[k]
                for h in range(1, min(len(cur), len(prev) + 1)):
                    if prev[h - 1] > cur[h] + tol:
                        bad.append((fam, k, h))
        return bad

    def margin_violations(self, eps: float = 0.0) -> list:
        bad = []
        for fam, cap in self.caps.items():
            for k, t in self.values[fam].items():
                if cap - t[-1] <= eps:
                    bad.append((fam, k))
        for fam in FAMILIES:
            for k, t in self.values.get(fam, {}).items():
                if np.any(t < 0):
                    bad.append((fam, k, "negative"))
        return bad


@dataclass
class FactorTable:
    """``factors[family][k]`` is ``R`` with ``R' R = W(tau)`` (rows act on ``v``)."""

    factors: dict[str, dict[int, np.ndarray]]

    def get(self, family: str, k: int) -> np.ndarray:
        return self.factors[family][k]

    # names used in the design notes
    @property
    def L(self):
        return self.factors["cost"]

    @property
    def LN(self):
        v = self.factors["terminal"]
        return v[max(v)]

    @property
    def U(self):
        return self.factors["input"]

    @property
    def V(self):
        return self.factors["rate"]

    @property
    def Tfac(self):
        return self.factors["output"]

    @property
    def W(self):
        return self.factors["nonmeas"]


def eig_problem(b: QuadBlockSet, lower=None, upper=None) -> EigProblem:
    r = b.r
    zero_v = np.zeros_like(b.E)
    zero_a = np.zeros_like(b.D)
    return EigProblem(
        e0=b.E,
        e_terms=list(b.N) + [zero_v],
        a0=b.D,
        a_terms=list(b.M) + [zero_a],
        x0=-b.F,
        x_terms=[-z for z in b.Z] + [-b.S_bar],
        lower=np.zeros(r + 1) if lower is None else lower,
        upper=upper,
    )


def w_matrix(b: QuadBlockSet, tau) -> np.ndarray:
    e, a, x = b.sprocedure(tau)
    if not lmi.is_pd(x):
        raise lmi.DegeneratePivot(f"{b.family} k={b.k}: pivot is not positive definite")
    return lmi.sym(e + a.T @ np.linalg.solve(x, a))


def family_objective(b: QuadBlockSet, tau, cap=None, r2: float = 1.0) -> float:
    """Objective minimized when choosing the multipliers of ``b``."""
    try:
        lam = max_eig(w_matrix(b, tau))
    except lmi.DegeneratePivot:
        return np.inf
    if cap is None:
        return float(tau[-1] + r2 * lam)
    slack = cap - tau[-1]
    return lam / slack if slack > 0 else np.inf


def monotone_lower(prev: np.ndarray | None, n: int) -> np.ndarray:
    lo = np.zeros(n)
    if prev is not None:
        for h in range(1, n):
            if h - 1 < len(prev):
                lo[h] = max(lo[h], prev[h - 1])
    return lo


def solve_instance(b: QuadBlockSet, cap=None, r2: float = 1.0, lower=None, eps: float = lmi.EPS_STRICT):
    """Multipliers for a single family instance; returns ``(tau, objective, method)``."""
    n = b.n_mult
    lower = np.zeros(n) if lower is None else np.asarray(lower, dtype=float)
    if cap is not None and lower[-1] >= cap - eps:
        raise lmi.NoValidMultiplier(f"{b.family} k={b.k}: monotonicity bound {lower[-1]:.6g} reaches the cap {cap:.6g}")
    if cap is None:
        w = np.zeros(n)
        w[-1] = 1.0
        res = lmi.solve_min_max_eig(eig_problem(b, lower), eig_weight=r2, offset_weights=w, eps=eps)
    else:
        upper = np.full(n, np.inf)
        upper[-1] = cap - eps
        s_terms = np.zeros(n)
        s_terms[-1] = -1.0
        rp = RatioProblem(eig_problem(b, lower, upper), cap, s_terms)
        res = lmi.solve_min_eig_ratio(rp, eps=eps)
    tau = np.maximum(res.tau, lower)
    return tau, family_objective(b, tau, cap, r2), res.method


def solve_family(family: str, blocks: dict[int, QuadBlockSet], cap=None, r2: float = 1.0,
                 prior: dict[int, np.ndarray] | None = None, monotone: bool = True,
                 eps: float = lmi.EPS_STRICT):
    """Solve every instance of one family in increasing ``k``.

    With ``monotone`` set, ``tau^k_h >= tau^{k-1}_{h-1}`` is imposed using
    the previous ``k`` of the same family (or ``prior`` for indices solved
    elsewhere).  Returns ``(values, objectives)`` keyed by ``k``.
    """
    values: dict[int, np.ndarray] = dict(prior or {})
    objectives: dict[int, float] = {}
    for k in sorted(blocks):
        b = blocks[k]
        prev = values.get(k - 1) if (monotone and family != "terminal") else None
        lower = monotone_lower(prev, b.n_mult)
        try:
            tau, obj, _ = solve_instance(b, cap, r2, lower, eps)
        except lmi.NoValidMultiplier as exc:
            raise lmi.NoValidMultiplier(f"{family}: infeasible at k={k} ({exc})") from exc
        values[k] = tau
        objectives[k] = obj
    return values, objectives


def measured_radius2(sys, rpi) -> float:
    return max_eig(sys.c @ rpi.Q @ sys.c.T)


def solve_all(sys, spec, gain, rpi, blocks=None, monotone: bool = True) -> MultiplierTable:
    blocks = build_all(sys, gain.K, spec, rpi.P) if blocks is None else blocks
    caps = family_caps(spec, rpi.rho)
    r2 = measured_radius2(sys, rpi)
    values, objectives = {}, {}
    for fam in FAMILIES:
        prior = {0: np.zeros(1)} if fam in ("input", "rate") else None
        vals, objs = solve_family(fam, blocks[fam], caps.get(fam), r2, prior, monotone)
        values[fam] = vals
        objectives[fam] = objs
    return MultiplierTable(values, objectives, caps)


def compute_factors(table: MultiplierTable, blocks) -> FactorTable:
    out: dict[str, dict[int, np.ndarray]] = {}
    for fam in FAMILIES:
        out[fam] = {}
        for k, b in blocks[fam].items():
            w = w_matrix(b, table.get(fam, k))
            out[fam][k] = cholesky_psd(w)
    return FactorTable(out)
