"""Closed-loop simulation under norm-bounded uncertainty and guarantee checks."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import lmi
from .bundle import ControllerBundle
from .model import UncertainSystem
from .online import Controller, shifted_candidate

VIOLATION_TOL = 1e-8
POLICIES = ("zero", "random_contraction", "worst_case_sign", "constant_matrix")


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class UncertaintyPolicy:
    mode: str = "zero"
    seed: int = 0
    delta: np.ndarray | None = None
    P: np.ndarray | None = None  # Lyapunov weight used by worst_case_sign
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in POLICIES:
            raise ValueError(f"unknown policy {self.mode!r}; choose from {POLICIES}")
        if self.mode == "constant_matrix":
            if self.delta is None:
                raise ValueError("constant_matrix policy needs delta")
            self.delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
            if np.linalg.norm(self.delta, 2) > 1 + 1e-12:
                raise ValueError("delta must have spectral norm at most 1")
        self.rng = np.random.default_rng(self.seed)

    def realize(self, sys: UncertainSystem, x, u, q) -> np.ndarray:
        """Uncertainty output ``p = Delta q`` for this step."""
        npp = sys.np_
        if self.mode == "zero":
            return np.zeros(npp)
        if self.mode == "constant_matrix":
            return self.delta @ q
        if self.mode == "random_contraction":
            s = self.rng.uniform(0.0, 1.0)
            delta = s * random_orthogonal(npp, self.rng) @ random_orthogonal(npp, self.rng).T
            return delta @ q
        # worst_case_sign: push the successor outward in the P metric
        P = np.eye(sys.nx) if self.P is None else self.P
        d = sys.bp.T @ P @ (sys.phi @ x + sys.g @ u)
        nd = np.linalg.norm(d)
        nq = np.linalg.norm(q)
        if nd == 0:
            d = np.zeros(npp)
            d[0] = 1.0
            nd = 1.0
        return nq * d / nd


def step_plant(sys: UncertainSystem, x, u, policy: UncertaintyPolicy):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    q = sys.cq @ x + sys.dq @ u
    p = policy.realize(sys, x, u, q)
    return sys.phi @ x + sys.g @ u + sys.bp @ p, p, q


@dataclass
class StepRecord:
    t: int
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    c_star: np.ndarray
    J_star: np.ndarray
    p: np.ndarray
    q: np.ndarray
    V_bound: float
    feasible: bool
    fallback: str | None
    status: str
    solve_ms: float
    margins: dict
    witness_margin: float = math.nan  # shifted candidate from t-1 checked at t

    @property
    def J_sum(self) -> float:
        return float(np.sum(self.J_star))


@dataclass
class Trajectory:
    records: list[StepRecord]
    x_final: np.ndarray
    ny: int

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def max_violation(self) -> float:
        worst = 0.0
        for r in self.records:
            worst = max(worst, max(-m for m in r.margins.values()))
        return worst

    @property
    def final_norm(self) -> float:
        return float(np.linalg.norm(self.x_final))

    def infeasible_steps(self) -> list[int]:
        return [r.t for r in self.records if not r.feasible]

    def write_csv(self, path) -> None:
        nx = self.x_final.size
        nu = self.records[0].u.size if self.records else 0
        header = ["t"] + [f"x_{i + 1}" for i in range(nx)] + [f"u_{i + 1}" for i in range(nu)] + [
            "du_norm", "y_norm", "J_sum", "feasible", "solve_ms"]
        f17 = lambda v: format(float(v), ".17g")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.records:
                w.writerow([r.t] + [f17(v) for v in r.x] + [f17(v) for v in r.u] + [
                    f17(np.linalg.norm(r.du)), f17(np.linalg.norm(r.x[: self.ny])), f17(r.J_sum),
                    int(r.feasible), f17(r.solve_ms)])


def run_closed_loop(bundle: ControllerBundle, x0, steps: int, policy: UncertaintyPolicy,
                    method: str = "lmi") -> Trajectory:
    """Regulate the plant from ``x0``; the controller only ever sees ``y = C x``."""
    sys, spec = bundle.sys, bundle.spec
    if policy.mode == "worst_case_sign" and policy.P is None:
        policy.P = bundle.rpi.P
    ctl = Controller(bundle, method)
    x = np.asarray(x0, dtype=float).reshape(-1)
    records = []
    prev_res = None
    for t in range(steps):
        y = sys.c @ x
        u_prev = ctl.u_prev.copy()
        res, prob = ctl.step(y)
        witness = math.nan
        if prev_res is not None and prev_res.feasible:
            J_s, c_s = shifted_candidate(prev_res)
            witness = float(prob.margins(J_s, c_s).min())
        u = res.u
        du = u - u_prev
        margins = {
            "input": spec.u_max - float(np.linalg.norm(u)),
            "rate": spec.du_max - float(np.linalg.norm(du)),
            "output": spec.x_max - float(np.linalg.norm(y)),
            "unmeasured": 1.0 - float(x[sys.ny:] @ spec.s @ x[sys.ny:]),
        }
        x_next, p, q = step_plant(sys, x, u, policy)
        records.append(StepRecord(t, x.copy(), u.copy(), du, res.c_star.copy(), res.J_star.copy(), p, q,
                                  res.V_bound, res.feasible, res.fallback, res.status, res.solve_ms,
                                  margins, witness))
        prev_res = res
        x = x_next
    return Trajectory(records, x, sys.ny)


# ---------------------------------------------------------------------------
# sampling helpers

def sample_ellipsoid(P, rho, n: int, rng, boundary: bool = False) -> np.ndarray:
    """Uniform samples of ``{x : x' P x <= rho}`` (or of its boundary)."""
    d = P.shape[0]
    w = rng.standard_normal((n, d))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    if not boundary:
        w *= rng.uniform(0, 1, size=(n, 1)) ** (1.0 / d)
    L = np.linalg.cholesky(P / rho)
    return np.linalg.solve(L.T, w.T).T


def sample_initial_states(bundle: ControllerBundle, n: int, seed: int = 0, shrink: float = 1.0) -> np.ndarray:
    """Rejection sampling of ``zeta`` intersected with ``D(S)``."""
    rng = np.random.default_rng(seed)
    spec, sys = bundle.spec, bundle.sys
    out = []
    while len(out) < n:
        for x in sample_ellipsoid(bundle.rpi.P, bundle.rpi.rho * shrink, 4 * n, rng):
            xna = x[sys.ny:]
            if xna @ spec.s @ xna <= 1.0:
                out.append(x)
                if len(out) == n:
                    break
    return np.array(out)


# ---------------------------------------------------------------------------
# verification

@dataclass
class RpiReport:
    samples: int
    max_violation: float
    max_decrease_violation: float
    passed: bool


def verify_rpi(bundle: ControllerBundle, samples: int = 10_000, seed: int = 0) -> RpiReport:
    """Sample ``x`` in and on ``zeta`` and admissible ``p``; report ``max x+' P x+ - rho``."""
    sys, spec = bundle.sys, bundle.spec
    r = bundle.rpi
    rng = np.random.default_rng(seed)
    half = samples // 2
    xs = np.vstack([sample_ellipsoid(r.P, r.rho, half, rng, boundary=True),
                    sample_ellipsoid(r.P, r.rho, samples - half, rng)])
    P = r.P
    kc = r.c_bar
    worst = -math.inf
    worst_dec = -math.inf
    for i, x in enumerate(xs):
        bound = np.linalg.norm(r.c_k @ x)
        base = r.phi_k @ x
        d = sys.bp.T @ P @ base
        if i % 2 == 0 and np.linalg.norm(d) > 0:
            p = bound * d / np.linalg.norm(d)
        else:
            dirn = rng.standard_normal(sys.np_)
            p = bound * rng.uniform() ** (1.0 / sys.np_) * dirn / np.linalg.norm(dirn)
        xp = base + sys.bp @ p
        worst = max(worst, float(xp @ P @ xp) - r.rho)
        dec = xp @ P @ xp - x @ P @ x + x @ (kc.T @ spec.ru @ kc + spec.rx) @ x
        worst_dec = max(worst_dec, float(dec))
    return RpiReport(samples, worst, worst_dec, worst <= VIOLATION_TOL)


@dataclass
class TheoremReport:
    feasibility: bool
    witness: bool
    decrease: bool
    constraints: bool
    convergence: bool
    worst_witness_margin: float
    worst_decrease_excess: float
    max_violation: float
    max_final_norm: float
    infeasible_after_start: int
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.feasibility and self.witness and self.decrease and self.constraints and self.convergence


def decrease_excess(traj: Trajectory, bundle: ControllerBundle) -> list[float]:
    """``sum J(t+1) - (sum J(t) - c0' Ru c0 - x' Rx x)`` for consecutive feasible steps."""
    spec = bundle.spec
    out = []
    recs = traj.records
    for a, b in zip(recs[:-1], recs[1:]):
        if not (a.feasible and b.feasible):
            continue
        c0 = a.c_star[0]
        rhs = a.J_sum - float(c0 @ spec.ru @ c0) - float(a.x @ spec.rx @ a.x)
        out.append(b.J_sum - rhs)
    return out


def verify_theorem1(trajs: list[Trajectory], bundle: ControllerBundle, final_tol: float = 1e-3,
                    decrease_tol: float = 1e-6, tol: float = VIOLATION_TOL) -> TheoremReport:
    worst_w = math.inf
    worst_d = -math.inf
    viol = 0.0
    fin = 0.0
    infeasible = 0
    chain = True
    for tr in trajs:
        feas = [r.feasible for r in tr.records]
        for a, b in zip(feas[:-1], feas[1:]):
            if a and not b:
                chain = False
        infeasible += sum(1 for r in tr.records[1:] if not r.feasible)
        for r in tr.records:
            if not math.isnan(r.witness_margin):
                worst_w = min(worst_w, r.witness_margin)
        ex = decrease_excess(tr, bundle)
        if ex:
            worst_d = max(worst_d, max(ex))
        viol = max(viol, tr.max_violation)
        fin = max(fin, tr.final_norm)
    worst_w = worst_w if worst_w != math.inf else 0.0
    worst_d = worst_d if worst_d != -math.inf else -math.inf
    return TheoremReport(
        feasibility=chain and infeasible == 0,
        witness=worst_w >= -tol,
        decrease=worst_d <= decrease_tol,
        constraints=viol <= tol,
        convergence=fin < final_tol,
        worst_witness_margin=worst_w,
        worst_decrease_excess=worst_d,
        max_violation=viol,
        max_final_norm=fin,
        infeasible_after_start=infeasible,
    )


@dataclass
class CampaignResult:
    trajectories: dict[str, list[Trajectory]]
    report: TheoremReport
    seconds: float
    max_solve_ms: float


def campaign(bundle: ControllerBundle, rollouts: int = 50, steps: int = 200,
             policies=("random_contraction", "worst_case_sign"), seed: int = 0,
             method: str = "lmi") -> CampaignResult:
    t0 = time.perf_counter()
    x0s = sample_initial_states(bundle, rollouts, seed)
    trajs: dict[str, list[Trajectory]] = {}
    for pi, mode in enumerate(policies):
        trajs[mode] = []
        for i, x0 in enumerate(x0s):
            pol = UncertaintyPolicy(mode, seed=seed * 100_003 + pi * 10_007 + i)
            trajs[mode].append(run_closed_loop(bundle, x0, steps, pol, method))
    flat = [t for ts in trajs.values() for t in ts]
    rep = verify_theorem1(flat, bundle)
    max_ms = max((r.solve_ms for t in flat for r in t.records), default=0.0)
    return CampaignResult(trajs, rep, time.perf_counter() - t0, max_ms)
