"""Receding-horizon step: assemble the bordered LMIs, solve, apply the input.

Every online constraint has the form ``s - |a + B c|^2 >= 0`` where ``c``
stacks ``c_0..c_{N-1}``, ``a`` depends on the measurement only, and ``s`` is
either ``J_k`` minus a multiplier or a constant bound minus a multiplier.
As a matrix inequality it is the bordered block
``[[s, -(a + B c)'], [-(a + B c), I]] >= 0``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

from . import lmi
from .bundle import ControllerBundle
from .lmi import Affine, LmiBuilder, bmat
from .model import Measurement

log = logging.getLogger(__name__)


@dataclass
class QuadConstraint:
    """``s - |a + B c|^2 >= 0`` with ``s = J[j] - offset`` (``j`` set) or ``bound - offset``."""

    name: str
    a: np.ndarray
    B: np.ndarray
    offset: float
    bound: float | None = None
    j: int | None = None

    def slack(self, J) -> float:
        return (J[self.j] if self.j is not None else self.bound) - self.offset

    def margin(self, J, c) -> float:
        r = self.a + self.B @ c
        return float(self.slack(J) - r @ r)

    def block(self, J, c) -> np.ndarray:
        r = self.a + self.B @ c
        n = r.size
        out = np.eye(n + 1)
        out[0, 0] = self.slack(J)
        out[0, 1:] = -r
        out[1:, 0] = -r
        return out


@dataclass
class OnlineProblem:
    N: int
    nu: int
    constraints: list[QuadConstraint]
    meas: Measurement

    @property
    def n_c(self) -> int:
        return self.N * self.nu

    def census(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for q in self.constraints:
            fam = q.name.split("[")[0]
            out[fam] = out.get(fam, 0) + 1
        return out

    def margins(self, J, c) -> np.ndarray:
        c = np.asarray(c, dtype=float).reshape(-1)
        return np.array([q.margin(J, c) for q in self.constraints])

    def block_min_eigs(self, J, c) -> np.ndarray:
        c = np.asarray(c, dtype=float).reshape(-1)
        return np.array([lmi.min_eig(q.block(J, c)) for q in self.constraints])

    def is_feasible(self, J, c, tol: float = lmi.TOL_FEAS) -> bool:
        return bool(self.margins(J, c).min() >= -tol)

    def to_lmi(self) -> tuple[lmi.LmiProblem, LmiBuilder]:
        b = LmiBuilder()
        Js = [b.scalar(f"J{k}") for k in range(self.N)]
        c = b.matrix("c", self.n_c, 1) if self.n_c else Affine(np.zeros((0, 1)))
        obj = Js[0]
        for jk in Js[1:]:
            obj = obj + jk
        b.minimize(obj)
        for q in self.constraints:
            r = q.a.reshape(-1, 1) + q.B @ c
            s = (Js[q.j] if q.j is not None else Affine(np.full((1, 1), q.bound))) - q.offset
            b.add(bmat([[s, -1.0 * r.T], [-1.0 * r, np.eye(r.shape[0])]]), name=q.name)
        return b.build(), b


@dataclass
class StepResult:
    u: np.ndarray
    c_star: np.ndarray  # (N, nu)
    J_star: np.ndarray
    V_bound: float
    status: str
    fallback: str | None = None
    solve_ms: float = 0.0
    min_margin: float = math.nan
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.fallback is None and self.status in ("optimal", "feasible")

    @property
    def J_sum(self) -> float:
        return float(np.sum(self.J_star))


def _vsplit(R: np.ndarray, ny: int):
    return R[:, :ny], R[:, ny:]


def _pad(Bc: np.ndarray, n_c: int) -> np.ndarray:
    out = np.zeros((Bc.shape[0], n_c))
    out[:, : Bc.shape[1]] = Bc
    return out


def assemble(bundle: ControllerBundle, meas: Measurement) -> OnlineProblem:
    sys, spec = bundle.sys, bundle.spec
    N, nu, ny = spec.horizon, sys.nu, sys.ny
    y = np.asarray(meas.y, dtype=float).reshape(-1)
    up = np.asarray(meas.u_prev, dtype=float).reshape(-1)
    if y.shape != (ny,) or up.shape != (nu,):
        raise lmi.InvalidInput(f"measurement dimensions {y.shape}, {up.shape} do not match the bundle ({ny}, {nu})")
    n_c = N * nu
    tab, fac = bundle.table, bundle.factors
    K = bundle.K
    cons: list[QuadConstraint] = []

    def quad(name, fam, k, bound=None, j=None):
        Ry, Rc = _vsplit(fac.get(fam, k), ny)
        cons.append(QuadConstraint(name, Ry @ y, _pad(Rc, n_c), tab.last(fam, k), bound, j))

    sel0 = np.zeros((nu, n_c))
    sel0[:, :nu] = np.eye(nu)
    for k in range(N):
        quad(f"Sigma[{k}]", "cost", k, j=k)
    cons.append(QuadConstraint("Gamma[0]", K @ y, sel0, 0.0, spec.u_max**2))
    for k in range(1, N):
        quad(f"Gamma[{k}]", "input", k, bound=spec.u_max**2)
    cons.append(QuadConstraint("Psi[0]", K @ y - up, sel0, 0.0, spec.du_max**2))
    for k in range(1, N):
        quad(f"Psi[{k}]", "rate", k, bound=spec.du_max**2)
    for k in range(1, N + 1):
        quad(f"chi[{k}]", "output", k, bound=spec.x_max**2)
    for k in range(1, N + 1):
        quad(f"Xi[{k}]", "nonmeas", k, bound=1.0)
    quad("Sigma_N", "terminal", N, bound=float(bundle.rpi.rho))
    return OnlineProblem(N, nu, cons, meas)


# ---------------------------------------------------------------------------
# solvers

def _solve_lmi(prob: OnlineProblem):
    lp, b = prob.to_lmi()
    sol = lmi.solve(lp)
    if not sol.ok:
        return sol.status, None, None, sol.diagnostics
    J = np.array([b.value(f"J{k}", sol.values) for k in range(prob.N)])
    c = b.value("c", sol.values).reshape(-1) if prob.n_c else np.zeros(0)
    return sol.status, J, c, sol.diagnostics


def _solve_socp(prob: OnlineProblem):
    """Same problem as second-order cone constraints (cvxopt ``conelp``)."""
    N, n_c = prob.N, prob.n_c
    n = N + n_c
    cvec = np.r_[np.ones(N), np.zeros(n_c)]
    Gq, hq = [], []
    for q in prob.constraints:
        m = q.a.size
        if q.j is not None:
            # |[2(a + Bc); s - 1]| <= s + 1 with s = J_j - offset
            g = np.zeros((m + 2, n))
            h = np.zeros(m + 2)
            g[0, q.j] = -1.0
            h[0] = 1.0 - q.offset
            g[1, q.j] = -1.0
            h[1] = -1.0 - q.offset
            g[2:, N:] = -2.0 * q.B
            h[2:] = 2.0 * q.a
        else:
            s = q.bound - q.offset
            if s < 0:
                return "infeasible", None, None, {"constraint": q.name}
            g = np.zeros((m + 1, n))
            h = np.zeros(m + 1)
            h[0] = math.sqrt(s)
            g[1:, N:] = -q.B
            h[1:] = q.a
        Gq.append(cvx_matrix(g))
        hq.append(cvx_matrix(h))
    opts = dict(show_progress=False, abstol=1e-9, reltol=1e-9, feastol=1e-9, maxiters=100)
    dims = {"l": 0, "q": [g.size[0] for g in Gq], "s": []}
    G = cvx_matrix(np.vstack([np.array(g) for g in Gq]))
    h = cvx_matrix(np.concatenate([np.array(v).reshape(-1) for v in hq]))
    try:
        sol = cvx_solvers.conelp(cvx_matrix(cvec), G, h, dims, options=opts)
    except (ValueError, ArithmeticError) as exc:
        return "numerical_failure", None, None, {"error": str(exc)}
    if sol["status"] == "primal infeasible":
        return "infeasible", None, None, {"solver_status": sol["status"]}
    if sol["x"] is None:
        return "numerical_failure", None, None, {"solver_status": sol["status"]}
    x = np.array(sol["x"]).reshape(-1)
    return ("optimal" if sol["status"] == "optimal" else "feasible"), x[:N], x[N:], {"solver_status": sol["status"]}


def solve_step(prob: OnlineProblem, bundle: ControllerBundle | None = None, method: str = "lmi") -> StepResult:
    """Minimize ``sum J_k`` over the assembled constraints.

    ``method='lmi'`` uses the bordered-block path, ``'socp'`` the
    equivalent cone program.  A returned point is accepted only after its
    quadratic margins are re-evaluated directly.
    """
    t0 = time.perf_counter()
    solver = _solve_lmi if method == "lmi" else _solve_socp
    status, J, c, diag = solver(prob)
    ms = 1e3 * (time.perf_counter() - t0)
    nu, N = prob.nu, prob.N
    if J is None:
        return StepResult(np.full(nu, np.nan), np.full((N, nu), np.nan), np.full(N, np.nan), math.inf,
                          status, None, ms, -math.inf, diag)
    # J_k only needs to dominate its cost constraint; tighten to the smallest admissible value
    for q in prob.constraints:
        if q.j is not None:
            r = q.a + q.B @ c
            J[q.j] = max(J[q.j], q.offset + float(r @ r))
    margin = float(prob.margins(J, c).min())
    if margin < -lmi.TOL_FEAS:
        status = "numerical_failure"
    cst = c.reshape(N, nu)
    K = bundle.K if bundle is not None else None
    u = (K @ prob.meas.y + cst[0]) if K is not None else cst[0].copy()
    vb = float(np.sum(J)) + (max_measured_slice_cost(bundle, prob.meas.y) if bundle is not None else 0.0)
    return StepResult(u, cst, J, vb, status, None, ms, margin, diag)


def apply(result: StepResult, meas: Measurement, K) -> np.ndarray:
    """``u = K y + c_0``."""
    return np.asarray(K) @ meas.y + result.c_star[0]


def shifted_candidate(prev: StepResult) -> tuple[np.ndarray, np.ndarray]:
    """``(J_1, c_1), ..., (J_{N-1}, c_{N-1}), (J_{N-1}, 0)`` from the previous optimum."""
    J, c = prev.J_star, prev.c_star
    Js = np.r_[J[1:], J[-1:]]
    cs = np.vstack([c[1:], np.zeros_like(c[:1])])
    return Js, cs


# ---------------------------------------------------------------------------
# cost bound over the unmeasured slice

def max_quadratic_on_ellipsoid(A, g, S) -> float:
    """``max z' A z + 2 g' z`` subject to ``z' S z <= 1`` for ``A >= 0``.

    Whitened to the unit ball and solved through the secular equation of
    the trust-region subproblem, including the degenerate (hard) case.
    Returns ``inf`` when ``S`` is singular and the objective grows along its
    null space.
    """
    A = lmi.sym(A)
    S = lmi.sym(S)
    g = np.asarray(g, dtype=float).reshape(-1)
    n = A.shape[0]
    if n == 0:
        return 0.0
    ws, vs = np.linalg.eigh(S)
    if ws[0] <= 1e-14 * max(1.0, ws[-1]):
        null = vs[:, ws <= 1e-14 * max(1.0, ws[-1])]
        if np.linalg.norm(null.T @ A @ null) > 0 or np.linalg.norm(null.T @ g) > 0:
            return math.inf
        keep = ws > 1e-14 * max(1.0, ws[-1])
        vs, ws = vs[:, keep], ws[keep]
    T = vs / np.sqrt(ws)
    a = lmi.sym(T.T @ A @ T)
    b = T.T @ g
    lam, U = np.linalg.eigh(a)
    beta = U.T @ b
    amax = lam[-1]

    def value(w):
        return float(w @ a @ w + 2 * b @ w)

    tol = 1e-12 * (1 + np.abs(beta).max(initial=0.0))
    top = np.abs(lam - amax) <= 1e-12 * max(1.0, abs(amax))
    if np.all(np.abs(beta[top]) <= tol):
        # hard case candidate: w = (amax I - a)^+ b plus a top-eigenvector component
        denom = amax - lam
        wt = np.zeros_like(beta)
        wt[~top] = beta[~top] / denom[~top]
        nrm = np.linalg.norm(wt)
        if nrm <= 1.0:
            wt[np.argmax(top)] = math.sqrt(max(0.0, 1.0 - nrm**2))
            return value(U @ wt)
    # secular equation sum beta_i^2 / (mu - lam_i)^2 = 1 on mu > amax
    phi = lambda mu: float(np.sum((beta / (mu - lam)) ** 2)) - 1.0
    lo = amax + 1e-300
    hi = amax + np.linalg.norm(beta) + 1.0
    while phi(hi) > 0:
        hi = amax + 2 * (hi - amax)
    lo = amax
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= amax:
            break
        if phi(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    mu = hi
    w = U @ (beta / (mu - lam))
    w /= max(1.0, np.linalg.norm(w))
    return value(w)


def max_measured_slice_cost(bundle: ControllerBundle, y) -> float:
    """``max x' Rx x`` over ``x = [y; x_na]`` with ``x_na' S x_na <= 1``."""
    sys, spec = bundle.sys, bundle.spec
    y = np.asarray(y, dtype=float).reshape(-1)
    ny = sys.ny
    R = spec.rx
    raa, ran, rnn = R[:ny, :ny], R[:ny, ny:], R[ny:, ny:]
    return float(y @ raa @ y) + max_quadratic_on_ellipsoid(rnn, ran.T @ y, spec.s)


# ---------------------------------------------------------------------------
# controller with fallback ladder

class Controller:
    """Sequential controller: one instance per plant."""

    def __init__(self, bundle: ControllerBundle, method: str = "lmi"):
        self.bundle = bundle
        self.method = method
        self.u_prev = bundle.config.u_prev0.copy()
        self.prev: StepResult | None = None
        self.t = 0
        self.breaches: list[tuple[int, str]] = []

    def measurement(self, y) -> Measurement:
        return Measurement(np.asarray(y, dtype=float).reshape(-1), self.u_prev.copy(), self.t)

    def step(self, y) -> tuple[StepResult, OnlineProblem]:
        meas = self.measurement(y)
        prob = assemble(self.bundle, meas)
        res = solve_step(prob, self.bundle, self.method)
        if res.status not in ("optimal", "feasible"):
            res = self._fallback(prob, meas, res)
        self.u_prev = res.u.copy()
        self.prev = res
        self.t += 1
        return res, prob

    def _fallback(self, prob: OnlineProblem, meas: Measurement, failed: StepResult) -> StepResult:
        K = self.bundle.K
        if self.prev is not None and np.all(np.isfinite(self.prev.c_star)):
            J, c = shifted_candidate(self.prev)
            margin = float(prob.margins(J, c).min())
            if margin >= -lmi.TOL_FEAS:
                self.breaches.append((self.t, "shifted"))
                log.warning("t=%d: online problem %s, using shifted candidate", self.t, failed.status)
                return StepResult(K @ meas.y + c[0], c, J, float(np.sum(J)), failed.status, "shifted",
                                  failed.solve_ms, margin, failed.diagnostics)
        self.breaches.append((self.t, "gain_only"))
        log.warning("t=%d: online problem %s, applying u = K y", self.t, failed.status)
        c = np.zeros((prob.N, prob.nu))
        return StepResult(K @ meas.y, c, np.full(prob.N, np.nan), math.inf, failed.status, "gain_only",
                          failed.solve_ms, -math.inf, failed.diagnostics)
