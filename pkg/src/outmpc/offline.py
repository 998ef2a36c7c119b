"""Offline design: static output-feedback gain and rate-compatible RPI ellipsoid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import lmi
from .lmi import LmiBuilder, bmat, is_pd, max_eig, min_eig, scalar_times, sym
from .model import SynthesisSpec, UncertainSystem

POSTCHECK_TOL = 10 * lmi.TOL_FEAS


class SynthesisInfeasible(Exception):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SynthesisFailure(lmi.NumericalFailure):
    pass


class SearchFailure(Exception):
    pass


class InvalidSigma(ValueError):
    pass


def psd_sqrt(m) -> np.ndarray:
    w, v = np.linalg.eigh(sym(m))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def blkdiag(a, b) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    out = np.zeros((a.shape[0] + b.shape[0], a.shape[1] + b.shape[1]))
    out[: a.shape[0], : a.shape[1]] = a
    out[a.shape[0]:, a.shape[1]:] = b
    return out


@dataclass
class GainResult:
    K: np.ndarray
    Qbar1: np.ndarray
    Qbar2: np.ndarray
    Y1: np.ndarray
    rho_bar: float
    tau_bar: float
    lambda_bar: float
    Pbar: np.ndarray
    y0: np.ndarray
    status: str = "optimal"
    residuals: dict = field(default_factory=dict)

    @property
    def Qbar(self) -> np.ndarray:
        return blkdiag(self.Qbar1, self.Qbar2)


@dataclass
class RpiResult:
    P1: np.ndarray
    P2: np.ndarray
    rho: float
    tau: float
    lam: float
    sigma_hat: float
    T: np.ndarray
    phi_k: np.ndarray
    c_k: np.ndarray
    c_bar: np.ndarray
    a_bar: np.ndarray
    b_bar: np.ndarray
    sigma_boundary: bool = False
    status: str = "optimal"
    residuals: dict = field(default_factory=dict)

    @property
    def P(self) -> np.ndarray:
        return blkdiag(self.P1, self.P2)

    @property
    def Q(self) -> np.ndarray:
        return self.rho * np.linalg.inv(self.P)


# ---------------------------------------------------------------------------
# gain synthesis

def gain_lmis(sys: UncertainSystem, spec: SynthesisSpec, y0, Q1, Q2, Y1, rho_bar, tau_bar, lam_bar) -> dict:
    """All gain-design matrix inequalities, each required to be PSD.

    Arguments may be numbers/arrays or :class:`lmi.Affine` expressions, so the
    same routine builds the SDP and re-checks a returned solution.
    """
    ny, nna, nu, npp, nx = sys.ny, sys.nna, sys.nu, sys.np_, sys.nx
    A = lmi.Affine.lift
    Q1, Q2, Y1 = A(Q1), A(Q2), A(Y1)
    rho_bar, tau_bar, lam_bar = A(rho_bar), A(tau_bar), A(lam_bar)
    qbar = bmat([[Q1, np.zeros((ny, nna))], [np.zeros((nna, ny)), Q2]])
    y = bmat([[Y1, np.zeros((nu, nna))]])
    ru_h = psd_sqrt(spec.ru)
    rx_h = psd_sqrt(spec.rx)
    y0 = np.asarray(y0, dtype=float).reshape(ny, 1)
    big = bmat([
        [qbar, y.T @ ru_h, qbar @ rx_h, qbar @ sys.cq.T + y.T @ sys.dq.T, qbar @ sys.phi.T + y.T @ sys.g.T],
        [(y.T @ ru_h).T, scalar_times(rho_bar, np.eye(nu)), None, None, None],
        [(qbar @ rx_h).T, np.zeros((nx, nu)), scalar_times(rho_bar, np.eye(nx)), None, None],
        [(qbar @ sys.cq.T + y.T @ sys.dq.T).T, np.zeros((npp, nu)), np.zeros((npp, nx)), scalar_times(lam_bar, np.eye(npp)), None],
        [(qbar @ sys.phi.T + y.T @ sys.g.T).T, np.zeros((nx, nu)), np.zeros((nx, nx)), np.zeros((nx, npp)),
         qbar - scalar_times(lam_bar, sys.bp @ sys.bp.T)],
    ])
    return {
        "performance": big,
        "initial_measured": bmat([[1.0 - tau_bar, y0.T], [y0, Q1]]),
        "initial_unmeasured": bmat([[scalar_times(tau_bar, spec.s), np.eye(nna)], [np.eye(nna), Q2]]),
        "input": bmat([[spec.u_max**2 * np.eye(nu), Y1], [Y1.T, Q1]]),
        "output": spec.x_max**2 * np.eye(ny) - Q1,
        "Qbar>0": qbar,
        "lambda>0": lam_bar,
        "rho>0": rho_bar,
        "tau>0": tau_bar,
    }


_STRICT = {"Qbar>0", "lambda>0", "rho>0", "tau>0", "pivot>0"}


def synthesize_gain(sys: UncertainSystem, spec: SynthesisSpec, y0, eps: float = lmi.EPS_STRICT) -> GainResult:
    """Static output-feedback gain minimizing the cost upper bound from ``x_a = y0``."""
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape != (sys.ny,) or not np.all(np.isfinite(y0)):
        raise lmi.InvalidInput("y0 must be a finite vector of length ny")
    b = LmiBuilder(eps)
    Q1 = b.symmetric("Q1", sys.ny)
    Q2 = b.symmetric("Q2", sys.nna)
    Y1 = b.matrix("Y1", sys.nu, sys.ny)
    rho_bar = b.scalar("rho_bar")
    tau_bar = b.scalar("tau_bar")
    lam_bar = b.scalar("lambda_bar")
    b.minimize(rho_bar)
    for name, expr in gain_lmis(sys, spec, y0, Q1, Q2, Y1, rho_bar, tau_bar, lam_bar).items():
        b.add(expr, strict=name in _STRICT, name=name)
    prob = b.build()
    sol = lmi.solve(prob)
    if sol.status == "infeasible":
        raise SynthesisInfeasible("gain design is infeasible", sol.diagnostics)
    if not sol.ok:
        raise SynthesisFailure("gain design failed", sol.diagnostics)
    v = lambda n: b.value(n, sol.values)
    Q1v, Q2v, Y1v = sym(v("Q1")), sym(v("Q2")), v("Y1")
    K = np.linalg.solve(Q1v.T, Y1v.T).T
    qbar = blkdiag(Q1v, Q2v)
    res = GainResult(
        K=K, Qbar1=Q1v, Qbar2=Q2v, Y1=Y1v,
        rho_bar=v("rho_bar"), tau_bar=v("tau_bar"), lambda_bar=v("lambda_bar"),
        Pbar=sym(v("rho_bar") * np.linalg.inv(qbar)), y0=y0, status=sol.status,
    )
    res.residuals = check_gain(sys, spec, res)
    if min(res.residuals.values()) < -POSTCHECK_TOL:
        raise SynthesisFailure("gain certificate re-verification failed", {"residuals": res.residuals})
    return res


def check_gain(sys, spec, g: GainResult) -> dict:
    """Minimum eigenvalue of every gain-design inequality at the stored solution."""
    mats = gain_lmis(sys, spec, g.y0, g.Qbar1, g.Qbar2, g.Y1, g.rho_bar, g.tau_bar, g.lambda_bar)
    return {k: min_eig(m.const) for k, m in mats.items()}


def gain_problem(sys, spec, y0, eps: float = lmi.EPS_STRICT) -> lmi.LmiProblem:
    b = LmiBuilder(eps)
    Q1 = b.symmetric("Q1", sys.ny)
    Q2 = b.symmetric("Q2", sys.nna)
    Y1 = b.matrix("Y1", sys.nu, sys.ny)
    rho_bar = b.scalar("rho_bar")
    tau_bar = b.scalar("tau_bar")
    lam_bar = b.scalar("lambda_bar")
    b.minimize(rho_bar)
    for name, expr in gain_lmis(sys, spec, y0, Q1, Q2, Y1, rho_bar, tau_bar, lam_bar).items():
        b.add(expr, strict=name in _STRICT, name=name)
    return b.build()


# ---------------------------------------------------------------------------
# rate certificate

def rate_operators(sys: UncertainSystem, K) -> dict:
    phi_k, c_k = sys.closed_loop(K)
    c_bar = np.asarray(K, dtype=float) @ sys.c
    a_bar = c_bar @ (phi_k - np.eye(sys.nx))
    b_bar = c_bar @ sys.bp
    return {"phi_k": phi_k, "c_k": c_k, "c_bar": c_bar, "a_bar": a_bar, "b_bar": b_bar}


def sigma_objective(sigma, a_bar, b_bar, c_k, du_max) -> float:
    try:
        return max_eig(compute_T(sigma, a_bar, b_bar, c_k, du_max))
    except InvalidSigma:
        return math.inf


def compute_T(sigma, a_bar, b_bar, c_k, du_max) -> np.ndarray:
    """Rate-certificate matrix ``T(sigma)``."""
    a_bar = np.atleast_2d(a_bar)
    b_bar = np.atleast_2d(b_bar)
    c_k = np.atleast_2d(c_k)
    npp = b_bar.shape[1]
    pivot = sigma * np.eye(npp) - b_bar.T @ b_bar
    if not is_pd(pivot):
        raise InvalidSigma(f"sigma={sigma!r} does not make sigma*I - Bbar'Bbar positive definite")
    if not du_max > 0:
        raise InvalidSigma("du_max must be positive")
    ab = a_bar.T @ b_bar
    t = a_bar.T @ a_bar + sigma * (c_k.T @ c_k) + ab @ np.linalg.solve(pivot, ab.T)
    return sym(t / du_max**2)


@dataclass
class SigmaResult:
    sigma: float
    objective: float
    boundary: bool
    grid_sigma: float
    grid_objective: float
    bracket: tuple


def compute_sigma_hat(a_bar, b_bar, c_k, du_max, max_doublings: int = 60, grid_points: int = 500,
                      iters: int = 200) -> SigmaResult:
    """Scalar search for the ``sigma`` minimizing ``max_eig(T(sigma))``.

    Golden-section on ``log sigma`` over a bracket found by doubling, then a
    log-grid cross-check over the same interval.
    """
    b_bar = np.atleast_2d(b_bar)
    f = lambda s: sigma_objective(s, a_bar, b_bar, c_k, du_max)
    lo = max(max_eig(b_bar.T @ b_bar) * (1 + 1e-6), 1e-12)
    hi = max(2 * lo, 1e-6)
    prev = f(hi)
    rises = 0
    boundary = True
    for _ in range(max_doublings):
        nxt = f(2 * hi)
        hi *= 2
        rises = rises + 1 if nxt > prev * (1 + 1e-12) + 1e-300 else 0
        prev = nxt
        if rises >= 2:
            boundary = False
            break

    a, c = math.log(lo), math.log(hi)
    g = (math.sqrt(5) - 1) / 2
    x1, x2 = c - g * (c - a), a + g * (c - a)
    f1, f2 = f(math.exp(x1)), f(math.exp(x2))
    for _ in range(iters):
        if c - a < 1e-12:
            break
        if f1 <= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - g * (c - a)
            f1 = f(math.exp(x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (c - a)
            f2 = f(math.exp(x2))
    cands = [(f(lo), lo), (f(hi), hi), (f1, math.exp(x1)), (f2, math.exp(x2))]
    fbest, sbest = min(cands)

    grid = np.exp(np.linspace(math.log(lo), math.log(hi), grid_points))
    gvals = np.array([f(s) for s in grid])
    gi = int(np.argmin(gvals))
    scale = max(abs(gvals[gi]), 1e-300)
    if fbest > gvals[gi] + 0.05 * scale:
        raise SearchFailure(f"golden-section ({fbest:.6g}) and grid ({gvals[gi]:.6g}) disagree by more than 5%")
    if gvals[gi] < fbest:
        fbest, sbest = float(gvals[gi]), float(grid[gi])
    if boundary:
        # objective never turned upward: the infimum is approached at the top of the bracket
        sbest, fbest = hi, f(hi)
    return SigmaResult(float(sbest), float(fbest), boundary, float(grid[gi]), float(gvals[gi]), (lo, hi))


# ---------------------------------------------------------------------------
# RPI ellipsoid

def rpi_lmis(sys, spec, gain: GainResult, ops: dict, T, y0, P1, P2, rho, tau, lam) -> dict:
    ny, nna, nx, npp = sys.ny, sys.nna, sys.nx, sys.np_
    A = lmi.Affine.lift
    P1, P2, rho, tau, lam = A(P1), A(P2), A(rho), A(tau), A(lam)
    P = bmat([[P1, np.zeros((ny, nna))], [np.zeros((nna, ny)), P2]])
    phi_k, c_k, c_bar = ops["phi_k"], ops["c_k"], ops["c_bar"]
    bp = sys.bp
    y0 = np.asarray(y0, dtype=float).reshape(ny, 1)
    top = phi_k.T @ P @ phi_k - P + c_bar.T @ spec.ru @ c_bar + spec.rx + scalar_times(lam, c_k.T @ c_k)
    off = phi_k.T @ P @ bp
    qs = bmat([[top, off], [off.T, bp.T @ P @ bp - scalar_times(lam, np.eye(npp))]])
    return {
        "quadratic_stability": -qs,
        "inclusion": P - scalar_times(rho, gain.Pbar / gain.rho_bar),
        "initial_measured": rho - tau - (y0.T @ P1 @ y0),
        "initial_unmeasured": scalar_times(tau, spec.s) - P2,
        "rate": P - scalar_times(rho, T),
        "P>0": P,
        "lambda>0": lam,
        "tau>0": tau,
        "rho>0": rho,
    }


def _rpi_builder(sys, spec, gain: GainResult, y0, eps: float):
    ops = rate_operators(sys, gain.K)
    sig = compute_sigma_hat(ops["a_bar"], ops["b_bar"], ops["c_k"], spec.du_max)
    T = compute_T(sig.sigma, ops["a_bar"], ops["b_bar"], ops["c_k"], spec.du_max)
    b = LmiBuilder(eps)
    P1 = b.symmetric("P1", sys.ny)
    P2 = b.symmetric("P2", sys.nna)
    rho = b.scalar("rho")
    tau = b.scalar("tau")
    lam = b.scalar("lambda")
    b.minimize(rho)
    for name, expr in rpi_lmis(sys, spec, gain, ops, T, y0, P1, P2, rho, tau, lam).items():
        b.add(expr, strict=name in ("P>0", "lambda>0", "tau>0", "rho>0"), name=name)
    return b, ops, sig, T


def rpi_problem(sys, spec, gain: GainResult, y0=None, eps: float = lmi.EPS_STRICT) -> lmi.LmiProblem:
    y0 = gain.y0 if y0 is None else np.asarray(y0, dtype=float).reshape(-1)
    return _rpi_builder(sys, spec, gain, y0, eps)[0].build()


def synthesize_rpi(sys, spec, gain: GainResult, y0=None, eps: float = lmi.EPS_STRICT) -> RpiResult:
    """Smallest-``rho`` invariant ellipsoid inside the gain ellipsoid that respects the rate bound."""
    y0 = gain.y0 if y0 is None else np.asarray(y0, dtype=float).reshape(-1)
    if not spec.du_max > 0:
        raise SynthesisInfeasible("rate bound must be positive")
    b, ops, sig, T = _rpi_builder(sys, spec, gain, y0, eps)
    sol = lmi.solve(b.build())
    if sol.status == "infeasible":
        raise SynthesisInfeasible("invariant-ellipsoid design is infeasible", sol.diagnostics)
    if not sol.ok:
        raise SynthesisFailure("invariant-ellipsoid design failed", sol.diagnostics)
    v = lambda n: b.value(n, sol.values)
    res = RpiResult(
        P1=sym(v("P1")), P2=sym(v("P2")), rho=v("rho"), tau=v("tau"), lam=v("lambda"),
        sigma_hat=sig.sigma, T=T, sigma_boundary=sig.boundary, status=sol.status, **ops,
    )
    res.residuals = check_rpi(sys, spec, gain, res, y0)
    if min(res.residuals.values()) < -POSTCHECK_TOL:
        raise SynthesisFailure("invariant-ellipsoid re-verification failed", {"residuals": res.residuals})
    return res


def check_rpi(sys, spec, gain, r: RpiResult, y0=None) -> dict:
    y0 = gain.y0 if y0 is None else y0
    ops = {k: getattr(r, k) for k in ("phi_k", "c_k", "c_bar", "a_bar", "b_bar")}
    mats = rpi_lmis(sys, spec, gain, ops, r.T, y0, r.P1, r.P2, r.rho, r.tau, r.lam)
    out = {k: min_eig(m.const) for k, m in mats.items()}
    out["sigma_pivot"] = min_eig(r.sigma_hat * np.eye(sys.np_) - r.b_bar.T @ r.b_bar)
    return out


def spectral_radius(m) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))
