"""Dense symmetric-matrix algebra and a small LMI modelling and solve layer.

Every semidefinite program in the package is reduced to the canonical form

    minimize    c^T x
    subject to  F0_j + sum_i x_i F_ij  >= 0      (one block per constraint j)

and handed to the cvxopt primal-dual interior-point solver.  Strict
inequalities are shifted by ``eps_strict * I``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

TOL_FEAS = 1e-8
TOL_GAP = 1e-7
TOL_SYM = 1e-10
TOL_CHOL = 1e-8
EPS_STRICT = 1e-8
JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class LmiError(Exception):
    """Base class for failures raised by the LMI layer."""


class InvalidInput(LmiError, ValueError):
    pass


class DegeneratePivot(LmiError):
    pass


class NotPSD(LmiError):
    pass


class NoValidMultiplier(LmiError):
    pass


class NumericalFailure(LmiError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# symmetric-matrix helpers

def sym(m) -> np.ndarray:
    """Return ``m`` as a finite, symmetrized float array."""
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix has non-finite entries")
    return 0.5 * (a + a.T)


def eigvalsh(m) -> np.ndarray:
    a = sym(m)
    if a.size == 0:
        return np.zeros(0)
    return np.linalg.eigvalsh(a)


def max_eig(m) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    w = eigvalsh(m)
    return float(w[-1]) if w.size else 0.0


def min_eig(m) -> float:
    w = eigvalsh(m)
    return float(w[0]) if w.size else 0.0


def is_psd(m, tol: float = 0.0) -> bool:
    if tol < 0:
        raise InvalidInput("tol must be nonnegative")
    return min_eig(m) >= -tol


def is_pd(m, tol: float = 0.0) -> bool:
    return min_eig(m) > tol


def block_matrix(x, y, z) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.asarray(y, dtype=float).reshape(x.shape[0], z.shape[0])
    return np.block([[x, y], [y.T, z]])


def schur_psd(x, y, z, tol: float = 0.0, pivot: str | None = None) -> bool:
    """PSD test of ``[[x, y], [y^T, z]]``.

    With ``pivot=None`` the assembled block is tested directly.  ``pivot='z'``
    tests ``z > 0`` and ``x - y z^-1 y^T >= 0``; ``pivot='x'`` the mirrored
    form.  The pivot must be positive definite.
    """
    full = block_matrix(x, y, z)
    if pivot is None:
        return is_psd(full, tol)
    x = sym(x)
    z = sym(z)
    y = np.asarray(y, dtype=float).reshape(x.shape[0], z.shape[0])
    if pivot == "z":
        if not is_pd(z):
            raise DegeneratePivot("z is not positive definite")
        return is_psd(x - y @ np.linalg.solve(z, y.T), tol)
    if pivot == "x":
        if not is_pd(x):
            raise DegeneratePivot("x is not positive definite")
        return is_psd(z - y.T @ np.linalg.solve(x, y), tol)
    raise InvalidInput(f"unknown pivot {pivot!r}")


def cholesky_psd(m, tol: float = TOL_CHOL) -> np.ndarray:
    """Factor ``R`` with ``R^T R = m + jitter*I`` for a PSD matrix ``m``.

    ``R`` is upper triangular (the transpose of the usual lower factor).
    The jitter is the smallest entry of ``JITTER_LADDER`` that lets the
    factorization succeed; matrices that are PSD only to within ``tol`` fall
    back to an eigenvalue square root made triangular by QR.
    """
    a = sym(m)
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    if min_eig(a) < -tol * (1.0 + np.linalg.norm(a)):
        raise NotPSD(f"matrix is indefinite (min eigenvalue {min_eig(a):.3e})")
    for jitter in JITTER_LADDER:
        try:
            low = np.linalg.cholesky(a + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
        return low.T
    w, v = np.linalg.eigh(a)
    root = np.sqrt(np.clip(w, 0.0, None))[:, None] * v.T
    _, r = np.linalg.qr(root)
    return r


# ---------------------------------------------------------------------------
# problem data

@dataclass
class LmiConstraint:
    """Block constraint ``f0 + sum_i x_i * coeffs[i] >= 0`` (or ``> 0``)."""

    f0: np.ndarray
    coeffs: dict[int, np.ndarray]
    strict: bool = False
    name: str = ""

    @property
    def dim(self) -> int:
        return self.f0.shape[0]

    def evaluate(self, x) -> np.ndarray:
        out = self.f0.copy()
        for i, fi in self.coeffs.items():
            out += x[i] * fi
        return 0.5 * (out + out.T)


@dataclass
class LmiProblem:
    variables: list[str]
    objective: np.ndarray
    constraints: list[LmiConstraint]
    eps_strict: float = EPS_STRICT

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).reshape(-1)
        self.validate()

    def validate(self):
        n = len(self.variables)
        if self.objective.shape != (n,):
            raise InvalidInput("objective length does not match variable count")
        for c in self.constraints:
            d = c.f0.shape
            if len(d) != 2 or d[0] != d[1]:
                raise InvalidInput(f"constraint {c.name!r}: constant block is not square")
            for i, fi in c.coeffs.items():
                if not 0 <= i < n:
                    raise InvalidInput(f"constraint {c.name!r}: variable index {i} out of range")
                if fi.shape != d:
                    raise InvalidInput(f"constraint {c.name!r}: block {i} has shape {fi.shape}, expected {d}")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def residuals(self, x) -> np.ndarray:
        """Minimum eigenvalue of every constraint block at ``x``."""
        x = np.asarray(x, dtype=float)
        return np.array([min_eig(c.evaluate(x)) for c in self.constraints])

    def max_violation(self, x) -> float:
        r = self.residuals(x)
        return float(min(r.min(), 0.0)) if r.size else 0.0

    def same_as(self, other: "LmiProblem") -> bool:
        """Exact (bitwise) equality of all problem data."""
        if self.variables != other.variables or len(self.constraints) != len(other.constraints):
            return False
        if not np.array_equal(self.objective, other.objective):
            return False
        for a, b in zip(self.constraints, other.constraints):
            if a.strict != b.strict or not np.array_equal(a.f0, b.f0):
                return False
            for i in set(a.coeffs) | set(b.coeffs):
                fa = a.coeffs.get(i, np.zeros_like(a.f0))
                fb = b.coeffs.get(i, np.zeros_like(b.f0))
                if not np.array_equal(fa, fb):
                    return False
        return True


@dataclass
class LmiSolution:
    status: str  # optimal | feasible | infeasible | numerical_failure
    values: np.ndarray
    objective_value: float
    max_residual: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


# ---------------------------------------------------------------------------
# affine matrix expressions

class Affine:
    """Matrix-valued affine function ``const + sum_i x_i * coeffs[i]``."""

    __slots__ = ("const", "coeffs")
    __array_priority__ = 100

    def __init__(self, const, coeffs=None):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coeffs = dict(coeffs or {})

    @property
    def shape(self):
        return self.const.shape

    @staticmethod
    def lift(obj, shape=None) -> "Affine":
        if isinstance(obj, Affine):
            return obj
        a = np.asarray(obj, dtype=float)
        if a.ndim == 0 and shape is not None:
            a = np.full(shape, float(a))
        return Affine(np.atleast_2d(a))

    def _combine(self, other, sign):
        other = Affine.lift(other, self.shape)
        if other.shape != self.shape:
            raise InvalidInput(f"shape mismatch {self.shape} vs {other.shape}")
        coeffs = dict(self.coeffs)
        for i, fi in other.coeffs.items():
            coeffs[i] = coeffs[i] + sign * fi if i in coeffs else sign * fi
        return Affine(self.const + sign * other.const, coeffs)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return (-self)._combine(other, 1.0)

    def __neg__(self):
        return Affine(-self.const, {i: -f for i, f in self.coeffs.items()})

    def __mul__(self, s):
        if isinstance(s, Affine):
            if s.shape == (1, 1) and not s.coeffs:
                s = float(s.const[0, 0])
            elif self.shape == (1, 1) and not self.coeffs:
                return s * float(self.const[0, 0])
            else:
                raise InvalidInput("product of two affine expressions is not affine")
        s = float(s)
        return Affine(s * self.const, {i: s * f for i, f in self.coeffs.items()})

    __rmul__ = __mul__

    def __matmul__(self, m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return Affine(self.const @ m, {i: f @ m for i, f in self.coeffs.items()})

    def __rmatmul__(self, m):
        m = np.atleast_2d(np.asarray(m, dtype=float))
        return Affine(m @ self.const, {i: m @ f for i, f in self.coeffs.items()})

    def times(self, expr: "Affine") -> "Affine":
        """Scalar constant (1x1, variable-free) times ``expr`` or scalar affine times a constant."""
        return self * expr

    @property
    def T(self):
        return Affine(self.const.T, {i: f.T for i, f in self.coeffs.items()})

    def value(self, x) -> np.ndarray:
        out = self.const.copy()
        for i, f in self.coeffs.items():
            out = out + x[i] * f
        return out


def scalar_times(expr: Affine, m) -> Affine:
    """``expr * m`` for a 1x1 affine ``expr`` and a constant matrix ``m``."""
    if expr.shape != (1, 1):
        raise InvalidInput("scalar_times expects a 1x1 expression")
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return Affine(expr.const[0, 0] * m, {i: f[0, 0] * m for i, f in expr.coeffs.items()})


def bmat(rows: Sequence[Sequence]) -> Affine:
    """Assemble a block matrix of affine expressions, arrays, or ``None`` (zeros)."""
    nr = len(rows)
    nc = len(rows[0])
    heights = [None] * nr
    widths = [None] * nc
    for r, row in enumerate(rows):
        if len(row) != nc:
            raise InvalidInput("ragged block rows")
        for c, blk in enumerate(row):
            if blk is None:
                continue
            shape = blk.shape if isinstance(blk, Affine) else np.atleast_2d(np.asarray(blk)).shape
            if heights[r] is None:
                heights[r] = shape[0]
            if widths[c] is None:
                widths[c] = shape[1]
            if heights[r] != shape[0] or widths[c] != shape[1]:
                raise InvalidInput(f"block ({r},{c}) has shape {shape}, expected ({heights[r]},{widths[c]})")
    if None in heights or None in widths:
        raise InvalidInput("cannot infer block sizes from an all-None row or column")
    roff = np.concatenate([[0], np.cumsum(heights)])
    coff = np.concatenate([[0], np.cumsum(widths)])
    const = np.zeros((roff[-1], coff[-1]))
    coeffs: dict[int, np.ndarray] = {}
    for r, row in enumerate(rows):
        for c, blk in enumerate(row):
            if blk is None:
                continue
            blk = Affine.lift(blk)
            sl = (slice(roff[r], roff[r + 1]), slice(coff[c], coff[c + 1]))
            const[sl] = blk.const
            for i, f in blk.coeffs.items():
                if i not in coeffs:
                    coeffs[i] = np.zeros_like(const)
                coeffs[i][sl] = f
    return Affine(const, coeffs)


class LmiBuilder:
    """Collects decision variables and block constraints into an :class:`LmiProblem`."""

    def __init__(self, eps_strict: float = EPS_STRICT):
        self.names: list[str] = []
        self.constraints: list[LmiConstraint] = []
        self.objective: dict[int, float] = {}
        self.eps_strict = eps_strict
        self._vars: dict[str, tuple[str, tuple, list[int]]] = {}

    def _new(self, label: str) -> int:
        self.names.append(label)
        return len(self.names) - 1

    def scalar(self, name: str) -> Affine:
        i = self._new(name)
        self._vars[name] = ("scalar", (1, 1), [i])
        return Affine(np.zeros((1, 1)), {i: np.ones((1, 1))})

    def symmetric(self, name: str, n: int) -> Affine:
        coeffs = {}
        idx = []
        for r in range(n):
            for c in range(r, n):
                i = self._new(f"{name}[{r},{c}]")
                e = np.zeros((n, n))
                e[r, c] = e[c, r] = 1.0
                coeffs[i] = e
                idx.append(i)
        self._vars[name] = ("symmetric", (n, n), idx)
        return Affine(np.zeros((n, n)), coeffs)

    def matrix(self, name: str, rows: int, cols: int) -> Affine:
        coeffs = {}
        idx = []
        for r in range(rows):
            for c in range(cols):
                i = self._new(f"{name}[{r},{c}]")
                e = np.zeros((rows, cols))
                e[r, c] = 1.0
                coeffs[i] = e
                idx.append(i)
        self._vars[name] = ("matrix", (rows, cols), idx)
        return Affine(np.zeros((rows, cols)), coeffs)

    def add(self, expr: Affine, strict: bool = False, name: str = ""):
        """Require ``expr >= 0`` (``> 0`` when strict)."""
        expr = Affine.lift(expr)
        if expr.shape[0] != expr.shape[1]:
            raise InvalidInput(f"constraint {name!r} is not square")
        asym = np.abs(expr.const - expr.const.T).max(initial=0.0)
        for f in expr.coeffs.values():
            asym = max(asym, np.abs(f - f.T).max(initial=0.0))
        if asym > 1e-9 * (1.0 + np.abs(expr.const).max(initial=0.0)):
            raise InvalidInput(f"constraint {name!r} is not symmetric (asymmetry {asym:.2e})")
        sym_ = lambda a: 0.5 * (a + a.T)
        coeffs = {i: sym_(f) for i, f in expr.coeffs.items() if np.any(f)}
        self.constraints.append(LmiConstraint(sym_(expr.const), coeffs, strict, name))

    def minimize(self, expr: Affine):
        expr = Affine.lift(expr)
        if expr.shape != (1, 1):
            raise InvalidInput("objective must be scalar")
        self.objective = {i: float(f[0, 0]) for i, f in expr.coeffs.items()}

    def build(self) -> LmiProblem:
        c = np.zeros(len(self.names))
        for i, w in self.objective.items():
            c[i] = w
        return LmiProblem(list(self.names), c, list(self.constraints), self.eps_strict)

    def value(self, name: str, x) -> np.ndarray | float:
        kind, shape, idx = self._vars[name]
        x = np.asarray(x, dtype=float)
        if kind == "scalar":
            return float(x[idx[0]])
        out = np.zeros(shape)
        if kind == "symmetric":
            k = 0
            for r in range(shape[0]):
                for c in range(r, shape[0]):
                    out[r, c] = out[c, r] = x[idx[k]]
                    k += 1
        else:
            out[:] = x[idx].reshape(shape)
        return out


# ---------------------------------------------------------------------------
# solver

_SOLVER_DEFAULTS = dict(show_progress=False, abstol=1e-9, reltol=1e-9, feastol=1e-9, maxiters=100)
# looser settings tried when the first attempt breaks down numerically
_RETRY_TOLS = (1e-8,)


def solve(problem: LmiProblem, tol_gap: float = TOL_GAP, tol_feas: float = TOL_FEAS, **options) -> LmiSolution:
    """Solve an :class:`LmiProblem` with the cvxopt interior-point method.

    1x1 blocks are passed as linear inequalities.  The reported
    ``max_residual`` is the most negative eigenvalue over all blocks at the
    returned point (strict blocks are measured against their shift).  A run
    that does not certify optimality (breakdown or stalled iterations) is
    retried with looser solver tolerances; the retry is kept if it does
    better.
    """
    sol = _solve_once(problem, tol_gap, tol_feas, **options)
    if sol.status != "optimal" and sol.status != "infeasible" and not options:
        for t in _RETRY_TOLS:
            retry = _solve_once(problem, tol_gap, tol_feas, abstol=t, reltol=t, feastol=t)
            if _rank(retry) > _rank(sol):
                retry.diagnostics["retried_with"] = t
                return retry
    return sol


def _rank(sol: LmiSolution) -> int:
    return {"optimal": 3, "infeasible": 2, "feasible": 1}.get(sol.status, 0)


def _solve_once(problem: LmiProblem, tol_gap: float = TOL_GAP, tol_feas: float = TOL_FEAS, **options) -> LmiSolution:
    problem.validate()
    n = problem.n_vars
    eps = problem.eps_strict

    if n == 0:
        r = min((min_eig(c.f0) - (eps if c.strict else 0.0) for c in problem.constraints), default=0.0)
        status = "feasible" if r >= -tol_feas else "infeasible"
        return LmiSolution(status, np.zeros(0), 0.0, min(r, 0.0), {"iterations": 0})

    gl_rows, hl = [], []
    gs, hs = [], []
    for c in problem.constraints:
        shift = eps if c.strict else 0.0
        d = c.dim
        if d == 1:
            row = np.zeros(n)
            for i, f in c.coeffs.items():
                row[i] = -f[0, 0]
            gl_rows.append(row)
            hl.append(c.f0[0, 0] - shift)
        else:
            g = np.zeros((d * d, n))
            for i, f in c.coeffs.items():
                g[:, i] = -f.reshape(-1, order="F")
            gs.append(cvx_matrix(g))
            hs.append(cvx_matrix(c.f0 - shift * np.eye(d)))

    kwargs = {}
    if gl_rows:
        kwargs["Gl"] = cvx_matrix(np.array(gl_rows))
        kwargs["hl"] = cvx_matrix(np.array(hl))
    if gs:
        kwargs["Gs"] = gs
        kwargs["hs"] = hs
    opts = dict(_SOLVER_DEFAULTS)
    opts.update(options)
    try:
        sol = cvx_solvers.sdp(cvx_matrix(problem.objective), options=opts, **kwargs)
    except (ValueError, ArithmeticError) as exc:
        return LmiSolution("numerical_failure", np.full(n, np.nan), np.nan, -np.inf, {"error": str(exc)})

    diag = {
        "iterations": sol.get("iterations"),
        "solver_status": sol["status"],
        "gap": sol.get("gap"),
        "relative_gap": sol.get("relative gap"),
        "primal_infeasibility": sol.get("primal infeasibility"),
        "dual_infeasibility": sol.get("dual infeasibility"),
    }
    if sol["status"] == "primal infeasible":
        diag["certificate_residual"] = sol.get("residual as primal infeasibility certificate")
        return LmiSolution("infeasible", np.full(n, np.nan), np.inf, -np.inf, diag)
    if sol["status"] == "dual infeasible":
        diag["error"] = "unbounded below"
        return LmiSolution("numerical_failure", np.full(n, np.nan), -np.inf, -np.inf, diag)

    x = np.array(sol["x"]).reshape(-1)
    res = min(
        (min_eig(c.evaluate(x)) - (eps if c.strict else 0.0) for c in problem.constraints),
        default=0.0,
    )
    res = min(res, 0.0)
    obj = float(problem.objective @ x)
    if sol["status"] == "optimal" and res >= -tol_feas:
        status = "optimal"
    elif res >= -tol_feas:
        gap = sol.get("gap")
        status = "optimal" if gap is not None and abs(gap) <= tol_gap * (1.0 + abs(obj)) else "feasible"
    else:
        status = "numerical_failure"
    return LmiSolution(status, x, obj, res, diag)


# ---------------------------------------------------------------------------
# eigenvalue-minimization problems built on the Schur-complement lift

@dataclass
class EigProblem:
    """Data of ``W(tau) = E(tau) + A(tau)^T X(tau)^{-1} A(tau)``.

    ``E``, ``A`` and ``X`` are affine in the scalars ``tau``; each is given as
    a constant term plus one coefficient per scalar.  ``A``/``X`` may be left
    out when there is no coupling term.
    """

    e0: np.ndarray
    e_terms: list
    a0: np.ndarray | None = None
    a_terms: list | None = None
    x0: np.ndarray | None = None
    x_terms: list | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.e0 = sym(self.e0)
        self.e_terms = [sym(t) for t in self.e_terms]
        m = len(self.e_terms)
        if self.x0 is not None:
            self.x0 = sym(self.x0)
            self.x_terms = [sym(t) for t in (self.x_terms or [np.zeros_like(self.x0)] * m)]
            if self.a0 is None:
                self.a0 = np.zeros((self.x0.shape[0], self.e0.shape[0]))
            self.a0 = np.atleast_2d(np.asarray(self.a0, dtype=float))
            self.a_terms = [np.atleast_2d(np.asarray(t, dtype=float)) for t in (self.a_terms or [np.zeros_like(self.a0)] * m)]
            if len(self.x_terms) != m or len(self.a_terms) != m:
                raise InvalidInput("coupling terms must have one entry per scalar")
        self.lower = np.zeros(m) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(m)
        self.upper = np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(m)

    @property
    def n(self) -> int:
        return len(self.e_terms)

    @property
    def coupled(self) -> bool:
        return self.x0 is not None

    def parts(self, tau):
        tau = np.asarray(tau, dtype=float)
        e = self.e0 + sum(t * m for t, m in zip(tau, self.e_terms))
        if not self.coupled:
            return e, None, None
        a = self.a0 + sum(t * m for t, m in zip(tau, self.a_terms))
        x = self.x0 + sum(t * m for t, m in zip(tau, self.x_terms))
        return e, a, x

    def matrix(self, tau) -> np.ndarray:
        """``W(tau)``; raises :class:`DegeneratePivot` if ``X(tau)`` is not PD."""
        e, a, x = self.parts(tau)
        if not self.coupled:
            return sym(e)
        if not is_pd(x):
            raise DegeneratePivot("X(tau) is not positive definite")
        return sym(e + a.T @ np.linalg.solve(x, a))

    def has_coupling(self) -> bool:
        if not self.coupled:
            return False
        return bool(np.any(self.a0) or any(np.any(t) for t in self.a_terms))

    def _add_bounds(self, b: LmiBuilder, taus: list, scale: Affine | None = None):
        for h, t in enumerate(taus):
            lo, hi = self.lower[h], self.upper[h]
            base = scale if scale is not None else 1.0
            if scale is None:
                b.add(t - lo, name=f"tau{h}>=lo")
                if np.isfinite(hi):
                    b.add(hi - t, name=f"tau{h}<=hi")
            else:
                b.add(t - lo * base, name=f"tau{h}>=lo")
                if np.isfinite(hi):
                    b.add(hi * base - t, name=f"tau{h}<=hi")


@dataclass
class EigResult:
    tau: np.ndarray
    objective: float
    lam: float
    status: str
    method: str
    diagnostics: dict = field(default_factory=dict)


def _eig_lift(b: LmiBuilder, prob: EigProblem, taus, t_expr, kappa=None):
    """Constrain ``t*I - E - ... >= 0`` through the Schur lift (``kappa`` scales constants)."""
    k = 1.0 if kappa is None else kappa
    ne = prob.e0.shape[0]
    e_expr = scalar_times(k, prob.e0) if kappa is not None else Affine(prob.e0)
    for t, m in zip(taus, prob.e_terms):
        e_expr = e_expr + scalar_times(t, m)
    top = (scalar_times(t_expr, np.eye(ne)) if isinstance(t_expr, Affine) else t_expr * np.eye(ne)) - e_expr
    if not prob.coupled:
        b.add(top, name="epigraph")
        return
    a_expr = scalar_times(k, prob.a0) if kappa is not None else Affine(prob.a0)
    x_expr = scalar_times(k, prob.x0) if kappa is not None else Affine(prob.x0)
    for t, am, xm in zip(taus, prob.a_terms, prob.x_terms):
        a_expr = a_expr + scalar_times(t, am)
        x_expr = x_expr + scalar_times(t, xm)
    nx = prob.x0.shape[0]
    eps_blk = scalar_times(k, np.eye(nx)) if kappa is not None else Affine(np.eye(nx))
    b.add(x_expr - b.eps_strict * eps_blk, name="pivot>0")
    if prob.has_coupling():
        b.add(bmat([[top, a_expr.T], [a_expr, x_expr]]), name="epigraph")
    else:
        b.add(top, name="epigraph")


def solve_min_max_eig(prob: EigProblem, eig_weight: float = 1.0, offset_weights=None, eps: float = EPS_STRICT) -> EigResult:
    """Minimize ``eig_weight * max_eig(W(tau)) + offset_weights . tau``.

    Solved exactly as the epigraph SDP ``t*I - E(tau) - A^T X^{-1} A >= 0``
    written through its Schur complement, with ``X(tau) >= eps*I`` and the
    box bounds on ``tau``.  Raises :class:`NoValidMultiplier` when the
    constraints admit no multipliers.
    """
    w = np.zeros(prob.n) if offset_weights is None else np.asarray(offset_weights, dtype=float)
    b = LmiBuilder(eps)
    t = b.scalar("t")
    taus = [b.scalar(f"tau{h}") for h in range(prob.n)]
    obj = eig_weight * t
    for wi, ti in zip(w, taus):
        obj = obj + wi * ti
    b.minimize(obj)
    _eig_lift(b, prob, taus, t)
    prob._add_bounds(b, taus)
    sol = solve(b.build())
    if sol.status == "infeasible":
        raise NoValidMultiplier("no multipliers satisfy the constraints")
    if not sol.ok:
        raise NumericalFailure("epigraph SDP failed", sol.diagnostics)
    tau = np.array([b.value(f"tau{h}", sol.values) for h in range(prob.n)])
    tau = np.maximum(tau, prob.lower)
    lam = max_eig(prob.matrix(tau))
    return EigResult(tau, eig_weight * lam + float(w @ tau), lam, sol.status, "lift", sol.diagnostics)


@dataclass
class RatioProblem:
    """Minimize ``max_eig(W(tau)) / s(tau)`` with ``s`` affine and positive."""

    eig: EigProblem
    s0: float
    s_terms: np.ndarray

    def ratio(self, tau) -> float:
        s = self.slack(tau)
        if s <= 0:
            return np.inf
        return max_eig(self.eig.matrix(tau)) / s

    def slack(self, tau) -> float:
        return float(self.s0 + np.dot(self.s_terms, tau))


KAPPA_LADDER = (1e8, 1e5)


def solve_min_eig_ratio(rp: RatioProblem, eps: float = EPS_STRICT, method: str = "auto",
                        kappa_caps: Sequence[float] = KAPPA_LADDER) -> EigResult:
    """Generalized eigenvalue problem ``min max_eig(W(tau)) / s(tau)``.

    The default route is the perspective lift: with ``kappa = 1/max_eig(W)``
    and ``sigma = kappa*tau`` the problem becomes the SDP

        maximize  kappa*s0 + s_terms . sigma
        s.t.      [[I - kappa*E0 - sum sigma_i E_i, A~^T], [A~, X~]] >= 0

    which is linear in ``(kappa, sigma)``.  ``kappa`` is capped to keep the
    SDP bounded; a cap that upsets the solver's scaling is retried with the
    next smaller one.  Bisection on the ratio is the last resort.
    """
    prob = rp.eig
    diag = {}
    if method in ("auto", "lift"):
        for cap in kappa_caps:
            res, diag = _ratio_lift(rp, eps, cap)
            if res is not None:
                return res
        if method == "lift":
            raise NumericalFailure("perspective lift failed", diag)
    return _ratio_bisection(rp, eps)


def _ratio_lift(rp: RatioProblem, eps: float, kappa_max: float):
    prob = rp.eig
    b = LmiBuilder(eps)
    kappa = b.scalar("kappa")
    taus = [b.scalar(f"tau{h}") for h in range(prob.n)]
    obj = rp.s0 * kappa
    for si, ti in zip(rp.s_terms, taus):
        obj = obj + si * ti
    b.minimize(-1.0 * obj)
    _eig_lift(b, prob, taus, Affine(np.ones((1, 1))), kappa=kappa)
    prob._add_bounds(b, taus, scale=kappa)
    b.add(kappa - 0.0, name="kappa>=0")
    b.add(kappa_max - kappa, name="kappa<=max")
    b.add(obj - eps * kappa, name="slack>0")
    sol = solve(b.build())
    if sol.status == "infeasible":
        raise NoValidMultiplier("no multipliers satisfy the constraints")
    if not (sol.ok and b.value("kappa", sol.values) > 0):
        return None, sol.diagnostics
    k = b.value("kappa", sol.values)
    tau = np.array([b.value(f"tau{h}", sol.values) for h in range(prob.n)]) / k
    tau = np.clip(tau, prob.lower, prob.upper)
    try:
        lam = max_eig(prob.matrix(tau))
    except DegeneratePivot:
        return None, sol.diagnostics
    if rp.slack(tau) <= 0:
        return None, sol.diagnostics
    diag = dict(sol.diagnostics, kappa_cap=kappa_max)
    return EigResult(tau, lam / rp.slack(tau), lam, sol.status, "lift", diag), diag


def _ratio_feasible(rp: RatioProblem, gamma: float, eps: float):
    prob = rp.eig
    b = LmiBuilder(eps)
    taus = [b.scalar(f"tau{h}") for h in range(prob.n)]
    s_expr = Affine(np.full((1, 1), rp.s0))
    for si, ti in zip(rp.s_terms, taus):
        s_expr = s_expr + si * ti
    b.minimize(Affine(np.zeros((1, 1))) + 0.0 * taus[0] if taus else Affine(np.zeros((1, 1))))
    _eig_lift(b, prob, taus, gamma * s_expr)
    prob._add_bounds(b, taus)
    b.add(s_expr - eps, name="slack>0")
    sol = solve(b.build())
    if not sol.ok:
        return None
    return np.array([b.value(f"tau{h}", sol.values) for h in range(prob.n)])


def _ratio_bisection(rp: RatioProblem, eps: float, rtol: float = 1e-7, max_iter: int = 200) -> EigResult:
    hi = 1.0
    tau_hi = None
    for _ in range(200):
        tau_hi = _ratio_feasible(rp, hi, eps)
        if tau_hi is not None:
            break
        hi *= 4.0
    if tau_hi is None:
        raise NoValidMultiplier("ratio problem infeasible for every tested level")
    lo = 0.0
    for _ in range(max_iter):
        if hi - lo <= rtol * hi:
            break
        mid = 0.5 * (lo + hi)
        tau_mid = _ratio_feasible(rp, mid, eps)
        if tau_mid is None:
            lo = mid
        else:
            hi, tau_hi = mid, tau_mid
    tau = np.clip(tau_hi, rp.eig.lower, rp.eig.upper)
    lam = max_eig(rp.eig.matrix(tau))
    return EigResult(tau, lam / rp.slack(tau), lam, "optimal", "bisection", {"interval": (lo, hi)})


def solve_scalar_epigraph(m) -> float:
    """``min t s.t. t*I - m >= 0`` through :func:`solve` (equals ``max_eig(m)``)."""
    b = LmiBuilder()
    t = b.scalar("t")
    b.minimize(t)
    b.add(scalar_times(t, np.eye(sym(m).shape[0])) - sym(m))
    sol = solve(b.build())
    if not sol.ok:
        raise NumericalFailure("epigraph solve failed", sol.diagnostics)
    return sol.objective_value


def stack_psd_checks(blocks: Iterable[np.ndarray], tol: float = TOL_FEAS) -> bool:
    return all(is_psd(b, tol) for b in blocks)
