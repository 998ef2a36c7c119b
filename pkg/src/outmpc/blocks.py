"""Stacked prediction operators and the quadratic block data of every constraint family.

Predicted states follow the closed-loop recursion

    x_{j+1} = Phi_K x_j + G c_j + Bp p_j,   x_0 = x,

so ``x_j = Phi_K^j x + sum_{i<j} Phi_K^(j-1-i) (G c_i + Bp p_i)``.

Every family quantity is a quadratic form in the known vector
``v = [y; c_0; ...; c_{m-1}]`` and the uncertain vector
``xi = [x_na; p_0; ...; p_{r-1}]``:

    q(xi, v) = xi' F xi + 2 xi' D v + v' E v.

The uncertainty description of stage ``i`` is
``|C_K x_i + Dq c_i|^2 - |p_i|^2 = xi' Z_i xi + 2 xi' M_i v + v' N_i v >= 0``
and the unmeasured-state set is ``1 + xi' S_bar xi >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import UncertainSystem

FAMILIES = ("cost", "input", "rate", "output", "nonmeas", "terminal")


@dataclass(frozen=True)
class StackedPrediction:
    """``x_k = Phi_bar x + G_bar [c_0..c_{k-1}] + B_bar [p_0..p_{k-1}]``."""

    k: int
    phi_bar: np.ndarray
    g_bar: np.ndarray
    b_bar: np.ndarray
    ny: int

    @property
    def phi_bar_a(self) -> np.ndarray:
        return self.phi_bar[:, : self.ny]

    @property
    def phi_bar_na(self) -> np.ndarray:
        return self.phi_bar[:, self.ny:]

    def predict(self, x, cbar, pbar) -> np.ndarray:
        return self.phi_bar @ np.asarray(x) + self.g_bar @ np.asarray(cbar).reshape(-1) + self.b_bar @ np.asarray(pbar).reshape(-1)


def build_stacked(sys: UncertainSystem, K, k: int) -> StackedPrediction:
    """Operators mapping ``(x, c_0..c_{k-1}, p_0..p_{k-1})`` to ``x_k``.

    ``G_bar = [Phi_K^(k-1) G ... Phi_K G  G]`` (``k`` blocks), likewise ``B_bar``.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    phi_k, _ = sys.closed_loop(K)
    powers = [np.eye(sys.nx)]
    for _ in range(k):
        powers.append(phi_k @ powers[-1])
    g_bar = np.hstack([powers[k - 1 - i] @ sys.g for i in range(k)]) if k else np.zeros((sys.nx, 0))
    b_bar = np.hstack([powers[k - 1 - i] @ sys.bp for i in range(k)]) if k else np.zeros((sys.nx, 0))
    return StackedPrediction(k, powers[k], g_bar, b_bar, sys.ny)


class _Layout:
    """Linear maps from ``z = [x; c_0..c_{m-1}; p_0..p_{r-1}]`` to signals."""

    def __init__(self, sys: UncertainSystem, K, m: int, r: int):
        self.sys, self.K, self.m, self.r = sys, np.asarray(K, dtype=float), m, r
        self.phi_k, self.c_k = sys.closed_loop(K)
        self.nz = sys.nx + m * sys.nu + r * sys.np_

    def state(self, j: int) -> np.ndarray:
        """Rows giving ``x_j``; requires ``j <= m`` and ``j <= r``."""
        s = self.sys
        if j > self.m or j > self.r:
            raise ValueError(f"state index {j} needs more inputs than the layout holds")
        st = build_stacked(s, self.K, j)
        out = np.zeros((s.nx, self.nz))
        out[:, : s.nx] = st.phi_bar
        out[:, s.nx: s.nx + j * s.nu] = st.g_bar
        p0 = s.nx + self.m * s.nu
        out[:, p0: p0 + j * s.np_] = st.b_bar
        return out

    def c(self, i: int) -> np.ndarray:
        s = self.sys
        out = np.zeros((s.nu, self.nz))
        out[:, s.nx + i * s.nu: s.nx + (i + 1) * s.nu] = np.eye(s.nu)
        return out

    def p(self, i: int) -> np.ndarray:
        s = self.sys
        out = np.zeros((s.np_, self.nz))
        p0 = s.nx + self.m * s.nu
        out[:, p0 + i * s.np_: p0 + (i + 1) * s.np_] = np.eye(s.np_)
        return out

    def split(self, q: np.ndarray):
        """Partition a quadratic form in ``z`` into ``(D, E, F)`` over ``(xi, v)``."""
        s = self.sys
        ny, nx = s.ny, s.nx
        iv = np.r_[np.arange(ny), np.arange(nx, nx + self.m * s.nu)]
        ixi = np.r_[np.arange(ny, nx), np.arange(nx + self.m * s.nu, self.nz)]
        q = 0.5 * (q + q.T)
        return q[np.ix_(ixi, iv)], q[np.ix_(iv, iv)], q[np.ix_(ixi, ixi)]

    def quad(self, *terms):
        """``sum L' W L`` over ``(L, W)`` pairs."""
        q = np.zeros((self.nz, self.nz))
        for lin, w in terms:
            q += lin.T @ w @ lin
        return q

    def uncertainty(self, i: int):
        s = self.sys
        q_i = self.c_k @ self.state(i) + s.dq @ self.c(i)
        p_i = self.p(i)
        return self.split(q_i.T @ q_i - p_i.T @ p_i)


@dataclass
class QuadBlockSet:
    family: str
    k: int
    m: int  # number of c vectors in v
    r: int  # number of uncertainty stages in xi
    ny: int
    nna: int
    nu: int
    np_: int
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray
    M: list = field(default_factory=list)
    N: list = field(default_factory=list)
    Z: list = field(default_factory=list)
    S_bar: np.ndarray | None = None

    @property
    def n_v(self) -> int:
        return self.ny + self.m * self.nu

    @property
    def n_xi(self) -> int:
        return self.nna + self.r * self.np_

    @property
    def n_mult(self) -> int:
        return self.r + 1

    def H(self, i: int) -> np.ndarray:
        """Selector of ``p_i`` inside ``xi``."""
        out = np.zeros((self.np_, self.n_xi))
        out[:, self.nna + i * self.np_: self.nna + (i + 1) * self.np_] = np.eye(self.np_)
        return out

    def vectors(self, x, cbar, pbar):
        x = np.asarray(x, dtype=float).reshape(-1)
        cbar = np.asarray(cbar, dtype=float).reshape(-1)[: self.m * self.nu]
        pbar = np.asarray(pbar, dtype=float).reshape(-1)[: self.r * self.np_]
        v = np.r_[x[: self.ny], cbar]
        xi = np.r_[x[self.ny:], pbar]
        return xi, v

    def value(self, x, cbar, pbar) -> float:
        xi, v = self.vectors(x, cbar, pbar)
        return float(xi @ self.F @ xi + 2 * xi @ self.D @ v + v @ self.E @ v)

    def uncertainty_value(self, i, x, cbar, pbar) -> float:
        xi, v = self.vectors(x, cbar, pbar)
        return float(xi @ self.Z[i] @ xi + 2 * xi @ self.M[i] @ v + v @ self.N[i] @ v)

    def bordered(self, v) -> np.ndarray:
        """``[[F, D v], [v' D', v' E v]]`` so that ``[xi; 1]' B [xi; 1]`` is the quantity."""
        v = np.asarray(v, dtype=float).reshape(-1)
        dv = self.D @ v
        return np.block([[self.F, dv[:, None]], [dv[None, :], np.array([[v @ self.E @ v]])]])

    def sprocedure(self, tau):
        """``(W, A, X)`` with ``W = E + sum tau N + A' X^-1 A``; ``X`` may be singular."""
        tau = np.asarray(tau, dtype=float)
        e = self.E + sum(t * n for t, n in zip(tau[: self.r], self.N))
        a = self.D + sum(t * m for t, m in zip(tau[: self.r], self.M))
        x = -self.F - sum(t * z for t, z in zip(tau[: self.r], self.Z)) - tau[self.r] * self.S_bar
        return e, a, x


def _s_bar(sys: UncertainSystem, S, r: int) -> np.ndarray:
    n = sys.nna + r * sys.np_
    out = np.zeros((n, n))
    out[: sys.nna, : sys.nna] = -np.asarray(S, dtype=float)
    return out


def _finish(family, k, lay: _Layout, q, S) -> QuadBlockSet:
    s = lay.sys
    D, E, F = lay.split(q)
    unc = [lay.uncertainty(i) for i in range(lay.r)]
    return QuadBlockSet(
        family, k, lay.m, lay.r, s.ny, s.nna, s.nu, s.np_, D, E, F,
        M=[u[0] for u in unc], N=[u[1] for u in unc], Z=[u[2] for u in unc], S_bar=_s_bar(s, S, lay.r),
    )


def build_cost_blocks(sys, K, Rx, Ru, P, k: int, terminal_weighting: bool, S=None) -> QuadBlockSet:
    """``x_{k+1}' W x_{k+1} + c_k' Ru c_k`` with ``W = P`` when ``terminal_weighting`` else ``Rx``."""
    lay = _Layout(sys, K, k + 1, k + 1)
    w = P if terminal_weighting else Rx
    q = lay.quad((lay.state(k + 1), np.asarray(w, dtype=float)), (lay.c(k), np.asarray(Ru, dtype=float)))
    return _finish("cost", k, lay, q, _S(sys, S))


def build_uncertainty_blocks(sys, K, k: int, S=None):
    """Stage blocks ``(M_i, N_i, Z_i, H_i)`` for ``i = 0..k`` and ``S_bar`` (cost layout at ``k``)."""
    lay = _Layout(sys, K, k + 1, k + 1)
    b = _finish("cost", k, lay, np.zeros((lay.nz, lay.nz)), _S(sys, S))
    return {"M": b.M, "N": b.N, "Z": b.Z, "H": [b.H(i) for i in range(b.r)], "S_bar": b.S_bar, "blocks": b}


def build_input_blocks(sys, K, k: int, S=None) -> QuadBlockSet:
    """``|K y_k + c_k|^2`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("input blocks need k >= 1")
    lay = _Layout(sys, K, k + 1, k)
    u = lay.K @ sys.c @ lay.state(k) + lay.c(k)
    return _finish("input", k, lay, u.T @ u, _S(sys, S))


def build_rate_blocks(sys, K, k: int, S=None) -> QuadBlockSet:
    """``|K (y_k - y_{k-1}) + c_k - c_{k-1}|^2`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("rate blocks need k >= 1")
    lay = _Layout(sys, K, k + 1, k)
    kc = lay.K @ sys.c
    du = kc @ (lay.state(k) - lay.state(k - 1)) + lay.c(k) - lay.c(k - 1)
    return _finish("rate", k, lay, du.T @ du, _S(sys, S))


def build_output_blocks(sys, K, k: int, S=None) -> QuadBlockSet:
    """``|C x_k|^2`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("output blocks need k >= 1")
    lay = _Layout(sys, K, k, k)
    y = sys.c @ lay.state(k)
    return _finish("output", k, lay, y.T @ y, _S(sys, S))


def build_nonmeas_blocks(sys, K, S, k: int) -> QuadBlockSet:
    """``x_k' H' S H x_k`` for ``k >= 1``."""
    if k < 1:
        raise ValueError("unmeasured-state blocks need k >= 1")
    lay = _Layout(sys, K, k, k)
    hx = sys.h @ lay.state(k)
    return _finish("nonmeas", k, lay, hx.T @ np.asarray(S, dtype=float) @ hx, S)


def build_terminal_blocks(sys, K, P, N: int, S=None) -> QuadBlockSet:
    """``x_N' P x_N``."""
    lay = _Layout(sys, K, N, N)
    return _finish("terminal", N, lay, lay.quad((lay.state(N), np.asarray(P, dtype=float))), _S(sys, S))


def _S(sys, S):
    return np.eye(sys.nna) if S is None else np.asarray(S, dtype=float)


def family_indices(family: str, N: int) -> list[int]:
    return {
        "cost": list(range(N)),
        "input": list(range(1, N)),
        "rate": list(range(1, N)),
        "output": list(range(1, N + 1)),
        "nonmeas": list(range(1, N + 1)),
        "terminal": [N],
    }[family]


def build_family(family: str, sys, K, spec, P, k: int) -> QuadBlockSet:
    N = spec.horizon
    if family == "cost":
        return build_cost_blocks(sys, K, spec.rx, spec.ru, P, k, terminal_weighting=(k == N - 1), S=spec.s)
    if family == "input":
        return build_input_blocks(sys, K, k, spec.s)
    if family == "rate":
        return build_rate_blocks(sys, K, k, spec.s)
    if family == "output":
        return build_output_blocks(sys, K, k, spec.s)
    if family == "nonmeas":
        return build_nonmeas_blocks(sys, K, spec.s, k)
    if family == "terminal":
        return build_terminal_blocks(sys, K, P, k, spec.s)
    raise ValueError(f"unknown family {family!r}")


def build_all(sys, K, spec, P) -> dict[str, dict[int, QuadBlockSet]]:
    return {f: {k: build_family(f, sys, K, spec, P, k) for k in family_indices(f, spec.horizon)} for f in FAMILIES}


# ---------------------------------------------------------------------------
# direct evaluation of the physical quantities (used as an oracle)

def simulate_prediction(sys, K, x, cs, ps, steps: int) -> list[np.ndarray]:
    """Iterate the one-step recursion; returns ``[x_0, ..., x_steps]``."""
    phi_k, _ = sys.closed_loop(K)
    xs = [np.asarray(x, dtype=float)]
    for j in range(steps):
        xs.append(phi_k @ xs[-1] + sys.g @ cs[j] + sys.bp @ ps[j])
    return xs


def direct_quantity(family, sys, K, spec, P, k, x, cs, ps) -> float:
    N = spec.horizon
    K = np.asarray(K, dtype=float)
    steps = k + 1 if family == "cost" else k
    xs = simulate_prediction(sys, K, x, cs, ps, steps)
    if family == "cost":
        w = P if k == N - 1 else spec.rx
        return float(xs[k + 1] @ w @ xs[k + 1] + cs[k] @ spec.ru @ cs[k])
    if family == "input":
        u = K @ sys.c @ xs[k] + cs[k]
        return float(u @ u)
    if family == "rate":
        du = K @ sys.c @ (xs[k] - xs[k - 1]) + cs[k] - cs[k - 1]
        return float(du @ du)
    if family == "output":
        y = sys.c @ xs[k]
        return float(y @ y)
    if family == "nonmeas":
        h = sys.h @ xs[k]
        return float(h @ spec.s @ h)
    if family == "terminal":
        return float(xs[k] @ P @ xs[k])
    raise ValueError(family)


def direct_uncertainty(sys, K, x, cs, ps, i) -> float:
    xs = simulate_prediction(sys, K, x, cs, ps, i)
    _, c_k = sys.closed_loop(K)
    q = c_k @ xs[i] + sys.dq @ cs[i]
    return float(q @ q - ps[i] @ ps[i])
