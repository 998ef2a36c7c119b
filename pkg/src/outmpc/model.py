"""Plant, constraint and synthesis-specification data model."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .lmi import InvalidInput, min_eig, sym


class ModelError(ValueError):
    """Validation failure; ``kind`` is one of the documented error kinds."""

    def __init__(self, kind: str, message: str, report: list | None = None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.report = report or [(kind, message)]


def _mat(a, name, ndim=2) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2:
        arr = np.atleast_2d(arr)
    if not np.all(np.isfinite(arr)):
        raise ModelError("invalid-input", f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class UncertainSystem:
    """``x+ = phi x + g u + bp p``, ``y = c x``, ``q = cq x + dq u``, ``p = Delta q``."""

    phi: np.ndarray
    g: np.ndarray
    bp: np.ndarray
    c: np.ndarray
    cq: np.ndarray
    dq: np.ndarray

    @classmethod
    def from_arrays(cls, phi, g, bp, cq, dq, ny: int, c=None) -> "UncertainSystem":
        phi = _mat(phi, "phi")
        nx = phi.shape[0]
        if c is None:
            c = np.hstack([np.eye(ny), np.zeros((ny, nx - ny))]) if 0 <= ny <= nx else np.zeros((0, nx))
        return cls(phi, _mat(g, "g"), _mat(bp, "bp"), _mat(c, "c"), _mat(cq, "cq"), _mat(dq, "dq"))

    @property
    def nx(self) -> int:
        return self.phi.shape[0]

    @property
    def nu(self) -> int:
        return self.g.shape[1]

    @property
    def ny(self) -> int:
        return self.c.shape[0]

    @property
    def np_(self) -> int:
        return self.bp.shape[1]

    @property
    def nna(self) -> int:
        return self.nx - self.ny

    @property
    def h(self) -> np.ndarray:
        """Selector of the unmeasured states, ``[0 I]``."""
        return np.hstack([np.zeros((self.nna, self.ny)), np.eye(self.nna)])

    def closed_loop(self, k) -> tuple[np.ndarray, np.ndarray]:
        """``(phi + g K C, cq + dq K C)`` for a static output gain ``K``."""
        kc = np.asarray(k, dtype=float) @ self.c
        return self.phi + self.g @ kc, self.cq + self.dq @ kc


@dataclass(frozen=True)
class SynthesisSpec:
    u_max: float
    x_max: float
    du_max: float
    rx: np.ndarray
    ru: np.ndarray
    s: np.ndarray
    horizon: int
    u_prev0: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.horizon


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    u_prev: np.ndarray
    t: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        u = np.asarray(self.u_prev, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(u))):
            raise ModelError("invalid-input", "measurement has non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u_prev", u)


def validate(sys: UncertainSystem, spec: SynthesisSpec, raise_on_error: bool = True) -> list:
    """Check every invariant of the plant/spec pair.

    Returns the list of ``(kind, message)`` violations; raises
    :class:`ModelError` carrying that list unless ``raise_on_error`` is false.
    """
    report = []

    def bad(kind, msg):
        report.append((kind, msg))

    nx = sys.phi.shape[0]
    if sys.phi.shape != (nx, nx):
        bad("dimension-mismatch", f"phi is {sys.phi.shape}, expected square")
    nu = sys.g.shape[1]
    npp = sys.bp.shape[1]
    ny = sys.c.shape[0]
    for name, m, shape in [
        ("g", sys.g, (nx, nu)),
        ("bp", sys.bp, (nx, npp)),
        ("c", sys.c, (ny, nx)),
        ("cq", sys.cq, (npp, nx)),
        ("dq", sys.dq, (npp, nu)),
    ]:
        if m.shape != shape:
            bad("dimension-mismatch", f"{name} is {m.shape}, expected {shape}")
    if ny < 1 or ny >= nx:
        bad("ny-not-less-than-nx", f"need 1 <= ny < nx, got ny={ny}, nx={nx}")
    elif sys.c.shape == (ny, nx):
        canon = np.hstack([np.eye(ny), np.zeros((ny, nx - ny))])
        if not np.array_equal(sys.c, canon):
            bad("C-not-canonical", "C must equal [I 0]")
    if spec is not None:
        for name in ("u_max", "x_max", "du_max"):
            v = getattr(spec, name)
            if not (np.isfinite(v) and v > 0):
                bad("invalid-bound", f"{name} must be positive and finite, got {v}")
        if spec.horizon < 1 or int(spec.horizon) != spec.horizon:
            bad("invalid-horizon", f"horizon must be an integer >= 1, got {spec.horizon}")
        if spec.rx.shape != (nx, nx):
            bad("dimension-mismatch", f"rx is {spec.rx.shape}, expected {(nx, nx)}")
        elif not np.allclose(spec.rx, spec.rx.T, atol=1e-10) or min_eig(spec.rx) < -1e-10:
            bad("R_x-not-PSD", "R_x must be symmetric positive semidefinite")
        if spec.ru.shape != (nu, nu):
            bad("dimension-mismatch", f"ru is {spec.ru.shape}, expected {(nu, nu)}")
        elif not np.allclose(spec.ru, spec.ru.T, atol=1e-10) or min_eig(spec.ru) <= 0:
            bad("R_u-not-PD", "R_u must be symmetric positive definite")
        nna = nx - ny
        if spec.s.shape != (nna, nna):
            bad("dimension-mismatch", f"s is {spec.s.shape}, expected {(nna, nna)}")
        elif not np.allclose(spec.s, spec.s.T, atol=1e-10) or min_eig(spec.s) < -1e-10:
            bad("S-not-PSD", "S must be symmetric positive semidefinite")
        if spec.u_prev0 is not None and spec.u_prev0.shape != (nu,):
            bad("dimension-mismatch", f"u_prev0 has shape {spec.u_prev0.shape}, expected {(nu,)}")
    if report and raise_on_error:
        raise ModelError(report[0][0], report[0][1], report)
    return report


def ds_contains(spec: SynthesisSpec, x, ny: int | None = None, tol: float = 0.0) -> bool:
    """Membership of ``x`` in ``{x : x_na' S x_na <= 1}``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    nna = spec.s.shape[0]
    xna = x[len(x) - nna:] if ny is None else x[ny:]
    return float(xna @ spec.s @ xna) <= 1.0 + tol


def make_diag_S(bounds) -> np.ndarray:
    """Shape matrix whose set ``D(S)`` contains the box ``|x_na,i| <= b_i``."""
    b = np.atleast_1d(np.asarray(bounds, dtype=float))
    if b.ndim != 1 or b.size == 0:
        raise ModelError("invalid-input", "bounds must be a nonempty vector")
    if not np.all(np.isfinite(b)) or np.any(b <= 0):
        raise ModelError("nonpositive-bound", "all bounds must be positive and finite")
    return np.diag(1.0 / (b.size * b**2))


# ---------------------------------------------------------------------------
# configuration files

CONFIG_KEYS = {"phi", "g", "bp", "cq", "dq", "ny", "u_max", "x_max", "du_max", "rx", "ru", "s", "horizon", "u_prev0"}
REQUIRED_KEYS = CONFIG_KEYS - {"u_prev0"}


@dataclass(frozen=True)
class Config:
    sys: UncertainSystem
    spec: SynthesisSpec
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def u_prev0(self) -> np.ndarray:
        if self.spec.u_prev0 is None:
            return np.zeros(self.sys.nu)
        return np.array(self.spec.u_prev0)

    def to_dict(self) -> dict:
        return dict(self.raw)

    def digest(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def config_from_dict(d: dict[str, Any]) -> Config:
    unknown = set(d) - CONFIG_KEYS
    if unknown:
        raise ModelError("unknown-key", f"unknown config keys: {sorted(unknown)}")
    missing = REQUIRED_KEYS - set(d)
    if missing:
        raise ModelError("missing-key", f"missing config keys: {sorted(missing)}")
    ny = d["ny"]
    if not isinstance(ny, int) or isinstance(ny, bool):
        raise ModelError("invalid-input", "ny must be an integer")
    horizon = d["horizon"]
    if not isinstance(horizon, int) or isinstance(horizon, bool):
        raise ModelError("invalid-horizon", "horizon must be an integer")
    sys = UncertainSystem.from_arrays(d["phi"], d["g"], d["bp"], d["cq"], d["dq"], ny)
    up = d.get("u_prev0")
    spec = SynthesisSpec(
        u_max=float(d["u_max"]),
        x_max=float(d["x_max"]),
        du_max=float(d["du_max"]),
        rx=_mat(d["rx"], "rx"),
        ru=_mat(d["ru"], "ru"),
        s=_mat(d["s"], "s"),
        horizon=horizon,
        u_prev0=None if up is None else _mat(up, "u_prev0", ndim=1).reshape(-1),
    )
    validate(sys, spec)
    return Config(sys, spec, dict(d))


def load_config(path) -> Config:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


DESK1 = {
    "phi": [[0.9, 0.1], [-0.2, 0.8]],
    "g": [[0.05], [0.10]],
    "bp": [[0.01], [0.01]],
    "cq": [[0.1, 0.0]],
    "dq": [[0.05]],
    "ny": 1,
    "u_max": 1.0,
    "x_max": 2.0,
    "du_max": 0.5,
    "rx": [[1.0, 0.0], [0.0, 1.0]],
    "ru": [[1.0]],
    "s": [[1.0]],
    "horizon": 3,
}
DESK1_Y0 = 0.1


def desk1(**overrides) -> Config:
    """The two-state reference plant used throughout the tests."""
    d = dict(DESK1)
    d.update(overrides)
    return config_from_dict(d)
