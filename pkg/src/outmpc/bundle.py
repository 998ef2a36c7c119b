"""Controller bundle: every offline product needed online, stored as JSON.

Floats are written with 17 significant digits so that a load/save cycle
reproduces the file byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import __version__
from .blocks import FAMILIES, build_all
from .model import Config, config_from_dict, config_hash
from .multipliers import FactorTable, MultiplierTable, compute_factors, family_caps, solve_all
from .offline import GainResult, RpiResult, synthesize_gain, synthesize_rpi

BUNDLE_VERSION = "outmpc-bundle/1"


class BundleError(ValueError):
    pass


@dataclass
class ControllerBundle:
    config: Config
    gain: GainResult
    rpi: RpiResult
    table: MultiplierTable
    factors: FactorTable
    spec_hash: str
    version: str = BUNDLE_VERSION

    @property
    def sys(self):
        return self.config.sys

    @property
    def spec(self):
        return self.config.spec

    @property
    def K(self) -> np.ndarray:
        return self.gain.K

    def blocks(self):
        return build_all(self.sys, self.gain.K, self.spec, self.rpi.P)


def synthesize(config: Config, y0=None, monotone: bool = True) -> ControllerBundle:
    """Run the whole offline phase for ``config`` from the measurement ``y0``."""
    sys, spec = config.sys, config.spec
    y0 = np.zeros(sys.ny) if y0 is None else np.asarray(y0, dtype=float).reshape(-1)
    gain = synthesize_gain(sys, spec, y0)
    rpi = synthesize_rpi(sys, spec, gain, y0)
    blocks = build_all(sys, gain.K, spec, rpi.P)
    table = solve_all(sys, spec, gain, rpi, blocks, monotone=monotone)
    factors = compute_factors(table, blocks)
    return ControllerBundle(config, gain, rpi, table, factors, config.digest())


# ---------------------------------------------------------------------------
# JSON with fixed float formatting

def _dump(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return {True: "true", False: "false", None: "null"}[obj]
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise BundleError("non-finite value cannot be stored")
        s = format(v + 0.0, ".17g")
        # keep floats recognisable as floats after reloading
        return s if ("." in s or "e" in s) else s + ".0"
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dump(o) for o in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{_dump(str(k))}:{_dump(v)}" for k, v in obj.items()) + "}"
    raise BundleError(f"cannot serialize {type(obj).__name__}")


def _arr(x, shape=None) -> np.ndarray:
    a = np.array(x, dtype=float)
    return a.reshape(shape) if shape is not None else a


_GAIN_MATS = ("K", "Qbar1", "Qbar2", "Y1", "Pbar", "y0")
_GAIN_SCALARS = ("rho_bar", "tau_bar", "lambda_bar")
_RPI_MATS = ("P1", "P2", "T", "phi_k", "c_k", "c_bar", "a_bar", "b_bar")
_RPI_SCALARS = ("rho", "tau", "lam", "sigma_hat")


def to_dict(b: ControllerBundle) -> dict:
    g, r = b.gain, b.rpi
    return {
        "version": b.version,
        "spec_hash": b.spec_hash,
        "config": b.config.raw,
        "gain": {**{k: getattr(g, k) for k in _GAIN_MATS}, **{k: float(getattr(g, k)) for k in _GAIN_SCALARS}},
        "rpi": {
            **{k: getattr(r, k) for k in _RPI_MATS},
            **{k: float(getattr(r, k)) for k in _RPI_SCALARS},
            "sigma_boundary": bool(r.sigma_boundary),
        },
        "multipliers": {f: {str(k): v for k, v in sorted(b.table.values[f].items())} for f in FAMILIES},
        "factors": {f: {str(k): v for k, v in sorted(b.factors.factors[f].items())} for f in FAMILIES},
    }


def from_dict(d: dict) -> ControllerBundle:
    if d.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {d.get('version')!r} (expected {BUNDLE_VERSION})")
    cfg = config_from_dict(d["config"])
    if config_hash(d["config"]) != d["spec_hash"]:
        raise BundleError("spec_hash does not match the embedded configuration")
    sys = cfg.sys
    gd, rd = d["gain"], d["rpi"]
    gain = GainResult(
        K=_arr(gd["K"]).reshape(sys.nu, sys.ny), Qbar1=_arr(gd["Qbar1"]).reshape(sys.ny, sys.ny),
        Qbar2=_arr(gd["Qbar2"]).reshape(sys.nna, sys.nna), Y1=_arr(gd["Y1"]).reshape(sys.nu, sys.ny),
        rho_bar=gd["rho_bar"], tau_bar=gd["tau_bar"], lambda_bar=gd["lambda_bar"],
        Pbar=_arr(gd["Pbar"]).reshape(sys.nx, sys.nx), y0=_arr(gd["y0"]).reshape(-1),
    )
    rpi = RpiResult(
        P1=_arr(rd["P1"]).reshape(sys.ny, sys.ny), P2=_arr(rd["P2"]).reshape(sys.nna, sys.nna),
        rho=rd["rho"], tau=rd["tau"], lam=rd["lam"], sigma_hat=rd["sigma_hat"],
        T=_arr(rd["T"]).reshape(sys.nx, sys.nx), phi_k=_arr(rd["phi_k"]).reshape(sys.nx, sys.nx),
        c_k=_arr(rd["c_k"]).reshape(sys.np_, sys.nx), c_bar=_arr(rd["c_bar"]).reshape(sys.nu, sys.nx),
        a_bar=_arr(rd["a_bar"]).reshape(sys.nu, sys.nx), b_bar=_arr(rd["b_bar"]).reshape(sys.nu, sys.np_),
        sigma_boundary=rd["sigma_boundary"],
    )
    values = {f: {int(k): _arr(v).reshape(-1) for k, v in d["multipliers"][f].items()} for f in FAMILIES}
    facs = {}
    for f in FAMILIES:
        facs[f] = {}
        for k, v in d["factors"][f].items():
            a = np.array(v, dtype=float)
            facs[f][int(k)] = a.reshape(len(v), -1) if a.size else np.zeros((0, 0))
    table = MultiplierTable(values, {}, family_caps(cfg.spec, rpi.rho))
    return ControllerBundle(cfg, gain, rpi, table, FactorTable(facs), d["spec_hash"], d["version"])


def dumps(b: ControllerBundle) -> str:
    return _dump(to_dict(b)) + "\n"


def loads(text: str) -> ControllerBundle:
    import json

    return from_dict(json.loads(text))


def save(b: ControllerBundle, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(b))


def load(path) -> ControllerBundle:
    with open(path) as fh:
        return loads(fh.read())
