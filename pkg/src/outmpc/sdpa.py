"""SDPA sparse (.dat-s) writer and reader for :class:`LmiProblem`.

SDPA states the primal as ``sum_i x_i F_i - F_0 >= 0``, so the constant
block written to file is the negated constant of our ``F_0 + sum x_i F_i``
form.  Values are printed with 17 significant digits, which round-trips
IEEE doubles exactly.  Variable names and strictness flags are kept in
``*``-prefixed comment lines that other readers ignore.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .lmi import InvalidInput, LmiConstraint, LmiProblem

FMT = "%.17g"


def _fmt(v: float) -> str:
    # avoid writing negative zero
    return FMT % (v + 0.0)


def export_sdpa(problem: LmiProblem, path: str | os.PathLike, comments: bool = True) -> None:
    if problem.n_vars == 0 or not problem.constraints:
        raise InvalidInput("cannot export an empty problem")
    problem.validate()
    lines = []
    if comments:
        meta = {
            "variables": problem.variables,
            "strict": [bool(c.strict) for c in problem.constraints],
            "names": [c.name for c in problem.constraints],
            "eps_strict": problem.eps_strict,
        }
        lines.append("* outmpc " + json.dumps(meta, separators=(",", ":")))
    lines.append(str(problem.n_vars))
    lines.append(str(len(problem.constraints)))
    lines.append(" ".join(str(c.dim) for c in problem.constraints))
    lines.append(" ".join(_fmt(v) for v in problem.objective))
    for var in range(problem.n_vars + 1):
        for b, c in enumerate(problem.constraints, start=1):
            if var == 0:
                mat = -c.f0
            else:
                mat = c.coeffs.get(var - 1)
                if mat is None:
                    continue
            rows, cols = np.nonzero(np.triu(mat))
            for i, j in zip(rows, cols):
                lines.append(f"{var} {b} {i + 1} {j + 1} {_fmt(mat[i, j])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sdpa(path: str | os.PathLike) -> LmiProblem:
    meta = None
    body = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line[0] in "*\"":
                if line.startswith("* outmpc "):
                    meta = json.loads(line[len("* outmpc "):])
                continue
            body.append(line)
    if len(body) < 4:
        raise InvalidInput("truncated SDPA file")
    tokens = lambda s: s.replace(",", " ").replace("{", " ").replace("}", " ").replace("(", " ").replace(")", " ").split()
    n = int(tokens(body[0])[0])
    nblocks = int(tokens(body[1])[0])
    sizes = [abs(int(t)) for t in tokens(body[2])[:nblocks]]
    c = np.array([float(t) for t in tokens(body[3])[:n]])
    f0 = [np.zeros((s, s)) for s in sizes]
    coeffs: list[dict[int, np.ndarray]] = [dict() for _ in sizes]
    for line in body[4:]:
        var, blk, i, j, val = tokens(line)[:5]
        var, blk, i, j = int(var), int(blk) - 1, int(i) - 1, int(j) - 1
        val = float(val)
        if var == 0:
            target = f0[blk]
            val = -val
        else:
            target = coeffs[blk].setdefault(var - 1, np.zeros((sizes[blk], sizes[blk])))
        target[i, j] = val
        target[j, i] = val
    names = meta["variables"] if meta else [f"x{i}" for i in range(n)]
    strict = meta["strict"] if meta else [False] * nblocks
    cnames = meta["names"] if meta else [""] * nblocks
    eps = meta["eps_strict"] if meta else LmiProblem.__dataclass_fields__["eps_strict"].default
    cons = [LmiConstraint(f0[b] + 0.0, coeffs[b], strict[b], cnames[b]) for b in range(nblocks)]
    return LmiProblem(list(names), c, cons, eps)
