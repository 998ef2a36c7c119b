"""Command line entry point: ``outmpc synth|run|verify|export-sdpa``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import bundle as bundle_io
from .model import load_config
from .offline import gain_problem, rpi_problem, spectral_radius, synthesize_gain
from .sdpa import export_sdpa
from .sim import POLICIES, UncertaintyPolicy, campaign, run_closed_loop, verify_rpi


def _vec(text: str | None, n: int, name: str) -> np.ndarray:
    if text is None:
        return np.zeros(n)
    vals = [float(t) for t in text.replace(",", " ").split()]
    if len(vals) != n:
        raise SystemExit(f"{name} needs {n} values, got {len(vals)}")
    return np.array(vals)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    y0 = _vec(args.y0, cfg.sys.ny, "--y0")
    t0 = time.perf_counter()
    b = bundle_io.synthesize(cfg, y0)
    bundle_io.save(b, args.out)
    print(f"gain K = {b.K.tolist()}  spectral radius {spectral_radius(b.rpi.phi_k):.6f}")
    print(f"rho_bar = {b.gain.rho_bar:.6g}  rho = {b.rpi.rho:.6g}  sigma_hat = {b.rpi.sigma_hat:.6g}")
    print(f"bundle written to {args.out} in {time.perf_counter() - t0:.2f} s")
    return 0


def cmd_run(args) -> int:
    b = bundle_io.load(args.bundle)
    x0 = _vec(args.x0, b.sys.nx, "--x0")
    pol = UncertaintyPolicy(args.policy, seed=args.seed)
    traj = run_closed_loop(b, x0, args.steps, pol, method=args.method)
    traj.write_csv(args.out)
    bad = traj.infeasible_steps()
    print(f"{traj.steps} steps, final |x| = {traj.final_norm:.3e}, max violation {traj.max_violation:.3e}, "
          f"infeasible steps {len(bad)}")
    return 0 if traj.max_violation <= 1e-8 and not [t for t in bad if t > 0] else 1


def cmd_verify(args) -> int:
    b = bundle_io.load(args.bundle)
    ok = True
    rep = verify_rpi(b, args.rpi_samples, args.seed)
    print(f"rpi: samples {rep.samples} max violation {rep.max_violation:.3e} -> {'pass' if rep.passed else 'FAIL'}")
    ok &= rep.passed
    if args.campaign > 0:
        res = campaign(b, args.campaign, args.steps, seed=args.seed, method=args.method)
        r = res.report
        for name, flag, detail in [
            ("recursive feasibility", r.feasibility, f"infeasible steps after start {r.infeasible_after_start}"),
            ("shifted-candidate witness", r.witness, f"worst margin {r.worst_witness_margin:.3e}"),
            ("cost decrease", r.decrease, f"worst excess {r.worst_decrease_excess:.3e}"),
            ("constraints", r.constraints, f"max violation {r.max_violation:.3e}"),
            ("convergence", r.convergence, f"max final |x| {r.max_final_norm:.3e}"),
        ]:
            print(f"{name}: {detail} -> {'pass' if flag else 'FAIL'}")
        print(f"campaign time {res.seconds:.1f} s, slowest online solve {res.max_solve_ms:.1f} ms")
        ok &= r.passed
    return 0 if ok else 1


def cmd_export(args) -> int:
    cfg = load_config(args.config)
    y0 = _vec(args.y0, cfg.sys.ny, "--y0")
    if args.problem == "gain":
        prob = gain_problem(cfg.sys, cfg.spec, y0)
    else:
        gain = synthesize_gain(cfg.sys, cfg.spec, y0)
        prob = rpi_problem(cfg.sys, cfg.spec, gain, y0)
    export_sdpa(prob, args.out)
    print(f"wrote {args.problem} problem ({prob.n_vars} variables, {len(prob.constraints)} blocks) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="outmpc", description="Output-feedback robust MPC toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="offline design: gain, invariant set, multipliers, factors")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--y0", help="initial measured state (default: zeros)")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="closed-loop simulation")
    r.add_argument("--bundle", required=True)
    r.add_argument("--x0", required=True, help='initial state, e.g. "0.1 -0.2"')
    r.add_argument("--steps", type=int, default=200)
    r.add_argument("--policy", default="random_contraction",
                   choices=list(POLICIES))
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--method", default="lmi", choices=["lmi", "socp"])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="invariance sampling and closed-loop campaign")
    v.add_argument("--bundle", required=True)
    v.add_argument("--rpi-samples", type=int, default=10_000)
    v.add_argument("--campaign", type=int, default=0, help="rollouts per policy")
    v.add_argument("--steps", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--method", default="lmi", choices=["lmi", "socp"])
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("export-sdpa", help="write a design SDP in SDPA sparse format")
    e.add_argument("--config", required=True)
    e.add_argument("--problem", choices=["gain", "rpi"], required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--y0", help="initial measured state (default: zeros)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
