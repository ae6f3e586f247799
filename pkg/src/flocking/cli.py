"""Command-line driver: ``flocking {simulate,analyze,lowerbound,spectrum,residue}``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np
from gmpy2 import mpq

from . import analysis, dynamics, lowerbound, residue, spectral
from .fileio import (
    ConfigError,
    load_config,
    load_mapping,
    parse_config,
    random_config,
    read_trace,
    write_trace,
)
from .numerics import EXACT, RationalParseError, format_scalar, parse_rational, strings_to_array

EXIT_OK = 0
EXIT_PARSE = 3
EXIT_RUNTIME = 4
EXIT_BUDGET = 5


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(*parts):
    print(*parts, flush=True)


# --------------------------------------------------------------------------
# simulate


def _simulate_one(path, args, out: Path, stem: str) -> int:
    if path is None:
        data = random_config(args.n, args.d, args.seed, horizon=args.horizon or 100)
        sim = parse_config(data, mode=args.mode)
    else:
        sim = load_config(path, args.mode)
    horizon = args.horizon if args.horizon is not None else sim.horizon
    budget = args.budget if args.budget is not None else sim.budget
    trace = dynamics.run(sim.initial, horizon, sim.events, sim.policy, sim.rule, sim.field,
                         step_budget=budget, keep_states="none" if args.sparse else "all")
    write_trace(trace, out / f"{stem}.trace.jsonl", sparse=args.sparse)
    log = analysis.detect_switches(trace)
    with (out / f"{stem}.switches.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tick", "gained", "lost"])
        for e in log.entries:
            w.writerow([e.t, " ".join(f"{i + 1}-{j + 1}" for i, j in sorted(e.gained)),
                        " ".join(f"{i + 1}-{j + 1}" for i, j in sorted(e.lost))])
    final = trace.final_configuration()
    (out / f"{stem}.final.json").write_text(json.dumps({
        "t": final.t,
        "x": [[format_scalar(z) for z in row] for row in final.x],
        "v": [[format_scalar(z) for z in row] for row in final.v],
        "status": trace.status}, indent=1))
    _say(f"{stem}: records: {len(trace.records)}, switches: {log.count}, status: {trace.status}")
    return EXIT_BUDGET if trace.status == "budget" else EXIT_OK


def _simulate_job(payload):
    path, ns, out, stem = payload
    try:
        return _simulate_one(path, argparse.Namespace(**ns), Path(out), stem)
    except (ConfigError, RationalParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    paths = args.config or [None]
    stems = [Path(p).stem if p else f"random{args.seed}" for p in paths]
    if args.jobs > 1 and len(paths) > 1:
        ns = vars(args).copy()
        ns.pop("func", None)
        with ProcessPoolExecutor(args.jobs) as pool:
            codes = list(pool.map(_simulate_job, [(p, ns, str(out), s) for p, s in zip(paths, stems)]))
    else:
        codes = [_simulate_one(p, args, out, s) for p, s in zip(paths, stems)]
    return max(codes)


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    path = args.config[0] if args.config else None
    if path is None:
        raise ConfigError("analyze needs --config (a trace file or a simulation config)")
    if str(path).endswith(".jsonl"):
        trace = read_trace(path).as_trace()
    else:
        sim = load_config(path, args.mode)
        horizon = args.horizon if args.horizon is not None else sim.horizon
        trace = dynamics.run(sim.initial, horizon, sim.events, sim.policy, sim.rule, sim.field)
    log = analysis.detect_switches(trace)
    period = analysis.network_period(trace)
    tree = analysis.fusion_tree(trace)
    _say(f"switches: {log.count}, period: {period if period is not None else 'none'}")
    _say(f"flocks at end: {len(trace.records[-1].flocks)}")
    if not tree.is_tree:
        _say(f"splits: {len(tree.splits)}, fragmentation breakpoint: {tree.breakpoint}")
    (out / "fusion_tree.txt").write_text(tree.to_text() + "\n")
    (out / "fusion_tree.dot").write_text(tree.to_dot() + "\n")
    report = {"switches": log.count, "switch_ticks": log.ticks, "period": period,
              "splits": len(tree.splits), "breakpoint": tree.breakpoint,
              "formation_ticks": tree.formation_ticks()}
    (out / "analysis.json").write_text(json.dumps(report, indent=1))
    return EXIT_OK


# --------------------------------------------------------------------------
# lowerbound


def cmd_lowerbound(args) -> int:
    out = _out_dir(args)
    opts = {}
    if args.config:
        opts, _ = load_mapping(args.config[0])
    n = args.n if args.n is not None else int(opts.get("n", 8))
    q = parse_rational(args.q if args.q is not None else str(opts.get("q", "1/32")))
    lag = args.lag if args.lag is not None else int(opts.get("lag", 6))
    budget = args.budget if args.budget is not None else int(float(opts.get("budget", 10 ** 7)))
    mode = args.mode or opts.get("mode", "exact")
    try:
        params = lowerbound.LBParams(n, q, lag, int(opts.get("dim", 1)))
    except lowerbound.CongruenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    fld = EXACT if mode == "exact" else dynamics.Field.approx()
    result = lowerbound.simulate_lower_bound(params, fld, budget, max_height=args.height)
    rows = result.report()
    tree = analysis.fusion_tree(result.trace)
    write_trace(result.trace, out / "lowerbound.trace.jsonl", sparse=True,
                meta={"n": n, "q": str(q), "lag": lag})
    (out / "fusion_tree.txt").write_text(tree.to_text() + "\n")
    summary = {"params": {"n": n, "q": str(q), "lag": lag, "mode": mode, "budget": budget},
               "heights": rows, "integrity": result.integrity.passed,
               "integrity_first_violation": result.integrity.first,
               "noise": result.noise.passed, "flips": [[e.t, [m + 1 for m in e.members]] for e in result.flips],
               "refused": result.refused}
    (out / "lowerbound.json").write_text(json.dumps(summary, indent=1, default=str))
    h1 = lowerbound.predict_height1(q)
    _say(f"theta1 predicted: {h1.theta1}")
    for row in rows:
        line = (f"height {row['height']}: t={row['tick']} theta={row['theta']} "
                f"m={row['m_measured']} predicted={row['m_predicted']} match={row['exact_match']}")
        if "window" in row:
            line += f" window={row['window']} in_window={row['in_window']}"
        _say(line)
    _say(f"integrity: {'pass' if result.integrity.passed else 'FAIL'}, "
         f"noise: {'pass' if result.noise.passed else 'FAIL'}")
    _say(tree.to_text())
    if result.refused:
        _say(f"refused: {result.refused}")
        return EXIT_BUDGET
    return EXIT_OK


# --------------------------------------------------------------------------
# spectrum


def _rational_guess(x: float, max_den: int = 1000, tol: float = 1e-9):
    f = Fraction(x).limit_denominator(max_den)
    return f if abs(float(f) - x) <= tol else None


def cmd_spectrum(args) -> int:
    out = _out_dir(args)
    if args.path is not None:
        g = dynamics.Network.path(args.path)
        pol = dynamics.POLICIES[args.policy]
        tm = dynamics.transition(g, pol)
        P, c = tm.P, tm.c
    elif args.config:
        data, _ = load_mapping(args.config[0])
        P = strings_to_array([[str(z) for z in row] for row in data["matrix"]], EXACT)
        c = (np.array([parse_rational(str(z)) for z in data["c"]], dtype=object)
             if "c" in data else spectral.infer_confidence(P))
    else:
        raise ConfigError("spectrum needs --path N or --config FILE")
    sp = spectral.spectrum(P, c)
    rows = []
    for k, lam in enumerate(sp.eigenvalues):
        guess = _rational_guess(float(lam))
        u = sp.vectors[:, k]
        M = spectral.symmetrize(P, c)
        res = float(np.abs(M @ u - lam * u).max())
        rows.append([k + 1, repr(float(lam)), f"{guess.numerator}/{guess.denominator}"
                     if guess is not None and guess.denominator != 1 else (str(guess) if guess is not None else ""),
                     f"{res:.3e}"])
    with (out / "spectrum.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "lambda", "rational", "residual"])
        w.writerows(rows)
    labels = [r[2] if r[2] else r[1] for r in rows]
    _say("eigenvalues: " + ", ".join(labels))
    _say(f"mu: {sp.mu:.12g}, pi: " + ", ".join(format_scalar(p) for p in sp.pi))
    return EXIT_OK


# --------------------------------------------------------------------------
# residue


def cmd_residue(args) -> int:
    if args.tree:
        tree = residue.parse_tree(args.tree)
    else:
        tree = residue.canonical_tree(args.k)
    try:
        p = residue.eval_tree(tree, args.exponent_bits)
    except residue.ExponentBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    deg = p.degree if p else None
    text = residue.to_text(p)
    if deg is not None and deg.bit_length() > 64:
        _say(f"degree: a {deg.bit_length()}-bit integer, coeff: {p.leading()}")
    else:
        _say(f"degree: {deg}, coeff: {p.leading() if p else 0}")
    if args.out:
        (_out_dir(args) / "residue.txt").write_text(text + "\n")
    elif len(text) < 200:
        _say(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", nargs="+", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--mode", choices=["exact", "approx"])
    common.add_argument("--horizon", type=int)
    common.add_argument("--budget", type=lambda s: int(float(s)))
    common.add_argument("--sparse", action="store_true", help="omit positions and velocities from traces")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--seed", type=int, default=0)

    parser = argparse.ArgumentParser(prog="flocking", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the dynamics from a config")
    p.add_argument("--n", type=int, default=10, help="birds in a random config (no --config)")
    p.add_argument("--d", type=int, default=2)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="switches and fusion tree of a trace")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("lowerbound", parents=[common], help="tower-of-twos instance")
    p.add_argument("--n", type=int)
    p.add_argument("--q")
    p.add_argument("--lag", type=int)
    p.add_argument("--height", type=int, help="stop once flocks of this height form")
    p.set_defaults(func=cmd_lowerbound)

    p = sub.add_parser("spectrum", parents=[common], help="spectrum of a flock transition matrix")
    p.add_argument("--path", type=int, help="use the path on N birds")
    p.add_argument("--policy", default="lazy", choices=sorted(dynamics.POLICIES))
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("residue", parents=[common], help="evaluate a combine tree")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--tree")
    p.add_argument("--exponent-bits", type=int, default=residue.DEFAULT_EXPONENT_BITS)
    p.set_defaults(func=cmd_residue)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RationalParseError, residue.PolyParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except dynamics.BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ValueError, ArithmeticError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
