"""Command-line front end: ``petc design | simulate | curve | verify``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import (atomic_write, build_model, build_scenario, build_setup, edges_of,
                     etm_params, load_config, merge)
from .design import DesignError, design_agent, tradeoff_curve
from .netsim import ConfigError, replay_csv, run, summary, trace_csv
from .verify import StorageEvaluator, monitor, v_monotone

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# Reference timing constants for the benchmark (N_i -> (tau_max, tau_mad)).
REFERENCE_TIMING = {2: (0.12, 0.016), 3: (0.09, 0.012)}


def _at_reference_precision(v: float, ref: float) -> bool:
    decimals = len(repr(ref).split(".")[1])
    return round(v, decimals) == ref


def reference_values_check(cfg: dict) -> dict:
    """Compare derived timing constants with the reference ones under both mu conventions."""
    out = {}
    for conv in ("c", "c_over_n"):
        c2 = merge(cfg, {"mu_convention": conv})
        model = build_model(c2)
        rows = {}
        for i in range(model.topology.n_agents):
            n_i = model.n_i(i)
            if n_i in rows or n_i not in REFERENCE_TIMING:
                continue
            p = etm_params(c2, model, i)
            # only tau_max and tau_mad are compared; tau_miet is irrelevant here
            d = design_agent(p.replace(tau_masp=min(p.tau_masp, 1e-6), d_min=min(p.d_min, 1e-6)),
                             step=cfg["etm"].get("step", 1e-5))
            want = REFERENCE_TIMING[n_i]
            got = (d.timing.tau_max, d.timing.tau_mad)
            match = all(_at_reference_precision(g, w) for g, w in zip(got, want))
            rows[n_i] = {"tau_max": got[0], "tau_mad": got[1], "reference": list(want),
                         "matches_reference": match}
        out[conv] = rows
    return out


def phi_table_csv(d) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "phi0", "phi1"])
    ph = d.phi
    for k, v in enumerate(ph.phi0):
        w.writerow([repr(k * ph.step), repr(float(v)),
                    repr(float(ph.phi1[k])) if k < len(ph.phi1) else ""])
    return buf.getvalue()


def _seed(args, cfg) -> int:
    env = os.environ.get("PETC_SEED")
    if env is not None:
        return int(env)
    return int(args.seed if args.seed is not None else cfg["seed"])


def cmd_design(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg, args.mode)
    agents = []
    for i, (d, c) in enumerate(zip(setup.designs, setup.certificates)):
        agents.append({"agent": i, "n_out": d.params.n_out, "gamma": d.params.gamma,
                       "mu": d.params.mu, "tau_max": d.timing.tau_max,
                       "tau_mad": d.timing.tau_mad, "tau_miet": d.timing.tau_miet,
                       "certificate": c})
    report = {"mu_convention": cfg["mu_convention"], "agents": agents,
              "certified": all(a["certificate"]["certified"] for a in agents)}
    if args.check_reference:
        report["reference_values"] = reference_values_check(cfg)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    atomic_write(Path(args.out) / "design.json", text)
    written = set()
    for d in setup.designs:
        key = (d.params.n_out, d.timing.tau_miet)
        if key in written:
            continue
        written.add(key)
        atomic_write(Path(args.out) / f"phi_N{d.params.n_out}.csv", phi_table_csv(d))
    for a in agents:
        print(f"agent {a['agent']}: N={a['n_out']} tau_max={a['tau_max']:.6g} "
              f"tau_mad={a['tau_mad']:.6g} tau_miet={a['tau_miet']:.6g} "
              f"certified={a['certificate']['certified']}")
    return EXIT_OK if report["certified"] else EXIT_FAIL


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    mon = cfg["monitor"]
    full = bool(mon["full_state"] or args.verify)
    sc, setup = build_scenario(cfg, seed=seed, horizon=args.horizon, mode=args.mode,
                               storage=bool(mon["storage"] or args.verify),
                               snapshots=bool(mon["snapshots"] or full))
    t0 = time.perf_counter()
    trace = run(sc)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    edges = edges_of(setup.model)
    atomic_write(out / "trace.csv", trace_csv(trace, full_state=full, edges=edges))
    summ = summary(trace)
    atomic_write(out / "summary.json", json.dumps(summ, indent=2, sort_keys=True) + "\n")
    print(f"simulated {summ['horizon']} s in {elapsed:.2f} s: "
          f"{summ['total_transmissions']} transmissions, "
          f"spread {summ['initial_spread']:.4g} -> {summ['final_spread']:.4g}")
    code = EXIT_OK
    if args.verify:
        ev = StorageEvaluator(setup.model, setup.tfs)
        rep = monitor(trace, ev, stride=args.stride)
        atomic_write(out / "report.json", rep.to_json())
        code = _print_report(rep)
    return code


def _print_report(rep) -> int:
    for s in rep.sections:
        extra = ""
        if s.name == "flow":
            extra = f" supply_downgrades={s.notes['supply_downgrades']}"
        print(f"{s.name}: {'PASS' if s.passed else 'FAIL'} checked={s.checked} "
              f"violations={len(s.violations)}{extra}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_curve(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    if args.lambdas is None:
        lams = list(np.round(np.linspace(0.05, 0.95, 19), 10))
    else:
        lams = [float(v) for v in args.lambdas.split(",") if v.strip()]
        if not lams:
            print("error: empty lambda grid", file=sys.stderr)
            return EXIT_CONFIG
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_out", "lambda", "tau_max", "tau_mad"])
    done = set()
    for i in range(model.topology.n_agents):
        p = etm_params(cfg, model, i)
        if p.n_out in done:
            continue
        done.add(p.n_out)
        rows, skipped = tradeoff_curve(p, lams, cfg["etm"].get("step", 1e-5))
        for lam, tmax, tmad in rows:
            w.writerow([p.n_out, repr(float(lam)), repr(tmax), repr(tmad)])
        for sk in skipped:
            print(f"N={p.n_out}: skipped lambda={sk['lambda']}: {sk['reason']}", file=sys.stderr)
    atomic_write(Path(args.out) / "curve.csv", buf.getvalue())
    print(f"wrote {Path(args.out) / 'curve.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg, args.mode)
    text = Path(args.trace).read_text(encoding="utf-8")
    try:
        trace = replay_csv(text, setup.model, setup.tfs, edges_of(setup.model))
    except ValueError as exc:
        raise ConfigError(f"{args.trace}: {exc}") from exc
    ev = StorageEvaluator(setup.model, setup.tfs)
    rep = monitor(trace, ev, stride=args.stride)
    ok, worst = v_monotone(trace)
    rep.metrics["v_nonincreasing"] = ok
    rep.metrics["v_worst_increase"] = worst
    atomic_write(Path(args.out) / "report.json", rep.to_json())
    return _print_report(rep)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="petc", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, out_default="out"):
        p.add_argument("--config", help="JSON scenario file (defaults: benchmark)")
        p.add_argument("--mode", choices=["online", "conservative"])
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("design", help="compute and certify timing constants")
    common(p)
    p.add_argument("--check-reference", action="store_true",
                   help="compare with the reference constants under both mu conventions")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="run the event-driven simulation")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--verify", action="store_true", help="monitor the storage function")
    p.add_argument("--stride", type=float, default=1e-4, help="flow check stride (s)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("curve", help="export the lambda trade-off curve")
    common(p)
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("verify", help="re-check a full-state trace CSV")
    common(p)
    p.add_argument("trace", help="trace.csv written with full state")
    p.add_argument("--stride", type=float, default=1e-4)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DesignError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
