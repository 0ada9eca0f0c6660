"""Command-line entry point: ``subdiff forward|invert|reproduce``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, list_presets, load_config, space_field
from .experiments import truth_sources, build_coefficients, build_mesh, run_spec
from .forward import ForwardOperator, run_sources
from .fractional import TimeGrid
from .outputs import write_json

log = logging.getLogger("subdiff")


def _failed(summary: dict) -> bool:
    return str(summary.get("stop_reason", "")).startswith("error")


def _print(summary: dict) -> None:
    shown = {k: v for k, v in summary.items() if k != "traceback"}
    print(json.dumps(shown, indent=2, sort_keys=True))


def cmd_forward(args) -> int:
    spec = load_config(args.config)
    disc = spec.fine if args.grid == "fine" else spec.coarse
    mesh = build_mesh(spec, disc.n_cells)
    grid = TimeGrid(spec.T, disc.n_steps)
    t0 = time.perf_counter()
    op = ForwardOperator(mesh, build_coefficients(spec), spec.alpha, grid)
    sol = run_sources(op, space_field(spec.u0, spec.dimension), truth_sources(spec, grid))
    elapsed = time.perf_counter() - t0
    out = Path(args.out or f"runs/{spec.name}_forward")
    out.mkdir(parents=True, exist_ok=True)
    sol.to_csv(out / "solution.csv")
    summary = {
        "preset": spec.name,
        "alpha": spec.alpha,
        "grid": args.grid,
        "n_nodes": mesh.n_nodes,
        "n_steps": grid.n_steps,
        "max_abs_u": float(np.max(np.abs(sol.states))),
        "seconds": elapsed,
        "stop_reason": "completed",
    }
    write_json(out / "summary.json", summary)
    write_json(out / "config_used.json", spec.model_dump())
    _print(summary)
    return 0


def cmd_invert(args) -> int:
    spec = load_config(args.config)
    summary = run_spec(spec, args.out or f"runs/{spec.name}")
    _print(summary)
    return 1 if _failed(summary) else 0


def _reproduce_one(name: str, out: str, overrides: dict) -> dict:
    try:
        spec = load_config(name).with_overrides(**overrides)
    except ConfigError as exc:
        return {"preset": name, "stop_reason": f"error: {exc}"}
    return run_spec(spec, out)


def cmd_reproduce(args) -> int:
    overrides = dict(alpha=args.alpha, delta=args.delta, eps_fraction=args.eps_fraction, seed=args.seed)
    root = Path(args.out)
    jobs = [(name, str(root / name), overrides) for name in args.preset]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_reproduce_one, *zip(*jobs)))
    else:
        summaries = [_reproduce_one(*job) for job in jobs]
    for s in summaries:
        _print(s)
    return 1 if any(_failed(s) for s in summaries) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subdiff", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forward", help="solve the forward problem of a config and write the space-time solution")
    f.add_argument("config", help="JSON config path or preset name")
    f.add_argument("--grid", choices=("fine", "coarse"), default="fine")
    f.add_argument("--out", help="output directory (default runs/<name>_forward)")
    f.set_defaults(func=cmd_forward)

    i = sub.add_parser("invert", help="generate data and run the inversion described by a config")
    i.add_argument("config", help="JSON config path or preset name")
    i.add_argument("--out", help="output directory (default runs/<name>)")
    i.set_defaults(func=cmd_invert)

    r = sub.add_parser("reproduce", help="run packaged presets with optional overrides",
                       epilog="presets: " + ", ".join(list_presets()))
    r.add_argument("--preset", action="append", required=True, help="preset name (repeatable)")
    r.add_argument("--alpha", type=float)
    r.add_argument("--delta", type=float)
    r.add_argument("--eps-fraction", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="runs", help="root output directory; one subdirectory per preset")
    r.add_argument("--jobs", type=int, default=1, help="presets to run in parallel")
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"subdiff: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("command failed")
        print(f"subdiff: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
