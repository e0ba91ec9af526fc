"""Command-line entry point.

Subcommands::

    mrirk run CONFIG [--set section.key=value ...]
    mrirk order-sweep CONFIG [--dt ...] [--schemes ...]
    mrirk perf-table CONFIG [--eta ...] [--schemes ...]
    mrirk burn-in MODEL [--out PATH]

Output goes to ``[output] output_dir``, relative to ``$MRIRK_OUTPUT_ROOT``
when that is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import grid as mr
from .fv import NonFiniteModelError
from .irk import NewtonDivergence
from .models import SingularSourceError
from .runner import (
    StepSizeUnderflow,
    build_model,
    burn_in,
    canonical_path,
    initial_grid,
    load_config,
    order_sweep,
    output_root,
    perf_table,
    run,
    write_perf_csv,
    write_sweep_csv,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONVERGENCE = 3
EXIT_SINGULAR = 4
EXIT_IO = 5


def _out_dir(cfg, default: str) -> Path:
    root = output_root(cfg)
    return root if root is not None else Path(default)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    if output_root(cfg) is None:
        cfg = dataclasses.replace(cfg, output_dir="mrirk-out")
    res = run(cfg)
    s = res.stats.summary()
    print(f"t={res.t:.6g} steps={s['steps']} rejected={s['rejected']} max_dt={s['max_dt']:.3e} "
          f"max_k={s['max_k']} max_k_ls={s['max_k_ls']} leaves={res.grid.n_leaves} "
          f"wall={s['wall_time']:.2f}s -> {output_root(cfg)}")
    return EXIT_OK


def cmd_order_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    model = build_model(cfg)
    grid = initial_grid(cfg, model)
    dts = args.dt or list(np.logspace(-6, -2, 9))
    rows = order_sweep(grid, model, cfg.t_start, dts, args.schemes, eta=args.eta)
    names = model.component_names or [f"u{c}" for c in range(model.m)]
    path = write_sweep_csv(rows, _out_dir(cfg, "mrirk-out") / "order_sweep.csv", names)
    print(f"{len(rows)} rows -> {path}")
    return EXIT_OK


def cmd_perf_table(args) -> int:
    cfg = load_config(args.config, args.set)
    configs = []
    for scheme in args.schemes:
        for eta in args.eta:
            ctl = dataclasses.replace(cfg.control, eta_rk=eta)
            configs.append(dataclasses.replace(cfg, scheme=scheme, control=ctl, output_dir=None))
    rows = perf_table(configs)
    path = write_perf_csv(rows, _out_dir(cfg, "mrirk-out") / "perf_table.csv")
    for r in rows:
        print(f"{r['scheme']:7s} eta={r['eta_rk']:.0e} n={r['n']:4d} max_dt={r['max_dt']:.3e} "
              f"max_k={r['max_k']} ({r['max_k_stage']}) max_k_ls={r['max_k_ls']} wall={r['wall_time']:.1f}s")
    print(f"-> {path}")
    return EXIT_OK


def cmd_burn_in(args) -> int:
    path = Path(args.out) if args.out else canonical_path(args.model)
    res = burn_in(args.model, path)
    print(f"{args.model}: t={res.t:.6g} leaves={res.grid.n_leaves} "
          f"compression={mr.compression_ratio(res.grid):.2f}% -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrirk", description="Adaptive multiresolution IRK solver for stiff PDEs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", nargs="?", help="INI configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration key (repeatable)")
        sp.set_defaults(func=func)
        return sp

    with_config("run", cmd_run, "integrate one configuration")
    sp = with_config("order-sweep", cmd_order_sweep, "local errors of one step against a Radau5 reference")
    sp.add_argument("--dt", type=float, nargs="+")
    sp.add_argument("--schemes", nargs="+", default=["euler", "sdirk2", "sdirk3", "sdirk4", "radau3", "radau5"])
    sp.add_argument("--eta", type=float, default=1e-14, help="reference and Newton tolerance")
    sp = with_config("perf-table", cmd_perf_table, "steps, Newton/GMRES maxima and wall time per tolerance")
    sp.add_argument("--eta", type=float, nargs="+", default=[1e-3, 1e-4, 1e-5, 1e-6])
    sp.add_argument("--schemes", nargs="+", default=["sdirk4", "radau5"])
    sp = sub.add_parser("burn-in", help="regenerate a canonical snapshot")
    sp.add_argument("model", choices=["bz1d", "bz2d"])
    sp.add_argument("--out", help="snapshot path (default: the packaged snapshot)")
    sp.set_defaults(func=cmd_burn_in)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NewtonDivergence, StepSizeUnderflow) as exc:
        print(f"error: convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (SingularSourceError, NonFiniteModelError) as exc:
        print(f"error: singular model evaluation: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KeyError, ValueError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
