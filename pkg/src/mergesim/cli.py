"""``mergesim`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 simulation error,
3 when the only problem is a CTM run that did not converge.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, ctm, harness
from .config import ScenarioConfig, load
from .errors import ConfigError, MergeSimError, SimulationError
from .fd import fit_triangular, read_samples_csv
from .metrics import AGGREGATE_HEADER, SUMMARY_HEADER, MetricsSeries
from .microsim.world import EVENT_HEADER, PROFILE_HEADER
from .policies import TRACE_HEADER

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_NONCONVERGED = 0, 1, 2, 3
OUT_ENV = "MERGESIM_OUT"


def _add_common(p: argparse.ArgumentParser, jobs: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="INI experiment file; omitted keys keep their defaults")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config key after the file is read (repeatable)",
    )
    p.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or the current directory)")
    p.add_argument("--print-config", action="store_true", help="print the fully resolved configuration and exit")
    if jobs:
        p.add_argument(
            "--jobs", type=int, default=os.cpu_count() or 1, metavar="N", help="worker processes (default: all cores)"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergesim",
        description="Merge-road traffic toolkit with CTM and microsimulation engines.",
        epilog="Exit codes: 0 ok, 1 config error, 2 simulation error, 3 CTM non-convergence only.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fit-fd", help="fit a triangular fundamental diagram to density,flow samples")
    p.add_argument("--samples", required=True, metavar="CSV", help="CSV with a 'density,flow' header")
    p.add_argument("--out", required=True, metavar="FILE", help="where to write the key=value FD record")
    p.add_argument("--max-candidates", type=int, metavar="K", help="cap on scanned breakpoints (default: all)")

    p = sub.add_parser("run-ctm", help="run the CTM to steady state for one condition")
    _add_common(p, jobs=False)
    p.add_argument("--trace", action="store_true", help="also write the per-step cell trace (ctm_trace.csv)")

    p = sub.add_parser("run-microsim", help="run the microsimulator over the configured seeds")
    _add_common(p)
    p.add_argument("--events", action="store_true", help="write per-seed vehicle event logs")
    p.add_argument(
        "--profile", type=float, metavar="SECONDS", help="write per-seed cell density/speed/flow samples at this period"
    )
    p.add_argument("--trace-av", action="store_true", help="write per-seed AV observation/reward traces")

    p = sub.add_parser("validate", help="CTM steady state against the microsim 95%% CI over the sweep grid")
    _add_common(p)

    p = sub.add_parser("sweep", help="run the configured engine over the main x merge x avp grid")
    _add_common(p)

    p = sub.add_parser("two-ramp", help="human vs heuristic AV for each ramp spacing")
    _add_common(p)
    p.add_argument(
        "--merge-split",
        action="store_true",
        help="divide the merge inflow between the two ramps instead of applying it to each",
    )
    return parser


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or ".")


def _write_series(out: Path, series: Sequence[MetricsSeries], stem: str = "") -> None:
    harness.write_csv(out / f"{stem}summary.csv", SUMMARY_HEADER, harness.summary_rows(series))
    harness.write_csv(out / f"{stem}aggregate.csv", AGGREGATE_HEADER, harness.aggregate_rows(series))


def _report(series: Sequence[MetricsSeries]) -> int:
    failed = nonconv = False
    for s in series:
        for seed, msg in sorted(s.failures.items()):
            print(f"error: {s.condition} seed {seed}: {msg}", file=sys.stderr)
            failed = True
        if s.nonconvergent:
            print(f"warning: {s.condition}: CTM did not converge", file=sys.stderr)
            nonconv = True
    if failed:
        return EXIT_SIM
    return EXIT_NONCONVERGED if nonconv else EXIT_OK


def cmd_fit_fd(args) -> int:
    path = Path(args.samples)
    if not path.is_file():
        raise ConfigError(f"samples file not found: {path}")
    fd = fit_triangular(read_samples_csv(path), args.max_candidates)
    harness.atomic_write(args.out, fd.to_record())
    print(f"v={fd.v:.4f} w={fd.w:.4f} d_c={fd.d_c:.5f} d_j={fd.d_j:.5f} q_max={fd.q_max:.5f}")
    return EXIT_OK


def cmd_run_ctm(args, cfg: ScenarioConfig, out: Path) -> int:
    cfg = cfg.with_(engine="ctm")
    series = harness.run_condition(cfg)
    _write_series(out, [series])
    if args.trace:
        # Replay from empty for as many steps as the steady-state solve took.
        n_steps = harness.run_ctm(cfg).steps
        net = harness.build_ctm(cfg)
        rows = []
        for _ in range(n_steps):
            net = ctm.step(net)
            rows.extend(ctm.trace_rows(net))
        harness.atomic_write(out / "ctm_trace.csv", ctm.write_trace(rows))
    return _report([series])


def cmd_run_microsim(args, cfg: ScenarioConfig, out: Path) -> int:
    cfg = cfg.with_(engine="microsim")
    detailed = args.events or args.profile is not None or args.trace_av
    if not detailed:
        series = harness.run_condition(cfg, args.jobs)
        _write_series(out, [series])
        return _report([series])

    series = MetricsSeries(harness.condition_name(cfg), config_hash=harness.config_hash(cfg))
    for seed in cfg.seeds:
        try:
            run = harness.simulate(cfg, seed, args.events, args.profile, args.trace_av)
        except SimulationError as e:
            series.failures[seed] = str(e)
            continue
        series.records.append(run.record)
        if args.events:
            harness.write_csv(out / f"events_seed{seed}.csv", EVENT_HEADER, run.world.events)
        if args.profile is not None:
            harness.write_csv(out / f"profile_seed{seed}.csv", PROFILE_HEADER, run.profile)
        if args.trace_av:
            harness.write_csv(out / f"av_trace_seed{seed}.csv", TRACE_HEADER, run.av_trace)
    _write_series(out, [series])
    return _report([series])


def cmd_validate(args, resolved, out: Path) -> int:
    cfg, sw = resolved.scenario, resolved.sweep
    rows = harness.validation_sweep(sw.main, sw.merge, cfg, jobs=args.jobs)
    harness.write_csv(out / "validation.csv", harness.VALIDATION_HEADER, map(harness.validation_row_tuple, rows))
    agree = sum(r.agrees for r in rows)
    print(f"CTM agrees with microsim at {agree}/{len(rows)} grid points")
    bad = [r for r in rows if r.n_seeds < len(cfg.seeds)]
    if bad:
        for r in bad:
            print(f"error: main {r.main_inflow} merge {r.merge_inflow}: seed failures", file=sys.stderr)
        return EXIT_SIM
    if not all(r.ctm_converged for r in rows):
        print("warning: some CTM points did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_sweep(args, resolved, out: Path) -> int:
    cfg, sw = resolved.scenario, resolved.sweep
    avps = (0.0,) if cfg.engine == "ctm" or cfg.policy == "human" else sw.avp
    grid = [dict(main_inflow=m, merge_inflow=g, avp=a) for g, m, a in itertools.product(sw.merge, sw.main, avps)]
    series = harness.sweep(cfg, grid, args.jobs)
    _write_series(out, series)
    return _report(series)


def cmd_two_ramp(args, resolved, out: Path) -> int:
    cfg, sw = resolved.scenario, resolved.sweep
    avp = sw.avp[0] if sw.avp else 10.0
    rows = harness.two_ramp_study(sw.gaps, cfg, avp=avp, merge_split=args.merge_split or sw.merge_split, jobs=args.jobs)
    harness.write_csv(out / "two_ramp.csv", harness.TWO_RAMP_HEADER, map(harness.two_ramp_row_tuple, rows))
    series = [s for r in rows for s in (r.human, r.av)]
    _write_series(out, series)
    return _report(series)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit-fd":
            return cmd_fit_fd(args)
        resolved = load(args.config, args.overrides)
        if args.print_config:
            sys.stdout.write(resolved.dump())
            return EXIT_OK
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        harness.atomic_write(out / "config.ini", resolved.dump())
        if args.command == "run-ctm":
            return cmd_run_ctm(args, resolved.scenario, out)
        if args.command == "run-microsim":
            return cmd_run_microsim(args, resolved.scenario, out)
        if args.command == "validate":
            return cmd_validate(args, resolved, out)
        if args.command == "sweep":
            return cmd_sweep(args, resolved, out)
        return cmd_two_ramp(args, resolved, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MergeSimError as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return EXIT_SIM
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
