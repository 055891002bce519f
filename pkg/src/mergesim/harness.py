"""Experiment runner: single conditions, sweeps, CTM validation and the two-ramp study."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from . import ctm
from .config import ScenarioConfig
from .errors import ConfigError, SimulationError
from .metrics import MetricsSeries, SeedRecord, mean_ci, paired_greater
from .microsim.geometry import RoadGeometry
from .microsim.world import World, profile_cells
from .policies import AvTracer, HeuristicController

# ------------------------------------------------------------- condition labels

_NUM = r"\d+(?:\.\d+)?(?:[eE][+-]?\d+)?"
_LABEL_RE = re.compile(rf"^(random|even)-({_NUM})-({_NUM})-({_NUM}):({_NUM}|\*)-({_NUM}|\*)$")


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True)
class ConditionLabel:
    """``placement-main-merge-avp:eval_main-eval_avp``; ``None`` stands for ``*``."""

    placement: str
    main_inflow: float
    merge_inflow: float
    avp: float
    eval_main_inflow: Optional[float] = None
    eval_avp: Optional[float] = None

    def __post_init__(self):
        if self.placement not in ("random", "even"):
            raise ConfigError(f"unknown placement {self.placement!r}")
        for name in ("main_inflow", "merge_inflow", "avp", "eval_main_inflow", "eval_avp"):
            x = getattr(self, name)
            if x is not None and (x < 0 or not math.isfinite(x)):
                raise ConfigError(f"{name} must be a finite non-negative number")

    def format(self) -> str:
        em = "*" if self.eval_main_inflow is None else _fmt_num(self.eval_main_inflow)
        ea = "*" if self.eval_avp is None else _fmt_num(self.eval_avp)
        return (
            f"{self.placement}-{_fmt_num(self.main_inflow)}-{_fmt_num(self.merge_inflow)}"
            f"-{_fmt_num(self.avp)}:{em}-{ea}"
        )

    __str__ = format

    @classmethod
    def parse(cls, text: str) -> ConditionLabel:
        m = _LABEL_RE.match(text.strip())
        if m is None:
            raise ConfigError(f"malformed condition label {text!r}")
        placement, main, merge, avp, em, ea = m.groups()
        return cls(
            placement,
            float(main),
            float(merge),
            float(avp),
            None if em == "*" else float(em),
            None if ea == "*" else float(ea),
        )


def geometry_tag(g: RoadGeometry) -> str:
    if g.lane_count == 2:
        return "double"
    if len(g.ramps) == 2:
        return f"tworamp{_fmt_num(g.ramps[1].position - g.ramps[0].position)}"
    return "single"


def condition_name(cfg: ScenarioConfig) -> str:
    p = cfg.plan
    label = ConditionLabel(p.placement, p.main_inflow, p.merge_inflow, p.avp, p.main_inflow, p.avp)
    return f"{cfg.engine}/{cfg.policy}/{geometry_tag(cfg.geometry)}/{label}"


def config_hash(cfg: ScenarioConfig) -> str:
    """Stable digest of everything except the seed list."""
    d = asdict(replace(cfg, seeds=(0,)))
    return hashlib.sha256(repr(sorted(d.items())).encode()).hexdigest()[:12]


# --------------------------------------------------------------------- engines


@dataclass
class MicroRun:
    record: SeedRecord
    world: World
    profile: list[tuple] = field(default_factory=list)
    av_trace: list[tuple] = field(default_factory=list)


def make_world(cfg: ScenarioConfig, seed: int, record_events: bool = False) -> World:
    controller = yield_rule = None
    if cfg.policy == "heuristic_av":
        controller = HeuristicController(cfg.heuristic)
        yield_rule = controller.yield_rule
    return World(
        cfg.geometry,
        replace(cfg.plan, seed=seed),
        driver=cfg.driver,
        dt=cfg.dt,
        v_max=cfg.fd.v,
        av_controller=controller,
        merge=cfg.merge,
        av_yield=yield_rule,
        lane_change=cfg.lane_change,
        vehicle_length=cfg.heuristic.vehicle_length,
        warmup=cfg.warmup,
        record_events=record_events,
    )


def simulate(
    cfg: ScenarioConfig,
    seed: int,
    record_events: bool = False,
    profile_every: float | None = None,
    trace_av: bool = False,
) -> MicroRun:
    """One microsimulation run. Raises SimulationError subclasses on failure."""
    world = make_world(cfg, seed, record_events)
    profile: list[tuple] = []
    tracer = AvTracer(cfg.reward, cfg.heuristic.sensing_range) if trace_av else None
    every = None if profile_every is None else max(1, int(round(profile_every / cfg.dt)))

    def hook(w: World) -> None:
        if every is not None and w.steps % every == 0:
            profile.extend(profile_cells(w))
        if tracer is not None:
            tracer(w)

    if every is not None or tracer is not None:
        world.on_step = hook
    world.run(cfg.horizon)
    window = cfg.horizon - cfg.warmup
    exits = sum(1 for t in world.exit_times if t > cfg.warmup)
    inserted = sum(1 for t in world.insert_times if t > cfg.warmup)
    speed = world.speed_sum / world.vehicle_steps if world.vehicle_steps else 0.0
    rec = SeedRecord(seed, exits * 3600.0 / window, speed, inserted * 3600.0 / window)
    return MicroRun(rec, world, profile, tracer.rows if tracer else [])


def _seed_task(args: tuple[ScenarioConfig, int]) -> tuple[int, SeedRecord | None, str | None]:
    cfg, seed = args
    try:
        return seed, simulate(cfg, seed).record, None
    except SimulationError as e:
        return seed, None, str(e)


def build_ctm(cfg: ScenarioConfig) -> ctm.CtmNetwork:
    g = cfg.geometry
    s = cfg.ctm
    return ctm.build_network(
        n_cells=g.n_cells,
        fd=cfg.fd,
        cell_length=g.cell_length,
        dt=s.dt,
        demand_vph=cfg.plan.main_inflow,
        merges=tuple((c, cfg.plan.merge_inflow) for c in g.merge_cells()),
        alpha=s.alpha,
        beta=s.beta,
        double_lane=g.lane_count == 2,
        left_demand_vph=cfg.plan.lane_inflow(1) if g.lane_count == 2 else 0.0,
        delta=s.delta,
        epsilon=s.epsilon,
        lc_threshold=s.lc_threshold,
    )


def ctm_mean_speed(net: ctm.CtmNetwork) -> float:
    """Space-mean speed: vehicle-metres per second over vehicles present, from the last step."""
    n = net.total_occupancy()
    if n <= 0 or not net.last_flows:
        return 0.0
    p = (net.lanes.right[0] if net.is_double else net.cells[0]).params
    moved = sum(sum(f.outflow) for f in net.last_flows)
    return min(moved * p.length / p.dt / n, p.length / p.dt)


def run_ctm(cfg: ScenarioConfig) -> ctm.SteadyState:
    return ctm.run_to_steady_state(build_ctm(cfg), tol=cfg.ctm.tol, max_steps=cfg.ctm.max_steps)


def run_condition(cfg: ScenarioConfig, jobs: int = 1) -> MetricsSeries:
    """Run every seed of ``cfg`` (CTM: exactly one deterministic run)."""
    name = condition_name(cfg)
    if cfg.engine == "ctm":
        ss = run_ctm(cfg)
        rec = SeedRecord(cfg.seeds[0], ss.outflow, ctm_mean_speed(ss.network), ss.inflow)
        return MetricsSeries(name, [rec], nonconvergent=ss.nonconvergent, config_hash=config_hash(cfg))
    tasks = [(cfg, s) for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_seed_task, tasks))
    else:
        results = [_seed_task(t) for t in tasks]
    series = MetricsSeries(name, config_hash=config_hash(cfg))
    for seed, rec, err in sorted(results, key=lambda r: r[0]):
        if rec is not None:
            series.records.append(rec)
        else:
            series.failures[seed] = err
    return series


def sweep(cfg: ScenarioConfig, grid: Iterable[dict], jobs: int = 1) -> list[MetricsSeries]:
    """Run ``cfg`` once per dict of plan overrides (e.g. ``{"main_inflow": 1800}``)."""
    return [run_condition(cfg.with_plan(**point), jobs) for point in grid]


# ------------------------------------------------------------------ validation


@dataclass(frozen=True)
class ValidationRow:
    main_inflow: float
    merge_inflow: float
    ctm_inflow: float
    ctm_outflow: float
    ctm_converged: bool
    micro_outflow: float
    micro_lo: float
    micro_hi: float
    micro_inflow: float
    n_seeds: int

    @property
    def ctm_in_ci(self) -> bool:
        return self.micro_lo <= self.ctm_outflow <= self.micro_hi

    @property
    def within_10pct(self) -> bool:
        return abs(self.ctm_outflow - self.micro_outflow) <= 0.1 * self.micro_outflow

    @property
    def agrees(self) -> bool:
        return self.ctm_in_ci or self.within_10pct


VALIDATION_HEADER = (
    "main_inflow",
    "merge_inflow",
    "ctm_inflow",
    "ctm_outflow",
    "ctm_converged",
    "micro_outflow",
    "micro_lo",
    "micro_hi",
    "micro_inflow",
    "n_seeds",
    "ctm_in_ci",
    "within_10pct",
)


def validation_row_tuple(r: ValidationRow) -> tuple:
    return (
        r.main_inflow,
        r.merge_inflow,
        r.ctm_inflow,
        r.ctm_outflow,
        int(r.ctm_converged),
        r.micro_outflow,
        r.micro_lo,
        r.micro_hi,
        r.micro_inflow,
        r.n_seeds,
        int(r.ctm_in_ci),
        int(r.within_10pct),
    )


def validation_sweep(
    main_range: Sequence[float],
    merge_range: Sequence[float],
    base: ScenarioConfig = ScenarioConfig(),
    jobs: int = 1,
    micro_cache: dict | None = None,
) -> list[ValidationRow]:
    """CTM steady state next to the microsim 95% CI at each grid point.

    On a double-lane base with a fixed ``left_inflow``, points whose main
    (right-lane) inflow does not exceed it are skipped. ``micro_cache`` maps ``(main, merge)`` to a finished microsim
    MetricsSeries and is filled as points are computed.
    """
    rows = []
    for merge in merge_range:
        for main in main_range:
            left = base.plan.left_inflow
            if base.geometry.lane_count == 2 and left is not None and main <= left:
                continue
            point = base.with_plan(main_inflow=main, merge_inflow=merge, avp=0.0)
            ss = run_ctm(point.with_(engine="ctm"))
            key = (main, merge)
            if micro_cache is not None and key in micro_cache:
                micro = micro_cache[key]
            else:
                micro = run_condition(point.with_(engine="microsim", policy="human"), jobs)
                if micro_cache is not None:
                    micro_cache[key] = micro
            if len(micro.records) >= 2:
                m, lo, hi = micro.ci("outflow")
                mi = float(micro.column("accepted_inflow").mean())
            else:
                m = lo = hi = mi = math.nan
            rows.append(
                ValidationRow(main, merge, ss.inflow, ss.outflow, ss.converged, m, lo, hi, mi, len(micro.records))
            )
    return rows


# ------------------------------------------------------------------- two ramps


@dataclass
class TwoRampRow:
    gap: float
    human: MetricsSeries
    av: MetricsSeries
    ctm_outflow: float
    ctm_converged: bool

    @property
    def speed_gain(self) -> float:
        """Mean paired AV-minus-human speed difference (m/s)."""
        h = {r.seed: r.avg_speed for r in self.human.records}
        d = [r.avg_speed - h[r.seed] for r in self.av.records if r.seed in h]
        return sum(d) / len(d) if d else math.nan

    @property
    def p_value(self) -> float:
        h = {r.seed: r.avg_speed for r in self.human.records}
        pairs = [(r.avg_speed, h[r.seed]) for r in self.av.records if r.seed in h]
        if len(pairs) < 2:
            return math.nan
        return paired_greater([a for a, _ in pairs], [b for _, b in pairs])


TWO_RAMP_HEADER = (
    "gap",
    "human_outflow",
    "human_avg_speed",
    "av_outflow",
    "av_avg_speed",
    "speed_gain",
    "p_value",
    "ctm_outflow",
    "ctm_converged",
)


def two_ramp_row_tuple(r: TwoRampRow) -> tuple:
    return (
        r.gap,
        float(r.human.column("outflow").mean()),
        float(r.human.column("avg_speed").mean()),
        float(r.av.column("outflow").mean()),
        float(r.av.column("avg_speed").mean()),
        r.speed_gain,
        r.p_value,
        r.ctm_outflow,
        int(r.ctm_converged),
    )


def two_ramp_study(
    gaps: Sequence[float],
    base: ScenarioConfig | None = None,
    avp: float = 10.0,
    merge_split: bool = False,
    first: float = 500.0,
    main_length: float = 1500.0,
    ramp_length: float = 250.0,
    jobs: int = 1,
) -> list[TwoRampRow]:
    """Human baseline vs heuristic AVs for each spacing between two ramps.

    ``merge_split`` divides the configured merge inflow between the two ramps
    instead of applying it to each.
    """
    base = base or ScenarioConfig()
    merge = base.plan.merge_inflow / 2 if merge_split else base.plan.merge_inflow
    rows = []
    for gap in gaps:
        if not 0 < gap < main_length - first:
            raise ConfigError(f"gap {gap} m puts the second ramp off the road")
        geo = RoadGeometry.two_ramp(gap, first, main_length, ramp_length)
        cfg = base.with_(geometry=geo, engine="microsim").with_plan(merge_inflow=merge)
        human = run_condition(cfg.with_(policy="human").with_plan(avp=0.0), jobs)
        av = run_condition(cfg.with_(policy="heuristic_av").with_plan(avp=avp), jobs)
        ss = run_ctm(cfg.with_(engine="ctm"))
        rows.append(TwoRampRow(gap, human, av, ss.outflow, ss.converged))
    return rows


# ------------------------------------------------------------------------ output


def _cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def atomic_write(path: str | Path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write(path, csv_text(header, rows))


def summary_rows(series: Iterable[MetricsSeries]) -> list[tuple]:
    rows = []
    for s in series:
        rows.extend(s.summary_rows())
    return sorted(rows, key=lambda r: (r[0], r[1]))


def aggregate_rows(series: Iterable[MetricsSeries]) -> list[tuple]:
    return sorted((s.aggregate_row() for s in series), key=lambda r: r[0])


__all__ = [
    "ConditionLabel",
    "MicroRun",
    "TWO_RAMP_HEADER",
    "TwoRampRow",
    "VALIDATION_HEADER",
    "ValidationRow",
    "aggregate_rows",
    "atomic_write",
    "build_ctm",
    "condition_name",
    "config_hash",
    "csv_text",
    "ctm_mean_speed",
    "make_world",
    "mean_ci",
    "run_condition",
    "run_ctm",
    "simulate",
    "summary_rows",
    "sweep",
    "two_ramp_row_tuple",
    "two_ramp_study",
    "validation_row_tuple",
    "validation_sweep",
    "write_csv",
]
