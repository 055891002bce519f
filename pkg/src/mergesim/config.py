"""Experiment configuration: INI files, defaults and ``section.key=value`` overrides.

Every tunable has a named key with its default below, so ``--print-config``
shows the complete resolved setup.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import ctm
from .errors import ConfigError
from .fd import TriangularFD
from .microsim.geometry import Ramp, RoadGeometry, SpawnPlan
from .microsim.idm import DriverParams
from .microsim.world import LaneChangeParams, MergeParams
from .policies import HeuristicParams, RewardParams

DEFAULTS: dict[str, dict[str, str]] = {
    "scenario": {
        "engine": "microsim",
        "policy": "human",
        "horizon": "3600",
        "warmup": "300",
        "dt": "0.5",
        "seeds": "1-20",
    },
    "geometry": {
        "main_length": "700",
        "lane_count": "1",
        "ramps": "600:200",
        "cell_length": "100",
    },
    "demand": {
        "main_inflow": "1800",
        "merge_inflow": "200",
        "left_inflow": "",
        "avp": "0",
        "placement": "random",
        "poisson": "false",
        "merge_split": "false",
    },
    "driver": {
        "max_accel": "2.6",
        "max_decel": "4.5",
        "time_headway": "1.0",
        "min_gap": "2.0",
        "v_desired": "21.0",
        "accel_exponent": "8.0",
        "vehicle_length": "5.0",
    },
    "merge": {
        "lookahead": "200",
        "min_arrival_speed": "1.0",
        "ramp_spawn_fraction": "0.7",
        "yield_margin": "3.5",
        "yield_horizon": "8.0",
    },
    "lane_change": {
        "accel_gain_threshold": "0.3",
        "cooldown": "2.0",
        "entry_zone": "100",
    },
    "fd": {"v": "21.0", "w": "8.4", "d_c": "0.04"},
    "ctm": {
        "dt": "",
        "alpha": "0.65",
        "beta": "1.0",
        "delta": "0.15",
        "epsilon": "0.05",
        "lc_threshold": "",
        "tol": "0.001",
        "max_steps": "5000",
        "merge_queueing": "true",
    },
    "policy": {
        "shaping": "true",
        "anticipation": "true",
        "closing_only": "true",
        "tau": "4.0",
        "anticipation_decel": "1.0",
        "yield_margin": "0.0",
        "sensing_range": "200",
        "v_max": "21.0",
    },
    "reward": {"eta": "0.9", "bonus": "20"},
    "sweep": {
        "main": "1400:2000:100",
        "merge": "160,200",
        "avp": "10",
        "gaps": "200,400,600,800",
    },
}


@dataclass(frozen=True)
class CtmSettings:
    dt: float | None = None
    alpha: float = ctm.ALPHA
    beta: float = ctm.BETA
    delta: float = ctm.DELTA
    epsilon: float = ctm.EPSILON
    lc_threshold: float | None = None
    tol: float = 1e-3
    max_steps: int = 5000


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: RoadGeometry = RoadGeometry()
    plan: SpawnPlan = SpawnPlan()
    engine: str = "microsim"  # "ctm" | "microsim"
    fd: TriangularFD = TriangularFD.from_speeds(21.0, 8.4, 0.04)
    policy: str = "human"  # "human" | "heuristic_av"
    horizon: float = 3600.0
    warmup: float = 300.0
    dt: float = 0.5
    seeds: tuple[int, ...] = tuple(range(1, 21))
    driver: DriverParams = DriverParams()
    merge: MergeParams = MergeParams()
    lane_change: LaneChangeParams = LaneChangeParams()
    heuristic: HeuristicParams = HeuristicParams()
    reward: RewardParams = RewardParams()
    ctm: CtmSettings = CtmSettings()

    def __post_init__(self):
        if self.engine not in ("ctm", "microsim"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.policy not in ("human", "heuristic_av"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.horizon <= self.warmup:
            raise ConfigError("horizon must exceed warmup")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def with_(self, **changes) -> ScenarioConfig:
        return replace(self, **changes)

    def with_plan(self, **changes) -> ScenarioConfig:
        return replace(self, plan=replace(self.plan, **changes))


@dataclass(frozen=True)
class SweepSpec:
    main: tuple[float, ...] = (1400, 1500, 1600, 1700, 1800, 1900, 2000)
    merge: tuple[float, ...] = (160, 200)
    avp: tuple[float, ...] = (10,)
    gaps: tuple[float, ...] = (200, 400, 600, 800)
    merge_split: bool = False


@dataclass
class Resolved:
    parser: configparser.ConfigParser
    scenario: ScenarioConfig
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def dump(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()


# ---------------------------------------------------------------- parsing


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None)
    p.optionxform = str  # keys are case-sensitive identifiers
    p.read_dict(DEFAULTS)
    return p


def _check_known(section: str, key: str | None = None) -> None:
    if section not in DEFAULTS:
        raise ConfigError(f"unknown section [{section}]")
    if key is not None and key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {section}.{key}")


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1-20"``, ``"3,5,8"`` or a mix like ``"1-3,10"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ConfigError(f"empty seed range {part!r}")
                seeds.extend(range(a, b + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed spec {part!r}") from None
    if not seeds:
        raise ConfigError("no seeds given")
    return tuple(seeds)


def parse_grid(text: str) -> tuple[float, ...]:
    """``"1400:2000:100"`` (inclusive) or a comma list."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            if step <= 0 or hi < lo:
                raise ConfigError(f"bad grid {text!r}")
            n = int(round((hi - lo) / step))
            return tuple(lo + i * step for i in range(n + 1))
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None


def parse_ramps(text: str) -> tuple[Ramp, ...]:
    ramps = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pos, sep, length = part.partition(":")
        try:
            ramps.append(Ramp(float(pos), float(length)) if sep else Ramp(float(pos)))
        except ValueError:
            raise ConfigError(f"bad ramp spec {part!r} (want position:length)") from None
    return tuple(ramps)


def format_ramps(ramps: Iterable[Ramp]) -> str:
    return ",".join(f"{r.position:g}:{r.length:g}" for r in ramps)


class _Reader:
    def __init__(self, parser: configparser.ConfigParser):
        self.p = parser

    def str(self, s: str, k: str) -> str:
        return self.p.get(s, k).strip()

    def float(self, s: str, k: str) -> float:
        try:
            return self.p.getfloat(s, k)
        except ValueError:
            raise ConfigError(f"{s}.{k}: expected a number, got {self.p.get(s, k)!r}") from None

    def opt_float(self, s: str, k: str) -> float | None:
        return None if self.str(s, k) == "" else self.float(s, k)

    def int(self, s: str, k: str) -> int:
        try:
            return self.p.getint(s, k)
        except ValueError:
            raise ConfigError(f"{s}.{k}: expected an integer, got {self.p.get(s, k)!r}") from None

    def bool(self, s: str, k: str) -> bool:
        try:
            return self.p.getboolean(s, k)
        except ValueError:
            raise ConfigError(f"{s}.{k}: expected true/false, got {self.p.get(s, k)!r}") from None


def load(path: str | Path | None = None, overrides: Sequence[str] = ()) -> Resolved:
    """Defaults, then ``path`` (if any), then ``section.key=value`` overrides.

    Raises:
        ConfigError: missing file, unknown section/key, or bad value.
    """
    parser = _parser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        user = configparser.ConfigParser(interpolation=None)
        user.optionxform = str
        try:
            user.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in user.sections():
            _check_known(section)
            for key, value in user.items(section, raw=True):
                _check_known(section, key)
                parser.set(section, key, value)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _check_known(section, name)
        parser.set(section, name, value.strip())
    return resolve(parser)


def resolve(parser: configparser.ConfigParser) -> Resolved:
    r = _Reader(parser)
    try:
        fd = TriangularFD.from_speeds(r.float("fd", "v"), r.float("fd", "w"), r.float("fd", "d_c"))
        geometry = RoadGeometry(
            main_length=r.float("geometry", "main_length"),
            lane_count=r.int("geometry", "lane_count"),
            ramps=parse_ramps(r.str("geometry", "ramps")),
            cell_length=r.float("geometry", "cell_length"),
        )
        merge_split = r.bool("demand", "merge_split")
        merge_inflow = r.float("demand", "merge_inflow")
        if merge_split and geometry.ramps:
            merge_inflow /= len(geometry.ramps)
        plan = SpawnPlan(
            main_inflow=r.float("demand", "main_inflow"),
            merge_inflow=merge_inflow,
            avp=r.float("demand", "avp"),
            placement=r.str("demand", "placement"),
            left_inflow=r.opt_float("demand", "left_inflow"),
            poisson=r.bool("demand", "poisson"),
        )
        driver = DriverParams(**{k: r.float("driver", k) for k in DEFAULTS["driver"] if k != "vehicle_length"})
        merge = MergeParams(**{k: r.float("merge", k) for k in DEFAULTS["merge"]})
        lane_change = LaneChangeParams(**{k: r.float("lane_change", k) for k in DEFAULTS["lane_change"]})
        heuristic = HeuristicParams(
            shaping=r.bool("policy", "shaping"),
            anticipation=r.bool("policy", "anticipation"),
            closing_only=r.bool("policy", "closing_only"),
            tau=r.float("policy", "tau"),
            anticipation_decel=r.float("policy", "anticipation_decel"),
            yield_margin=r.float("policy", "yield_margin"),
            critical_density=fd.d_c,
            vehicle_length=r.float("driver", "vehicle_length"),
            sensing_range=r.float("policy", "sensing_range"),
            v_max=r.float("policy", "v_max"),
        )
        reward = RewardParams(eta=r.float("reward", "eta"), bonus=r.float("reward", "bonus"), v_max=heuristic.v_max)
        if not r.bool("ctm", "merge_queueing"):
            raise ConfigError("ctm.merge_queueing=false is not supported: unserved merge demand always queues")
        ctm_settings = CtmSettings(
            dt=r.opt_float("ctm", "dt"),
            alpha=r.float("ctm", "alpha"),
            beta=r.float("ctm", "beta"),
            delta=r.float("ctm", "delta"),
            epsilon=r.float("ctm", "epsilon"),
            lc_threshold=r.opt_float("ctm", "lc_threshold"),
            tol=r.float("ctm", "tol"),
            max_steps=r.int("ctm", "max_steps"),
        )
        scenario = ScenarioConfig(
            geometry=geometry,
            plan=plan,
            engine=r.str("scenario", "engine"),
            fd=fd,
            policy=r.str("scenario", "policy"),
            horizon=r.float("scenario", "horizon"),
            warmup=r.float("scenario", "warmup"),
            dt=r.float("scenario", "dt"),
            seeds=parse_seeds(r.str("scenario", "seeds")),
            driver=driver,
            merge=merge,
            lane_change=lane_change,
            heuristic=heuristic,
            reward=reward,
            ctm=ctm_settings,
        )
        sweep = SweepSpec(
            main=parse_grid(r.str("sweep", "main")),
            merge=parse_grid(r.str("sweep", "merge")),
            avp=parse_grid(r.str("sweep", "avp")),
            gaps=parse_grid(r.str("sweep", "gaps")),
            merge_split=merge_split,
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if scenario.dt <= 0:
        raise ConfigError("scenario.dt must be positive")
    return Resolved(parser=parser, scenario=scenario, sweep=sweep)
