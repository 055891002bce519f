"""Road layouts and vehicle arrival plans."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Literal

from ..errors import ConfigError

Placement = Literal["random", "even"]


@dataclass(frozen=True)
class Ramp:
    position: float  # junction position along the main road (m)
    length: float = 200.0


@dataclass(frozen=True)
class RoadGeometry:
    main_length: float = 700.0
    lane_count: int = 1
    ramps: tuple[Ramp, ...] = (Ramp(600.0),)
    cell_length: float = 100.0

    def __post_init__(self):
        if self.lane_count not in (1, 2):
            raise ConfigError("lane_count must be 1 or 2")
        if self.main_length <= 0 or self.cell_length <= 0:
            raise ConfigError("lengths must be positive")
        last = 0.0
        for r in self.ramps:
            if not last < r.position < self.main_length:
                raise ConfigError(
                    f"ramp at {r.position} m must lie in ({last}, {self.main_length}) "
                    "and ramps must be strictly increasing"
                )
            if r.length <= 0:
                raise ConfigError("ramp length must be positive")
            last = r.position

    @property
    def n_cells(self) -> int:
        return int(round(self.main_length / self.cell_length))

    def merge_cells(self) -> list[int]:
        """Index of the first cell past each junction."""
        return [int(round(r.position / self.cell_length)) for r in self.ramps]

    @classmethod
    def single_merge(cls) -> RoadGeometry:
        return cls()

    @classmethod
    def double_lane(cls) -> RoadGeometry:
        return cls(lane_count=2)

    @classmethod
    def two_ramp(cls, gap: float, first: float = 500.0, main_length: float = 1500.0, ramp_length: float = 250.0) -> RoadGeometry:
        return cls(
            main_length=main_length,
            ramps=(Ramp(first, ramp_length), Ramp(first + gap, ramp_length)),
        )


@dataclass(frozen=True)
class SpawnPlan:
    """Traffic demand. ``main_inflow`` is per main lane unless ``left_inflow`` is set."""

    main_inflow: float = 1800.0  # veh/h
    merge_inflow: float = 200.0  # veh/h per ramp
    avp: float = 0.0  # percent
    placement: Placement = "random"
    seed: int = 0
    left_inflow: float | None = None  # veh/h, double-lane only
    poisson: bool = False

    def __post_init__(self):
        if self.main_inflow < 0 or self.merge_inflow < 0 or (self.left_inflow or 0) < 0:
            raise ConfigError("inflows must be non-negative")
        if not 0 <= self.avp <= 100:
            raise ConfigError("avp must lie in [0, 100]")
        if self.placement not in ("random", "even"):
            raise ConfigError(f"unknown placement {self.placement!r}")

    def lane_inflow(self, lane: int) -> float:
        if lane == 1 and self.left_inflow is not None:
            return self.left_inflow
        return self.main_inflow


@dataclass
class Arrival:
    id: int
    kind: str  # "human" | "av"
    stream: str  # "main0", "main1", "ramp0", ...
    time: float


@dataclass
class ArrivalStream:
    """Arrivals on one entry (a main lane or a ramp).

    Timing and vehicle kind use separate generators so that two plans that
    differ only in AV penetration see identical arrival times.
    """

    name: str
    rate: float  # veh/h
    avp: float
    placement: Placement
    poisson: bool
    timing_rng: random.Random
    kind_rng: random.Random
    next_time: float = field(init=False)
    count: int = field(default=0, init=False)

    def __post_init__(self):
        if self.rate > 0:
            headway = 3600.0 / self.rate
            # Random phase: seeds differ in when the first vehicle shows up.
            self.next_time = self._gap() if self.poisson else self.timing_rng.random() * headway
        else:
            self.next_time = float("inf")

    def _gap(self) -> float:
        headway = 3600.0 / self.rate
        if self.poisson:
            return self.timing_rng.expovariate(1.0 / headway)
        return headway

    def _kind(self) -> str:
        draw = self.kind_rng.random()  # always drawn, keeps streams aligned across AVP levels
        if self.avp <= 0:
            return "human"
        if self.placement == "random":
            return "av" if draw < self.avp / 100.0 else "human"
        period = max(1, round(100.0 / self.avp))
        return "av" if self.count % period == period - 1 else "human"

    def due(self, now: float) -> list[tuple[str, float]]:
        out = []
        while self.next_time <= now + 1e-9:
            out.append((self._kind(), self.next_time))
            self.count += 1
            self.next_time += self._gap()
        return out


class Spawner:
    """All arrival streams of a plan, seeded from ``plan.seed``."""

    def __init__(self, plan: SpawnPlan, geometry: RoadGeometry, av_lanes: tuple[int, ...] = (0,)):
        self.plan = plan
        self.streams: list[ArrivalStream] = []
        self._next_id = 0
        for lane in range(geometry.lane_count):
            self._add(f"main{lane}", plan.lane_inflow(lane), plan.avp if lane in av_lanes else 0.0)
        for k, _ in enumerate(geometry.ramps):
            self._add(f"ramp{k}", plan.merge_inflow, 0.0)

    def _add(self, name: str, rate: float, avp: float) -> None:
        idx = len(self.streams)
        self.streams.append(
            ArrivalStream(
                name=name,
                rate=rate,
                avp=avp,
                placement=self.plan.placement,
                poisson=self.plan.poisson,
                timing_rng=random.Random(self.plan.seed * 7919 + 2 * idx),
                kind_rng=random.Random(self.plan.seed * 7919 + 2 * idx + 1),
            )
        )

    def spawn_step(self, now: float) -> list[Arrival]:
        arrivals = []
        for s in self.streams:
            for kind, t in s.due(now):
                arrivals.append(Arrival(self._next_id, kind, s.name, t))
                self._next_id += 1
        return arrivals
