"""AV observation and reward functions, plus a heuristic density-control controller.

The controller is a hand-written stand-in for a learned policy. It keeps
the traffic around each AV at or below critical density and opens a gap
ahead of the junction when a ramp vehicle is about to merge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

from .errors import EmptyWorld
from .fd import REFERENCE_FD
from .microsim.idm import DriverParams, idm_accel_raw
from .microsim.world import RAMP, Vehicle, World

SENSING_RANGE = 200.0  # m
V_MAX = 21.0  # m/s


@dataclass(frozen=True)
class Observation:
    """Normalised local view of one AV. Every field lies in [0, 1]; 1.0 also means "nothing sensed"."""

    leader_speed: float
    leader_distance: float
    follower_speed: float
    follower_distance: float
    ego_speed: float
    distance_to_merge: float
    merging_vehicle_speed: float
    merging_vehicle_distance_to_junction: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


OBS_FIELDS = tuple(f.name for f in fields(Observation))


@dataclass(frozen=True)
class RewardParams:
    eta: float = 0.9
    bonus: float = 20.0
    v_max: float = V_MAX

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


@dataclass(frozen=True)
class HeuristicParams:
    shaping: bool = True
    anticipation: bool = True
    closing_only: bool = True
    tau: float = 4.0  # s, merge anticipation window
    anticipation_decel: float = 1.0  # m/s^2, strongest braking anticipation may ask for
    # With exact arrival times an AV only yields to ramp vehicles that really arrive first
    # and are at most ``tau`` away, instead of the human safety margin.
    yield_margin: float = 0.0  # s
    critical_density: float = REFERENCE_FD.d_c  # veh/m
    vehicle_length: float = 5.0
    merge_vehicle_length: float = 5.0
    sensing_range: float = SENSING_RANGE
    v_max: float = V_MAX

    @property
    def min_gap_at_critical(self) -> float:
        return 1.0 / self.critical_density - self.vehicle_length


def _norm(x: float, scale: float) -> float:
    return min(max(x / scale, 0.0), 1.0)


def observe(world: World, av_id: int, sensing_range: float = SENSING_RANGE, v_max: float = V_MAX) -> Observation:
    """Extract the normalised observation of vehicle ``av_id``.

    Raises:
        UnknownVehicle: ``av_id`` is not in the network.
    """
    veh = world.vehicle(av_id)
    leader = world.leader_of(veh)
    follower = world.follower_of(veh)
    if leader is not None and leader.rear - veh.position <= sensing_range:
        l_speed = _norm(leader.speed, v_max)
        l_dist = _norm(leader.rear - veh.position, sensing_range)
    else:
        l_speed = l_dist = 1.0
    if follower is not None and veh.rear - follower.position <= sensing_range:
        f_speed = _norm(follower.speed, v_max)
        f_dist = _norm(veh.rear - follower.position, sensing_range)
    else:
        f_speed = f_dist = 1.0

    merge_dist = m_speed = m_dist = 1.0
    k = world.next_junction(veh)
    if k is not None:
        merge_dist = _norm(world.distance_to_junction(veh, k), sensing_range)
        ramp = world.ramps[k]
        if ramp and veh.lane != RAMP:
            front = ramp[-1]  # closest to its junction
            m_speed = _norm(front.speed, v_max)
            m_dist = _norm(world.geometry.ramps[k].length - front.position, sensing_range)
    return Observation(
        leader_speed=l_speed,
        leader_distance=l_dist,
        follower_speed=f_speed,
        follower_distance=f_dist,
        ego_speed=_norm(veh.speed, v_max),
        distance_to_merge=merge_dist,
        merging_vehicle_speed=m_speed,
        merging_vehicle_distance_to_junction=m_dist,
    )


def reward(world_speeds: Sequence[float], done: bool, p: RewardParams = RewardParams()) -> float:
    """Per-step AV reward: a speed term while driving, ``p.bonus`` on exit.

    Raises:
        EmptyWorld: not done and no vehicle speeds given.
    """
    if done:
        return p.bonus
    n = len(world_speeds)
    if n == 0:
        raise EmptyWorld("reward needs at least one vehicle speed")
    return -p.eta + (1.0 - p.eta) * sum(world_speeds) / (n * p.v_max)


def av_accel(obs: Observation, p: DriverParams, h: HeuristicParams = HeuristicParams()) -> float:
    """Heuristic AV acceleration from a normalised observation."""
    v = obs.ego_speed * h.v_max
    if obs.leader_distance >= 1.0:
        a = idm_accel_raw(v, math.inf, 0.0, p)
    else:
        gap = obs.leader_distance * h.sensing_range
        v_lead = obs.leader_speed * h.v_max
        s_star = None
        if h.shaping and gap <= 1.0 / h.critical_density:
            # Only inside critical spacing: beyond it the AV sees sub-critical density anyway.
            dyn = v * p.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.max_accel * p.max_decel))
            floor = h.min_gap_at_critical
            if h.closing_only:
                # Ramp the floor in over the first 1 m/s of closing speed.
                floor *= min(1.0, max(0.0, v - v_lead))
            s_star = max(p.min_gap + max(0.0, dyn), floor)
        a = idm_accel_raw(v, gap, v_lead, p, s_star=s_star)

    if h.anticipation and obs.distance_to_merge < 1.0 and obs.merging_vehicle_distance_to_junction < 1.0:
        d_m = obs.distance_to_merge * h.sensing_range
        d_r = obs.merging_vehicle_distance_to_junction * h.sensing_range
        v_r = obs.merging_vehicle_speed * h.v_max
        t_m = d_m / max(v, 1.0)
        t_r = d_r / max(v_r, 1.0)
        if abs(t_r - t_m) <= h.tau:
            # Treat the junction as a leader moving at the merging vehicle's speed, but only
            # ease off: hard braking here is the yield rule's job.
            a_junction = idm_accel_raw(v, d_m - h.merge_vehicle_length, v_r, p)
            a = min(a, max(a_junction, -h.anticipation_decel))
    return min(p.max_accel, max(-p.max_decel, a))


class HeuristicController:
    """World-facing adapter: observe, then apply ``av_accel``."""

    def __init__(self, params: HeuristicParams = HeuristicParams()):
        self.params = params

    @property
    def yield_rule(self) -> tuple[float, float] | None:
        """(margin, horizon) the world should apply to AVs at junctions.

        ``None`` (the human rule) when anticipation is off, so a fully disabled
        controller drives exactly like a human.
        """
        if not self.params.anticipation:
            return None
        return (self.params.yield_margin, self.params.tau)

    def __call__(self, world: World, veh: Vehicle) -> float:
        obs = observe(world, veh.id, self.params.sensing_range, self.params.v_max)
        return av_accel(obs, world.driver, self.params)


def idm_controller(world: World, veh: Vehicle) -> float:
    """AVs driving exactly like humans (useful as a control condition)."""
    road = world.lanes[veh.lane] if veh.lane != RAMP else world.ramps[veh.ramp]
    i = road.index(veh)
    return world.human_accel(veh, road[i + 1] if i + 1 < len(road) else None)


TRACE_HEADER = ("time", "av_id", *OBS_FIELDS, "reward")


class AvTracer:
    """``World.on_step`` hook recording one row per AV per step, plus a bonus row on exit."""

    def __init__(self, reward_params: RewardParams = RewardParams(), sensing_range: float = SENSING_RANGE):
        self.reward_params = reward_params
        self.sensing_range = sensing_range
        self.rows: list[tuple] = []
        self._live: set[int] = set()

    def __call__(self, world: World) -> None:
        speeds = [v.speed for v in world.vehicles()]
        live = set()
        for veh in world.vehicles():
            if veh.kind != "av":
                continue
            live.add(veh.id)
            obs = observe(world, veh.id, self.sensing_range, self.reward_params.v_max)
            r = reward(speeds, False, self.reward_params)
            self.rows.append((world.time, veh.id, *obs.as_tuple(), r))
        for gone in sorted(self._live - live):
            self.rows.append((world.time, gone, *([1.0] * len(OBS_FIELDS)), reward((), True, self.reward_params)))
        self._live = live


__all__ = [
    "AvTracer",
    "HeuristicController",
    "HeuristicParams",
    "OBS_FIELDS",
    "Observation",
    "RewardParams",
    "SENSING_RANGE",
    "TRACE_HEADER",
    "V_MAX",
    "av_accel",
    "idm_controller",
    "observe",
    "reward",
]
