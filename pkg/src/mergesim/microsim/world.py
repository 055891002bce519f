"""Microscopic merge-road simulator.

Vehicles are point-plus-length bodies on one or two main lanes (lane 0 is
the right lane) and on on-ramps that join lane 0. Human drivers follow the
IDM; AVs ask an injected controller for their acceleration.

Junction right of way: a main-lane vehicle yields to a ramp vehicle that is
projected ahead of it (smaller distance to the junction), or that will reach
the junction first at constant speed while the main-lane vehicle can still
stop short of it. Ramp vehicles never yield to yielding main-lane traffic;
they only follow main-lane vehicles that are ahead of them in the merge
order, including those already past the junction.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from ..errors import CollisionDetected, UnknownVehicle
from .geometry import Arrival, RoadGeometry, Spawner, SpawnPlan
from .idm import DriverParams

RAMP = -1  # lane value of a vehicle still on its ramp


@dataclass(eq=False, slots=True)
class Vehicle:
    id: int
    kind: str  # "human" | "av"
    lane: int  # main lane index, or RAMP
    position: float  # front bumper, metres along the current road
    speed: float
    length: float = 5.0
    route: str = "main0"  # entry stream
    ramp: Optional[int] = None
    last_lane_change: float = -math.inf

    @property
    def rear(self) -> float:
        return self.position - self.length


@dataclass(frozen=True)
class MergeParams:
    lookahead: float = 200.0  # m upstream of a junction where main traffic checks the ramp
    min_arrival_speed: float = 1.0  # m/s floor for constant-speed arrival projection
    ramp_spawn_fraction: float = 0.7  # ramp vehicles enter at this fraction of v_desired
    # Main traffic yields to a ramp vehicle arriving up to ``yield_margin`` after it, as long as
    # that ramp vehicle is at most ``yield_horizon`` away. Together they set the merge capacity.
    yield_margin: float = 3.5  # s
    yield_horizon: float = 8.0  # s


@dataclass(frozen=True)
class LaneChangeParams:
    accel_gain_threshold: float = 0.3  # m/s^2
    cooldown: float = 2.0  # s between two changes of the same vehicle
    entry_zone: float = 100.0  # m; freshly inserted vehicles keep their lane until past this
    enabled: bool = True


@dataclass(frozen=True)
class VirtualLeader:
    gap: float  # m, ego front to leader rear (may be <= 0 for a stop line already reached)
    speed: float


Controller = Callable[["World", Vehicle], float]


class World:
    """One simulation run. Not thread-safe; run one world per process/thread."""

    def __init__(
        self,
        geometry: RoadGeometry,
        plan: SpawnPlan,
        driver: DriverParams = DriverParams(),
        dt: float = 0.5,
        v_max: float | None = None,
        av_controller: Controller | None = None,
        merge: MergeParams = MergeParams(),
        av_yield: tuple[float, float] | None = None,
        lane_change: LaneChangeParams = LaneChangeParams(),
        vehicle_length: float = 5.0,
        warmup: float = 300.0,
        record_events: bool = False,
        on_step: Callable[["World"], None] | None = None,
    ):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.geometry = geometry
        self.plan = plan
        self.driver = driver
        self.dt = dt
        self.v_max = v_max if v_max is not None else driver.v_desired
        self.av_controller = av_controller
        self.merge = merge
        # (margin, horizon) used when the main-lane vehicle is an AV; None = same as humans.
        self.av_yield = av_yield
        self.lane_change = lane_change
        self.vehicle_length = vehicle_length
        self.warmup = warmup
        self.record_events = record_events
        self.on_step = on_step

        self.time = 0.0
        self.steps = 0
        self.lanes: list[list[Vehicle]] = [[] for _ in range(geometry.lane_count)]
        self.ramps: list[list[Vehicle]] = [[] for _ in geometry.ramps]
        self.spawner = Spawner(plan, geometry)
        self.queues: dict[str, deque[Arrival]] = {s.name: deque() for s in self.spawner.streams}
        self.by_id: dict[int, Vehicle] = {}

        self.events: list[tuple] = []
        self.spawned = 0
        self.inserted = 0
        self.exited = 0
        self.exit_times: list[float] = []
        self.insert_times: list[float] = []
        self.lane_changes = {"to_left": 0, "to_right": 0}
        self.speed_sum = 0.0
        self.vehicle_steps = 0

        p = driver
        self._two_sqrt_ab = 2.0 * math.sqrt(p.max_accel * p.max_decel)

    # ------------------------------------------------------------------ queries

    def vehicles(self):
        for lane in self.lanes:
            yield from lane
        for ramp in self.ramps:
            yield from ramp

    def n_present(self) -> int:
        return sum(len(x) for x in self.lanes) + sum(len(x) for x in self.ramps)

    def n_queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def vehicle(self, vid: int) -> Vehicle:
        try:
            return self.by_id[vid]
        except KeyError:
            raise UnknownVehicle(vid) from None

    def place(self, veh: Vehicle) -> Vehicle:
        """Put a hand-built vehicle on its road (scenario setup and tests)."""
        if veh.id in self.by_id:
            raise ValueError(f"vehicle id {veh.id} already present")
        if veh.lane == RAMP and (veh.ramp is None or not 0 <= veh.ramp < len(self.ramps)):
            raise ValueError("ramp vehicles need a valid ramp index")
        if veh.lane != RAMP and not 0 <= veh.lane < len(self.lanes):
            raise ValueError(f"no lane {veh.lane}")
        bisect.insort(self._road(veh), veh, key=lambda x: x.position)
        self.by_id[veh.id] = veh
        return veh

    def _road(self, veh: Vehicle) -> list[Vehicle]:
        return self.ramps[veh.ramp] if veh.lane == RAMP else self.lanes[veh.lane]

    def leader_of(self, veh: Vehicle) -> Vehicle | None:
        road = self._road(veh)
        i = road.index(veh)
        return road[i + 1] if i + 1 < len(road) else None

    def follower_of(self, veh: Vehicle) -> Vehicle | None:
        road = self._road(veh)
        i = road.index(veh)
        return road[i - 1] if i > 0 else None

    def next_junction(self, veh: Vehicle) -> int | None:
        """Index of the next ramp joining ``veh``'s lane ahead of it."""
        if veh.lane == RAMP:
            return veh.ramp
        if veh.lane != 0:
            return None
        for k, r in enumerate(self.geometry.ramps):
            if r.position > veh.position:
                return k
        return None

    def distance_to_junction(self, veh: Vehicle, k: int) -> float:
        r = self.geometry.ramps[k]
        if veh.lane == RAMP:
            return r.length - veh.position
        return r.position - veh.position

    # ----------------------------------------------------------------- dynamics

    def idm_raw(self, v: float, gap: float, v_lead: float, s_floor: float = 0.0) -> float:
        """Unclamped IDM; ``s_floor`` raises the desired gap (used by AV shaping)."""
        p = self.driver
        free = p.max_accel * (1.0 - (v / p.v_desired) ** p.accel_exponent)
        if gap == math.inf:
            return free
        s_star = p.min_gap + max(0.0, v * p.time_headway + v * (v - v_lead) / self._two_sqrt_ab)
        if s_star < s_floor:
            s_star = s_floor
        if gap < 1e-3:
            gap = 1e-3
        return free - p.max_accel * (s_star / gap) ** 2

    def clamp_accel(self, a: float) -> float:
        p = self.driver
        return p.max_accel if a > p.max_accel else (-p.max_decel if a < -p.max_decel else a)

    def _arrival_time(self, dist: float, speed: float) -> float:
        return dist / max(speed, self.merge.min_arrival_speed)

    def _can_stop_before(self, veh: Vehicle, dist: float, ramp_len_vehicle: float) -> bool:
        room = dist - ramp_len_vehicle - self.driver.min_gap
        return room > 0 and veh.speed * veh.speed / (2.0 * self.driver.max_decel) < room

    def _main_yields(self, m: Vehicle, d_m: float, r: Vehicle, d_r: float) -> bool:
        if d_r < d_m:
            return True
        t_r = self._arrival_time(d_r, r.speed)
        if m.kind == "av" and self.av_yield is not None:
            margin, horizon = self.av_yield
        else:
            margin, horizon = self.merge.yield_margin, self.merge.yield_horizon
        return (
            t_r <= horizon
            and t_r <= self._arrival_time(d_m, m.speed) + margin
            and self._can_stop_before(m, d_m, r.length)
        )

    def merge_leaders(self, veh: Vehicle) -> list[VirtualLeader]:
        """Cross-stream leaders imposed on ``veh`` by the junction ahead of it."""
        out: list[VirtualLeader] = []
        if veh.lane == RAMP:
            k = veh.ramp
            junction = self.geometry.ramps[k].position
            d_r = self.geometry.ramps[k].length - veh.position
            nearest_up = None
            for m in self.lanes[0]:
                if m.position >= junction:
                    # First vehicle at or past the junction: physical obstacle.
                    out.append(VirtualLeader(m.position - junction - m.length + d_r, m.speed))
                    break
                d_m = junction - m.position
                if (
                    nearest_up is None
                    and d_m <= d_r
                    and d_m <= self.merge.lookahead
                    and not self._main_yields(m, d_m, veh, d_r)
                ):
                    nearest_up = (m, d_m)  # closest ahead in merge order
            if nearest_up is not None:
                m, d_m = nearest_up
                out.append(VirtualLeader(d_r - d_m - m.length, m.speed))
            return out
        if veh.lane != 0:
            return out
        k = self.next_junction(veh)
        if k is None:
            return out
        ramp = self.geometry.ramps[k]
        d_m = ramp.position - veh.position
        if d_m > self.merge.lookahead:
            return out
        ahead = None
        stop_line = False
        for r in self.ramps[k]:
            d_r = ramp.length - r.position
            if d_r < d_m:
                if ahead is None or d_r > ahead[1]:
                    ahead = (r, d_r)
            elif not stop_line and self._main_yields(veh, d_m, r, d_r):
                out.append(VirtualLeader(d_m - r.length, 0.0))
                stop_line = True
        if ahead is not None:
            r, d_r = ahead
            out.append(VirtualLeader(d_m - d_r - r.length, r.speed))
        return out

    def human_accel(self, veh: Vehicle, leader: Vehicle | None) -> float:
        v = veh.speed
        if leader is None:
            a = self.idm_raw(v, math.inf, 0.0)
        else:
            a = self.idm_raw(v, leader.position - leader.length - veh.position, leader.speed)
        if veh.lane <= 0:
            for vl in self.merge_leaders(veh):
                a = min(a, self.idm_raw(v, vl.gap, vl.speed))
        return self.clamp_accel(a)

    def yield_accel(self, veh: Vehicle) -> float:
        """Acceleration bound from junction right-of-way alone (``inf`` if none)."""
        a = math.inf
        for vl in self.merge_leaders(veh):
            a = min(a, self.idm_raw(veh.speed, vl.gap, vl.speed))
        return a

    # -------------------------------------------------------------- lane change

    def _neighbours(self, lane: list[Vehicle], pos: float) -> tuple[Vehicle | None, Vehicle | None]:
        i = bisect.bisect_right([x.position for x in lane], pos)
        return (lane[i] if i < len(lane) else None), (lane[i - 1] if i > 0 else None)

    def _in_active_merge_zone(self, position: float) -> bool:
        for k, r in enumerate(self.geometry.ramps):
            if r.position - self.merge.lookahead <= position < r.position and self.ramps[k]:
                return True
        return False

    def _clear_of_ramps(self, veh: Vehicle) -> bool:
        """Safety of moving ``veh`` into lane 0 w.r.t. ramp vehicles about to join it."""
        b = self.driver.max_decel
        for k, geo in enumerate(self.geometry.ramps):
            for r in self.ramps[k]:
                projected = geo.position - (geo.length - r.position)  # lane-0 position after merging
                if projected <= veh.position:
                    gap = veh.rear - projected
                    if gap <= 0 or self.idm_raw(r.speed, gap, veh.speed) < -b:
                        return False
                else:
                    gap = projected - r.length - veh.position
                    if gap <= 0 or self.idm_raw(veh.speed, gap, r.speed) < -b:
                        return False
        return True

    def lane_change_decide(self, veh: Vehicle) -> str:
        """``"stay"``, ``"to_left"`` or ``"to_right"`` for a main-lane vehicle."""
        if self.geometry.lane_count != 2 or veh.lane == RAMP:
            return "stay"
        if veh.position < self.lane_change.entry_zone:
            return "stay"
        target = 1 - veh.lane
        if target == 0 and self._in_active_merge_zone(veh.position):
            # Ramp vehicles there are already negotiating with the right lane.
            return "stay"
        cur_lane = self.lanes[veh.lane]
        i = cur_lane.index(veh)
        cur_leader = cur_lane[i + 1] if i + 1 < len(cur_lane) else None
        a_cur = self.human_accel(veh, cur_leader)

        t_leader, t_follower = self._neighbours(self.lanes[target], veh.position)
        if t_leader is not None and t_leader.position - t_leader.length - veh.position <= 0:
            return "stay"
        if t_follower is not None:
            f_gap = veh.position - veh.length - t_follower.position
            if f_gap <= 0:
                return "stay"
            # Safety: the new follower must manage with at most max_decel.
            if self.idm_raw(t_follower.speed, f_gap, veh.speed) < -self.driver.max_decel:
                return "stay"
        if target == 0 and not self._clear_of_ramps(veh):
            return "stay"

        saved_lane = veh.lane
        veh.lane = target
        try:
            a_new = self.human_accel(veh, t_leader)
            if t_leader is not None:
                own_raw = self.idm_raw(veh.speed, t_leader.position - t_leader.length - veh.position, t_leader.speed)
                if own_raw < -self.driver.max_decel:
                    return "stay"
        finally:
            veh.lane = saved_lane
        if a_new - a_cur >= self.lane_change.accel_gain_threshold:
            return "to_left" if target == 1 else "to_right"
        return "stay"

    def _resolve_lane_changes(self) -> None:
        lc = self.lane_change
        if self.geometry.lane_count != 2 or not lc.enabled:
            return
        candidates = [v for lane in self.lanes for v in lane if v.kind == "human"]
        candidates.sort(key=lambda v: (v.position, v.lane))  # upstream first
        for veh in candidates:
            if self.time - veh.last_lane_change < lc.cooldown:
                continue
            decision = self.lane_change_decide(veh)
            if decision == "stay":
                continue
            old = self.lanes[veh.lane]
            old.remove(veh)
            veh.lane = 1 - veh.lane
            new = self.lanes[veh.lane]
            bisect.insort(new, veh, key=lambda x: x.position)
            veh.last_lane_change = self.time
            self.lane_changes[decision] += 1
            self._log("lane_change", veh)

    # --------------------------------------------------------------------- step

    def step(self) -> None:
        dt = self.dt
        self._resolve_lane_changes()

        accels: list[tuple[Vehicle, float]] = []
        for road in (*self.lanes, *self.ramps):
            n = len(road)
            for i, veh in enumerate(road):
                leader = road[i + 1] if i + 1 < n else None
                if veh.kind == "av" and self.av_controller is not None:
                    a = self.av_controller(self, veh)
                    a = min(a, self.yield_accel(veh))
                    a = self.clamp_accel(a)
                else:
                    a = self.human_accel(veh, leader)
                accels.append((veh, a))

        v_max = self.v_max
        for veh, a in accels:
            v = veh.speed + a * dt
            v = 0.0 if v < 0.0 else (v_max if v > v_max else v)
            veh.speed = v
            veh.position += v * dt

        self.time = round(self.time + dt, 9)
        self.steps += 1
        self._transfer_ramps()
        self._remove_exits()
        self._check_collisions()
        self._spawn_and_insert()
        if self.time > self.warmup:
            for veh in self.vehicles():
                self.speed_sum += veh.speed
            self.vehicle_steps += self.n_present()
        if self.on_step is not None:
            self.on_step(self)

    def run(self, horizon: float) -> None:
        n = int(round(horizon / self.dt))
        for _ in range(n):
            self.step()

    def _transfer_ramps(self) -> None:
        for k, ramp in enumerate(self.ramps):
            geo = self.geometry.ramps[k]
            while ramp and ramp[-1].position >= geo.length:
                veh = ramp.pop()
                veh.position = geo.position + (veh.position - geo.length)
                veh.lane = 0
                veh.ramp = None
                bisect.insort(self.lanes[0], veh, key=lambda x: x.position)

    def _remove_exits(self) -> None:
        end = self.geometry.main_length
        for lane in self.lanes:
            while lane and lane[-1].position > end:
                veh = lane.pop()
                del self.by_id[veh.id]
                self.exited += 1
                self.exit_times.append(self.time)
                self._log("exit", veh)

    def _check_collisions(self) -> None:
        for idx, road in enumerate((*self.lanes, *self.ramps)):
            for i in range(len(road) - 1):
                f, l = road[i], road[i + 1]
                gap = l.position - l.length - f.position
                if gap < 0:
                    lane = idx if idx < len(self.lanes) else f"ramp{idx - len(self.lanes)}"
                    self._log("collision", f)
                    raise CollisionDetected(self.time, lane, f.id, l.id, gap)

    def _spawn_and_insert(self) -> None:
        for arr in self.spawner.spawn_step(self.time):
            self.queues[arr.stream].append(arr)
            self.spawned += 1
        p = self.driver
        L = self.vehicle_length
        for name, queue in self.queues.items():
            if not queue:
                continue
            if name.startswith("main"):
                road = self.lanes[int(name[4:])]
                v_spawn = p.v_desired
            else:
                road = self.ramps[int(name[4:])]
                v_spawn = self.merge.ramp_spawn_fraction * p.v_desired
            if road:
                first = road[0]
                space = first.position - first.length
                if space < p.min_gap + L:
                    continue
                gap = space - L
                # Speed from which the newcomer can still stop behind a braking leader.
                v_safe = math.sqrt(2.0 * p.max_decel * max(0.0, gap - p.min_gap) + first.speed**2)
                v0 = min(v_spawn, v_safe)
            else:
                v0 = v_spawn
            arr = queue.popleft()
            if name.startswith("main"):
                veh = Vehicle(arr.id, arr.kind, int(name[4:]), L, v0, L, name)
            else:
                veh = Vehicle(arr.id, arr.kind, RAMP, L, v0, L, name, ramp=int(name[4:]))
            road.insert(0, veh)
            self.by_id[veh.id] = veh
            self.inserted += 1
            self.insert_times.append(self.time)
            self._log("spawn", veh)

    def _log(self, event: str, veh: Vehicle) -> None:
        if self.record_events:
            lane = f"ramp{veh.ramp}" if veh.lane == RAMP else veh.lane
            self.events.append((self.time, event, veh.id, veh.kind, lane, veh.position, veh.speed))


EVENT_HEADER = ("time", "event", "vehicle_id", "kind", "lane", "position", "speed")
PROFILE_HEADER = ("time", "cell", "lane", "density", "mean_speed", "flow")


def merge_conflict_leader(veh: Vehicle, world: World) -> VirtualLeader | None:
    """The most restrictive junction-induced leader of ``veh``, if any."""
    best = None
    best_a = math.inf
    for vl in world.merge_leaders(veh):
        a = world.idm_raw(veh.speed, vl.gap, vl.speed)
        if a < best_a:
            best, best_a = vl, a
    return best


def lane_change_decide(veh: Vehicle, world: World) -> str:
    return world.lane_change_decide(veh)


def profile_cells(world: World) -> list[tuple[float, int, int, float, float, float]]:
    """Instantaneous (time, cell, lane, density, mean_speed, flow) for every occupied cell."""
    L = world.geometry.cell_length
    ncell = world.geometry.n_cells
    rows = []
    for lane_idx, lane in enumerate(world.lanes):
        counts = [0] * ncell
        speeds = [0.0] * ncell
        for veh in lane:
            c = int(veh.position // L)
            if 0 <= c < ncell:
                counts[c] += 1
                speeds[c] += veh.speed
        for c in range(ncell):
            if counts[c]:
                density = counts[c] / L
                mean_speed = speeds[c] / counts[c]
                rows.append((world.time, c, lane_idx, density, mean_speed, density * mean_speed))
    return rows
