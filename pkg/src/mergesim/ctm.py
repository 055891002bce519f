"""Extended Cell Transmission Model for single- and double-lane merge roads.

Occupancies are real-valued vehicle counts and every flow is in vehicles per
CTM step. A network is an immutable value: ``step_single`` / ``step_double``
return a new network and never touch their argument.

Boundary handling:
  * an unbounded source queue feeds cell 0 of each main lane, so demand above
    capacity waits instead of vanishing;
  * the last cell discharges freely, ``exit = min(n_last, Q)``;
  * merge demand waits in a per-ramp queue and enters its target cell ahead
    of the main line (main-line traffic yields at the junction).

The merge penalty discounts the *total* inflow of the cell just downstream
of a junction by ``alpha`` whenever the ramp pushes more than ``beta``
vehicles per minute. In the double-lane variant a cell that receives lane
changers while holding more than ``lc_threshold`` vehicles has its outflow
discounted by the same ``alpha``.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field, replace
from typing import Sequence

from .errors import InvalidNetwork
from .fd import REFERENCE_FD, CellParams, TriangularFD, cell_params

ALPHA = 0.65
BETA = 1.0  # veh/min
DELTA = 0.15
EPSILON = 0.05
STEADY_WINDOW = 50
_TOL = 1e-9


@dataclass(frozen=True)
class Cell:
    index: int
    n: float
    params: CellParams


@dataclass(frozen=True)
class MergeAttachment:
    """A ramp feeding ``target_cell`` (the first cell past the junction).

    ``demand`` is vehicles offered per step; ``beta`` is in veh/min so the
    threshold does not depend on the step length.
    """

    target_cell: int
    demand: float
    alpha: float = ALPHA
    beta: float = BETA

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.beta < 0 or self.demand < 0:
            raise ValueError("beta and demand must be non-negative")


@dataclass(frozen=True)
class LanePair:
    left: tuple[Cell, ...]
    right: tuple[Cell, ...]
    delta: float = DELTA
    epsilon: float = EPSILON
    lc_threshold: float = 4.0  # veh; d_c * cell_length for the reference diagram
    alpha: float = ALPHA

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise ValueError("lanes must have the same number of cells")
        if not 0 <= self.delta < 1 or self.epsilon < 0:
            raise ValueError("need 0 <= delta < 1 and epsilon >= 0")


@dataclass(frozen=True)
class StepFlows:
    """Flows of one lane during one step (all veh/step)."""

    inflow: tuple[float, ...]  # main-line inflow of each cell (index 0 = from source)
    outflow: tuple[float, ...]  # main-line outflow of each cell (last = exit)
    merge_in: tuple[float, ...]
    lc_in: tuple[float, ...]
    lc_out: tuple[float, ...]


@dataclass(frozen=True)
class CtmNetwork:
    """Macroscopic merge-road state.

    Single-lane networks use ``cells``; double-lane networks set ``lanes`` and
    leave ``cells`` empty. ``demand``/``left_demand`` are offered main inflow
    per step; the right lane carries the merges.
    """

    cells: tuple[Cell, ...] = ()
    lanes: LanePair | None = None
    merges: tuple[MergeAttachment, ...] = ()
    demand: float = 0.0
    left_demand: float = 0.0
    source_queue: float = 0.0
    left_source_queue: float = 0.0
    merge_queues: tuple[float, ...] = ()
    cumulative_in: float = 0.0
    cumulative_out: float = 0.0
    cumulative_demand: float = 0.0
    lc_right_to_left: float = 0.0
    lc_left_to_right: float = 0.0
    steps: int = 0
    last_in: float = 0.0
    last_out: float = 0.0
    last_flows: tuple[StepFlows, ...] = field(default=(), compare=False, repr=False)

    @property
    def is_double(self) -> bool:
        return self.lanes is not None

    @property
    def dt(self) -> float:
        first = self.lanes.right[0] if self.lanes else self.cells[0]
        return first.params.dt

    def lane_cells(self) -> tuple[tuple[Cell, ...], ...]:
        if self.lanes is None:
            return (self.cells,)
        return (self.lanes.right, self.lanes.left)

    def total_occupancy(self) -> float:
        return sum(c.n for lane in self.lane_cells() for c in lane)

    def total_queued(self) -> float:
        return self.source_queue + self.left_source_queue + sum(self.merge_queues)

    def validate(self) -> None:
        for lane in self.lane_cells():
            if len(lane) < 2:
                raise InvalidNetwork("a lane needs at least 2 cells")
            for i, c in enumerate(lane):
                if c.index != i:
                    raise InvalidNetwork(f"cell {i} carries index {c.index}")
                if not (-_TOL <= c.n <= c.params.N + _TOL):
                    raise InvalidNetwork(f"cell {i} occupancy {c.n} outside [0, {c.params.N}]")
        ncells = len(self.lane_cells()[0])
        targets = [m.target_cell for m in self.merges]
        if len(set(targets)) != len(targets):
            raise InvalidNetwork("two merges share a target cell")
        for t in targets:
            if not 1 <= t < ncells:
                raise InvalidNetwork(f"merge target {t} must be in [1, {ncells - 1}]")
        if len(self.merge_queues) != len(self.merges):
            raise InvalidNetwork("one merge queue per merge attachment is required")
        if min((self.source_queue, self.left_source_queue, *self.merge_queues), default=0.0) < -_TOL:
            raise InvalidNetwork("negative queue")
        if self.demand < 0 or self.left_demand < 0:
            raise InvalidNetwork("negative demand")
        if self.lanes is None and self.left_demand:
            raise InvalidNetwork("left_demand on a single-lane network")


def cell_inflow(upstream_n: float, Q: float, N: float, downstream_n: float, w_over_v: float) -> float:
    return max(0.0, min(upstream_n, Q, w_over_v * (N - downstream_n)))


def apply_merge_penalty(y: float, merge_flow: float, alpha: float, beta: float) -> float:
    return alpha * y if merge_flow > beta else y


def lane_change_flow(n_cur: float, n_tgt: float, delta: float, epsilon: float) -> float:
    lc = delta * (n_cur - n_tgt) + epsilon if n_cur > n_tgt else epsilon
    return min(lc, n_cur)


def build_network(
    n_cells: int = 7,
    fd: TriangularFD = REFERENCE_FD,
    cell_length: float = 100.0,
    dt: float | None = None,
    demand_vph: float = 0.0,
    merges: Sequence[tuple[int, float]] = ((6, 0.0),),
    alpha: float = ALPHA,
    beta: float = BETA,
    double_lane: bool = False,
    left_demand_vph: float = 0.0,
    delta: float = DELTA,
    epsilon: float = EPSILON,
    lc_threshold: float | None = None,
) -> CtmNetwork:
    """Empty merge network with ``merges`` given as ``(target_cell, veh/h)`` pairs.

    Defaults reproduce the seven-cell single-lane road with the ramp joining
    ahead of the last cell.
    """
    params = cell_params(fd, cell_length, dt)
    per_step = params.dt / 3600.0
    lane = tuple(Cell(i, 0.0, params) for i in range(n_cells))
    attachments = tuple(MergeAttachment(t, q * per_step, alpha, beta) for t, q in merges)
    kwargs = dict(
        merges=attachments,
        merge_queues=(0.0,) * len(attachments),
        demand=demand_vph * per_step,
    )
    if double_lane:
        if lc_threshold is None:
            lc_threshold = fd.d_c * cell_length
        net = CtmNetwork(
            lanes=LanePair(lane, lane, delta, epsilon, lc_threshold, alpha),
            left_demand=left_demand_vph * per_step,
            **kwargs,
        )
    else:
        if left_demand_vph:
            raise ValueError("left_demand_vph needs double_lane=True")
        net = CtmNetwork(cells=lane, **kwargs)
    net.validate()
    return net


def _main_flows(lane: Sequence[Cell], source: float, discount: Sequence[bool], alpha: float) -> list[float]:
    """Boundary flows y[0..C] of one lane from the time-t state.

    y[i] enters cell i from upstream (y[0] from the source queue); y[C] exits.
    """
    ncell = len(lane)
    y = [0.0] * (ncell + 1)
    up = source
    for i, c in enumerate(lane):
        p = c.params
        y[i] = cell_inflow(up, p.Q, p.N, c.n, p.w_over_v)
        up = c.n
    y[ncell] = min(lane[-1].n, lane[-1].params.Q)
    for i in range(ncell):
        if discount[i]:
            y[i + 1] *= alpha
    return y


def _junctions(
    lane: Sequence[Cell],
    y: list[float],
    merges: Sequence[MergeAttachment],
    queues: Sequence[float],
) -> list[float]:
    """Resolve merge junctions in place on ``y``; returns admitted merge flow per merge."""
    admitted = []
    for m, queue in zip(merges, queues):
        tgt = lane[m.target_cell]
        p = tgt.params
        offer = min(queue, p.Q)
        receive = max(0.0, min(p.Q, p.w_over_v * (p.N - tgt.n)))
        total = min(y[m.target_cell] + offer, receive)
        total = apply_merge_penalty(total, offer * 60.0 / p.dt, m.alpha, m.beta)
        r = min(offer, total)
        y[m.target_cell] = min(y[m.target_cell], total - r)
        admitted.append(r)
    return admitted


def _advance(lane: Sequence[Cell], y: Sequence[float], extra_in: Sequence[float]) -> list[float]:
    # Occupancy update: n_i(t+1) = n_i(t) + y_i(t) - y_{i+1}(t), plus merge inflow.
    out = []
    for i, c in enumerate(lane):
        n = c.n + y[i] - y[i + 1]
        if extra_in[i]:
            n = n + extra_in[i]
        out.append(n)
    return out


def _merge_in_per_cell(ncell: int, merges: Sequence[MergeAttachment], admitted: Sequence[float]) -> list[float]:
    extra = [0.0] * ncell
    for m, r in zip(merges, admitted):
        extra[m.target_cell] += r
    return extra


def _clip(n: float, N: float) -> float:
    # Absorb float round-off only; anything larger is a bug and is re-raised by validate().
    if -_TOL < n < 0.0:
        return 0.0
    if N < n < N + _TOL:
        return N
    return n


def step_single(net: CtmNetwork) -> CtmNetwork:
    """One synchronous step of the single-lane merge CTM."""
    if net.is_double:
        raise InvalidNetwork("step_single needs a single-lane network")
    net.validate()
    lane = net.cells
    ncell = len(lane)
    source = net.source_queue + net.demand
    queues = [q + m.demand for q, m in zip(net.merge_queues, net.merges)]
    y = _main_flows(lane, source, [False] * ncell, 1.0)
    admitted = _junctions(lane, y, net.merges, queues)
    extra = _merge_in_per_cell(ncell, net.merges, admitted)
    new_n = _advance(lane, y, extra)
    cells = tuple(Cell(c.index, _clip(n, c.params.N), c.params) for c, n in zip(lane, new_n))
    accepted = y[0] + sum(admitted)
    flows = StepFlows(
        inflow=tuple(y[:ncell]),
        outflow=tuple(y[1:]),
        merge_in=tuple(extra),
        lc_in=(0.0,) * ncell,
        lc_out=(0.0,) * ncell,
    )
    return replace(
        net,
        cells=cells,
        source_queue=source - y[0],
        merge_queues=tuple(q - r for q, r in zip(queues, admitted)),
        cumulative_in=net.cumulative_in + accepted,
        cumulative_out=net.cumulative_out + y[ncell],
        cumulative_demand=net.cumulative_demand + net.demand + sum(m.demand for m in net.merges),
        steps=net.steps + 1,
        last_in=accepted,
        last_out=y[ncell],
        last_flows=(flows,),
    )


def step_double(net: CtmNetwork) -> CtmNetwork:
    """One step of the double-lane merge CTM.

    Lane-change volumes and the congestion discount flags come from the
    time-t state. Lane changers first move sideways inside their cell, then
    both lanes advance with the single-lane rules; the right lane carries the
    merges, the left lane is never penalised by merging traffic.
    """
    if not net.is_double:
        raise InvalidNetwork("step_double needs a double-lane network")
    net.validate()
    lp = net.lanes
    right, left = lp.right, lp.left
    ncell = len(right)

    to_left = [lane_change_flow(r.n, l.n, lp.delta, lp.epsilon) for r, l in zip(right, left)]
    to_right = [lane_change_flow(l.n, r.n, lp.delta, lp.epsilon) for r, l in zip(right, left)]
    disc_r = [to_right[i] > 0 and right[i].n > lp.lc_threshold for i in range(ncell)]
    disc_l = [to_left[i] > 0 and left[i].n > lp.lc_threshold for i in range(ncell)]

    # Sideways moves, capped by the free space of the receiving cell.
    a = [min(to_left[i], max(0.0, left[i].params.N - left[i].n)) for i in range(ncell)]
    b = [min(to_right[i], max(0.0, right[i].params.N - right[i].n)) for i in range(ncell)]
    if any(a) or any(b):
        right = tuple(
            Cell(c.index, _clip(c.n - a[i] + b[i], c.params.N), c.params) for i, c in enumerate(right)
        )
        left = tuple(
            Cell(c.index, _clip(c.n - b[i] + a[i], c.params.N), c.params) for i, c in enumerate(left)
        )

    src_r = net.source_queue + net.demand
    src_l = net.left_source_queue + net.left_demand
    queues = [q + m.demand for q, m in zip(net.merge_queues, net.merges)]
    y_r = _main_flows(right, src_r, disc_r, lp.alpha)
    y_l = _main_flows(left, src_l, disc_l, lp.alpha)
    admitted = _junctions(right, y_r, net.merges, queues)
    merge_r = _merge_in_per_cell(ncell, net.merges, admitted)
    n_r = _advance(right, y_r, merge_r)
    n_l = _advance(left, y_l, [0.0] * ncell)

    new_right = tuple(Cell(c.index, _clip(n, c.params.N), c.params) for c, n in zip(right, n_r))
    new_left = tuple(Cell(c.index, _clip(n, c.params.N), c.params) for c, n in zip(left, n_l))
    accepted = y_r[0] + y_l[0] + sum(admitted)
    exited = y_r[ncell] + y_l[ncell]
    flows = (
        StepFlows(tuple(y_r[:ncell]), tuple(y_r[1:]), tuple(merge_r), tuple(b), tuple(a)),
        StepFlows(tuple(y_l[:ncell]), tuple(y_l[1:]), (0.0,) * ncell, tuple(a), tuple(b)),
    )
    return replace(
        net,
        lanes=replace(lp, right=new_right, left=new_left),
        source_queue=src_r - y_r[0],
        left_source_queue=src_l - y_l[0],
        merge_queues=tuple(q - r for q, r in zip(queues, admitted)),
        cumulative_in=net.cumulative_in + accepted,
        cumulative_out=net.cumulative_out + exited,
        cumulative_demand=net.cumulative_demand + net.demand + net.left_demand + sum(m.demand for m in net.merges),
        lc_right_to_left=net.lc_right_to_left + sum(a),
        lc_left_to_right=net.lc_left_to_right + sum(b),
        steps=net.steps + 1,
        last_in=accepted,
        last_out=exited,
        last_flows=flows,
    )


def step(net: CtmNetwork) -> CtmNetwork:
    return step_double(net) if net.is_double else step_single(net)


@dataclass(frozen=True)
class SteadyState:
    inflow: float  # veh/h, accepted (main + merge)
    outflow: float  # veh/h
    steps: int
    converged: bool
    amplitude: float  # veh/step, last change between windows
    network: CtmNetwork = field(compare=False, repr=False)

    @property
    def nonconvergent(self) -> bool:
        return not self.converged


def run_to_steady_state(net: CtmNetwork, tol: float = 1e-3, max_steps: int = 5000) -> SteadyState:
    """Step until windowed accepted inflow and outflow both settle.

    Windows are ``STEADY_WINDOW`` steps long; convergence means both window
    means moved by less than ``tol`` veh/step since the previous window and
    they agree with each other to ``tol`` (no net storage change). A run
    that hits ``max_steps`` is returned with ``converged=False``.
    """
    if tol <= 0 or max_steps < 1:
        raise ValueError("need tol > 0 and max_steps >= 1")
    advance = step_double if net.is_double else step_single
    prev = None
    amp = float("inf")
    win_in = win_out = 0.0
    k = 0
    mean_in = mean_out = 0.0
    for k in range(1, max_steps + 1):
        net = advance(net)
        win_in += net.last_in
        win_out += net.last_out
        if k % STEADY_WINDOW == 0:
            mean_in, mean_out = win_in / STEADY_WINDOW, win_out / STEADY_WINDOW
            win_in = win_out = 0.0
            if prev is not None:
                amp = max(abs(mean_in - prev[0]), abs(mean_out - prev[1]))
                # Storage must also be stationary, otherwise a filling road looks settled.
                if amp < tol and abs(mean_in - mean_out) < tol:
                    break
            elif net.total_occupancy() == 0.0 and mean_in == 0.0 and mean_out == 0.0:
                amp = 0.0
                break
            prev = (mean_in, mean_out)
    if k % STEADY_WINDOW:
        # Partial final window: report it rather than a stale one.
        n = k % STEADY_WINDOW
        mean_in, mean_out = win_in / n, win_out / n
    scale = 3600.0 / net.dt
    converged = amp < tol and abs(mean_in - mean_out) < tol
    return SteadyState(mean_in * scale, mean_out * scale, k, converged, amp if prev else 0.0, net)


TRACE_HEADER = ("step", "cell", "lane", "occupancy", "inflow", "outflow", "lane_change_in")


def trace_rows(net: CtmNetwork) -> list[tuple]:
    """Trace rows for the step that produced ``net`` (lane 0 = right/single)."""
    rows = []
    for lane_idx, (cells, flows) in enumerate(zip(net.lane_cells(), net.last_flows)):
        for c in cells:
            i = c.index
            rows.append(
                (
                    net.steps,
                    i,
                    lane_idx,
                    c.n,
                    flows.inflow[i] + flows.merge_in[i],
                    flows.outflow[i],
                    flows.lc_in[i],
                )
            )
    return rows


def write_trace(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow([r[0], r[1], r[2], *(f"{x:.10g}" for x in r[3:])])
    return buf.getvalue()


def random_network(rng: random.Random) -> CtmNetwork:
    """A randomly configured merge network for fuzzing."""
    double = rng.random() < 0.5
    n_cells = rng.randint(3, 10)
    merges = []
    for t in rng.sample(range(1, n_cells), k=rng.randint(0, min(2, n_cells - 1))):
        merges.append((t, rng.uniform(0, 600)))
    return build_network(
        n_cells=n_cells,
        demand_vph=rng.uniform(0, 3500),
        merges=sorted(merges),
        double_lane=double,
        left_demand_vph=rng.uniform(0, 2500) if double else 0.0,
        dt=(100 / 21) * rng.choice([1.0, 0.5, 0.8]),
    )
