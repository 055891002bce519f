"""Extended CTM: flow rules, single/double-lane steps, steady state, conservation."""

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergesim import ctm
from mergesim.ctm import (
    Cell,
    CtmNetwork,
    apply_merge_penalty,
    build_network,
    cell_inflow,
    lane_change_flow,
    run_to_steady_state,
    step,
    step_double,
    step_single,
)
from mergesim.errors import CflViolation, InvalidNetwork
from mergesim.fd import REFERENCE_FD, cell_params

P = cell_params(REFERENCE_FD, 100.0)


def with_occupancy(net: CtmNetwork, ns) -> CtmNetwork:
    return replace(net, cells=tuple(Cell(c.index, n, c.params) for c, n in zip(net.cells, ns)))


# ---------------------------------------------------------------- flow rules


@pytest.mark.parametrize(
    "args, expected",
    [((2, 4, 14, 0, 0.4), 2.0), ((10, 4, 14, 14, 0.4), 0.0), ((10, 4, 14, 3, 0.4), 4.0)],
)
def test_cell_inflow_examples(args, expected):
    assert cell_inflow(*args) == pytest.approx(expected, abs=1e-12)


def test_cell_inflow_space_bound():
    assert cell_inflow(10, 4, 14, 4, 0.4) == pytest.approx(min(10, 4, 0.4 * 10))


@given(
    st.floats(0, 20), st.floats(0.1, 10), st.floats(1, 30), st.floats(0, 1), st.floats(0, 1), st.floats(0.05, 1)
)
def test_monotone_blocking(up, Q, N, f1, f2, wv):
    lo, hi = sorted((f1 * N, f2 * N))
    assert cell_inflow(up, Q, N, hi, wv) <= cell_inflow(up, Q, N, lo, wv)
    assert cell_inflow(up, Q, N, lo, wv) >= 0.0


@pytest.mark.parametrize(
    "args, expected",
    [((4, 2, 0.65, 1), 2.6), ((4, 1, 0.65, 1), 4.0), ((0, 5, 0.65, 1), 0.0)],
)
def test_merge_penalty_examples(args, expected):
    assert apply_merge_penalty(*args) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "args, expected",
    [((8, 4, 0.15, 0.05), 0.65), ((4, 8, 0.15, 0.05), 0.05), ((0.02, 0, 0.15, 0.05), 0.02)],
)
def test_lane_change_flow_examples(args, expected):
    assert lane_change_flow(*args) == pytest.approx(expected, abs=1e-12)


def test_reference_constants():
    assert (ctm.ALPHA, ctm.BETA, ctm.DELTA, ctm.EPSILON) == (0.65, 1.0, 0.15, 0.05)
    assert P.Q == pytest.approx(4.0, rel=1e-12)
    assert P.N == pytest.approx(14.0, rel=1e-12)
    assert P.w_over_v == pytest.approx(0.4, rel=1e-12)
    assert build_network(double_lane=True).lanes.lc_threshold == pytest.approx(4.0)


# --------------------------------------------------------------- single lane


def test_occupancy_update_arithmetic():
    # Middle cell: n = 5, inflow min(2, 4, 0.4*9) = 2, outflow min(5, 4, 0.4*(14-6.5)) = 3.
    net = with_occupancy(build_network(n_cells=3, merges=()), (2.0, 5.0, 6.5))
    nxt = step_single(net)
    assert nxt.cells[1].n == pytest.approx(4.0, abs=1e-12)
    assert nxt.last_flows[0].inflow[1] == pytest.approx(2.0)
    assert nxt.last_flows[0].outflow[1] == pytest.approx(3.0)


def test_empty_network_is_fixed_point():
    net = build_network()
    nxt = step_single(net)
    assert [c.n for c in nxt.cells] == [0.0] * 7
    assert nxt.source_queue == 0.0 and nxt.merge_queues == (0.0,)
    assert nxt.cumulative_in == nxt.cumulative_out == 0.0


def test_step_does_not_mutate():
    net = build_network(demand_vph=1800, merges=((6, 200),))
    before = repr(net)
    step_single(net)
    assert repr(net) == before


def test_merge_penalty_binds_at_high_demand():
    def outflow(merge):
        net = build_network(demand_vph=2000, merges=((6, merge),))
        total = 0.0
        for k in range(500):
            net = step_single(net)
            if k >= 400:
                total += net.last_out
        return total / 100

    assert outflow(200) < outflow(0)


def test_merge_below_threshold_not_penalised():
    # 50 veh/h is under one vehicle per minute.
    ss = run_to_steady_state(build_network(demand_vph=1800, merges=((6, 50),)))
    assert ss.outflow == pytest.approx(1850, rel=1e-3)


def test_step_single_rejects_double():
    with pytest.raises(InvalidNetwork):
        step_single(build_network(double_lane=True))


def test_invalid_occupancy_rejected():
    net = with_occupancy(build_network(), (15.0,) + (0.0,) * 6)
    with pytest.raises(InvalidNetwork):
        step(net)


def test_cfl_violation_on_build():
    with pytest.raises(CflViolation):
        build_network(dt=10.0)


def test_bad_merge_target_rejected():
    with pytest.raises(InvalidNetwork):
        build_network(n_cells=7, merges=((7, 100),))


# ---------------------------------------------------------------- double lane


def test_symmetric_lanes_stay_symmetric():
    net = build_network(double_lane=True, merges=(), demand_vph=1500, left_demand_vph=1500, epsilon=0.0)
    for _ in range(100):
        net = step_double(net)
        for r, l in zip(net.lanes.right, net.lanes.left):
            assert r.n == l.n
    assert net.lc_right_to_left == net.lc_left_to_right


def test_right_to_left_dominates():
    net = build_network(double_lane=True, demand_vph=1900, left_demand_vph=1400, merges=((6, 200),))
    for _ in range(500):
        net = step_double(net)
    assert net.lc_right_to_left > net.lc_left_to_right


def test_zero_demand_double_lane_drains():
    net = build_network(double_lane=True, merges=())
    for _ in range(200):
        net = step_double(net)
    assert net.total_occupancy() == 0.0
    loaded = build_network(double_lane=True, merges=())
    cells = tuple(Cell(c.index, 6.0, c.params) for c in loaded.lanes.right)
    loaded = replace(loaded, lanes=replace(loaded.lanes, right=cells, left=cells))
    for _ in range(200):
        loaded = step_double(loaded)
    assert loaded.total_occupancy() < 1e-6


def test_lane_change_flows_bounded_by_epsilon_when_balanced():
    net = build_network(double_lane=True, merges=())
    cells = tuple(Cell(c.index, 3.0, c.params) for c in net.lanes.right)
    net = replace(net, lanes=replace(net.lanes, right=cells, left=cells))
    nxt = step_double(net)
    for flows in nxt.last_flows:
        assert all(x <= ctm.EPSILON + 1e-12 for x in flows.lc_in)


@pytest.mark.parametrize("demand, merge", [(1400, 160), (1800, 200), (2000, 200), (900, 0)])
def test_double_lane_reduces_to_single(demand, merge):
    single = build_network(demand_vph=demand, merges=((6, merge),))
    double = build_network(
        demand_vph=demand, merges=((6, merge),), double_lane=True, delta=0.0, epsilon=0.0
    )
    for _ in range(300):
        single = step_single(single)
        double = step_double(double)
        assert [c.n for c in double.lanes.right] == [c.n for c in single.cells]
        assert all(c.n == 0.0 for c in double.lanes.left)
        assert double.cumulative_out == single.cumulative_out


# --------------------------------------------------------------- steady state


def test_empty_steady_state_after_first_window():
    ss = run_to_steady_state(build_network())
    assert (ss.inflow, ss.outflow) == (0.0, 0.0)
    assert ss.steps == ctm.STEADY_WINDOW and ss.converged


def test_free_flow_passes_through():
    ss = run_to_steady_state(build_network(demand_vph=1400, merges=((6, 160),)))
    assert ss.converged
    assert abs(ss.inflow - ss.outflow) < 0.02 * ss.inflow
    assert ss.outflow == pytest.approx(1560, rel=1e-3)


# Regression pin from the first validated run; the saturated level is the
# penalised capacity alpha * Q per step = 0.65 * 4 * 3600 / (100/21) veh/h.
SATURATED = 0.65 * 4.0 * 3600.0 / (100.0 / 21.0)
PINNED_MERGE_200 = {1400: 1600.0, 1500: 1700.0, 1600: 1800.0, 1700: 1900.0, 1800: SATURATED, 1900: SATURATED, 2000: SATURATED}


def test_saturation_oracle():
    assert SATURATED == pytest.approx(1965.6, rel=1e-12)


@pytest.mark.parametrize("main, expected", sorted(PINNED_MERGE_200.items()))
def test_pinned_outflow_curve(main, expected):
    ss = run_to_steady_state(build_network(demand_vph=main, merges=((6, 200),)))
    assert ss.converged
    assert ss.outflow == pytest.approx(expected, rel=1e-6)


def test_nonconvergence_is_flagged_not_raised():
    ss = run_to_steady_state(build_network(demand_vph=1800, merges=((6, 200),)), max_steps=60)
    assert ss.nonconvergent and ss.steps == 60


def test_steady_state_bad_args():
    with pytest.raises(ValueError):
        run_to_steady_state(build_network(), tol=0.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(2000, 3500), st.floats(70, 600))
def test_merge_penalty_monotone_when_saturated(main, merge):
    with_merge = run_to_steady_state(build_network(demand_vph=main, merges=((6, merge),)))
    without = run_to_steady_state(build_network(demand_vph=main, merges=((6, 0.0),)))
    assert with_merge.outflow <= without.outflow + 1e-9


# ------------------------------------------------------ conservation and fuzz


def _check_step(prev: CtmNetwork, nxt: CtmNetwork) -> None:
    d_occ = nxt.total_occupancy() - prev.total_occupancy()
    assert (nxt.cumulative_in - prev.cumulative_in) - (nxt.cumulative_out - prev.cumulative_out) == pytest.approx(
        d_occ, abs=1e-9
    )
    d_queue = nxt.total_queued() - prev.total_queued()
    assert nxt.cumulative_demand - prev.cumulative_demand == pytest.approx(
        nxt.cumulative_in - prev.cumulative_in + d_queue, abs=1e-9
    )
    for lane in nxt.lane_cells():
        for c in lane:
            assert 0.0 <= c.n <= c.params.N
    for flows in nxt.last_flows:
        for seq in (flows.inflow, flows.outflow, flows.merge_in, flows.lc_in, flows.lc_out):
            assert all(x >= 0.0 for x in seq)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fuzz_conservation_bounds_determinism(seed):
    net0 = ctm.random_network(random.Random(seed))
    a = net0
    for _ in range(120):
        nxt = step(a)
        _check_step(a, nxt)
        a = nxt
    b = net0
    for _ in range(120):
        b = step(b)
    assert a == b


def test_trace_rows_and_csv():
    net = step(build_network(demand_vph=1800, merges=((6, 200),), double_lane=True))
    rows = ctm.trace_rows(net)
    assert len(rows) == 14
    text = ctm.write_trace(rows)
    assert text.splitlines()[0] == "step,cell,lane,occupancy,inflow,outflow,lane_change_in"
    assert {r[2] for r in rows} == {0, 1}
