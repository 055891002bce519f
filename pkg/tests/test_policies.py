"""Observation and reward functions, plus the heuristic AV controller."""

import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergesim.errors import EmptyWorld, UnknownVehicle
from mergesim.microsim import RAMP, DriverParams, RoadGeometry, SpawnPlan, Vehicle, World, idm_accel
from mergesim.policies import (
    OBS_FIELDS,
    TRACE_HEADER,
    AvTracer,
    HeuristicController,
    HeuristicParams,
    Observation,
    RewardParams,
    av_accel,
    idm_controller,
    observe,
    reward,
)

P = DriverParams()
EMPTY = SpawnPlan(main_inflow=0.0, merge_inflow=0.0)
OFF = HeuristicParams(shaping=False, anticipation=False)


def obs(**kw) -> Observation:
    base = dict.fromkeys(OBS_FIELDS, 1.0)
    base.update(kw)
    return Observation(**base)


# --------------------------------------------------------------- observation


def test_alone_on_the_road():
    w = World(RoadGeometry(), EMPTY)
    w.place(Vehicle(1, "av", 0, 650.0, 14.0))
    o = observe(w, 1)
    assert o.ego_speed == pytest.approx(14.0 / 21.0)
    for name in OBS_FIELDS:
        if name != "ego_speed":
            assert getattr(o, name) == 1.0


def test_leader_distance_normalised():
    w = World(RoadGeometry(), EMPTY)
    w.place(Vehicle(1, "av", 0, 200.0, 10.0))
    w.place(Vehicle(2, "human", 0, 305.0, 7.0))  # rear bumper 100 m ahead
    o = observe(w, 1)
    assert o.leader_distance == pytest.approx(0.5)
    assert o.leader_speed == pytest.approx(7.0 / 21.0)
    assert o.distance_to_merge == 1.0  # junction 400 m ahead, beyond the sensing range


def test_follower_and_merge_fields():
    w = World(RoadGeometry(), EMPTY)
    w.place(Vehicle(1, "av", 0, 500.0, 10.0))
    w.place(Vehicle(2, "human", 0, 455.0, 12.0))
    w.place(Vehicle(3, "human", RAMP, 160.0, 8.0, ramp=0))
    w.place(Vehicle(4, "human", RAMP, 100.0, 9.0, ramp=0))
    o = observe(w, 1)
    assert o.follower_distance == pytest.approx(40.0 / 200.0)
    assert o.follower_speed == pytest.approx(12.0 / 21.0)
    assert o.distance_to_merge == pytest.approx(0.5)
    # The ramp vehicle closest to its junction is reported.
    assert o.merging_vehicle_distance_to_junction == pytest.approx(40.0 / 200.0)
    assert o.merging_vehicle_speed == pytest.approx(8.0 / 21.0)


def test_past_last_junction():
    w = World(RoadGeometry(), EMPTY)
    w.place(Vehicle(1, "av", 0, 640.0, 10.0))
    w.place(Vehicle(2, "human", RAMP, 150.0, 10.0, ramp=0))
    o = observe(w, 1)
    assert (o.distance_to_merge, o.merging_vehicle_speed, o.merging_vehicle_distance_to_junction) == (1.0, 1.0, 1.0)


def test_observe_unknown():
    with pytest.raises(UnknownVehicle):
        observe(World(RoadGeometry(), EMPTY), 9)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 10_000),
    st.floats(0, 100),
    st.sampled_from(["single", "double", "tworamp"]),
    st.integers(10, 300),
)
def test_observation_fields_in_unit_interval(seed, avp, shape, steps):
    geometry = {
        "single": RoadGeometry(),
        "double": RoadGeometry.double_lane(),
        "tworamp": RoadGeometry.two_ramp(200.0),
    }[shape]
    ctrl = HeuristicController()
    w = World(geometry, SpawnPlan(avp=avp, seed=seed), av_controller=ctrl, av_yield=ctrl.yield_rule)
    for _ in range(steps):
        w.step()
        for v in w.vehicles():
            if v.kind == "av":
                o = observe(w, v.id)
                assert all(0.0 <= x <= 1.0 for x in o.as_tuple())
                assert observe(w, v.id) == o  # pure


# -------------------------------------------------------------------- reward


def test_reward_hand_cases():
    p = RewardParams()
    assert (p.eta, p.bonus) == (0.9, 20.0)
    assert reward([], True, p) == 20.0
    assert reward([21.0] * 5, False, p) == pytest.approx(-0.8, abs=1e-12)
    assert reward([0.0] * 5, False, p) == pytest.approx(-0.9, abs=1e-12)


def test_reward_empty_world():
    with pytest.raises(EmptyWorld):
        reward([], False)


def test_reward_params_validated():
    with pytest.raises(ValueError):
        RewardParams(eta=1.5)


@given(st.lists(st.floats(0, 21), min_size=1, max_size=30), st.integers(0, 29), st.floats(0, 5))
def test_reward_monotone_in_speed(speeds, i, bump):
    i %= len(speeds)
    faster = list(speeds)
    faster[i] += bump
    assert reward(faster, False) >= reward(speeds, False)


# ---------------------------------------------------------------- controller


def test_free_road_at_desired_speed():
    assert av_accel(obs(ego_speed=1.0), P) == 0.0


@pytest.mark.parametrize("gap, v, v_lead", [(30.0, 15.0, 10.0), (120.0, 20.0, 5.0), (26.0, 10.0, 12.0)])
def test_far_leader_matches_idm(gap, v, v_lead):
    o = obs(ego_speed=v / 21.0, leader_distance=gap / 200.0, leader_speed=v_lead / 21.0)
    assert av_accel(o, P) == pytest.approx(idm_accel(v, gap, v_lead, P), rel=1e-12)


def test_shaping_opens_gap_when_closing():
    o = obs(ego_speed=10.0 / 21.0, leader_distance=18.0 / 200.0, leader_speed=6.0 / 21.0)
    assert av_accel(o, P) < idm_accel(10.0, 18.0, 6.0, P)


@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_actuator_limits(fields):
    a = av_accel(Observation(*fields), P)
    assert -4.5 <= a <= 2.6


@given(st.floats(0, 1), st.floats(0.001, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_disabled_heuristic_is_idm(ego, gap, v_lead, dm, vr, dr):
    o = obs(
        ego_speed=ego,
        leader_distance=gap,
        leader_speed=v_lead,
        distance_to_merge=dm,
        merging_vehicle_speed=vr,
        merging_vehicle_distance_to_junction=dr,
    )
    expected = idm_accel(ego * 21.0, math.inf if gap >= 1.0 else gap * 200.0, v_lead * 21.0, P)
    assert av_accel(o, P, OFF) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_anticipation_eases_off_before_junction():
    # Merging vehicle arrives at about the same time as the AV.
    o = obs(
        ego_speed=15.0 / 21.0,
        distance_to_merge=60.0 / 200.0,
        merging_vehicle_speed=12.0 / 21.0,
        merging_vehicle_distance_to_junction=50.0 / 200.0,
    )
    a = av_accel(o, P)
    assert -1.0 <= a < av_accel(o, P, HeuristicParams(anticipation=False))


def test_yield_rule():
    assert HeuristicController().yield_rule == (0.0, 4.0)
    assert HeuristicController(OFF).yield_rule is None


def test_disabled_fleet_matches_human_baseline():
    plan = SpawnPlan(main_inflow=1800, merge_inflow=200, seed=3)
    ctrl = HeuristicController(OFF)
    human = World(RoadGeometry(), plan)
    fleet = World(RoadGeometry(), replace(plan, avp=30.0), av_controller=ctrl, av_yield=ctrl.yield_rule)
    human.run(900.0)
    fleet.run(900.0)
    assert sum(v.kind == "av" for v in fleet.vehicles()) > 0
    assert fleet.exit_times == human.exit_times
    # Speeds pass through the normalised observation, so allow round-off.
    assert fleet.speed_sum == pytest.approx(human.speed_sum, rel=1e-12)


def test_idm_controller_is_human():
    plan = SpawnPlan(main_inflow=1800, merge_inflow=200, avp=20, seed=8)
    a = World(RoadGeometry(), plan, av_controller=idm_controller)
    b = World(RoadGeometry(), plan)
    a.run(600.0)
    b.run(600.0)
    assert a.exit_times == b.exit_times


def test_tracer_rows_and_bonus():
    ctrl = HeuristicController()
    tracer = AvTracer()
    w = World(RoadGeometry(), SpawnPlan(avp=50, seed=2), av_controller=ctrl, av_yield=ctrl.yield_rule, on_step=tracer)
    w.run(200.0)
    assert tracer.rows
    assert all(len(r) == len(TRACE_HEADER) for r in tracer.rows)
    assert any(r[-1] == 20.0 for r in tracer.rows)
    assert all(r[-1] == 20.0 or -0.9 <= r[-1] <= -0.8 for r in tracer.rows)
