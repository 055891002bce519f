"""INI loading with overrides, and parsing of individual values."""

import pytest

from mergesim.config import DEFAULTS, ScenarioConfig, load, parse_grid, parse_ramps, parse_seeds
from mergesim.errors import ConfigError
from mergesim.microsim import Ramp


def test_defaults_match_dataclass_defaults():
    cfg = load().scenario
    assert cfg == ScenarioConfig()


def test_default_scenario_values():
    cfg = load().scenario
    assert (cfg.plan.main_inflow, cfg.plan.merge_inflow, cfg.plan.avp) == (1800.0, 200.0, 0.0)
    assert cfg.seeds == tuple(range(1, 21))
    assert cfg.geometry.ramps == (Ramp(600.0, 200.0),)
    assert (cfg.ctm.alpha, cfg.ctm.beta, cfg.ctm.delta, cfg.ctm.epsilon) == (0.65, 1.0, 0.15, 0.05)
    assert cfg.heuristic.critical_density == cfg.fd.d_c


def test_file_then_overrides(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text("[demand]\nmain_inflow = 1500\navp = 10\n[scenario]\npolicy = heuristic_av\n")
    cfg = load(p, ["demand.main_inflow=1600", "scenario.seeds=1-3,7"]).scenario
    assert cfg.plan.main_inflow == 1600.0
    assert cfg.plan.avp == 10.0
    assert cfg.policy == "heuristic_av"
    assert cfg.seeds == (1, 2, 3, 7)


@pytest.mark.parametrize(
    "text",
    ["[bogus]\nx = 1\n", "[demand]\nmain_flow = 1\n"],
)
def test_unknown_section_or_key(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load(p)


@pytest.mark.parametrize("item", ["demand.nope=1", "nosection.key=1", "main_inflow=1", "demand.main_inflow"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        load(overrides=[item])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "absent.ini")


@pytest.mark.parametrize(
    "item",
    ["demand.main_inflow=lots", "scenario.engine=sumo", "scenario.horizon=100", "geometry.lane_count=1.5", "demand.poisson=maybe"],
)
def test_bad_values(item):
    with pytest.raises(ConfigError):
        load(overrides=[item])


def test_merge_queueing_false_unsupported():
    with pytest.raises(ConfigError, match="merge_queueing"):
        load(overrides=["ctm.merge_queueing=false"])


def test_merge_split_divides_between_ramps():
    r = load(overrides=["geometry.main_length=1500", "geometry.ramps=500:250,900:250", "demand.merge_split=true"])
    assert r.scenario.plan.merge_inflow == 100.0
    assert r.sweep.merge_split


@pytest.mark.parametrize(
    "text, expected",
    [("1-3", (1, 2, 3)), ("5", (5,)), ("1-2, 9", (1, 2, 9)), ("4,2", (4, 2))],
)
def test_parse_seeds(text, expected):
    assert parse_seeds(text) == expected


@pytest.mark.parametrize("text", ["", "3-1", "a", "1-b"])
def test_parse_seeds_bad(text):
    with pytest.raises(ConfigError):
        parse_seeds(text)


def test_parse_grid():
    assert parse_grid("1400:2000:100") == (1400, 1500, 1600, 1700, 1800, 1900, 2000)
    assert parse_grid("160,200") == (160.0, 200.0)
    for bad in ("1:0:1", "1:2:0", "x,y"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_parse_ramps():
    assert parse_ramps("600:200") == (Ramp(600.0, 200.0),)
    assert parse_ramps("") == ()
    with pytest.raises(ConfigError):
        parse_ramps("600:long")


def test_dump_round_trip(tmp_path):
    r = load(overrides=["demand.avp=25", "policy.tau=3"])
    p = tmp_path / "resolved.ini"
    p.write_text(r.dump())
    again = load(p)
    assert again.scenario == r.scenario
    assert again.dump() == r.dump()


def test_dump_lists_every_key():
    text = load().dump()
    for section, keys in DEFAULTS.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"\n{key} =" in text
