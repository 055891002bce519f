"""IDM-based microsimulation of merge roads."""

from .geometry import Arrival, Ramp, RoadGeometry, SpawnPlan, Spawner
from .idm import DriverParams, desired_gap, equilibrium_flow, equilibrium_speed, idm_accel, idm_accel_raw
from .world import (
    EVENT_HEADER,
    PROFILE_HEADER,
    RAMP,
    LaneChangeParams,
    MergeParams,
    Vehicle,
    VirtualLeader,
    World,
    lane_change_decide,
    merge_conflict_leader,
    profile_cells,
)

__all__ = [
    "Arrival",
    "DriverParams",
    "EVENT_HEADER",
    "LaneChangeParams",
    "MergeParams",
    "PROFILE_HEADER",
    "RAMP",
    "Ramp",
    "RoadGeometry",
    "SpawnPlan",
    "Spawner",
    "Vehicle",
    "VirtualLeader",
    "World",
    "desired_gap",
    "equilibrium_flow",
    "equilibrium_speed",
    "idm_accel",
    "idm_accel_raw",
    "lane_change_decide",
    "merge_conflict_leader",
    "profile_cells",
]
