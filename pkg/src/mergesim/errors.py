"""Exception hierarchy shared by the simulation engines and the CLI."""


class MergeSimError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MergeSimError):
    """Invalid or inconsistent configuration."""


class InsufficientData(MergeSimError):
    pass


class DegenerateFit(MergeSimError):
    pass


class CflViolation(MergeSimError):
    """Time step lets a vehicle cross more than one cell."""


class InvalidNetwork(MergeSimError):
    pass


class NonConvergence(MergeSimError):
    """Steady state not reached within the step budget."""


class SimulationError(MergeSimError):
    """Base for failures raised while a microsimulation is running."""


class CollisionDetected(SimulationError):
    def __init__(self, time, lane, follower_id, leader_id, gap):
        self.time = time
        self.lane = lane
        self.follower_id = follower_id
        self.leader_id = leader_id
        self.gap = gap
        super().__init__(
            f"collision at t={time:.1f}s on lane {lane}: vehicle {follower_id} "
            f"is {gap:.3f} m behind vehicle {leader_id}"
        )


class UnknownVehicle(MergeSimError):
    pass


class EmptyWorld(MergeSimError):
    pass


class InsufficientSeeds(MergeSimError):
    pass
