"""Exception types shared across the toolkit."""


class GridlocError(Exception):
    """Base class for all toolkit errors."""


class UsageError(GridlocError):
    """Bad command line arguments or malformed configuration."""


class DataError(GridlocError):
    """Missing or inconsistent input artifacts (logs, maps, tables)."""


class DivergenceError(GridlocError):
    """The particle filter or an optimizer lost track of the state."""


class OptimizationError(GridlocError):
    """Pose-graph optimization could not proceed (gauge, singularity)."""


class SimulationError(GridlocError):
    """The synthetic world or log generator hit an impossible request."""
