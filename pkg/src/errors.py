"""Error kinds raised across the simulator.

Value-like problems (bad shapes, bad config, infeasible budgets, malformed
packages) subclass ValueError; state and numeric failures subclass RuntimeError.
"""


class MoEFedError(Exception):
    """Base class for every simulator error."""


class DimensionError(MoEFedError, ValueError):
    """Tensor shapes do not conform for an operation."""


class InputError(MoEFedError, ValueError):
    """An operation received an empty or out-of-range input."""


class ConfigError(MoEFedError, ValueError):
    """A configuration value violates its documented bounds."""


class CoverageError(MoEFedError, ValueError):
    """An expert set or budget cannot cover every MoE layer."""


class InfeasibleClientError(MoEFedError, ValueError):
    """A client's resources cannot host the model at all."""


class ProtocolError(MoEFedError, ValueError):
    """An update package or exchange message is inconsistent."""


class DegenerateRoundError(MoEFedError, ValueError):
    """A round has no dominant experts to compare against."""


class NumericError(MoEFedError, RuntimeError):
    """A NaN or infinity reached a tensor or gradient."""


class StateError(MoEFedError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""
