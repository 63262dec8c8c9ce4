"""Exception hierarchy shared across the planner."""


class PlannerError(Exception):
    """Base class for all planner errors."""


class InputError(PlannerError, ValueError):
    """Invalid user-supplied value or document."""


class ParseError(InputError):
    """Malformed text input (CSV/JSON)."""


class ConfigurationError(PlannerError):
    """Inputs are individually valid but cannot be combined."""


class InfeasibleError(ConfigurationError):
    """A parallel configuration cannot be placed on the cluster."""


class ModelError(PlannerError):
    """A fitted memory model produced an unusable value."""
