"""Exception types shared across the package."""


class NullgradError(Exception):
    """Base class for all package errors."""


class UnknownNode(NullgradError):
    """An edge, actuator or goal references a node id that does not exist."""


class DimensionMismatch(NullgradError):
    """A vector or jacobian has a shape inconsistent with the declared dims."""


class NonFiniteState(NullgradError):
    """An estimator update produced NaN or Inf."""


class NoPath(NullgradError):
    """No gradient path exists between a goal and the requested terminal."""


class NonFiniteGradient(NullgradError):
    """A propagated gradient contains NaN or Inf."""


class DegenerateGradient(NullgradError):
    """A gradient is too small to define a direction or a projector."""


class EmptyInput(NullgradError):
    """An operation that needs at least one gradient received none."""


class DegeneratePolygon(NullgradError):
    """A polygon has fewer than three vertices or zero-length sides."""


class DegenerateConfiguration(NullgradError):
    """Point registration received coincident keypoints."""


class NonFiniteAction(NullgradError):
    """The control update produced a NaN or Inf action."""


class InfeasibleScenario(NullgradError):
    """Scenario rejection sampling exhausted its attempt budget."""


class IoFailure(NullgradError):
    """Report export could not write its output files."""
