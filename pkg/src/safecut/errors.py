"""Exception types shared across the toolkit."""


class SafecutError(Exception):
    """Base class for all toolkit errors."""


class NumericalDivergence(SafecutError):
    """A rollout or solver produced non-finite values."""


class DomainViolation(SafecutError):
    """Barrier evaluated where the safety value is non-negative."""


class InfeasibleStart(SafecutError):
    """Warm start violates the safety constraint."""


class DimensionError(SafecutError):
    """Mismatched vector/matrix dimensions."""


class EmptyBox(SafecutError):
    """Box bounds with lower >= upper in some component."""


class DegenerateCorrection(SafecutError):
    """A correction that carries no direction information."""


class InfeasiblePolytope(SafecutError):
    """Polytope has empty interior; no inscribed ellipsoid exists."""


class UnboundedPolytope(SafecutError):
    """Polytope is unbounded; the inscribed-ellipsoid problem diverges."""


class EmptyHypothesis(SafecutError):
    """A cut emptied the hypothesis space."""


class InvalidBudget(SafecutError):
    """Correction-budget formula has no valid value for these inputs."""


class NotSupervised(SafecutError):
    """Ground-truth query on an environment without a known truth."""


class UnsupportedSlice(SafecutError):
    """Grid export slice is not a valid 2D slice."""


class ConfigError(SafecutError):
    """Experiment configuration failed validation."""


class AlignmentAborted(SafecutError):
    """The learning loop hit an unrecoverable condition."""
