"""Exception types raised across the package."""


class GPDesignError(Exception):
    """Base class for all package errors."""


class FactorizationFailure(GPDesignError):
    """Covariance matrix is not positive definite even after maximal jitter."""


class SingularNormalMatrix(GPDesignError):
    """Gauss-Newton normal matrix could not be factorized."""


class SingularTransport(GPDesignError):
    """Unregularized error-transport factor hit a singular normal matrix."""


class InvalidRegime(GPDesignError):
    """Exact radius bound requested outside its domain of validity."""


class RefinementOrderViolation(GPDesignError):
    """A refinement asked for a looser tolerance than already achieved."""


class InfeasibleBudget(GPDesignError):
    """Budget is smaller than the work already committed to the lower bounds."""


class ExhaustedCandidates(GPDesignError):
    """No admissible candidate point could be generated."""


class DomainViolation(GPDesignError):
    """Evaluation requested outside the parameter domain."""


class ConfigError(GPDesignError):
    """Invalid run configuration."""
