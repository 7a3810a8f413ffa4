from typing import List


class LinkDomainError(ValueError):
    """
    Raised when a mean lies outside the domain of a link function.
    """


class DegenerateVarianceError(ValueError):
    """
    Raised when both arm variances are zero in an allocation formula.
    """


class PropensityResolutionError(KeyError):
    """
    Raised when a strict propensity table has no entry for a covariate cell.
    """


class EstimationError(RuntimeError):
    """
    Raised when trial data cannot support an estimate, e.g. an empty arm in a stage.
    """


class ConfigError(ValueError):
    """
    Raised when a study configuration is malformed or fails validation.

    :param issues: Every problem found, in discovery order.
    """

    def __init__(self, issues: List[str]):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))
