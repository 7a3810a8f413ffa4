from abc import ABC, abstractmethod

import numpy as np

from design_types import DesignClass

DEFAULT_CLAMP = 0.05


class AssignmentMechanism(ABC):
    def __init__(self, clamp: float = DEFAULT_CLAMP):
        """
        Initialize an assignment mechanism.

        :param clamp: Every probability this mechanism hands out lies in [clamp, 1 - clamp].
        """
        if not 0 < clamp < 0.5:
            raise ValueError(f'clamp must lie in (0, 0.5), got {clamp}')
        self.clamp = clamp

    @property
    @abstractmethod
    def design_class(self) -> DesignClass:
        """
        Randomization class this mechanism belongs to.
        """
        pass

    @abstractmethod
    def probabilities(self, w: np.ndarray) -> np.ndarray:
        """
        Abstract method resolving Pr(A = 1 | W) for every row of a covariate matrix.
        Should be implemented by specific mechanism subclasses.

        :param w: Covariate matrix of shape (n, d).
        :return: Array of n assignment probabilities.
        """
        pass

    def probability(self, w) -> float:
        """
        Resolve the assignment probability of a single patient.

        :param w: Covariate vector of length d.
        :return: Pr(A = 1 | W = w).
        """
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return float(self.probabilities(w)[0])

    def check_range(self, p) -> None:
        """
        Check that probabilities respect the clamp.

        :param p: Scalar or array of probabilities.
        """
        p = np.asarray(p, dtype=float)
        # Tolerance for round-off at the clamp boundary
        tol = 1e-12
        if np.any(p < self.clamp - tol) or np.any(p > 1 - self.clamp + tol):
            raise ValueError(f'probabilities must lie in [{self.clamp}, {1 - self.clamp}], got {p}')
