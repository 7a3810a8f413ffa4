import numpy as np

from assignment_mechanism import AssignmentMechanism, DEFAULT_CLAMP
from design_types import DesignClass


class FixedProbability(AssignmentMechanism):
    def __init__(self, pi: float, clamp: float = DEFAULT_CLAMP):
        """
        Covariate-independent randomization with Pr(A = 1) = pi for every patient.

        :param pi: Assignment probability.
        :param clamp: Allowed distance from 0 and 1.
        """
        super().__init__(clamp)
        if not 0 < pi < 1:
            raise ValueError(f'pi must lie in (0, 1), got {pi}')
        self.check_range(pi)
        self.pi = float(pi)

    @property
    def design_class(self) -> DesignClass:
        return DesignClass.cir

    def probabilities(self, w: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(w).shape[0], self.pi)

    def __repr__(self) -> str:
        return f'FixedProbability(pi={self.pi:.6g})'
