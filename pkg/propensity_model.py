import numpy as np

from assignment_mechanism import AssignmentMechanism, DEFAULT_CLAMP
from design_types import Arm, DesignClass, WorkingModelLayout
from logistic_irls import LogisticFit, conditional_variance_binary, predict_means
from randomization import allocation_probabilities
from trial_types import CovariateSelector


class PropensityModel(AssignmentMechanism):
    def __init__(self, coefficients: np.ndarray, selector: CovariateSelector, gprime1: float, gprime0: float,
                 layout: WorkingModelLayout = WorkingModelLayout.interaction, clamp: float = DEFAULT_CLAMP):
        """
        Covariate-dependent randomization whose propensity is the optimal allocation
        evaluated on a logistic working model for Pr(Y = 1 | A, X).

        :param coefficients: Working-model coefficients.
        :param selector: Coarsening X of W the model is fitted on.
        :param gprime1: g'(mu1) at the interim estimate.
        :param gprime0: g'(mu0) at the interim estimate.
        :param layout: Working-model layout.
        :param clamp: Allowed distance from 0 and 1.
        """
        super().__init__(clamp)
        if gprime1 <= 0 or gprime0 <= 0:
            raise ValueError(f'link derivatives must be positive, got ({gprime1}, {gprime0})')
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.selector = selector
        self.gprime1 = float(gprime1)
        self.gprime0 = float(gprime0)
        self.layout = layout
        self._fit = LogisticFit(coefficients=self.coefficients, converged=True, iterations=0,
                                max_abs_score=0.0, layout=layout)

    @property
    def design_class(self) -> DesignClass:
        return DesignClass.cdr

    def conditional_variances(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Working-model v_1(X) and v_0(X) for every row of w.
        """
        x = self.selector.apply(w)
        v1 = conditional_variance_binary(predict_means(self._fit, int(Arm.experimental), x))
        v0 = conditional_variance_binary(predict_means(self._fit, int(Arm.control), x))
        return np.atleast_1d(v1), np.atleast_1d(v0)

    def probabilities(self, w: np.ndarray) -> np.ndarray:
        v1, v0 = self.conditional_variances(np.atleast_2d(w))
        return np.atleast_1d(allocation_probabilities(self.gprime1, self.gprime0, v1, v0, self.clamp))

    def __repr__(self) -> str:
        return f'PropensityModel({self.selector.label}, coefficients={np.round(self.coefficients, 4).tolist()})'
