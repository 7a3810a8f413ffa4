from dataclasses import dataclass
from typing import Callable

import numpy as np

from assignment_mechanism import AssignmentMechanism, DEFAULT_CLAMP
from design_types import Arm
from errors import DegenerateVarianceError
from links import Link


@dataclass(frozen=True)
class AllocationInputs:
    """
    Inputs of the optimal covariate-independent allocation.

    :param link: Link g of the estimand.
    :param mu1: Mean under the experimental arm.
    :param mu0: Mean under the control arm.
    :param ev1: E{v_1(W)}, or v_1(w) at a point.
    :param ev0: E{v_0(W)}, or v_0(w) at a point.
    """
    link: Link
    mu1: float
    mu0: float
    ev1: float
    ev0: float

    def __post_init__(self):
        if self.ev1 < 0 or self.ev0 < 0:
            raise ValueError(f'variances must be non-negative, got ({self.ev1}, {self.ev0})')
        if self.ev1 == 0 and self.ev0 == 0:
            raise DegenerateVarianceError('both arm variances are zero')


def allocation_probabilities(gprime1: float, gprime0: float, v1, v0, clamp: float | None = DEFAULT_CLAMP):
    """
    Neyman-type allocation g'(mu1) sqrt(v1) / {g'(mu1) sqrt(v1) + g'(mu0) sqrt(v0)}.

    :param gprime1: g'(mu1).
    :param gprime0: g'(mu0).
    :param v1: Arm 1 variance, scalar or array.
    :param v0: Arm 0 variance, scalar or array.
    :param clamp: Clamp the result to [clamp, 1 - clamp]; None leaves it unclamped.
    :return: Allocation probability with the broadcast shape of v1 and v0.
    """
    v1 = np.asarray(v1, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if np.any(v1 < 0) or np.any(v0 < 0):
        raise ValueError('variances must be non-negative')
    numerator = gprime1 * np.sqrt(v1)
    denominator = numerator + gprime0 * np.sqrt(v0)
    if np.any(denominator == 0):
        raise DegenerateVarianceError('both arm variances are zero')
    result = numerator / denominator
    if clamp is not None:
        result = np.clip(result, clamp, 1 - clamp)
    return float(result) if result.ndim == 0 else result


def optimal_pi(inputs: AllocationInputs, clamp: float | None = DEFAULT_CLAMP) -> float:
    """
    Optimal Pr(A = 1) under covariate-independent randomization.

    :param inputs: Means and expected conditional variances.
    :param clamp: Clamp to [clamp, 1 - clamp]; None leaves the value unclamped.
    :return: Optimal allocation probability.
    """
    link = inputs.link
    return allocation_probabilities(link.deriv(inputs.mu1), link.deriv(inputs.mu0),
                                    inputs.ev1, inputs.ev0, clamp)


def optimal_propensity(link: Link, mu1: float, mu0: float,
                       v1: Callable[[np.ndarray], float], v0: Callable[[np.ndarray], float],
                       w: np.ndarray, clamp: float | None = DEFAULT_CLAMP) -> float:
    """
    Optimal propensity score p(w) under covariate-dependent randomization.

    :param link: Link g of the estimand.
    :param mu1: Mean under the experimental arm.
    :param mu0: Mean under the control arm.
    :param v1: Conditional variance function of arm 1.
    :param v0: Conditional variance function of arm 0.
    :param w: Covariate vector.
    :param clamp: Clamp to [clamp, 1 - clamp]; None leaves the value unclamped.
    :return: Optimal Pr(A = 1 | W = w).
    """
    return allocation_probabilities(link.deriv(mu1), link.deriv(mu0), float(v1(w)), float(v0(w)), clamp)


def assign_cir(pi: float, rng: np.random.Generator) -> Arm:
    """
    Simple randomization of one patient.

    :param pi: Pr(A = 1).
    :param rng: Random stream owned by the caller.
    :return: Drawn arm.
    """
    if not 0 < pi < 1:
        raise ValueError(f'pi must lie in (0, 1), got {pi}')
    return Arm(int(rng.random() < pi))


def assign_cdr(mechanism: AssignmentMechanism, w, rng: np.random.Generator) -> Arm:
    """
    Covariate-dependent randomization of one patient.

    :param mechanism: Mechanism resolving p(w).
    :param w: Covariate vector of the patient.
    :param rng: Random stream owned by the caller.
    :return: Drawn arm.
    """
    return Arm(int(rng.random() < mechanism.probability(w)))


def draw_assignments(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Independent Bernoulli assignments for a batch of patients.

    :param p: Assignment probabilities, one per patient.
    :param rng: Random stream owned by the caller.
    :return: Integer array of arms.
    """
    return (rng.random(len(p)) < p).astype(int)
