import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from assignment_mechanism import AssignmentMechanism
from design_types import Arm, DesignClass
from errors import EstimationError
from links import Link
from trial_types import StageData, TrialData

logger = logging.getLogger(__name__)

# Maps a covariate matrix of shape (n, d) to n values
CovariateFunction = Callable[[np.ndarray], np.ndarray]

SIGMA2_FLOOR = 1e-12


def stage_mean(stage: StageData, arm: Arm) -> float:
    """
    Treatment group average of one stage.

    :param stage: Stage data.
    :param arm: Arm to average.
    :return: E_s{I(A = a) Y} / E_s{I(A = a)}.
    """
    mask = stage.a == int(arm)
    count = int(np.sum(mask))
    if count == 0:
        raise EstimationError(f'stage {stage.stage} has no patients in arm {int(arm)}')
    return float(np.sum(stage.y[mask]) / count)


def stage_mean_ipw(stage: StageData, mechanism: AssignmentMechanism, arm: Arm) -> float:
    """
    Hajek inverse probability weighted arm mean of one stage. Reduces to the plain
    group average when the propensity is constant over the arm's records.

    :param stage: Stage data.
    :param mechanism: Mechanism that assigned the stage.
    :param arm: Arm to average.
    :return: sum I(A = a) Y / omega over sum I(A = a) / omega, omega = p^a (1 - p)^(1 - a).
    """
    mask = stage.a == int(arm)
    if not np.any(mask):
        raise EstimationError(f'stage {stage.stage} has no patients in arm {int(arm)}')
    p = mechanism.probabilities(stage.w[mask])
    if np.all(p == p[0]):
        return stage_mean(stage, arm)
    omega = p if arm == Arm.experimental else 1.0 - p
    weights = 1.0 / omega
    total = np.sum(weights)
    if not total > 0:
        raise EstimationError(f'stage {stage.stage} has zero inverse probability weight in arm {int(arm)}')
    return float(np.sum(weights * stage.y[mask]) / total)


def _check_weights(weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.isclose(np.sum(weights), 1.0):
        raise ValueError(f'stage weights must be non-negative and sum to 1, got {weights}')
    return weights


def weighted_delta(link: Link, weights, stage_mu1, stage_mu0) -> float:
    """
    Plug-in estimate g(sum eta_s mu1_s) - g(sum eta_s mu0_s).

    :param link: Link of the estimand.
    :param weights: Stage weights on the simplex.
    :param stage_mu1: Per-stage arm 1 means.
    :param stage_mu0: Per-stage arm 0 means.
    :return: Treatment effect estimate.
    """
    weights = _check_weights(weights)
    mu1 = float(np.dot(weights, np.asarray(stage_mu1, dtype=float)))
    mu0 = float(np.dot(weights, np.asarray(stage_mu0, dtype=float)))
    return link.value(mu1) - link.value(mu0)


def augmentation_column(stage: StageData, p, c: CovariateFunction) -> float:
    """
    Subtraction term E_s[{A - p(W)} c(W)] of one stage.

    :param stage: Stage data.
    :param p: Constant assignment probability or per-record propensities.
    :param c: Augmentation function.
    :return: Stage average of the augmentation column.
    """
    return float(np.mean((stage.a - p) * c(stage.w)))


def augmentation_column_cir(stage: StageData, pi: float, b: CovariateFunction) -> float:
    if not 0 < pi < 1:
        raise ValueError(f'pi must lie in (0, 1), got {pi}')
    return augmentation_column(stage, pi, b)


def _stage_pi(stage: StageData) -> float:
    if stage.mechanism.design_class is not DesignClass.cir:
        raise ValueError(f'stage {stage.stage} is not covariate-independent')
    return float(stage.mechanism.pi)


def _subtract(delta: float, columns: Sequence[float]) -> float:
    for column in columns:
        delta -= column
    return delta


def augmented_delta(trial: TrialData, link: Link, theta: float,
                    b1: CovariateFunction, b2: CovariateFunction) -> float:
    """
    Augmented estimator of a two-stage covariate-independent trial:
    delta(theta) - E_1{(A - pi_1) b_1(W)} - E_2{(A - pi_2) b_2(W)}.

    :param trial: Two-stage trial with fixed-probability mechanisms.
    :param link: Link of the estimand.
    :param theta: Weight of stage 1.
    :param b1: Stage 1 augmentation function.
    :param b2: Stage 2 augmentation function.
    :return: Treatment effect estimate.
    """
    if trial.k != 2:
        raise ValueError(f'augmented_delta needs a two-stage trial, got {trial.k} stages')
    first, second = trial.stages
    pi1, pi2 = _stage_pi(first), _stage_pi(second)
    delta = weighted_delta(link, [theta, 1.0 - theta],
                           [stage_mean(first, Arm.experimental), stage_mean(second, Arm.experimental)],
                           [stage_mean(first, Arm.control), stage_mean(second, Arm.control)])
    return _subtract(delta, [augmentation_column_cir(first, pi1, b1), augmentation_column_cir(second, pi2, b2)])


def ipw_stage_means(trial: TrialData) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-stage IPW arm means using each stage's realized mechanism.
    """
    mu1 = np.array([stage_mean_ipw(stage, stage.mechanism, Arm.experimental) for stage in trial.stages])
    mu0 = np.array([stage_mean_ipw(stage, stage.mechanism, Arm.control) for stage in trial.stages])
    return mu1, mu0


def aipw_delta(trial: TrialData, link: Link, weights, c: Sequence[CovariateFunction | None]) -> float:
    """
    Augmented IPW estimator of a k-stage trial:
    delta_ipw(eta) - sum_s E_s[{A_s - p_s(W)} c_s(W)].

    :param trial: Trial with realized mechanisms.
    :param link: Link of the estimand.
    :param weights: Stage weights eta.
    :param c: One augmentation function per stage, None for no augmentation.
    :return: Treatment effect estimate.
    """
    if len(c) != trial.k:
        raise ValueError(f'{trial.k} stages need {trial.k} augmentation functions, got {len(c)}')
    mu1, mu0 = ipw_stage_means(trial)
    delta = weighted_delta(link, weights, mu1, mu0)
    columns = [augmentation_column(stage, stage.propensities, fn)
               for stage, fn in zip(trial.stages, c) if fn is not None]
    return _subtract(delta, columns)


def _augmentation_function(gprime1: float, gprime0: float, mu1: float, mu0: float,
                           m1: CovariateFunction, m0: CovariateFunction,
                           weight: float, propensity: CovariateFunction) -> CovariateFunction:
    def c(w: np.ndarray) -> np.ndarray:
        p = propensity(w)
        return weight * (gprime1 * (m1(w) - mu1) / p + gprime0 * (m0(w) - mu0) / (1.0 - p))
    return c


def constant_function(value: float) -> CovariateFunction:
    """
    Covariate function returning the same value for every row.
    """
    return lambda w: np.full(np.atleast_2d(w).shape[0], float(value))


def optimal_augmentation_cir(link: Link, mu1: float, mu0: float, m1: CovariateFunction, m0: CovariateFunction,
                             pi1: float, pi2: float, theta: float) -> Tuple[CovariateFunction, CovariateFunction]:
    """
    Estimated optimal augmentation functions (b_1, b_2) of a two-stage covariate-independent trial.

    :return: b_1(w) = theta [g'(mu1)(m1(w) - mu1)/pi1 + g'(mu0)(m0(w) - mu0)/(1 - pi1)] and
             b_2 with (1 - theta) and pi2.
    """
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    b1 = _augmentation_function(gprime1, gprime0, mu1, mu0, m1, m0, theta, constant_function(pi1))
    b2 = _augmentation_function(gprime1, gprime0, mu1, mu0, m1, m0, 1.0 - theta, constant_function(pi2))
    return b1, b2


def optimal_augmentation_cdr(link: Link, mu1: float, mu0: float, m1: CovariateFunction, m0: CovariateFunction,
                             propensities: Sequence[CovariateFunction], weights) -> List[CovariateFunction]:
    """
    Estimated optimal augmentation functions c_s(w) = eta_s [g'(mu1)(m1(w) - mu1)/p_s(w)
    + g'(mu0)(m0(w) - mu0)/(1 - p_s(w))], one per stage.

    :param propensities: Per-stage propensity functions p_s.
    :param weights: Stage weights eta.
    """
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(propensities):
        raise ValueError(f'{len(propensities)} propensities but {len(weights)} weights')
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    return [_augmentation_function(gprime1, gprime0, mu1, mu0, m1, m0, float(eta), p)
            for eta, p in zip(weights, propensities)]


def stage_variance(stage: StageData, mechanism: AssignmentMechanism, link: Link, mu1: float, mu0: float,
                   m1: CovariateFunction, m0: CovariateFunction) -> float:
    """
    Sample variance over one stage of the plug-in efficient influence term
    g'(mu1) A (Y - m1)/p - g'(mu0)(1 - A)(Y - m0)/(1 - p) + g'(mu1)(m1 - mu1) - g'(mu0)(m0 - mu0).

    :param stage: Stage data.
    :param mechanism: Mechanism giving p = pi_s or p_s(W).
    :return: Stage variance component.
    """
    if stage.n < 2:
        raise EstimationError(f'stage {stage.stage} needs at least two records for a variance')
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    p = mechanism.probabilities(stage.w)
    fitted1, fitted0 = m1(stage.w), m0(stage.w)
    a, y = stage.a, stage.y
    influence = (gprime1 * a * (y - fitted1) / p
                 - gprime0 * (1 - a) * (y - fitted0) / (1.0 - p)
                 + gprime1 * (fitted1 - mu1)
                 - gprime0 * (fitted0 - mu0))
    return float(np.var(influence, ddof=1))


def pooled_stage_variance(w: np.ndarray, mechanism: AssignmentMechanism, link: Link, mu1: float, mu0: float,
                          m1: CovariateFunction, m0: CovariateFunction,
                          v1: CovariateFunction, v0: CovariateFunction) -> float:
    """
    Stage variance component implied by the outcome model, averaged over covariates
    pooled from every stage:
    mean of g'(mu1)^2 v1/p + g'(mu0)^2 v0/(1 - p) + {g'(mu1)(m1 - mu1) - g'(mu0)(m0 - mu0)}^2.
    The stage's own outcomes enter only through the pooled fit.

    :param w: Covariates of all stages.
    :param mechanism: Mechanism of the stage giving p = pi_s or p_s(W).
    :param v1: Conditional variance function of arm 1.
    :param v0: Conditional variance function of arm 0.
    :return: Stage variance component.
    """
    w = np.asarray(w, dtype=float)
    if len(w) < 2:
        raise EstimationError('a pooled stage variance needs at least two records')
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    p = mechanism.probabilities(w)
    fitted1, fitted0 = m1(w), m0(w)
    terms = (gprime1 ** 2 * v1(w) / p
             + gprime0 ** 2 * v0(w) / (1.0 - p)
             + (gprime1 * (fitted1 - mu1) - gprime0 * (fitted0 - mu0)) ** 2)
    return float(np.mean(terms))


def optimal_weights(n, sigma2) -> np.ndarray:
    """
    Inverse-variance stage weights eta_s proportional to n_s / sigma2_s.

    :param n: Stage sizes.
    :param sigma2: Stage variance components.
    :return: Weights summing to 1.
    """
    n = np.asarray(n, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if len(n) != len(sigma2):
        raise ValueError(f'{len(n)} stage sizes but {len(sigma2)} variances')
    if np.any(n <= 0):
        raise ValueError(f'stage sizes must be positive, got {n}')
    if np.all(sigma2 <= SIGMA2_FLOOR):
        logger.warning("All stage variances are at the floor, using equal weights")
        return np.full(len(n), 1.0 / len(n))
    precision = n / np.maximum(sigma2, SIGMA2_FLOOR)
    return precision / np.sum(precision)


def final_variance(trial: TrialData, link: Link, mu1: float, mu0: float, weights,
                   augmentations: Sequence[CovariateFunction | None] | None = None) -> Tuple[float, float]:
    """
    Variance estimate of a weighted augmented estimator,
    sum_s (n_1/n_s) Var_s[eta_s g'(mu1) A (Y - mu1)/p_s - eta_s g'(mu0)(1 - A)(Y - mu0)/(1 - p_s)
    - (A - p_s) c_s(W)].

    :param trial: Trial data.
    :param link: Link of the estimand.
    :param mu1: Estimated arm 1 mean.
    :param mu0: Estimated arm 0 mean.
    :param weights: Stage weights eta.
    :param augmentations: Per-stage augmentation functions, None for none.
    :return: (variance of the sqrt(n_1)-scaled estimator, standard error).
    """
    weights = _check_weights(weights)
    if augmentations is None:
        augmentations = [None] * trial.k
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    n1 = trial.stages[0].n
    total = 0.0
    for stage, eta, c in zip(trial.stages, weights, augmentations):
        if stage.n < 2:
            raise EstimationError(f'stage {stage.stage} needs at least two records for a variance')
        p = stage.propensities
        a, y = stage.a, stage.y
        term = (eta * gprime1 * a * (y - mu1) / p
                - eta * gprime0 * (1 - a) * (y - mu0) / (1.0 - p))
        if c is not None:
            term = term - (a - p) * c(stage.w)
        total += n1 / stage.n * float(np.var(term, ddof=1))
    return total, float(np.sqrt(total / n1))


def wald_interval(delta: float, se: float, level: float = 0.95) -> Tuple[float, float]:
    """
    Normal-quantile confidence interval delta -/+ z se.
    """
    if not 0 < level < 1:
        raise ValueError(f'level must lie in (0, 1), got {level}')
    z = float(norm.ppf(0.5 + level / 2.0))
    return delta - z * se, delta + z * se
