import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from assignment_mechanism import AssignmentMechanism
from conditional_moments import empirical_conditional_moments
from design_types import Arm, EstimatorKind, StageVarianceKind, WorkingModelLayout
from estimators import (CovariateFunction, aipw_delta, constant_function, final_variance, ipw_stage_means,
                        optimal_augmentation_cdr, optimal_weights, pooled_stage_variance, stage_variance,
                        wald_interval, weighted_delta)
from links import Link
from logistic_irls import (LogisticFit, build_design_matrix, conditional_variance_binary, fit_logistic_irls,
                           predict_means)
from trial_types import CovariateSelector, TrialData

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageSummary:
    """
    Per-stage ingredients of an estimate.

    :param stage: Stage index.
    :param n: Stage size.
    :param mechanism: Realized assignment mechanism.
    :param mu1: Stage arm 1 mean (IPW for covariate-dependent stages).
    :param mu0: Stage arm 0 mean.
    :param sigma2: Stage variance component.
    """
    stage: int
    n: int
    mechanism: AssignmentMechanism
    mu1: float
    mu0: float
    sigma2: float


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """
    Output of a treatment effect analysis.
    """
    delta_hat: float
    se: float
    ci: Tuple[float, float]
    weights: np.ndarray
    stage_summaries: Tuple[StageSummary, ...]
    estimator_kind: EstimatorKind
    mu_hat: Tuple[float, float]
    level: float
    scaled_variance: float

    def covers(self, delta: float) -> bool:
        return self.ci[0] <= delta <= self.ci[1]


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """
    Fitted nuisance quantities: marginal means and outcome regressions m_a(W).
    """
    mu1: float
    mu0: float
    m1: CovariateFunction
    m0: CovariateFunction
    fit: LogisticFit | None = None


def size_weights(trial: TrialData) -> np.ndarray:
    sizes = np.asarray(trial.stage_sizes, dtype=float)
    return sizes / np.sum(sizes)


def simple_mu_hat(trial: TrialData) -> Tuple[float, float]:
    """
    Stage means combined with stage-size weights.
    """
    weights = size_weights(trial)
    mu1, mu0 = ipw_stage_means(trial)
    return float(np.dot(weights, mu1)), float(np.dot(weights, mu0))


def fit_outcome_regression(trial: TrialData,
                           layout: WorkingModelLayout = WorkingModelLayout.interaction) -> NuisanceFit:
    """
    Logistic outcome regression on the full W, fitted to all stages pooled.

    :param trial: Trial with binary outcomes.
    :param layout: Design layout of the regression.
    :return: Nuisance bundle with m_a(W) = fitted Pr(Y = 1 | A = a, W).
    """
    w, a, y = trial.pooled()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError('logistic outcome regression needs binary outcomes, use empirical_outcome_regression')
    fit = fit_logistic_irls(build_design_matrix(a, w, layout), y, layout=layout)
    if not fit.converged:
        logger.warning("Outcome regression did not converge (score %.3g)", fit.max_abs_score)
    mu1, mu0 = simple_mu_hat(trial)

    def m1(covariates: np.ndarray) -> np.ndarray:
        return predict_means(fit, int(Arm.experimental), covariates)

    def m0(covariates: np.ndarray) -> np.ndarray:
        return predict_means(fit, int(Arm.control), covariates)

    return NuisanceFit(mu1=mu1, mu0=mu0, m1=m1, m0=m0, fit=fit)


def empirical_outcome_regression(trial: TrialData, selector: CovariateSelector) -> NuisanceFit:
    """
    Cell-mean outcome regression for discrete covariates. Cells unseen in an arm
    predict that arm's marginal mean.

    :param trial: Trial data.
    :param selector: Discrete selector defining the cells.
    :return: Nuisance bundle with m_a(W) = sample mean of arm a in the cell of W.
    """
    mu1, mu0 = simple_mu_hat(trial)

    def regression(arm: Arm, fallback: float) -> CovariateFunction:
        moments = empirical_conditional_moments(trial.stages, arm, selector)
        means = {key: cell.mean for key, cell in moments.cells.items()}

        def m(covariates: np.ndarray) -> np.ndarray:
            return np.array([means.get(key, fallback) for key in selector.cells(covariates)])
        return m

    return NuisanceFit(mu1=mu1, mu0=mu0, m1=regression(Arm.experimental, mu1), m0=regression(Arm.control, mu0))


def _binary_variance(m: CovariateFunction) -> CovariateFunction:
    return lambda w: conditional_variance_binary(m(w))


def _weighting_variances(trial: TrialData, link: Link, mu1: float, mu0: float, nuisance: NuisanceFit,
                         variance_kind: StageVarianceKind) -> List[float]:
    m1, m0 = nuisance.m1, nuisance.m0
    w, _, y = trial.pooled()
    if variance_kind is StageVarianceKind.pooled_model and not np.all((y == 0) | (y == 1)):
        logger.warning("Pooled model variances need binary outcomes, using stage variances")
        variance_kind = StageVarianceKind.stage_empirical
    match variance_kind:
        case StageVarianceKind.stage_empirical:
            return [stage_variance(stage, stage.mechanism, link, mu1, mu0, m1, m0) for stage in trial.stages]
        case StageVarianceKind.pooled_model:
            v1, v0 = _binary_variance(m1), _binary_variance(m0)
            return [pooled_stage_variance(w, stage.mechanism, link, mu1, mu0, m1, m0, v1, v0)
                    for stage in trial.stages]
        case _:
            raise ValueError(f'Unknown stage variance: {variance_kind}')


def estimate_full(trial: TrialData, link: Link, kind: EstimatorKind, nuisance: NuisanceFit | None = None,
                  level: float = 0.95,
                  variance_kind: StageVarianceKind = StageVarianceKind.pooled_model) -> EstimateResult:
    """
    Estimate the treatment effect of a completed trial.

    Simple: stage-size weights, no augmentation, IPW means for covariate-dependent stages.
    Optimized: outcome regression on all stages, inverse-variance stage weights and
    optimal augmentation. By default the stage variances behind the weights are model-based
    over the pooled covariates.

    :param trial: Completed trial.
    :param link: Link of the estimand.
    :param kind: Estimator to compute.
    :param nuisance: Pre-fitted nuisance bundle, fitted here when omitted.
    :param level: Confidence level of the Wald interval.
    :param variance_kind: Stage variance components the optimized weights are built from.
    :return: Estimate with standard error, interval and stage diagnostics.
    """
    stage_mu1, stage_mu0 = ipw_stage_means(trial)
    sizes = trial.stage_sizes

    match kind:
        case EstimatorKind.simple:
            weights = size_weights(trial)
            mu1, mu0 = simple_mu_hat(trial)
            mu1, mu0 = link.guard(mu1), link.guard(mu0)
            m1, m0 = constant_function(mu1), constant_function(mu0)
            augmentations = None
            delta = weighted_delta(link, weights, stage_mu1, stage_mu0)
            sigma2 = [stage_variance(stage, stage.mechanism, link, mu1, mu0, m1, m0) for stage in trial.stages]
        case EstimatorKind.optimized:
            if nuisance is None:
                nuisance = fit_outcome_regression(trial)
            mu1, mu0 = link.guard(nuisance.mu1), link.guard(nuisance.mu0)
            sigma2 = _weighting_variances(trial, link, mu1, mu0, nuisance, variance_kind)
            weights = optimal_weights(sizes, sigma2)
            augmentations = optimal_augmentation_cdr(link, mu1, mu0, nuisance.m1, nuisance.m0,
                                                     [stage.mechanism.probabilities for stage in trial.stages],
                                                     weights)
            delta = aipw_delta(trial, link, weights, augmentations)
        case _:
            raise ValueError(f'Unknown estimator: {kind}')

    scaled_variance, se = final_variance(trial, link, mu1, mu0, weights, augmentations)
    summaries = tuple(StageSummary(stage=stage.stage, n=stage.n, mechanism=stage.mechanism,
                                   mu1=float(stage_mu1[i]), mu0=float(stage_mu0[i]), sigma2=sigma2[i])
                      for i, stage in enumerate(trial.stages))
    return EstimateResult(delta_hat=delta, se=se, ci=wald_interval(delta, se, level), weights=np.asarray(weights),
                          stage_summaries=summaries, estimator_kind=kind, mu_hat=(mu1, mu0), level=level,
                          scaled_variance=scaled_variance)
