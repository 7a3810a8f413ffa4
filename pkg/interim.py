import logging
from typing import Sequence, Tuple

import numpy as np

from assignment_mechanism import AssignmentMechanism
from conditional_moments import empirical_conditional_moments
from design_types import Arm, DesignClass, VarianceModel
from estimators import stage_mean_ipw
from fixed_probability import FixedProbability
from links import Link
from logistic_irls import (VARIANCE_FLOOR, build_design_matrix, conditional_variance_binary,
                           fit_logistic_irls, predict_means)
from propensity_model import PropensityModel
from propensity_table import PropensityTable
from randomization import AllocationInputs, allocation_probabilities, optimal_pi
from trial_types import AdaptationRule, StageData

logger = logging.getLogger(__name__)


def history_means(history: Sequence[StageData]) -> Tuple[float, float] | None:
    """
    Arm means over the accumulated data: per-stage (IPW for covariate-dependent stages)
    means combined with stage-size weights. Stages lacking an arm are skipped for that arm.

    :param history: Stages available at the interim analysis.
    :return: (mu1, mu0), or None when an arm was never observed.
    """
    means = []
    for arm in (Arm.experimental, Arm.control):
        sizes, values = [], []
        for stage in history:
            if stage.arm_count(arm) == 0:
                continue
            sizes.append(stage.n)
            values.append(stage_mean_ipw(stage, stage.mechanism, arm))
        if not sizes:
            return None
        means.append(float(np.dot(sizes, values) / np.sum(sizes)))
    return means[0], means[1]


def estimate_interim_allocation(history: Sequence[StageData], rule: AdaptationRule, link: Link,
                                previous: AssignmentMechanism) -> AssignmentMechanism:
    """
    Re-optimize the assignment mechanism of the next stage from accumulated data.

    :param history: All data available at the interim, preliminary data first.
    :param rule: Design class, coarsening X and variance model to optimize with.
    :param link: Link of the estimand.
    :param previous: Mechanism to fall back to when the data cannot support optimization.
    :return: New mechanism, or ``previous`` itself on fallback.
    """
    if not history or sum(stage.n for stage in history) == 0:
        raise ValueError('interim analysis needs data')

    means = history_means(history)
    if means is None:
        logger.warning("An arm is empty in the interim data, keeping %s", previous)
        return previous
    mu1, mu0 = link.guard(means[0]), link.guard(means[1])
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)

    match rule.variance_model:
        case VarianceModel.logistic_working:
            return _working_model_allocation(history, rule, link, mu1, mu0, gprime1, gprime0)
        case VarianceModel.empirical:
            return _empirical_allocation(history, rule, link, mu1, mu0, gprime1, gprime0, previous)
        case _:
            raise ValueError(f'Unknown variance model: {rule.variance_model}')


def _working_model_allocation(history: Sequence[StageData], rule: AdaptationRule, link: Link,
                              mu1: float, mu0: float, gprime1: float, gprime0: float) -> AssignmentMechanism:
    w = np.vstack([stage.w for stage in history])
    a = np.concatenate([stage.a for stage in history])
    y = np.concatenate([stage.y for stage in history])
    if not np.all((y == 0) | (y == 1)):
        raise ValueError('the logistic working model needs binary outcomes')
    x = rule.selector.apply(w)
    fit = fit_logistic_irls(build_design_matrix(a, x, rule.layout), y, layout=rule.layout)
    if not fit.converged:
        logger.warning("Working model on %s did not converge (score %.3g)", rule.selector.label, fit.max_abs_score)

    match rule.design_class:
        case DesignClass.cir:
            ev1 = float(np.mean(conditional_variance_binary(predict_means(fit, int(Arm.experimental), x))))
            ev0 = float(np.mean(conditional_variance_binary(predict_means(fit, int(Arm.control), x))))
            pi = optimal_pi(AllocationInputs(link, mu1, mu0, ev1, ev0), rule.clamp)
            logger.debug("Interim CIR on %s: pi=%.4f", rule.selector.label, pi)
            return FixedProbability(pi, clamp=rule.clamp)
        case DesignClass.cdr:
            return PropensityModel(fit.coefficients, rule.selector, gprime1, gprime0,
                                   layout=rule.layout, clamp=rule.clamp)
        case _:
            raise ValueError(f'Unknown design class: {rule.design_class}')


def _arm_variance(history: Sequence[StageData], arm: Arm) -> float:
    y = np.concatenate([stage.y[stage.a == int(arm)] for stage in history])
    return max(float(np.var(y, ddof=1)), VARIANCE_FLOOR)


def _empirical_allocation(history: Sequence[StageData], rule: AdaptationRule, link: Link,
                          mu1: float, mu0: float, gprime1: float, gprime0: float,
                          previous: AssignmentMechanism) -> AssignmentMechanism:
    treated = empirical_conditional_moments(history, Arm.experimental, rule.selector)
    control = empirical_conditional_moments(history, Arm.control, rule.selector)
    usable = sorted(set(treated.complete_cells()) & set(control.complete_cells()))
    if not usable:
        logger.warning("No cell of %s has two records in both arms, keeping %s", rule.selector.label, previous)
        return previous

    match rule.design_class:
        case DesignClass.cir:
            # Average over every interim patient; cells short of two records in an arm
            # take that arm's variance over the whole history
            keys = [key for stage in history for key in rule.selector.cells(stage.w)]
            ev = []
            for moments, arm in ((treated, Arm.experimental), (control, Arm.control)):
                fallback = _arm_variance(history, arm)
                complete = moments.complete_cells()
                ev.append(float(np.mean([max(complete[key].variance, VARIANCE_FLOOR) if key in complete
                                         else fallback for key in keys])))
            pi = optimal_pi(AllocationInputs(link, mu1, mu0, ev[0], ev[1]), rule.clamp)
            return FixedProbability(pi, clamp=rule.clamp)
        case DesignClass.cdr:
            cells = {key: allocation_probabilities(gprime1, gprime0,
                                                   max(treated.cells[key].variance, VARIANCE_FLOOR),
                                                   max(control.cells[key].variance, VARIANCE_FLOOR), rule.clamp)
                     for key in usable}
            return PropensityTable(rule.selector, cells, clamp=rule.clamp)
        case _:
            raise ValueError(f'Unknown design class: {rule.design_class}')
