import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
import scipy.linalg
from scipy.special import expit

from design_types import Arm, WorkingModelLayout

logger = logging.getLogger(__name__)

SCORE_TOL = 1e-8
MAX_ITER = 50
# Any |coefficient| beyond this is treated as separation
SEPARATION_BOUND = 15.0
MAX_HALVINGS = 30
# Relative log-likelihood slack below which a decrease counts as rounding
LIKELIHOOD_RTOL = 1e-12
STEP_TOL = 1e-12
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """
    Result of a logistic regression fit.

    :param coefficients: Coefficients over the full design, zero for dropped columns.
    :param converged: Whether the score reached the tolerance.
    :param iterations: Newton steps taken.
    :param max_abs_score: Infinity norm of X'(y - p) at the returned coefficients.
    :param dropped_columns: Columns removed as linearly dependent.
    :param layout: Design layout the coefficients belong to.
    :param log_likelihoods: Log-likelihood at the start and after every accepted step.
    """
    coefficients: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    dropped_columns: Tuple[int, ...] = ()
    layout: WorkingModelLayout = field(default=WorkingModelLayout.interaction)
    log_likelihoods: Tuple[float, ...] = ()


def build_design_row(a: Arm, x, layout: WorkingModelLayout = WorkingModelLayout.interaction) -> np.ndarray:
    """
    Working-model feature vector of one patient.

    :param a: Arm.
    :param x: Covariate vector X.
    :param layout: Interaction layout [1, a, x..., a*x...] or main effects [1, a, x...].
    :return: Feature vector.
    """
    x = np.asarray(x, dtype=float).ravel()
    return build_design_matrix(np.array([int(a)]), x[None, :], layout)[0]


def build_design_matrix(a, x: np.ndarray, layout: WorkingModelLayout = WorkingModelLayout.interaction) -> np.ndarray:
    """
    Working-model design matrix, row order following x.

    :param a: Arms, an array of length n or a single arm for every row.
    :param x: Covariates of shape (n, q).
    :param layout: Design layout.
    :return: Matrix of shape (n, 2 + q) or (n, 2 + 2q).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f'covariates must be a 2-d array, got {x.ndim} dimensions')
    n = x.shape[0]
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    columns = [np.ones(n), a, x]
    match layout:
        case WorkingModelLayout.interaction:
            columns.append(a[:, None] * x)
        case WorkingModelLayout.main_effects:
            pass
        case _:
            raise ValueError(f'Unknown layout: {layout}')
    return np.column_stack(columns)


def log_likelihood(features: np.ndarray, response: np.ndarray, coefficients: np.ndarray) -> float:
    eta = features @ coefficients
    return float(np.sum(response * eta - np.logaddexp(0.0, eta)))


def _independent_columns(features: np.ndarray) -> np.ndarray:
    """
    Indices of a maximal linearly independent subset of columns, in original order.
    """
    if features.shape[1] == 0:
        return np.arange(0)
    _, r, pivots = scipy.linalg.qr(features, mode='economic', pivoting=True)
    diagonal = np.abs(np.diag(r))
    if diagonal.size == 0 or diagonal[0] == 0:
        return np.arange(0)
    rank = int(np.sum(diagonal > diagonal[0] * max(features.shape) * np.finfo(float).eps))
    return np.sort(pivots[:rank])


def fit_logistic_irls(features: np.ndarray, response: np.ndarray, score_tol: float = SCORE_TOL,
                      max_iter: int = MAX_ITER, start: np.ndarray | None = None,
                      layout: WorkingModelLayout = WorkingModelLayout.interaction) -> LogisticFit:
    """
    Maximum likelihood logistic regression by Newton-Raphson (iteratively reweighted
    least squares) with step-halving and a separation guard.

    :param features: Design matrix of shape (n, p), one row per (feature vector, response) pair.
    :param response: Binary responses of length n.
    :param score_tol: Convergence tolerance on the infinity norm of the score.
    :param max_iter: Maximum number of Newton steps.
    :param start: Starting coefficients, zeros by default.
    :param layout: Layout tag stored on the fit.
    :return: Fitted model.
    """
    features = np.asarray(features, dtype=float)
    response = np.asarray(response, dtype=float)
    n, p = features.shape
    if len(response) != n:
        raise ValueError(f'{n} feature rows but {len(response)} responses')

    keep = _independent_columns(features)
    dropped = tuple(int(j) for j in range(p) if j not in set(keep.tolist()))
    if dropped:
        logger.warning("Design is rank deficient, dropping columns %s", dropped)
    x = features[:, keep]

    beta = np.zeros(len(keep)) if start is None else np.asarray(start, dtype=float)[keep].copy()

    def expand(coefficients: np.ndarray) -> np.ndarray:
        full = np.zeros(p)
        full[keep] = coefficients
        return full

    converged = False
    iterations = 0
    score = x.T @ (response - expit(x @ beta))
    current = log_likelihood(x, response, beta)
    trace = [current]
    while True:
        if np.max(np.abs(score), initial=0.0) <= score_tol:
            converged = True
            break
        if iterations >= max_iter:
            logger.warning("IRLS stopped after %s iterations, score %.3g", iterations, np.max(np.abs(score)))
            break
        fitted = expit(x @ beta)
        hessian = x.T @ (x * (fitted * (1.0 - fitted))[:, None])
        try:
            step = scipy.linalg.solve(hessian, score, assume_a='pos')
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(hessian, score, rcond=None)[0]

        lowest = current - LIKELIHOOD_RTOL * abs(current)
        candidate = beta + step
        proposed = log_likelihood(x, response, candidate)
        halvings = 0
        while proposed < lowest and halvings < MAX_HALVINGS:
            step = step / 2.0
            candidate = beta + step
            proposed = log_likelihood(x, response, candidate)
            halvings += 1
        if proposed < lowest:
            logger.warning("IRLS found no ascent step after %s halvings, score %.3g",
                           halvings, np.max(np.abs(score)))
            break
        negligible = np.max(np.abs(step), initial=0.0) <= STEP_TOL * (1.0 + np.max(np.abs(beta), initial=0.0))
        beta, current = candidate, proposed
        trace.append(current)
        iterations += 1
        score = x.T @ (response - expit(x @ beta))

        if np.max(np.abs(beta), initial=0.0) > SEPARATION_BOUND:
            logger.warning("Separation detected after %s iterations", iterations)
            break
        if negligible and np.max(np.abs(score), initial=0.0) > score_tol:
            logger.warning("IRLS step is negligible after %s iterations, score %.3g",
                           iterations, np.max(np.abs(score)))
            break

    return LogisticFit(coefficients=expand(beta), converged=converged, iterations=iterations,
                       max_abs_score=float(np.max(np.abs(score), initial=0.0)),
                       dropped_columns=dropped, layout=layout, log_likelihoods=tuple(trace))


def predict_means(fit: LogisticFit, a, x: np.ndarray) -> np.ndarray:
    """
    Fitted Pr(Y = 1 | A = a, X = x) for every row of x.

    :param fit: Fitted working model.
    :param a: Arm for every row, or an array of arms.
    :param x: Covariates of shape (n, q).
    :return: Probabilities in (0, 1).
    """
    design = build_design_matrix(a, x, fit.layout)
    if design.shape[1] != len(fit.coefficients):
        raise ValueError(f'fit has {len(fit.coefficients)} coefficients, design has {design.shape[1]} columns')
    return expit(design @ fit.coefficients)


def predict_mean_binary(fit: LogisticFit, a: Arm, x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(predict_means(fit, int(a), x[None, :])[0])


def conditional_variance_binary(m):
    """
    Bernoulli variance m(1 - m), floored at VARIANCE_FLOOR.

    :param m: Probability, scalar or array.
    :return: Floored variance, same shape as m.
    """
    result = np.maximum(np.asarray(m, dtype=float) * (1.0 - np.asarray(m, dtype=float)), VARIANCE_FLOOR)
    return float(result) if result.ndim == 0 else result
