import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product
from typing import Callable, Dict, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import cholesky, eigh, LinAlgError
from scipy.special import expit

from assignment_mechanism import DEFAULT_CLAMP
from design_types import Arm, OutcomeKind
from links import Link
from randomization import AllocationInputs, allocation_probabilities, optimal_pi
from trial_types import CovariateSelector, PopulationSpec

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 20
MC_DRAWS = 10 ** 7
MC_CHUNK = 10 ** 6


def covariance_factor(covariance: np.ndarray) -> np.ndarray:
    """
    Lower factor L with L L' = covariance. Singular matrices fall back to the
    symmetric square root.
    """
    covariance = np.asarray(covariance, dtype=float)
    if covariance.size == 0:
        return covariance.reshape(0, 0)
    try:
        return cholesky(covariance, lower=True)
    except LinAlgError:
        values, vectors = eigh(covariance)
        return vectors @ np.diag(np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


@dataclass
class PopulationGenerator:
    """
    Draws patients from a population: W ~ N(mean, covariance) and both potential outcomes.

    :param spec: Data-generating process.
    """
    spec: PopulationSpec

    def __post_init__(self):
        if self.spec.outcome_kind is not OutcomeKind.binary:
            raise ValueError(f'Unknown outcome kind: {self.spec.outcome_kind}')

    @cached_property
    def factor(self) -> np.ndarray:
        return covariance_factor(self.spec.covariance_matrix)

    def draw_covariates(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """
        Draw n covariate vectors.

        :param n: Number of patients.
        :param rng: Covariate stream.
        :return: Matrix of shape (n, d).
        """
        z = rng.standard_normal((n, self.spec.dimension))
        return self.spec.mean_vector + z @ self.factor.T

    def success_probabilities(self, w: np.ndarray, arm: Arm) -> np.ndarray:
        return expit(self.spec.linear_predictor(w, int(arm)))

    def draw_potential_outcomes(self, w: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        Draw Y(1) and Y(0) for every row of w from one pair of independent uniforms per
        patient, so consecutive batches draw the same outcomes as one batch of their total size.

        :param w: Covariate matrix of shape (n, d).
        :param rng: Outcome stream.
        :return: (y1, y0) as float arrays of 0/1.
        """
        w = np.atleast_2d(w)
        u = rng.random((len(w), 2))
        u1, u0 = u[:, 0], u[:, 1]
        y1 = (u1 < self.success_probabilities(w, Arm.experimental)).astype(float)
        y0 = (u0 < self.success_probabilities(w, Arm.control)).astype(float)
        return y1, y0


def draw_covariates(pop: PopulationSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Draw one covariate vector.
    """
    return PopulationGenerator(pop).draw_covariates(1, rng)[0]


def draw_potential_outcomes(pop: PopulationSpec, w, rng: np.random.Generator) -> Tuple[float, float]:
    """
    Draw (Y(1), Y(0)) of one patient with covariates w.
    """
    y1, y0 = PopulationGenerator(pop).draw_potential_outcomes(np.atleast_2d(w), rng)
    return float(y1[0]), float(y0[0])


@dataclass(frozen=True)
class TrueMarginals:
    """
    Population quantities used as ground truth.

    :param mu1: E{Y(1)}.
    :param mu0: E{Y(0)}.
    :param delta: g(mu1) - g(mu0).
    :param ev1: E{v_1(X)} with v_1(X) = m_1(X){1 - m_1(X)}.
    :param ev0: E{v_0(X)}.
    :param pi_opt: Optimal unclamped CIR allocation for X.
    :param mean_p_opt: E{p_opt(X)} of the optimal unclamped CDR propensity.
    :param p_opt: Optimal propensity per cell for discrete X.
    :param method: ``quadrature`` or ``monte_carlo``.
    """
    mu1: float
    mu0: float
    delta: float
    ev1: float
    ev0: float
    pi_opt: float
    mean_p_opt: float
    p_opt: Dict[Tuple[int, ...], float] | None = field(default=None, hash=False)
    method: str = 'quadrature'


def _gauss_hermite_grid(dimension: int, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Hermite rule for the standard normal in `dimension` dimensions.
    """
    x, weights = hermegauss(nodes)
    weights = weights / np.sqrt(2 * np.pi)
    if dimension == 0:
        return np.zeros((1, 0)), np.ones(1)
    points = np.array(list(product(x, repeat=dimension)))
    mass = np.prod(np.array(list(product(weights, repeat=dimension))), axis=1)
    return points, mass


def _summarize(link: Link, mu1: float, mu0: float, v1: np.ndarray, v0: np.ndarray, mass: np.ndarray,
               cells: np.ndarray | None, method: str) -> TrueMarginals:
    ev1, ev0 = float(np.dot(mass, v1)), float(np.dot(mass, v0))
    pi = optimal_pi(AllocationInputs(link, mu1, mu0, ev1, ev0), clamp=None)
    p = np.atleast_1d(allocation_probabilities(link.deriv(mu1), link.deriv(mu0), v1, v0, clamp=None))
    table = None
    if cells is not None:
        table = {tuple(int(c) for c in cell): float(value) for cell, value in zip(cells, p)}
    return TrueMarginals(mu1=mu1, mu0=mu0, delta=link.value(mu1) - link.value(mu0), ev1=ev1, ev0=ev0,
                         pi_opt=pi, mean_p_opt=float(np.dot(mass, p)), p_opt=table, method=method)


def _cell_keys(grouped: pd.DataFrame, dimension: int) -> np.ndarray:
    if dimension == 0:
        return np.zeros((1, 0), dtype=int)
    return np.array([np.atleast_1d(index) for index in grouped.index], dtype=int)


def _pool(frame: pd.DataFrame, dimension: int) -> pd.DataFrame:
    keys = [f'x{j}' for j in range(dimension)]
    if not keys:
        return frame.sum().to_frame().T
    return frame.groupby(keys, sort=True).sum()


def _product_grid(pop: PopulationSpec, selector: CovariateSelector,
                  nodes: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Hermite grid over W, the outer factor spanning the selected covariates.

    :return: (grid points, grid masses, covariates at the outer nodes, outer node masses).
    """
    selected = list(selector.columns)
    rest = [j for j in range(pop.dimension) if j not in selected]
    covariance = pop.covariance_matrix
    if selected and rest and not np.allclose(covariance[np.ix_(selected, rest)], 0.0):
        raise ValueError(f'quadrature needs {selector.label} independent of the remaining covariates')

    outer, outer_mass = _gauss_hermite_grid(len(selected), nodes)
    inner, inner_mass = _gauss_hermite_grid(len(rest), nodes)
    mean = pop.mean_vector
    outer_w = mean[selected] + outer @ covariance_factor(covariance[np.ix_(selected, selected)]).T
    inner_w = mean[rest] + inner @ covariance_factor(covariance[np.ix_(rest, rest)]).T

    # Every outer node paired with every inner node
    w = np.empty((len(outer_w) * len(inner_w), pop.dimension))
    w[:, selected] = np.repeat(outer_w, len(inner_w), axis=0)
    w[:, rest] = np.tile(inner_w, (len(outer_w), 1))
    mass = np.repeat(outer_mass, len(inner_w)) * np.tile(inner_mass, len(outer_w))

    nodes_w = np.zeros((len(outer_w), pop.dimension))
    nodes_w[:, selected] = outer_w
    return w, mass, nodes_w, outer_mass


def _quadrature_marginals(pop: PopulationSpec, link: Link, selector: CovariateSelector,
                          nodes: int) -> TrueMarginals:
    w, mass, nodes_w, outer_mass = _product_grid(pop, selector, nodes)
    p1 = expit(pop.linear_predictor(w, 1))
    p0 = expit(pop.linear_predictor(w, 0))
    mu1, mu0 = float(np.dot(mass, p1)), float(np.dot(mass, p0))

    # E{m_a(W) | X}: integrate the inner grid, then pool outer nodes sharing an X value
    dimension = selector.dimension
    frame = pd.DataFrame(selector.apply(nodes_w), columns=[f'x{j}' for j in range(dimension)])
    frame['mass'] = outer_mass
    frame['m1'] = (p1 * mass).reshape(len(nodes_w), -1).sum(axis=1)
    frame['m0'] = (p0 * mass).reshape(len(nodes_w), -1).sum(axis=1)
    grouped = _pool(frame, dimension)
    m1 = (grouped['m1'] / grouped['mass']).to_numpy()
    m0 = (grouped['m0'] / grouped['mass']).to_numpy()
    cells = _cell_keys(grouped, dimension) if selector.is_discrete or not dimension else None
    return _summarize(link, mu1, mu0, m1 * (1.0 - m1), m0 * (1.0 - m0), grouped['mass'].to_numpy(),
                      cells, 'quadrature')


def _chunks(generator: PopulationGenerator, draws: int, seed: int):
    rng = np.random.default_rng(seed)
    remaining = draws
    while remaining > 0:
        size = min(MC_CHUNK, remaining)
        remaining -= size
        w = generator.draw_covariates(size, rng)
        yield w, generator.success_probabilities(w, Arm.experimental), generator.success_probabilities(w, Arm.control)


def _monte_carlo_marginals(pop: PopulationSpec, link: Link, selector: CovariateSelector,
                           draws: int, seed: int) -> TrueMarginals:
    full = selector.dimension == pop.dimension and not selector.is_discrete
    if not full and not selector.is_discrete and selector.dimension > 0:
        raise ValueError(f'Monte Carlo true values need X = W or a discrete X, got {selector.label}')
    generator = PopulationGenerator(pop)

    if not full:
        frames = []
        for w, p1, p0 in _chunks(generator, draws, seed):
            chunk = pd.DataFrame(selector.apply(w).astype(int),
                                 columns=[f'x{j}' for j in range(selector.dimension)])
            chunk['count'], chunk['m1'], chunk['m0'] = 1.0, p1, p0
            frames.append(_pool(chunk, selector.dimension))
        combined = pd.concat(frames)
        if selector.dimension:
            grouped = combined.groupby(level=list(range(combined.index.nlevels)), sort=True).sum()
        else:
            grouped = combined.sum().to_frame().T
        counts = grouped['count'].to_numpy()
        mu1 = float(grouped['m1'].sum() / draws)
        mu0 = float(grouped['m0'].sum() / draws)
        m1 = grouped['m1'].to_numpy() / counts
        m0 = grouped['m0'].to_numpy() / counts
        return _summarize(link, mu1, mu0, m1 * (1.0 - m1), m0 * (1.0 - m0), counts / draws,
                          _cell_keys(grouped, selector.dimension), 'monte_carlo')

    # X = W: the first pass gives the means, the second replays the draws for variances and p_opt
    mu1 = mu0 = 0.0
    for _, p1, p0 in _chunks(generator, draws, seed):
        mu1 += float(np.sum(p1)) / draws
        mu0 += float(np.sum(p0)) / draws
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    ev1 = ev0 = mean_p = 0.0
    for _, p1, p0 in _chunks(generator, draws, seed):
        v1, v0 = p1 * (1.0 - p1), p0 * (1.0 - p0)
        ev1 += float(np.sum(v1)) / draws
        ev0 += float(np.sum(v0)) / draws
        mean_p += float(np.sum(allocation_probabilities(gprime1, gprime0, v1, v0, clamp=None))) / draws
    pi = optimal_pi(AllocationInputs(link, mu1, mu0, ev1, ev0), clamp=None)
    return TrueMarginals(mu1=mu1, mu0=mu0, delta=link.value(mu1) - link.value(mu0), ev1=ev1, ev0=ev0,
                         pi_opt=pi, mean_p_opt=mean_p, method='monte_carlo')


@lru_cache(maxsize=64)
def true_marginals(pop: PopulationSpec, link: Link, selector: CovariateSelector | None = None,
                   method: str = 'quadrature', nodes: int = QUADRATURE_NODES, draws: int = MC_DRAWS,
                   seed: int = 0) -> TrueMarginals:
    """
    True marginal means, effect and optimal allocations of a binary population.

    The quadrature method integrates on a tensor Gauss-Hermite grid and needs the
    selected covariates to be independent of the others. The Monte Carlo method
    averages success probabilities over `draws` covariate draws.

    :param pop: Data-generating process.
    :param link: Link of the estimand.
    :param selector: Coarsening X for the optimal allocations, W when omitted.
    :param method: ``quadrature`` or ``monte_carlo``.
    :param nodes: Nodes per dimension of the quadrature rule.
    :param draws: Number of Monte Carlo draws.
    :param seed: Seed of the Monte Carlo stream.
    :return: Ground-truth quantities.
    """
    if pop.outcome_kind is not OutcomeKind.binary:
        raise ValueError(f'Unknown outcome kind: {pop.outcome_kind}')
    if selector is None:
        selector = CovariateSelector(columns=tuple(range(pop.dimension)))
    logger.debug("True values for %s by %s", selector.label, method)
    match method:
        case 'quadrature':
            return _quadrature_marginals(pop, link, selector, nodes)
        case 'monte_carlo':
            return _monte_carlo_marginals(pop, link, selector, draws, seed)
        case _:
            raise ValueError(f'Unknown method: {method}')


def _influence_variance(link: Link, p1: np.ndarray, p0: np.ndarray, mass: np.ndarray, p: np.ndarray) -> float:
    mu1, mu0 = float(np.dot(mass, p1)), float(np.dot(mass, p0))
    gprime1, gprime0 = link.deriv(mu1), link.deriv(mu0)
    terms = (gprime1 ** 2 * p1 * (1.0 - p1) / p
             + gprime0 ** 2 * p0 * (1.0 - p0) / (1.0 - p)
             + (gprime1 * (p1 - mu1) - gprime0 * (p0 - mu0)) ** 2)
    return float(np.dot(mass, terms))


def asymptotic_variance(pop: PopulationSpec, link: Link, propensity: float | Callable[[np.ndarray], np.ndarray],
                        nodes: int = QUADRATURE_NODES) -> float:
    """
    Variance of one stage's efficient influence term under assignment probabilities p(W),
    E[g'(mu1)^2 v_1(W)/p(W) + g'(mu0)^2 v_0(W)/{1 - p(W)} + {g'(mu1)(m_1(W) - mu1) - g'(mu0)(m_0(W) - mu0)}^2].

    :param pop: Binary data-generating process.
    :param link: Link of the estimand.
    :param propensity: Constant probability, or a function of the covariate matrix such as
                       ``AssignmentMechanism.probabilities``.
    :param nodes: Nodes per dimension of the quadrature rule.
    :return: Stage variance component at the true outcome regressions.
    """
    w, mass, _, _ = _product_grid(pop, CovariateSelector(columns=tuple(range(pop.dimension))), nodes)
    p = propensity(w) if callable(propensity) else np.full(len(w), float(propensity))
    return _influence_variance(link, expit(pop.linear_predictor(w, 1)), expit(pop.linear_predictor(w, 0)),
                               mass, np.asarray(p, dtype=float))


@dataclass(frozen=True)
class EfficiencyBounds:
    """
    Large-sample efficiency of a two-stage design whose first stage uses 1:1 randomization,
    relative to a one-stage 1:1 trial of the same total size.

    :param sigma2_balanced: Stage variance component at p = 0.5.
    :param pi_cir: Clamped optimal CIR allocation for X.
    :param sigma2_cir: Stage variance component at pi_cir.
    :param sigma2_cdr: Stage variance component at the clamped optimal CDR propensity on X.
    :param re_cir: Relative efficiency of the CIR design with optimal stage weights.
    :param re_cdr: Relative efficiency of the CDR design with optimal stage weights.
    """
    sigma2_balanced: float
    pi_cir: float
    sigma2_cir: float
    sigma2_cdr: float
    re_cir: float
    re_cdr: float


def efficiency_bounds(pop: PopulationSpec, link: Link, selector: CovariateSelector | None = None,
                      first_fraction: float = 0.5, clamp: float = DEFAULT_CLAMP,
                      nodes: int = QUADRATURE_NODES) -> EfficiencyBounds:
    """
    Relative efficiencies reachable by optimized two-stage designs adapting on X.

    With inverse-variance stage weights the scaled variance of a two-stage estimator is
    1 / {f / sigma2(0.5) + (1 - f) / sigma2(p_2)}, where f is the share of the first stage
    and p_2 the optimal second-stage allocation on X.

    :param pop: Binary data-generating process.
    :param link: Link of the estimand.
    :param selector: Coarsening X the second stage adapts on, W when omitted.
    :param first_fraction: n_1 / (n_1 + n_2).
    :param clamp: Clamp applied to the optimal allocations.
    :param nodes: Nodes per dimension of the quadrature rule.
    :return: Variance components and relative efficiencies.
    """
    if not 0 < first_fraction < 1:
        raise ValueError(f'first_fraction must lie in (0, 1), got {first_fraction}')
    if selector is None:
        selector = CovariateSelector(columns=tuple(range(pop.dimension)))
    w, mass, _, _ = _product_grid(pop, selector, nodes)
    p1 = expit(pop.linear_predictor(w, 1))
    p0 = expit(pop.linear_predictor(w, 0))
    mu1, mu0 = float(np.dot(mass, p1)), float(np.dot(mass, p0))

    # m_a(X) at every grid point: grid points sharing an X value form one group
    if selector.columns:
        _, group = np.unique(selector.apply(w), axis=0, return_inverse=True)
        group = np.asarray(group).ravel()
    else:
        group = np.zeros(len(w), dtype=int)
    total = np.bincount(group, weights=mass)
    m1 = (np.bincount(group, weights=mass * p1) / total)[group]
    m0 = (np.bincount(group, weights=mass * p0) / total)[group]
    v1, v0 = m1 * (1.0 - m1), m0 * (1.0 - m0)

    pi = optimal_pi(AllocationInputs(link, mu1, mu0, float(np.dot(mass, v1)), float(np.dot(mass, v0))), clamp=clamp)
    p = allocation_probabilities(link.deriv(mu1), link.deriv(mu0), v1, v0, clamp=clamp)

    balanced = _influence_variance(link, p1, p0, mass, np.full(len(w), 0.5))
    sigma2_cir = _influence_variance(link, p1, p0, mass, np.full(len(w), pi))
    sigma2_cdr = _influence_variance(link, p1, p0, mass, np.asarray(p, dtype=float))

    def relative(sigma2: float) -> float:
        return first_fraction + (1.0 - first_fraction) * balanced / sigma2

    return EfficiencyBounds(sigma2_balanced=balanced, pi_cir=pi, sigma2_cir=sigma2_cir, sigma2_cdr=sigma2_cdr,
                            re_cir=relative(sigma2_cir), re_cdr=relative(sigma2_cdr))
