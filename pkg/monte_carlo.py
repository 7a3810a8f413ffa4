import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from design_types import EstimatorKind, LinkKind
from errors import DegenerateVarianceError, EstimationError, LinkDomainError
from links import Link
from population import TrueMarginals, true_marginals
from trial_runner import TrialRunner
from trial_types import CovariateSelector, DesignSpec, PopulationSpec

logger = logging.getLogger(__name__)

# A study is flagged invalid when more than this share of a design's replications fail
MAX_FAILURE_RATE = 0.01

REPLICATION_FAILURES = (EstimationError, LinkDomainError, DegenerateVarianceError)


@dataclass(frozen=True)
class Scenario:
    """
    One cell of a simulation study: a population, the designs compared on it and the
    estimators computed for each design.

    :param name: Unique scenario name.
    :param population: Data-generating process.
    :param designs: Designs to simulate.
    :param estimators: Estimators computed on every trial.
    :param reference: (design name, estimator) that relative efficiencies are taken against.
    :param replications: Trials per design.
    :param seed: Root seed of every replication stream.
    :param level: Confidence level of the intervals.
    :param link: Link of the estimand.
    :param preliminary_n: Size of the preliminary dataset, 0 for none.
    :param setting: Study setting label (1 without preliminary data, 2 with).
    :param x_selector: Label of the coarsening X the adaptive designs optimize on.
    :param outcome_selector: Discrete selector for cell-mean outcome regression, None for the logistic fit.
    """
    name: str
    population: PopulationSpec
    designs: Tuple[DesignSpec, ...]
    estimators: Tuple[EstimatorKind, ...] = (EstimatorKind.simple, EstimatorKind.optimized)
    reference: Tuple[str, EstimatorKind] | None = None
    replications: int = 2000
    seed: int = 2024
    level: float = 0.95
    link: Link = field(default_factory=lambda: Link(LinkKind.logit))
    preliminary_n: int = 0
    setting: int = 1
    x_selector: str = ''
    outcome_selector: CovariateSelector | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError(f'replications must be >= 1, got {self.replications}')
        if not self.designs:
            raise ValueError(f'scenario {self.name} has no designs')
        if not self.estimators:
            raise ValueError(f'scenario {self.name} has no estimators')
        names = [design.name for design in self.designs]
        if len(set(names)) != len(names):
            raise ValueError(f'design names must be unique, got {names}')
        if self.preliminary_n < 0:
            raise ValueError(f'preliminary_n must be >= 0, got {self.preliminary_n}')
        for design in self.designs:
            if design.stage1_rule is not None and self.preliminary_n == 0:
                raise ValueError(f'design {design.name} optimizes stage 1 without preliminary data')
        design, kind = self.reference_cell
        if design not in names or kind not in self.estimators:
            raise ValueError(f'reference {design}/{kind.value} is not simulated')
        if self.outcome_selector is not None and not self.outcome_selector.is_discrete:
            raise ValueError(f'outcome selector {self.outcome_selector.label} is not discrete')

    @property
    def reference_cell(self) -> Tuple[str, EstimatorKind]:
        return self.reference or (self.designs[0].name, self.estimators[0])

    @property
    def gamma1(self) -> float:
        return self.population.gamma1


@dataclass(frozen=True)
class SummaryRow:
    """
    Operating characteristics of one (design, estimator) cell.
    """
    scenario: str
    setting: int
    gamma1: float
    design: str
    estimator: str
    x_selector: str
    reps: int
    failures: int
    mean_delta: float
    bias: float
    emp_var: float
    emp_sd: float
    median_se: float
    rel_eff: float
    coverage: float
    mean_pi2: float


@dataclass(frozen=True)
class ScenarioSummary:
    """
    Aggregated Monte Carlo results of a scenario.

    :param scenario: Scenario name.
    :param rows: One row per design and estimator, in simulation order.
    :param truth: Ground truth the estimates are compared against.
    :param failures: Failed replications per design.
    :param interim_fallbacks: Interim analyses that kept the previous mechanism, per design.
    :param unresolved_cells: Fallback propensity lookups per design.
    :param valid: False when some design failed in more than 1% of its replications.
    """
    scenario: str
    rows: Tuple[SummaryRow, ...]
    truth: TrueMarginals
    failures: Dict[str, int]
    interim_fallbacks: Dict[str, int]
    unresolved_cells: Dict[str, int]
    valid: bool

    def row(self, design: str, estimator: EstimatorKind) -> SummaryRow:
        for row in self.rows:
            if row.design == design and row.estimator == estimator.value:
                return row
        raise KeyError(f'no row for {design}/{estimator.value}')

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.__dict__ for row in self.rows])


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """
    Stream of replication rep, a pure function of (seed, rep). Every design of a scenario
    runs replication rep on the same stream, so designs are compared on common patients.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))


def simulate_replication(scenario: Scenario, design_index: int, rep: int) -> List[dict]:
    """
    Run and analyse one trial.

    :return: One record per estimator, or a single failure record.
    """
    design = scenario.designs[design_index]
    runner = TrialRunner(scenario, design)
    try:
        outcome = runner.run(replication_rng(scenario.seed, rep))
    except REPLICATION_FAILURES as e:
        logger.warning("Replication %s of %s failed: %s", rep, design.name, e)
        return [{'design': design.name, 'rep': rep, 'failed': True}]
    diagnostics = outcome.diagnostics
    return [{'design': design.name, 'rep': rep, 'failed': False, 'estimator': estimate.estimator_kind.value,
             'delta_hat': estimate.delta_hat, 'se': estimate.se, 'ci_low': estimate.ci[0],
             'ci_high': estimate.ci[1], 'mean_pi2': diagnostics.mean_pi2,
             'fallbacks': diagnostics.interim_fallbacks, 'unresolved': diagnostics.unresolved_cells}
            for estimate in outcome.estimates]


def summarize(scenario: Scenario, records: pd.DataFrame, truth: TrueMarginals) -> ScenarioSummary:
    """
    Aggregate replication records into per-cell operating characteristics.

    :param scenario: Simulated scenario.
    :param records: Output of `simulate_replication` for every replication.
    :param truth: True marginal quantities of the population.
    :return: Summary with bias, variance, coverage and relative efficiency per cell.
    """
    failures, fallbacks, unresolved = {}, {}, {}
    cells = {}
    for design in scenario.designs:
        own = records[records['design'] == design.name]
        failed = own[own['failed']]
        failures[design.name] = int(failed['rep'].nunique())
        ok = own[~own['failed']]
        first = ok.drop_duplicates('rep')
        fallbacks[design.name] = int(first['fallbacks'].sum()) if len(first) else 0
        unresolved[design.name] = int(first['unresolved'].sum()) if len(first) else 0
        for kind in scenario.estimators:
            cells[(design.name, kind)] = ok[ok['estimator'] == kind.value] if len(ok) else ok

    reference = cells[scenario.reference_cell]
    reference_var = float(np.var(reference['delta_hat'].to_numpy(dtype=float), ddof=1)) \
        if len(reference) > 1 else float('nan')

    rows = []
    for (design, kind), cell in cells.items():
        n = len(cell)
        estimates = cell['delta_hat'].to_numpy(dtype=float) if n else np.array([])
        emp_var = float(np.var(estimates, ddof=1)) if n > 1 else float('nan')
        if (design, kind) == scenario.reference_cell:
            rel_eff = 1.0
        else:
            rel_eff = reference_var / emp_var if n > 1 and emp_var > 0 else float('nan')
        covered = (cell['ci_low'] <= truth.delta) & (truth.delta <= cell['ci_high']) if n else pd.Series([], dtype=bool)
        rows.append(SummaryRow(
            scenario=scenario.name, setting=scenario.setting, gamma1=scenario.gamma1, design=design,
            estimator=kind.value, x_selector=scenario.x_selector, reps=n, failures=failures[design],
            mean_delta=float(np.mean(estimates)) if n else float('nan'),
            bias=float(np.mean(estimates)) - truth.delta if n else float('nan'),
            emp_var=emp_var, emp_sd=float(np.sqrt(emp_var)),
            median_se=float(np.median(cell['se'])) if n else float('nan'),
            rel_eff=rel_eff, coverage=float(np.mean(covered)) if n else float('nan'),
            mean_pi2=float(np.mean(cell['mean_pi2'])) if n else float('nan')))

    if any(unresolved.values()):
        logger.warning("Scenario %s: fallback propensity used for %s patients per design",
                       scenario.name, unresolved)
    if any(fallbacks.values()):
        logger.warning("Scenario %s: interim analyses kept the previous mechanism %s times per design",
                       scenario.name, fallbacks)
    valid = all(count <= MAX_FAILURE_RATE * scenario.replications for count in failures.values())
    if not valid:
        logger.warning("Scenario %s is invalid, failures per design: %s", scenario.name, failures)
    return ScenarioSummary(scenario=scenario.name, rows=tuple(rows), truth=truth, failures=failures,
                           interim_fallbacks=fallbacks, unresolved_cells=unresolved, valid=valid)


def monte_carlo(scenario: Scenario, jobs: int = 1) -> ScenarioSummary:
    """
    Simulate every design of a scenario and aggregate the estimates.

    Replication r of every design runs on the stream derived from (seed, r), so the
    summary does not depend on the number of workers.

    :param scenario: Scenario to simulate.
    :param jobs: Number of joblib workers.
    :return: Aggregated summary.
    """
    logger.info("Scenario %s: %s replications of %s designs", scenario.name, scenario.replications,
                len(scenario.designs))
    results = Parallel(n_jobs=jobs)(
        delayed(simulate_replication)(scenario, d, rep)
        for d in range(len(scenario.designs))
        for rep in range(scenario.replications)
    )
    records = pd.DataFrame([record for replication in results for record in replication])
    for column in ('estimator', 'delta_hat', 'se', 'ci_low', 'ci_high', 'mean_pi2', 'fallbacks', 'unresolved'):
        if column not in records:
            records[column] = np.nan
    records['failed'] = records['failed'].astype(bool)
    truth = true_marginals(scenario.population, scenario.link)
    return summarize(scenario, records, truth)
