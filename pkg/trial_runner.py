import logging
from dataclasses import dataclass
from typing import List, Tuple, TYPE_CHECKING

import numpy as np

from assignment_mechanism import AssignmentMechanism, DEFAULT_CLAMP
from design_types import EstimatorKind
from fixed_probability import FixedProbability
from interim import estimate_interim_allocation
from population import PopulationGenerator
from propensity_table import PropensityTable
from randomization import draw_assignments
from trial_analysis import (EstimateResult, NuisanceFit, empirical_outcome_regression, estimate_full,
                            fit_outcome_regression)
from trial_types import DesignSpec, PotentialOutcomes, StageData, TrialData

if TYPE_CHECKING:
    from monte_carlo import Scenario

logger = logging.getLogger(__name__)

# Preliminary data are collected under 1:1 randomization
PRELIMINARY_PI = 0.5


@dataclass(frozen=True)
class TrialDiagnostics:
    """
    Counters collected while running one trial.

    :param interim_fallbacks: Interim analyses that kept the previous mechanism.
    :param unresolved_cells: Patients assigned with the fallback probability of a propensity table.
    :param mean_assignment: Mean realized Pr(A = 1 | W) per stage.
    """
    interim_fallbacks: int
    unresolved_cells: int
    mean_assignment: Tuple[float, ...]

    @property
    def mean_pi2(self) -> float:
        """
        Mean realized assignment probability of the first adapted stage, or stage 1 for one-stage designs.
        """
        return self.mean_assignment[1] if len(self.mean_assignment) > 1 else self.mean_assignment[0]


@dataclass(frozen=True, eq=False)
class TrialOutcome:
    data: TrialData
    estimates: List[EstimateResult]
    diagnostics: TrialDiagnostics


class TrialRunner:
    def __init__(self, scenario: 'Scenario', design: DesignSpec):
        """
        Runs one adaptive trial of a design end to end.

        :param scenario: Population, link, preliminary size and estimator menu.
        :param design: Trial protocol.
        """
        self.scenario = scenario
        self.design = design
        self.generator = PopulationGenerator(scenario.population)
        self.fallbacks = 0
        self.unresolved = 0

    def _run_stage(self, stage: int, n: int, mechanism: AssignmentMechanism,
                   streams: Tuple[np.random.Generator, ...]) -> Tuple[StageData, PotentialOutcomes]:
        covariate_rng, outcome_rng, assignment_rng = streams
        w = self.generator.draw_covariates(n, covariate_rng)
        y1, y0 = self.generator.draw_potential_outcomes(w, outcome_rng)
        if isinstance(mechanism, PropensityTable):
            self.unresolved += mechanism.unresolved(w)
        a = draw_assignments(mechanism.probabilities(w), assignment_rng)
        y = np.where(a == 1, y1, y0)
        logger.debug("Stage %s: n=%s, treated=%s, %s", stage, n, int(np.sum(a)), mechanism)
        return StageData(stage=stage, w=w, a=a, y=y, mechanism=mechanism), PotentialOutcomes(y1=y1, y0=y0)

    def _adapt(self, history: List[StageData], rule, previous: AssignmentMechanism) -> AssignmentMechanism:
        mechanism = estimate_interim_allocation(history, rule, self.scenario.link, previous)
        if mechanism is previous:
            self.fallbacks += 1
        return mechanism

    def collect(self, rng: np.random.Generator) -> Tuple[TrialData, TrialDiagnostics]:
        """
        Generate the data of one trial. Each stage's mechanism is fixed before any of
        that stage's patients are drawn.

        :param rng: Replication stream, split into covariate, outcome and assignment streams.
        :return: Trial data of stages 1..k and diagnostics.
        """
        streams = tuple(rng.spawn(3))
        self.fallbacks = 0
        self.unresolved = 0
        history: List[StageData] = []

        if self.scenario.preliminary_n > 0:
            preliminary, _ = self._run_stage(0, self.scenario.preliminary_n,
                                             FixedProbability(PRELIMINARY_PI, clamp=DEFAULT_CLAMP), streams)
            history.append(preliminary)

        mechanism = self.design.stage1
        if self.design.stage1_rule is not None:
            if not history:
                raise ValueError(f'design {self.design.name} optimizes stage 1 but there is no preliminary data')
            mechanism = self._adapt(history, self.design.stage1_rule, mechanism)

        stages, potential = [], []
        for s, n in enumerate(self.design.stage_sizes, start=1):
            if s > 1:
                mechanism = self._adapt(history, self.design.adaptation[s - 2], mechanism)
            stage, outcomes = self._run_stage(s, n, mechanism, streams)
            stages.append(stage)
            potential.append(outcomes)
            history.append(stage)

        data = TrialData(stages=tuple(stages), potential=tuple(potential))
        data.check_sizes(self.design.stage_sizes)
        diagnostics = TrialDiagnostics(interim_fallbacks=self.fallbacks, unresolved_cells=self.unresolved,
                                       mean_assignment=tuple(data.mean_assignment_probability(s)
                                                             for s in range(1, data.k + 1)))
        return data, diagnostics

    def nuisance(self, data: TrialData) -> NuisanceFit:
        if self.scenario.outcome_selector is not None:
            return empirical_outcome_regression(data, self.scenario.outcome_selector)
        return fit_outcome_regression(data)

    def analyse(self, data: TrialData) -> List[EstimateResult]:
        """
        Compute every estimator of the scenario's menu on a completed trial.
        """
        nuisance = None
        results = []
        for kind in self.scenario.estimators:
            if kind is EstimatorKind.optimized and nuisance is None:
                nuisance = self.nuisance(data)
            results.append(estimate_full(data, self.scenario.link, kind, nuisance=nuisance,
                                         level=self.scenario.level))
        return results

    def run(self, rng: np.random.Generator) -> TrialOutcome:
        data, diagnostics = self.collect(rng)
        return TrialOutcome(data=data, estimates=self.analyse(data), diagnostics=diagnostics)


def run_trial(scenario: 'Scenario', rng: np.random.Generator,
              design: DesignSpec | None = None) -> Tuple[TrialData, List[EstimateResult]]:
    """
    Run one trial of a scenario's design and analyse it.

    :param scenario: Scenario to simulate.
    :param rng: Replication stream.
    :param design: Design to run, the scenario's first design when omitted.
    :return: Trial data and one estimate per estimator of the scenario.
    """
    outcome = TrialRunner(scenario, design or scenario.designs[0]).run(rng)
    return outcome.data, outcome.estimates
