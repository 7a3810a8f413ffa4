from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Tuple

import numpy as np

from assignment_mechanism import AssignmentMechanism
from design_types import (Arm, DesignClass, EstimatorKind, OutcomeKind, VarianceModel,
                          WorkingModelLayout)


@dataclass(frozen=True)
class CovariateSelector:
    """
    Coarsening X of the baseline covariates W: a subset of columns, optionally
    dichotomized (value >= threshold maps to 1).

    :param columns: Zero-based indices into W.
    :param thresholds: Per selected column threshold, NaN to keep the column continuous.
    """
    columns: Tuple[int, ...]
    thresholds: Tuple[float, ...] | None = None

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError(f'duplicate covariate columns: {self.columns}')
        if any(c < 0 for c in self.columns):
            raise ValueError(f'covariate columns must be non-negative: {self.columns}')
        if self.thresholds is not None and len(self.thresholds) != len(self.columns):
            raise ValueError(f'{len(self.thresholds)} thresholds given for {len(self.columns)} columns')

    @property
    def dimension(self) -> int:
        return len(self.columns)

    @property
    def is_discrete(self) -> bool:
        """
        Whether every selected coordinate is dichotomized. An empty X is a single cell.
        """
        if not self.columns:
            return True
        return self.thresholds is not None and not any(np.isnan(t) for t in self.thresholds)

    @property
    def label(self) -> str:
        """
        Human-readable name, e.g. ``W1,W3`` or ``W2>=0``.
        """
        if not self.columns:
            return 'none'
        parts = []
        for i, column in enumerate(self.columns):
            part = f'W{column + 1}'
            if self.thresholds is not None and not np.isnan(self.thresholds[i]):
                part += f'>={self.thresholds[i]:g}'
            parts.append(part)
        return ','.join(parts)

    def apply(self, w: np.ndarray) -> np.ndarray:
        """
        Map covariate rows W to X.

        :param w: Covariate matrix of shape (n, d).
        :return: Matrix of shape (n, len(columns)).
        """
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if self.columns and max(self.columns) >= w.shape[1]:
            raise ValueError(f'selector {self.label} needs {max(self.columns) + 1} covariates, got {w.shape[1]}')
        x = w[:, list(self.columns)]
        if self.thresholds is not None:
            x = x.copy()
            for i, threshold in enumerate(self.thresholds):
                if not np.isnan(threshold):
                    x[:, i] = (x[:, i] >= threshold).astype(float)
        return x

    def cells(self, w: np.ndarray) -> List[Tuple[int, ...]]:
        """
        Discrete cell key of every row. Only defined for discrete selectors.

        :param w: Covariate matrix of shape (n, d).
        :return: One tuple of 0/1 codes per row.
        """
        if not self.is_discrete:
            raise ValueError(f'selector {self.label} is not discrete')
        x = self.apply(w).astype(int)
        return [tuple(row) for row in x]


@dataclass(frozen=True)
class PatientRecord:
    """
    Observed data of one patient.

    :param stage: Stage index, starting at 1.
    :param w: Baseline covariates W.
    :param a: Assigned arm A.
    :param y: Observed outcome Y = Y(A).
    """
    stage: int
    w: Tuple[float, ...]
    a: Arm
    y: float

    def __post_init__(self):
        if self.stage < 1:
            raise ValueError(f'stage must be >= 1, got {self.stage}')


@dataclass(frozen=True)
class PopulationSpec:
    """
    Data-generating process: multivariate normal covariates and a logistic
    model for each potential outcome,
    logit Pr{Y(a) = 1 | W} = gamma0 + gamma1 a + gamma2'W + gamma3'(a W).
    """
    mean: Tuple[float, ...]
    covariance: Tuple[Tuple[float, ...], ...]
    gamma0: float
    gamma1: float
    gamma2: Tuple[float, ...]
    gamma3: Tuple[float, ...]
    outcome_kind: OutcomeKind = OutcomeKind.binary

    def __post_init__(self):
        d = len(self.mean)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (d, d):
            raise ValueError(f'covariance must be {d}x{d}, got shape {cov.shape}')
        if not np.allclose(cov, cov.T):
            raise ValueError('covariance must be symmetric')
        if np.linalg.eigvalsh(cov).min() < -1e-10:
            raise ValueError('covariance must be positive semi-definite')
        if len(self.gamma2) != d or len(self.gamma3) != d:
            raise ValueError(f'gamma2 and gamma3 must have length {d}')

    @property
    def dimension(self) -> int:
        return len(self.mean)

    @property
    def mean_vector(self) -> np.ndarray:
        return np.asarray(self.mean, dtype=float)

    @property
    def covariance_matrix(self) -> np.ndarray:
        return np.asarray(self.covariance, dtype=float)

    def linear_predictor(self, w: np.ndarray, a) -> np.ndarray:
        """
        Logit of Pr{Y(a) = 1 | W} for every row of w.
        """
        w = np.atleast_2d(w)
        gamma2 = np.asarray(self.gamma2, dtype=float)
        gamma3 = np.asarray(self.gamma3, dtype=float)
        return self.gamma0 + self.gamma1 * a + w @ gamma2 + a * (w @ gamma3)


@dataclass(frozen=True)
class AdaptationRule:
    """
    How an interim analysis re-optimizes the next stage's assignment mechanism.

    :param design_class: CIR (constant pi) or CDR (propensity p(X)).
    :param selector: Coarsening X of W the optimization is restricted to.
    :param clamp: Probabilities are clamped to [clamp, 1 - clamp].
    :param variance_model: Empirical cell moments (discrete X) or a logistic working model.
    :param layout: Working-model design layout.
    """
    design_class: DesignClass
    selector: CovariateSelector
    clamp: float = 0.05
    variance_model: VarianceModel = VarianceModel.logistic_working
    layout: WorkingModelLayout = WorkingModelLayout.interaction

    def __post_init__(self):
        if not 0 < self.clamp < 0.5:
            raise ValueError(f'clamp must lie in (0, 0.5), got {self.clamp}')
        if self.variance_model is VarianceModel.empirical and not self.selector.is_discrete:
            raise ValueError(f'empirical variance model needs a discrete selector, got {self.selector.label}')


@dataclass(frozen=True)
class DesignSpec:
    """
    Trial protocol.

    :param name: Design label, e.g. ``2S CIR``.
    :param stage_sizes: (n_1, ..., n_k).
    :param stage1: Pre-specified stage 1 mechanism.
    :param adaptation: One rule per interim analysis, i.e. for stages 2..k.
    :param stage1_rule: Rule optimizing stage 1 from preliminary data, when there is any.
    :param estimator_kind: Default estimator for this design.
    """
    name: str
    stage_sizes: Tuple[int, ...]
    stage1: AssignmentMechanism
    adaptation: Tuple[AdaptationRule, ...] = ()
    stage1_rule: AdaptationRule | None = None
    estimator_kind: EstimatorKind = EstimatorKind.optimized

    def __post_init__(self):
        if not self.stage_sizes:
            raise ValueError('a design needs at least one stage')
        if any(n < 1 for n in self.stage_sizes):
            raise ValueError(f'stage sizes must be positive, got {self.stage_sizes}')
        if len(self.adaptation) != self.k - 1:
            raise ValueError(f'{self.k} stages need {self.k - 1} adaptation rules, got {len(self.adaptation)}')

    @property
    def k(self) -> int:
        return len(self.stage_sizes)

    @property
    def total_size(self) -> int:
        return sum(self.stage_sizes)

    @property
    def selector(self) -> CovariateSelector | None:
        """
        Selector of the first optimization rule, if the design optimizes at all.
        """
        rules = ([self.stage1_rule] if self.stage1_rule else []) + list(self.adaptation)
        return rules[0].selector if rules else None


@dataclass(frozen=True, eq=False)
class StageData:
    """
    Data of one stage held column-wise.

    :param stage: Stage index (0 for preliminary data).
    :param w: Covariates, shape (n, d).
    :param a: Arms, shape (n,).
    :param y: Observed outcomes, shape (n,).
    :param mechanism: Mechanism that generated a.
    """
    stage: int
    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    mechanism: AssignmentMechanism

    def __post_init__(self):
        n = len(self.a)
        if self.w.shape[0] != n or len(self.y) != n:
            raise ValueError('w, a and y must have the same number of rows')

    @property
    def n(self) -> int:
        return len(self.a)

    @cached_property
    def propensities(self) -> np.ndarray:
        """
        Realized Pr(A = 1 | W) of every patient in the stage.
        """
        return self.mechanism.probabilities(self.w)

    def arm_count(self, arm: Arm) -> int:
        return int(np.sum(self.a == int(arm)))


@dataclass(frozen=True, eq=False)
class PotentialOutcomes:
    """
    Both potential outcomes of every patient, kept for diagnostics only.
    """
    y1: np.ndarray
    y0: np.ndarray


@dataclass(frozen=True, eq=False)
class TrialData:
    """
    The dataset an analysis sees: stages D_1, ..., D_k with their realized mechanisms.
    """
    stages: Tuple[StageData, ...]
    potential: Tuple[PotentialOutcomes, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        for s, stage in enumerate(self.stages, start=1):
            if stage.stage != s:
                raise ValueError(f'stage {s} is labelled {stage.stage}')

    @property
    def k(self) -> int:
        return len(self.stages)

    @property
    def stage_sizes(self) -> Tuple[int, ...]:
        return tuple(stage.n for stage in self.stages)

    @property
    def realized_mechanisms(self) -> Tuple[AssignmentMechanism, ...]:
        return tuple(stage.mechanism for stage in self.stages)

    @property
    def records(self) -> List[PatientRecord]:
        return [PatientRecord(stage=stage.stage, w=tuple(float(v) for v in stage.w[i]),
                              a=Arm(int(stage.a[i])), y=float(stage.y[i]))
                for stage in self.stages for i in range(stage.n)]

    def pooled(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        All stages stacked: (W, A, Y).
        """
        return (np.vstack([stage.w for stage in self.stages]),
                np.concatenate([stage.a for stage in self.stages]),
                np.concatenate([stage.y for stage in self.stages]))

    def check_sizes(self, stage_sizes: Tuple[int, ...]) -> None:
        if self.stage_sizes != tuple(stage_sizes):
            raise ValueError(f'stage sizes {self.stage_sizes} differ from the design {tuple(stage_sizes)}')

    def mean_assignment_probability(self, stage: int) -> float:
        """
        Average realized Pr(A = 1 | W) over the patients of a stage.
        """
        return float(np.mean(self.stages[stage - 1].propensities))
