import numpy as np
import pytest

from design_types import LinkKind
from fixed_probability import FixedProbability
from links import Link
from trial_types import PopulationSpec, StageData, TrialData


def make_stage(stage, w, a, y, mechanism=None):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    return StageData(stage=stage, w=w, a=np.asarray(a, dtype=int), y=np.asarray(y, dtype=float),
                     mechanism=mechanism or FixedProbability(0.5))


@pytest.fixture
def setting1_population():
    return PopulationSpec(mean=(0.0, 0.0, 0.0),
                          covariance=((0.5, 0.0, 0.0), (0.0, 0.5, 0.0), (0.0, 0.0, 0.5)),
                          gamma0=-2.5, gamma1=1.0, gamma2=(-0.2, -0.2, 0.2), gamma3=(1.0, -1.0, -1.5))


@pytest.fixture
def logit():
    return Link(LinkKind.logit)


@pytest.fixture
def identity():
    return Link(LinkKind.identity)


@pytest.fixture
def two_stage_trial():
    """
    Twelve records per stage, stage 1 under pi = 0.5 and stage 2 under pi = 0.6.
    """
    w1 = np.array([[-0.8, 0.1], [0.3, -0.2], [1.1, 0.4], [-0.5, -0.9], [0.2, 0.7], [0.9, -0.3],
                   [-1.2, 0.5], [0.6, 0.2], [-0.1, -0.6], [0.4, 1.0], [-0.7, 0.3], [1.5, -1.1]])
    a1 = [1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]
    y1 = [1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 0]
    w2 = np.array([[0.5, -0.4], [-0.3, 0.8], [1.0, 0.0], [-1.0, 0.2], [0.1, -0.5], [0.7, 0.6],
                   [-0.4, -0.1], [0.8, 0.9], [-0.9, -0.7], [0.2, 0.3], [1.3, -0.2], [-0.6, 0.4]])
    a2 = [1, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 0]
    y2 = [1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 1, 1]
    return TrialData(stages=(make_stage(1, w1, a1, y1, FixedProbability(0.5)),
                             make_stage(2, w2, a2, y2, FixedProbability(0.6))))
