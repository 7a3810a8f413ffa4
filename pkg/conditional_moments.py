from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
import pandas as pd

from design_types import Arm
from trial_types import CovariateSelector, StageData


@dataclass(frozen=True)
class CellMoments:
    """
    Outcome moments of one arm within one covariate cell.

    :param mean: Sample mean.
    :param variance: Sample variance (denominator count - 1), None when count < 2.
    :param count: Number of contributing records.
    """
    mean: float
    variance: float | None
    count: int

    @property
    def complete(self) -> bool:
        return self.count >= 2


@dataclass(frozen=True)
class ConditionalMoments:
    """
    Empirical m_a(cell) and v_a(cell) of one arm.
    """
    arm: Arm
    selector: CovariateSelector
    cells: Dict[Tuple[int, ...], CellMoments]

    @property
    def total(self) -> int:
        return sum(cell.count for cell in self.cells.values())

    def complete_cells(self) -> Dict[Tuple[int, ...], CellMoments]:
        return {key: cell for key, cell in self.cells.items() if cell.complete}


def cell_frame(data: Sequence[StageData], selector: CovariateSelector) -> pd.DataFrame:
    """
    Pooled records with one integer column per cell coordinate.

    :param data: Stages to pool.
    :param selector: Discrete selector defining the cells.
    :return: Frame with columns x0..x{q-1}, a and y.
    """
    w = np.vstack([stage.w for stage in data])
    codes = np.asarray(selector.cells(w), dtype=int).reshape(len(w), selector.dimension)
    frame = pd.DataFrame(codes, columns=[f'x{j}' for j in range(selector.dimension)])
    frame['a'] = np.concatenate([stage.a for stage in data])
    frame['y'] = np.concatenate([stage.y for stage in data])
    return frame


def _summarize(y: pd.Series) -> CellMoments:
    count = len(y)
    variance = float(y.var(ddof=1)) if count >= 2 else None
    return CellMoments(mean=float(y.mean()), variance=variance, count=count)


def empirical_conditional_moments(data: Sequence[StageData], arm: Arm,
                                  selector: CovariateSelector) -> ConditionalMoments:
    """
    Per-cell sample mean and variance of the outcomes of one arm.

    :param data: Stages whose records are pooled.
    :param arm: Arm to summarize.
    :param selector: Discrete selector defining the cells.
    :return: Moments of every cell observed in that arm.
    """
    frame = cell_frame(data, selector)
    frame = frame[frame['a'] == int(arm)]
    keys = [f'x{j}' for j in range(selector.dimension)]
    if not keys:
        cells = {(): _summarize(frame['y'])} if len(frame) else {}
        return ConditionalMoments(arm=arm, selector=selector, cells=cells)
    cells = {}
    for key, group in frame.groupby(keys, sort=True):
        cells[tuple(int(v) for v in key)] = _summarize(group['y'])
    return ConditionalMoments(arm=arm, selector=selector, cells=cells)
