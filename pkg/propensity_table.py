import logging
from typing import Dict, Tuple

import numpy as np

from assignment_mechanism import AssignmentMechanism, DEFAULT_CLAMP
from design_types import DesignClass
from errors import PropensityResolutionError
from trial_types import CovariateSelector

logger = logging.getLogger(__name__)

# Probability used for cells absent from the table
FALLBACK_PROBABILITY = 0.5


class PropensityTable(AssignmentMechanism):
    def __init__(self, selector: CovariateSelector, cells: Dict[Tuple[int, ...], float],
                 clamp: float = DEFAULT_CLAMP, strict: bool = False):
        """
        Covariate-dependent randomization on a discrete coarsening X of W.

        :param selector: Discrete selector mapping W to a cell key.
        :param cells: Assignment probability per cell.
        :param clamp: Allowed distance from 0 and 1.
        :param strict: Raise on unseen cells instead of falling back to 0.5.
        """
        super().__init__(clamp)
        if not selector.is_discrete:
            raise ValueError(f'a propensity table needs a discrete selector, got {selector.label}')
        for probability in cells.values():
            self.check_range(probability)
        self.selector = selector
        self.cells = {tuple(int(v) for v in key): float(p) for key, p in cells.items()}
        self.strict = strict

    @property
    def design_class(self) -> DesignClass:
        return DesignClass.cdr

    def unresolved(self, w: np.ndarray) -> int:
        """
        Count rows whose cell has no entry in the table.

        :param w: Covariate matrix.
        :return: Number of rows that need the fallback probability.
        """
        return sum(1 for key in self.selector.cells(w) if key not in self.cells)

    def probabilities(self, w: np.ndarray) -> np.ndarray:
        keys = self.selector.cells(w)
        result = np.empty(len(keys))
        missing = 0
        for i, key in enumerate(keys):
            probability = self.cells.get(key)
            if probability is None:
                if self.strict:
                    raise PropensityResolutionError(f'no propensity for cell {key} of {self.selector.label}')
                probability = FALLBACK_PROBABILITY
                missing += 1
            result[i] = probability
        if missing:
            logger.warning("Fallback probability used for %s rows on %s", missing, self.selector.label)
        return result

    def __repr__(self) -> str:
        return f'PropensityTable({self.selector.label}, {self.cells})'
