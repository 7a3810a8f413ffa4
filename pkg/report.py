import csv
import io
import json
import logging
import platform
from pathlib import Path
from typing import Iterable, List, Sequence

import joblib
import numpy as np
import pandas as pd
import scipy

from monte_carlo import ScenarioSummary

logger = logging.getLogger(__name__)

COLUMNS = ['scenario', 'setting', 'gamma1', 'design', 'estimator', 'x_selector', 'reps', 'failures',
           'bias', 'emp_sd', 'median_se', 'rel_eff', 'coverage', 'mean_pi2']

FORMATTERS = {
    'gamma1': '{:g}',
    'bias': '{:.4f}',
    'emp_sd': '{:.4f}',
    'median_se': '{:.4f}',
    'rel_eff': '{:.3f}',
    'coverage': '{:.3f}',
    'mean_pi2': '{:.3f}',
}
MISSING = 'NA'


def _format(column: str, value) -> str:
    if isinstance(value, float) and np.isnan(value):
        return MISSING
    pattern = FORMATTERS.get(column)
    return pattern.format(value) if pattern else str(value)


def summary_frame(summaries: Iterable[ScenarioSummary]) -> pd.DataFrame:
    """
    All summary rows with the report columns formatted as text.
    """
    records = [{column: _format(column, getattr(row, column)) for column in COLUMNS}
               for summary in summaries for row in summary.rows]
    return pd.DataFrame(records, columns=COLUMNS)


def _pivot(frame: pd.DataFrame, values: str) -> pd.DataFrame:
    index = ['setting', 'gamma1', 'design', 'estimator']
    order = list(dict.fromkeys(frame['x_selector']))
    table = frame.pivot_table(index=index, columns='x_selector', values=values, aggfunc='first', sort=False)
    return table.reindex(columns=order)


def text_tables(frame: pd.DataFrame) -> str:
    """
    Relative efficiency, coverage and "(SD; median SE)" tables, one row per design
    and estimator, one column per X.
    """
    if frame.empty:
        return 'No results\n'
    frame = frame.copy()
    frame['sd_se'] = '(' + frame['emp_sd'] + '; ' + frame['median_se'] + ')'
    sections = []
    for title, values in (('Relative efficiency', 'rel_eff'), ('Coverage', 'coverage'),
                          ('(SD; median SE)', 'sd_se')):
        sections.append(f'{title}\n{_pivot(frame, values).to_string()}\n')
    return '\n'.join(sections)


def emit_report(summaries: Sequence[ScenarioSummary], format: str = 'csv', path: str | Path | None = None) -> str:
    """
    Render scenario summaries as CSV or as text tables.

    :param summaries: Aggregated scenarios.
    :param format: ``csv`` or ``table``.
    :param path: File to write, nothing is written when omitted.
    :return: Rendered report.
    """
    frame = summary_frame(summaries)
    match format:
        case 'csv':
            buffer = io.StringIO()
            frame.to_csv(buffer, index=False, lineterminator='\n', quoting=csv.QUOTE_MINIMAL)
            text = buffer.getvalue()
        case 'table':
            text = text_tables(frame)
        case _:
            raise ValueError(f'Unknown format: {format}')
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding='utf-8', newline='')
        logger.info("Wrote %s", path)
    return text


def versions() -> dict:
    return {'python': platform.python_version(), 'numpy': np.__version__, 'scipy': scipy.__version__,
            'pandas': pd.__version__, 'joblib': joblib.__version__}


def write_manifest(path: str | Path, records: List[dict]) -> None:
    """
    Write run records as JSON lines.

    :param path: Manifest file.
    :param records: One record per scenario plus the study record.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')
    logger.info("Wrote manifest %s", path)
