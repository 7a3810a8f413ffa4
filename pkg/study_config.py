import hashlib
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple

import tomli_w

from design_types import DesignClass, EstimatorKind, LinkKind, VarianceModel, WorkingModelLayout
from errors import ConfigError
from fixed_probability import FixedProbability
from links import Link
from monte_carlo import Scenario
from trial_types import AdaptationRule, CovariateSelector, DesignSpec, PopulationSpec

logger = logging.getLogger(__name__)

DEFAULTS = {
    'name': 'study',
    'seed': 2024,
    'replications': 2000,
    'level': 0.95,
    'clamp': 0.05,
    'jobs': 1,
    'format': 'csv',
    'output_dir': 'results',
}
FORMATS = ('csv', 'table')
OUTCOME_MODELS = ('logistic', 'empirical')

STUDY_KEYS = set(DEFAULTS)
SCENARIO_KEYS = {'name', 'setting', 'link', 'preliminary_n', 'gamma1', 'x_selectors', 'estimators', 'reference',
                 'outcome_model', 'replications', 'level', 'seed', 'population', 'design'}
POPULATION_KEYS = {'mean', 'covariance', 'gamma0', 'gamma2', 'gamma3', 'outcome'}
DESIGN_KEYS = {'name', 'k', 'stage_sizes', 'stage1_pi', 'stage1_rule', 'adaptation', 'clamp'}
RULE_KEYS = {'class', 'variance_model', 'layout', 'clamp'}


@dataclass(frozen=True)
class StudyConfig:
    """
    A validated study.

    :param name: Study name.
    :param scenarios: Expanded scenarios, names unique.
    :param output_dir: Directory for CSVs and the manifest.
    :param format: ``csv`` or ``table``.
    :param jobs: Number of replication workers.
    :param seed: Root seed.
    :param normalized: Normalized document the scenarios were expanded from.
    """
    name: str
    scenarios: Tuple[Scenario, ...]
    output_dir: str
    format: str
    jobs: int
    seed: int
    normalized: Dict[str, Any]

    @property
    def config_hash(self) -> str:
        return config_hash(self.normalized)


class _Issues:
    """
    Collects every validation problem instead of stopping at the first.
    """

    def __init__(self):
        self.items: List[str] = []

    def add(self, where: str, message: str) -> None:
        self.items.append(f'{where}: {message}')

    def unknown(self, where: str, table: dict, allowed: set) -> None:
        for key in sorted(set(table) - allowed):
            self.add(f'{where}.{key}', 'unknown field')

    def integer(self, where: str, value, minimum: int | None = None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.add(where, f'expected an integer, got {value!r}')
            return None
        if minimum is not None and value < minimum:
            self.add(where, f'must be >= {minimum}, got {value}')
            return None
        return value

    def number(self, where: str, value, low: float | None = None, high: float | None = None,
               open_interval: bool = True):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
            self.add(where, f'expected a number, got {value!r}')
            return None
        value = float(value)
        if low is not None and high is not None:
            inside = low < value < high if open_interval else low <= value <= high
            if not inside:
                bounds = f'({low}, {high})' if open_interval else f'[{low}, {high}]'
                self.add(where, f'must lie in {bounds}, got {value}')
                return None
        return value

    def vector(self, where: str, value, length: int | None = None):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            self.add(where, f'expected a list of numbers, got {value!r}')
            return None
        if length is not None and len(value) != length:
            self.add(where, f'expected {length} entries, got {len(value)}')
            return None
        return [float(v) for v in value]

    def choice(self, where: str, value, options):
        if value not in options:
            self.add(where, f'expected one of {", ".join(options)}, got {value!r}')
            return None
        return value

    def table(self, where: str, value) -> dict | None:
        if not isinstance(value, dict):
            self.add(where, f'expected a table, got {value!r}')
            return None
        return value


def _enum_names(enum) -> List[str]:
    return [member.name for member in enum]


def load_toml(path: str | Path) -> dict:
    """
    Read a TOML file, reporting syntax errors with their position.
    """
    path = Path(path)
    try:
        with path.open('rb') as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError([f'{path}: no such file'])
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f'{path}: {e}'])


def _normalize_selector(issues: _Issues, where: str, value, dimension: int | None) -> dict | None:
    if isinstance(value, list):
        value = {'columns': value}
    if issues.table(where, value) is None:
        return None
    issues.unknown(where, value, {'columns', 'thresholds'})
    columns = value.get('columns')
    if not isinstance(columns, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in columns):
        issues.add(f'{where}.columns', f'expected a list of 1-based covariate indices, got {columns!r}')
        return None
    if len(set(columns)) != len(columns):
        issues.add(f'{where}.columns', f'duplicate indices {columns}')
        return None
    if any(c < 1 or (dimension is not None and c > dimension) for c in columns):
        issues.add(f'{where}.columns', f'indices must lie in 1..{dimension}, got {columns}')
        return None
    normalized = {'columns': list(columns)}
    if 'thresholds' in value:
        thresholds = value['thresholds']
        if not isinstance(thresholds, list) or len(thresholds) != len(columns) or not all(
                isinstance(t, (int, float)) and not isinstance(t, bool) for t in thresholds):
            issues.add(f'{where}.thresholds', f'expected {len(columns)} numbers (nan for continuous), '
                                              f'got {thresholds!r}')
            return None
        normalized['thresholds'] = [float(t) for t in thresholds]
    return normalized


def _dichotomized(selector: dict) -> bool:
    thresholds = selector.get('thresholds', [])
    return len(thresholds) == len(selector['columns']) and not any(math.isnan(t) for t in thresholds)


def _normalize_rule(issues: _Issues, where: str, value, clamp: float) -> dict | None:
    if issues.table(where, value) is None:
        return None
    issues.unknown(where, value, RULE_KEYS)
    return {
        'class': issues.choice(f'{where}.class', value.get('class'), _enum_names(DesignClass)),
        'variance_model': issues.choice(f'{where}.variance_model',
                                        value.get('variance_model', VarianceModel.logistic_working.name),
                                        _enum_names(VarianceModel)),
        'layout': issues.choice(f'{where}.layout', value.get('layout', WorkingModelLayout.interaction.name),
                                _enum_names(WorkingModelLayout)),
        'clamp': issues.number(f'{where}.clamp', value.get('clamp', clamp), 0.0, 0.5),
    }


def _normalize_design(issues: _Issues, where: str, value, clamp: float, preliminary_n: int) -> dict | None:
    if issues.table(where, value) is None:
        return None
    issues.unknown(where, value, DESIGN_KEYS)
    if not isinstance(value.get('name'), str) or not value.get('name'):
        issues.add(f'{where}.name', 'a design needs a name')
    sizes = value.get('stage_sizes')
    if not isinstance(sizes, list) or not sizes or not all(
            isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in sizes):
        issues.add(f'{where}.stage_sizes', f'expected a non-empty list of positive integers, got {sizes!r}')
        sizes = None
    k = value.get('k', len(sizes) if sizes else None)
    if 'k' in value and issues.integer(f'{where}.k', k, 1) is not None and sizes and len(sizes) != k:
        issues.add(f'{where}.stage_sizes', f'expected {k} entries for k={k}, got {len(sizes)}')
    design_clamp = issues.number(f'{where}.clamp', value.get('clamp', clamp), 0.0, 0.5)
    design_clamp = clamp if design_clamp is None else design_clamp
    stage1_pi = issues.number(f'{where}.stage1_pi', value.get('stage1_pi', 0.5), 0.0, 1.0)
    if stage1_pi is not None and not design_clamp <= stage1_pi <= 1 - design_clamp:
        issues.add(f'{where}.stage1_pi', f'must lie in [{design_clamp}, {1 - design_clamp}], got {stage1_pi}')

    adaptation = value.get('adaptation', [])
    if not isinstance(adaptation, list):
        issues.add(f'{where}.adaptation', f'expected a list of rules, got {adaptation!r}')
        adaptation = []
    rules = [_normalize_rule(issues, f'{where}.adaptation[{i}]', rule, design_clamp)
             for i, rule in enumerate(adaptation)]
    if isinstance(k, int) and len(rules) != k - 1:
        issues.add(f'{where}.adaptation', f'{k} stages need {k - 1} adaptation rules, got {len(rules)}')

    normalized = {'name': value.get('name'), 'k': k, 'stage_sizes': sizes, 'stage1_pi': stage1_pi,
                  'clamp': design_clamp, 'adaptation': rules}
    if 'stage1_rule' in value:
        if preliminary_n == 0:
            issues.add(f'{where}.stage1_rule', 'optimizing stage 1 needs preliminary_n > 0')
        normalized['stage1_rule'] = _normalize_rule(issues, f'{where}.stage1_rule', value['stage1_rule'],
                                                    design_clamp)
    return normalized


def _normalize_population(issues: _Issues, where: str, value) -> dict | None:
    if issues.table(where, value) is None:
        return None
    issues.unknown(where, value, POPULATION_KEYS)
    mean = issues.vector(f'{where}.mean', value.get('mean'))
    d = len(mean) if mean is not None else None
    covariance = value.get('covariance')
    if not isinstance(covariance, list) or (d is not None and len(covariance) != d):
        issues.add(f'{where}.covariance', f'expected a {d}x{d} matrix, got {covariance!r}')
        covariance = None
    else:
        rows = [issues.vector(f'{where}.covariance[{i}]', row, d) for i, row in enumerate(covariance)]
        covariance = rows if all(row is not None for row in rows) else None
    normalized = {
        'mean': mean,
        'covariance': covariance,
        'gamma0': issues.number(f'{where}.gamma0', value.get('gamma0')),
        'gamma2': issues.vector(f'{where}.gamma2', value.get('gamma2'), d),
        'gamma3': issues.vector(f'{where}.gamma3', value.get('gamma3'), d),
        'outcome': issues.choice(f'{where}.outcome', value.get('outcome', 'binary'), ['binary']),
    }
    if None not in normalized.values():
        try:
            _population(normalized, 0.0)
        except ValueError as e:
            issues.add(where, str(e))
    return normalized


def _normalize_scenario(issues: _Issues, where: str, value, study: dict) -> dict | None:
    if issues.table(where, value) is None:
        return None
    issues.unknown(where, value, SCENARIO_KEYS)
    name = value.get('name')
    if not isinstance(name, str) or not name:
        issues.add(f'{where}.name', 'a scenario needs a name')
    preliminary_n = issues.integer(f'{where}.preliminary_n', value.get('preliminary_n', 0), 0) or 0
    population = _normalize_population(issues, f'{where}.population', value.get('population'))
    dimension = len(population['mean']) if population and population['mean'] is not None else None

    gamma1 = value.get('gamma1')
    gamma1 = gamma1 if isinstance(gamma1, list) else [gamma1]
    gamma1 = [issues.number(f'{where}.gamma1[{i}]', g) for i, g in enumerate(gamma1)]

    selectors = value.get('x_selectors', [])
    if not isinstance(selectors, list):
        issues.add(f'{where}.x_selectors', f'expected a list of selectors, got {selectors!r}')
        selectors = []
    selectors = [_normalize_selector(issues, f'{where}.x_selectors[{i}]', s, dimension)
                 for i, s in enumerate(selectors)]

    estimators = value.get('estimators', [kind.name for kind in EstimatorKind])
    if not isinstance(estimators, list) or not estimators:
        issues.add(f'{where}.estimators', f'expected a non-empty list, got {estimators!r}')
        estimators = []
    estimators = [issues.choice(f'{where}.estimators[{i}]', e, _enum_names(EstimatorKind))
                  for i, e in enumerate(estimators)]

    designs = value.get('design', [])
    if not isinstance(designs, list) or not designs:
        issues.add(f'{where}.design', 'a scenario needs at least one [[scenario.design]]')
        designs = []
    designs = [_normalize_design(issues, f'{where}.design[{j}]', design, study['clamp'], preliminary_n)
               for j, design in enumerate(designs)]
    names = [design['name'] for design in designs if design]
    if len(set(names)) != len(names):
        issues.add(f'{where}.design', f'design names must be unique, got {names}')

    reference = value.get('reference', {})
    if issues.table(f'{where}.reference', reference) is not None:
        issues.unknown(f'{where}.reference', reference, {'design', 'estimator'})
        reference = {'design': reference.get('design', names[0] if names else None),
                     'estimator': reference.get('estimator', estimators[0] if estimators else None)}
        if reference['design'] not in names:
            issues.add(f'{where}.reference.design', f'{reference["design"]!r} is not a design of this scenario')
        if reference['estimator'] not in estimators:
            issues.add(f'{where}.reference.estimator', f'{reference["estimator"]!r} is not computed')

    outcome_model = issues.choice(f'{where}.outcome_model', value.get('outcome_model', 'logistic'), OUTCOME_MODELS)
    if outcome_model == 'empirical' and not all(_dichotomized(s) for s in selectors if s is not None):
        issues.add(f'{where}.outcome_model', 'the empirical outcome model needs dichotomized x_selectors')
    for j, design in enumerate(designs):
        rules = (design or {}).get('adaptation', []) + [(design or {}).get('stage1_rule')]
        for rule in rules:
            if rule and rule['variance_model'] == VarianceModel.empirical.name and not all(
                    _dichotomized(s) for s in selectors if s is not None):
                issues.add(f'{where}.design[{j}]', 'the empirical variance model needs dichotomized x_selectors')
                break

    link = issues.choice(f'{where}.link', value.get('link', LinkKind.logit.name), _enum_names(LinkKind))
    return {
        'name': name,
        'setting': issues.integer(f'{where}.setting', value.get('setting', 2 if preliminary_n else 1), 1),
        'link': link,
        'preliminary_n': preliminary_n,
        'gamma1': gamma1,
        'x_selectors': selectors,
        'estimators': estimators,
        'reference': reference,
        'outcome_model': outcome_model,
        'replications': issues.integer(f'{where}.replications',
                                       value.get('replications', study['replications']), 1),
        'level': issues.number(f'{where}.level', value.get('level', study['level']), 0.0, 1.0),
        'seed': issues.integer(f'{where}.seed', value.get('seed', study['seed']), 0),
        'population': population,
        'design': designs,
    }


def validate_config(raw: dict) -> dict:
    """
    Validate a parsed study document and fill in every default.

    :param raw: Document as read from TOML.
    :return: Normalized document; normalizing it again returns an equal document.
    :raises ConfigError: Listing every problem found.
    """
    issues = _Issues()
    issues.unknown('<root>', raw, {'study', 'scenario'})
    study = raw.get('study', {})
    if issues.table('study', study) is None:
        study = {}
    issues.unknown('study', study, STUDY_KEYS)
    merged = {**DEFAULTS, **study}
    normalized_study = {
        'name': merged['name'] if isinstance(merged['name'], str) else issues.add('study.name', 'expected a string'),
        'seed': issues.integer('study.seed', merged['seed'], 0),
        'replications': issues.integer('study.replications', merged['replications'], 1),
        'level': issues.number('study.level', merged['level'], 0.0, 1.0),
        'clamp': issues.number('study.clamp', merged['clamp'], 0.0, 0.5),
        'jobs': issues.integer('study.jobs', merged['jobs']),
        'format': issues.choice('study.format', merged['format'], FORMATS),
        'output_dir': merged['output_dir'] if isinstance(merged['output_dir'], str)
        else issues.add('study.output_dir', 'expected a string'),
    }
    if normalized_study['jobs'] == 0:
        issues.add('study.jobs', 'must not be 0')
    defaults = {key: normalized_study[key] if normalized_study[key] is not None else DEFAULTS[key]
                for key in ('clamp', 'replications', 'level', 'seed')}

    scenarios = raw.get('scenario', [])
    if not isinstance(scenarios, list):
        issues.add('scenario', 'expected [[scenario]] tables')
        scenarios = []
    normalized_scenarios = [_normalize_scenario(issues, f'scenario[{i}]', scenario, defaults)
                            for i, scenario in enumerate(scenarios)]
    if not issues.items:
        names = [name for scenario in normalized_scenarios for name, _, _ in _grid(scenario)]
        duplicates = sorted({name for name in names if names.count(name) > 1})
        if duplicates:
            issues.add('scenario', f'expanded scenario names must be unique, repeated: {", ".join(duplicates)}')
    if issues.items:
        raise ConfigError(issues.items)
    return {'study': normalized_study, 'scenario': normalized_scenarios}


def _selector(normalized: dict | None) -> CovariateSelector:
    if normalized is None:
        return CovariateSelector(columns=())
    columns = tuple(c - 1 for c in normalized['columns'])
    thresholds = tuple(normalized['thresholds']) if 'thresholds' in normalized else None
    return CovariateSelector(columns=columns, thresholds=thresholds)


def _grid(scenario: dict):
    """
    Yield (name, gamma1, selector) for every cell of a scenario family.
    """
    selectors = scenario['x_selectors'] or [None]
    for gamma1 in scenario['gamma1']:
        for selector in selectors:
            parts = [scenario['name']]
            if len(scenario['gamma1']) > 1:
                parts.append(f'g1={gamma1:g}')
            if len(selectors) > 1:
                parts.append(_selector(selector).label)
            yield ' '.join(parts), gamma1, _selector(selector)


def _population(population: dict, gamma1: float) -> PopulationSpec:
    return PopulationSpec(mean=tuple(population['mean']),
                          covariance=tuple(tuple(row) for row in population['covariance']),
                          gamma0=population['gamma0'], gamma1=gamma1,
                          gamma2=tuple(population['gamma2']), gamma3=tuple(population['gamma3']))


def _rule(rule: dict, selector: CovariateSelector) -> AdaptationRule:
    return AdaptationRule(design_class=DesignClass[rule['class']], selector=selector, clamp=rule['clamp'],
                          variance_model=VarianceModel[rule['variance_model']],
                          layout=WorkingModelLayout[rule['layout']])


def _design(design: dict, selector: CovariateSelector) -> DesignSpec:
    stage1_rule = design.get('stage1_rule')
    return DesignSpec(name=design['name'], stage_sizes=tuple(design['stage_sizes']),
                      stage1=FixedProbability(design['stage1_pi'], clamp=design['clamp']),
                      adaptation=tuple(_rule(rule, selector) for rule in design['adaptation']),
                      stage1_rule=_rule(stage1_rule, selector) if stage1_rule else None)


def expand_scenarios(normalized: dict) -> List[Scenario]:
    """
    Expand every scenario family into its gamma1 by X grid.
    """
    scenarios = []
    for family in normalized['scenario']:
        for name, gamma1, selector in _grid(family):
            scenarios.append(Scenario(
                name=name, population=_population(family['population'], gamma1),
                designs=tuple(_design(design, selector) for design in family['design']),
                estimators=tuple(EstimatorKind[e] for e in family['estimators']),
                reference=(family['reference']['design'], EstimatorKind[family['reference']['estimator']]),
                replications=family['replications'], seed=family['seed'], level=family['level'],
                link=Link(LinkKind[family['link']]), preliminary_n=family['preliminary_n'],
                setting=family['setting'], x_selector=selector.label,
                outcome_selector=selector if family['outcome_model'] == 'empirical' else None))
    return scenarios


def build_config(normalized: dict) -> StudyConfig:
    study = normalized['study']
    return StudyConfig(name=study['name'], scenarios=tuple(expand_scenarios(normalized)),
                       output_dir=study['output_dir'], format=study['format'], jobs=study['jobs'],
                       seed=study['seed'], normalized=normalized)


def parse_config(path: str | Path) -> StudyConfig:
    """
    Read, validate and expand a study file.

    :param path: TOML study file.
    :return: Validated study with all defaults materialized.
    :raises ConfigError: On syntax errors or any validation problem.
    """
    normalized = validate_config(load_toml(path))
    config = build_config(normalized)
    logger.debug("Parsed %s: %s scenarios", path, len(config.scenarios))
    return config


def dump_config(config: StudyConfig | dict) -> str:
    """
    Serialize the normalized document of a study back to TOML.
    """
    normalized = config.normalized if isinstance(config, StudyConfig) else config
    return tomli_w.dumps(normalized)


def config_hash(normalized: dict) -> str:
    return hashlib.sha256(tomli_w.dumps(normalized).encode('utf-8')).hexdigest()
