try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import pytest

from design_types import DesignClass, EstimatorKind, LinkKind, VarianceModel
from errors import ConfigError
from fixed_probability import FixedProbability
from study_config import build_config, dump_config, parse_config, validate_config

CONFIGS = Path(__file__).parent.parent / 'configs'

POPULATION = """
[scenario.population]
mean = [0.0, 0.0, 0.0]
covariance = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]
gamma0 = -2.5
gamma2 = [-0.2, -0.2, 0.2]
gamma3 = [1.0, -1.0, -1.5]
"""

MINIMAL = """
[[scenario]]
name = "mini"
gamma1 = 1.0
""" + POPULATION + """
[[scenario.design]]
name = "1S"
stage_sizes = [100]
"""


def write(tmp_path, text):
    path = tmp_path / 'study.toml'
    path.write_text(text, encoding='utf-8')
    return path


def issues_of(tmp_path, text):
    with pytest.raises(ConfigError) as error:
        parse_config(write(tmp_path, text))
    return error.value.issues


def test_minimal_study_gets_defaults(tmp_path):
    config = parse_config(write(tmp_path, MINIMAL))
    assert config.name == 'study'
    assert config.format == 'csv'
    assert config.jobs == 1
    assert config.output_dir == 'results'
    (scenario,) = config.scenarios
    assert scenario.name == 'mini'
    assert scenario.replications == 2000
    assert scenario.seed == 2024
    assert scenario.level == 0.95
    assert scenario.setting == 1
    assert scenario.link.kind is LinkKind.logit
    assert scenario.estimators == (EstimatorKind.simple, EstimatorKind.optimized)
    assert scenario.reference_cell == ('1S', EstimatorKind.simple)
    assert scenario.x_selector == 'none'
    assert scenario.outcome_selector is None
    stage1 = scenario.designs[0].stage1
    assert isinstance(stage1, FixedProbability) and stage1.pi == 0.5


def test_setting1_grid():
    config = parse_config(CONFIGS / 'setting1.toml')
    assert len(config.scenarios) == 14
    assert all([d.name for d in s.designs] == ['1S', '2S CIR', '2S CDR'] for s in config.scenarios)
    first = config.scenarios[0]
    assert first.name == 'setting1 g1=1 W1'
    assert first.gamma1 == 1.0
    assert config.scenarios[-1].x_selector == 'W1,W2,W3'
    assert config.scenarios[-1].gamma1 == 2.0
    rule = first.designs[2].adaptation[0]
    assert rule.design_class is DesignClass.cdr
    assert rule.selector.columns == (0,)
    assert rule.variance_model is VarianceModel.logistic_working
    assert rule.clamp == 0.05


def test_setting2_optimizes_stage_one():
    config = parse_config(CONFIGS / 'setting2.toml')
    assert len(config.scenarios) == 14
    scenario = config.scenarios[0]
    assert scenario.preliminary_n == 100
    assert scenario.setting == 2
    assert scenario.reference_cell == ('1S CIR', EstimatorKind.optimized)
    hybrid = scenario.designs[-1]
    assert hybrid.stage1_rule.design_class is DesignClass.cir
    assert hybrid.adaptation[0].design_class is DesignClass.cdr


@pytest.mark.parametrize('path', sorted(CONFIGS.glob('*.toml')), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    config = parse_config(path)
    assert config.scenarios
    names = [scenario.name for scenario in config.scenarios]
    assert len(set(names)) == len(names)


def test_discrete_config_uses_cell_means():
    config = parse_config(CONFIGS / 'discrete.toml')
    for scenario in config.scenarios:
        assert scenario.outcome_selector is not None and scenario.outcome_selector.is_discrete
        assert scenario.link.kind is LinkKind.identity


def test_stage_count_mismatch_names_stage_sizes(tmp_path):
    text = MINIMAL.replace('stage_sizes = [100]', 'k = 2\nstage_sizes = [250]\nadaptation = [{ class = "cir" }]')
    issues = issues_of(tmp_path, text)
    assert 'scenario[0].design[0].stage_sizes: expected 2 entries for k=2, got 1' in issues


def test_every_problem_is_reported(tmp_path):
    text = MINIMAL.replace('gamma1 = 1.0', 'gamma1 = "one"\nlink = "probit"\nreplications = 0')
    text = text.replace('stage_sizes = [100]', 'stage_sizes = [100]\nstage1_pi = 1.5\ncolour = "red"')
    issues = issues_of(tmp_path, text)
    wheres = [issue.split(':')[0] for issue in issues]
    for where in ('scenario[0].gamma1[0]', 'scenario[0].link', 'scenario[0].replications',
                  'scenario[0].design[0].stage1_pi', 'scenario[0].design[0].colour'):
        assert where in wheres


def test_stage_one_rule_needs_preliminary_data(tmp_path):
    text = MINIMAL.replace('stage_sizes = [100]', 'stage_sizes = [100]\nstage1_rule = { class = "cir" }')
    issues = issues_of(tmp_path, text)
    assert any(issue.startswith('scenario[0].design[0].stage1_rule') for issue in issues)


def test_empirical_models_need_dichotomized_covariates(tmp_path):
    text = MINIMAL.replace('gamma1 = 1.0', 'gamma1 = 1.0\nx_selectors = [[1]]\noutcome_model = "empirical"')
    issues = issues_of(tmp_path, text)
    assert any(issue.startswith('scenario[0].outcome_model') for issue in issues)


def test_unknown_reference(tmp_path):
    text = MINIMAL.replace('gamma1 = 1.0', 'gamma1 = 1.0\nreference = { design = "2S", estimator = "simple" }')
    assert any(issue.startswith('scenario[0].reference.design') for issue in issues_of(tmp_path, text))


def test_syntax_error_reports_position(tmp_path):
    (issue,) = issues_of(tmp_path, '[study]\nname = \n')
    assert 'line 2' in issue


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / 'absent.toml')


def test_duplicate_expanded_names(tmp_path):
    text = MINIMAL + MINIMAL
    issues = issues_of(tmp_path, text)
    assert any('mini' in issue and issue.startswith('scenario:') for issue in issues)


def test_normalized_document_round_trips():
    normalized = validate_config(tomllib.loads((CONFIGS / 'setting2.toml').read_text(encoding='utf-8')))
    again = validate_config(tomllib.loads(dump_config(normalized)))
    assert again == normalized
    assert build_config(again).config_hash == build_config(normalized).config_hash
