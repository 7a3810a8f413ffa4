import json

import pytest

from main import JOBS_VARIABLE, main, resolve_jobs, run_study, slug
from study_config import parse_config

STUDY = """
[study]
name = "tiny"
replications = 3
seed = 11

[[scenario]]
name = "tiny"
gamma1 = 1.0
x_selectors = [[1], [1, 2, 3]]

[scenario.population]
mean = [0.0, 0.0, 0.0]
covariance = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]
gamma0 = -1.0
gamma2 = [-0.2, -0.2, 0.2]
gamma3 = [1.0, -1.0, -1.5]

[[scenario.design]]
name = "1S"
stage_sizes = [120]

[[scenario.design]]
name = "2S CDR"
stage_sizes = [60, 60]
adaptation = [{ class = "cdr" }]
"""


@pytest.fixture
def study(tmp_path):
    path = tmp_path / 'tiny.toml'
    path.write_text(STUDY, encoding='utf-8')
    return path


def test_slug():
    assert slug('setting1 g1=1 W1,W2') == 'setting1_g1=1_W1_W2'
    assert slug('///') == 'scenario'


def test_run_writes_reports(study, tmp_path):
    out = tmp_path / 'out'
    assert run_study(parse_config(study), out=str(out), format='table') == 0
    names = sorted(path.name for path in out.iterdir())
    assert names == ['manifest.jsonl', 'summary.csv', 'summary.txt', 'tiny_W1.csv', 'tiny_W1_W2_W3.csv']
    summary = (out / 'summary.csv').read_text(encoding='utf-8').splitlines()
    # Header plus two designs by two estimators for each of two scenarios
    assert len(summary) == 1 + 8
    records = [json.loads(line) for line in (out / 'manifest.jsonl').read_text(encoding='utf-8').splitlines()]
    assert records[0]['record'] == 'study' and records[0]['seed'] == 11
    assert [r['file'] for r in records[1:]] == ['tiny_W1.csv', 'tiny_W1_W2_W3.csv']


def test_reports_do_not_depend_on_workers(study, tmp_path):
    config = parse_config(study)
    run_study(config, out=str(tmp_path / 'one'), jobs=1)
    run_study(config, out=str(tmp_path / 'two'), jobs=2)
    for name in ('summary.csv', 'tiny_W1.csv'):
        assert (tmp_path / 'one' / name).read_bytes() == (tmp_path / 'two' / name).read_bytes()


def test_overrides(study, tmp_path):
    out = tmp_path / 'out'
    run_study(parse_config(study), seed=5, reps=2, out=str(out))
    record = json.loads((out / 'manifest.jsonl').read_text(encoding='utf-8').splitlines()[1])
    assert record['seed'] == 5
    assert record['replications'] == 2


def test_jobs_resolution(study, monkeypatch):
    config = parse_config(study)
    monkeypatch.delenv(JOBS_VARIABLE, raising=False)
    assert resolve_jobs(config, None) == 1
    monkeypatch.setenv(JOBS_VARIABLE, '3')
    assert resolve_jobs(config, None) == 3
    assert resolve_jobs(config, 2) == 2
    monkeypatch.setenv(JOBS_VARIABLE, 'many')
    assert resolve_jobs(config, None) == 1


def test_validate_command(study, tmp_path, capsys):
    assert main(['validate', str(study)]) == 0
    assert '2 scenarios' in capsys.readouterr().out
    broken = tmp_path / 'broken.toml'
    broken.write_text(STUDY.replace('stage_sizes = [120]', 'stage_sizes = []'), encoding='utf-8')
    assert main(['validate', str(broken)]) == 2
    assert 'scenario[0].design[0].stage_sizes' in capsys.readouterr().err


def test_run_command(study, tmp_path):
    assert main(['run', str(study), '--reps', '2', '--out', str(tmp_path / 'cli')]) == 0
    assert (tmp_path / 'cli' / 'summary.csv').exists()
    assert main(['run', str(study), '--reps', '0']) == 2


def test_true_values_command(study, capsys):
    assert main(['true-values', str(study)]) == 0
    out = capsys.readouterr().out
    assert 'pi_opt' in out and 'W1,W2,W3' in out
