import logging

import numpy as np
import pandas as pd
import pytest

from design_types import DesignClass, EstimatorKind
from fixed_probability import FixedProbability
from monte_carlo import Scenario, monte_carlo, replication_rng, summarize
from population import efficiency_bounds, true_marginals
from trial_types import AdaptationRule, CovariateSelector, DesignSpec

FULL_W = CovariateSelector(columns=(0, 1, 2))


def design(name, stage_sizes, *classes):
    return DesignSpec(name=name, stage_sizes=tuple(stage_sizes), stage1=FixedProbability(0.5),
                      adaptation=tuple(AdaptationRule(c, FULL_W) for c in classes))


def small_scenario(population, replications=8, seed=2024):
    return Scenario(name='small', population=population, replications=replications, seed=seed,
                    designs=(design('1S', [160]), design('2S CIR', [80, 80], DesignClass.cir),
                             design('2S CDR', [80, 80], DesignClass.cdr)),
                    reference=('1S', EstimatorKind.simple), x_selector='W1,W2,W3')


def test_replication_streams_are_indexed():
    assert replication_rng(1, 3).random() == replication_rng(1, 3).random()
    assert replication_rng(1, 3).random() != replication_rng(1, 4).random()
    assert replication_rng(1, 3).random() != replication_rng(2, 3).random()


def test_reference_has_unit_relative_efficiency(setting1_population):
    summary = monte_carlo(small_scenario(setting1_population))
    assert summary.row('1S', EstimatorKind.simple).rel_eff == 1.0
    assert len(summary.rows) == 6
    assert summary.valid
    assert summary.failures == {'1S': 0, '2S CIR': 0, '2S CDR': 0}
    for row in summary.rows:
        assert row.reps == 8
        assert row.gamma1 == 1.0
        assert row.emp_sd == pytest.approx(np.sqrt(row.emp_var))
        assert 0 <= row.coverage <= 1
    assert summary.truth.delta == true_marginals(setting1_population, small_scenario(setting1_population).link).delta


def test_summary_independent_of_workers(setting1_population):
    scenario = small_scenario(setting1_population, replications=4)
    serial = monte_carlo(scenario, jobs=1)
    parallel = monte_carlo(scenario, jobs=2)
    assert serial.frame().equals(parallel.frame())


def test_seed_changes_results(setting1_population):
    first = monte_carlo(small_scenario(setting1_population, replications=4, seed=1))
    second = monte_carlo(small_scenario(setting1_population, replications=4, seed=2))
    assert first.row('1S', EstimatorKind.simple).mean_delta != second.row('1S', EstimatorKind.simple).mean_delta


def test_failed_replications_invalidate_summary(setting1_population, caplog):
    # Two patients per trial leave an arm empty about half the time
    scenario = Scenario(name='tiny', population=setting1_population, designs=(design('tiny', [2]),),
                        estimators=(EstimatorKind.simple,), replications=20)
    with caplog.at_level(logging.WARNING, logger='monte_carlo'):
        summary = monte_carlo(scenario)
    failed = [r for r in caplog.records if r.levelno == logging.WARNING and 'failed' in r.getMessage()]
    assert len(failed) == summary.failures['tiny']
    assert summary.failures['tiny'] > 0
    assert not summary.valid
    assert summary.row('tiny', EstimatorKind.simple).reps == 20 - summary.failures['tiny']


def test_summary_surfaces_fallback_counters(setting1_population, caplog):
    scenario = Scenario(name='counted', population=setting1_population,
                        designs=(design('2S CDR', [10, 10], DesignClass.cdr),),
                        estimators=(EstimatorKind.simple,), replications=2)
    records = pd.DataFrame([{'design': '2S CDR', 'rep': rep, 'failed': False, 'estimator': 'Simple',
                             'delta_hat': delta, 'se': 0.3, 'ci_low': delta - 0.6, 'ci_high': delta + 0.6,
                             'mean_pi2': 0.4, 'fallbacks': fallbacks, 'unresolved': unresolved}
                            for rep, delta, fallbacks, unresolved in ((0, 0.9, 0, 3), (1, 1.1, 1, 2))])
    truth = true_marginals(setting1_population, scenario.link)
    with caplog.at_level(logging.WARNING, logger='monte_carlo'):
        summary = summarize(scenario, records, truth)
    assert summary.unresolved_cells == {'2S CDR': 5}
    assert summary.interim_fallbacks == {'2S CDR': 1}
    assert summary.valid
    messages = [r.getMessage() for r in caplog.records if r.levelno == logging.WARNING]
    assert any('fallback propensity' in message for message in messages)
    assert any('kept the previous mechanism' in message for message in messages)


def test_unknown_reference_rejected(setting1_population):
    with pytest.raises(ValueError):
        Scenario(name='bad', population=setting1_population, designs=(design('1S', [10]),),
                 reference=('2S', EstimatorKind.simple))
    with pytest.raises(ValueError):
        Scenario(name='bad', population=setting1_population, designs=(design('1S', [10]), design('1S', [20])))


SETTING1_SELECTORS = [(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)]


@pytest.mark.slow
@pytest.mark.parametrize('columns', SETTING1_SELECTORS)
def test_setting1_operating_characteristics(setting1_population, columns):
    selector = CovariateSelector(columns=columns)

    def adaptive(name, design_class):
        return DesignSpec(name=name, stage_sizes=(250, 250), stage1=FixedProbability(0.5),
                          adaptation=(AdaptationRule(design_class, selector),))

    scenario = Scenario(name='setting1', population=setting1_population, replications=5000,
                        designs=(design('1S', [500]), adaptive('2S CIR', DesignClass.cir),
                                 adaptive('2S CDR', DesignClass.cdr)),
                        reference=('1S', EstimatorKind.simple), x_selector=selector.label)
    summary = monte_carlo(scenario, jobs=-1)
    assert summary.valid
    one_stage = summary.row('1S', EstimatorKind.optimized)
    cir = summary.row('2S CIR', EstimatorKind.optimized)
    cdr = summary.row('2S CDR', EstimatorKind.optimized)

    bounds = efficiency_bounds(setting1_population, scenario.link, selector)
    assert one_stage.emp_var / cir.emp_var == pytest.approx(bounds.re_cir, abs=0.04)
    assert one_stage.emp_var / cdr.emp_var == pytest.approx(bounds.re_cdr, abs=0.04)
    for row in (cir, cdr):
        assert 0.935 <= row.coverage <= 0.965
        assert abs(row.median_se / row.emp_sd - 1.0) <= 0.05
    truth = true_marginals(setting1_population, scenario.link, selector)
    assert abs(cir.mean_pi2 - truth.pi_opt) <= 0.03
    if selector == FULL_W:
        assert cdr.emp_var <= cir.emp_var <= one_stage.emp_var
