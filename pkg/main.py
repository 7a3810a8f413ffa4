import argparse
import dataclasses
import logging
import os
import re
import sys
import time
from pathlib import Path
from typing import List

import pandas as pd

from errors import ConfigError
from monte_carlo import Scenario, ScenarioSummary, monte_carlo
from population import true_marginals
from report import emit_report, versions, write_manifest
from study_config import StudyConfig, parse_config

logger = logging.getLogger(__name__)

JOBS_VARIABLE = 'ADAPTRIAL_JOBS'


def slug(name: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.=-]+', '_', name).strip('_') or 'scenario'


def resolve_jobs(config: StudyConfig, jobs: int | None) -> int:
    """
    Worker count: the command line wins over the environment, which wins over the study file.
    """
    if jobs is not None:
        return jobs
    value = os.environ.get(JOBS_VARIABLE)
    if value:
        try:
            return int(value)
        except ValueError:
            logger.warning("Ignoring %s=%r, not an integer", JOBS_VARIABLE, value)
    return config.jobs


def override(scenario: Scenario, seed: int | None, reps: int | None) -> Scenario:
    changes = {}
    if seed is not None:
        changes['seed'] = seed
    if reps is not None:
        changes['replications'] = reps
    return dataclasses.replace(scenario, **changes) if changes else scenario


def run_study(config: StudyConfig, seed: int | None = None, reps: int | None = None, jobs: int | None = None,
              out: str | None = None, format: str | None = None) -> int:
    """
    Simulate every scenario of a study and write the reports.

    Each scenario's CSV is written as soon as it finishes. The combined summary and
    the JSON-lines manifest are written at the end.

    :return: 0 when every summary is valid, 1 otherwise.
    """
    output_dir = Path(out or config.output_dir)
    format = format or config.format
    jobs = resolve_jobs(config, jobs)
    output_dir.mkdir(parents=True, exist_ok=True)

    summaries: List[ScenarioSummary] = []
    manifest = [{'record': 'study', 'name': config.name, 'seed': seed if seed is not None else config.seed,
                 'config_hash': config.config_hash, 'jobs': jobs, 'scenarios': len(config.scenarios),
                 'versions': versions()}]
    for scenario in config.scenarios:
        scenario = override(scenario, seed, reps)
        start = time.perf_counter()
        summary = monte_carlo(scenario, jobs=jobs)
        elapsed = time.perf_counter() - start
        path = output_dir / f'{slug(scenario.name)}.csv'
        emit_report([summary], 'csv', path)
        summaries.append(summary)
        manifest.append({'record': 'scenario', 'scenario': scenario.name, 'file': path.name,
                         'seed': scenario.seed, 'replications': scenario.replications,
                         'seconds': round(elapsed, 3), 'valid': summary.valid, 'failures': summary.failures,
                         'interim_fallbacks': summary.interim_fallbacks,
                         'unresolved_cells': summary.unresolved_cells, 'true_delta': summary.truth.delta})
        logger.info("Scenario %s done in %.1fs", scenario.name, elapsed)

    emit_report(summaries, 'csv', output_dir / 'summary.csv')
    if format == 'table':
        print(emit_report(summaries, 'table', output_dir / 'summary.txt'))
    write_manifest(output_dir / 'manifest.jsonl', manifest)

    invalid = [summary.scenario for summary in summaries if not summary.valid]
    if invalid:
        logger.error("Invalid summaries: %s", ', '.join(invalid))
        return 1
    return 0


def true_values(config: StudyConfig) -> pd.DataFrame:
    """
    True marginal means, effect and optimal allocations of every scenario.
    """
    rows = []
    for scenario in config.scenarios:
        selector = next((design.selector for design in scenario.designs if design.selector is not None), None)
        try:
            truth = true_marginals(scenario.population, scenario.link, selector)
        except ValueError:
            truth = true_marginals(scenario.population, scenario.link, selector, method='monte_carlo')
        rows.append({'scenario': scenario.name, 'x_selector': scenario.x_selector, 'mu1': truth.mu1,
                     'mu0': truth.mu0, 'delta': truth.delta, 'pi_opt': truth.pi_opt,
                     'mean_p_opt': truth.mean_p_opt, 'method': truth.method})
    return pd.DataFrame(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Simulate multi-stage adaptive trials with optimized '
                                                 'allocation and augmented estimators.')
    parser.add_argument('-v', '--verbose', action='store_true', help='Log debug messages.')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run a simulation study.')
    run.add_argument('config', help='TOML study file.')
    run.add_argument('--seed', type=int, help='Override the seed of every scenario.')
    run.add_argument('--reps', type=int, help='Override the number of replications.')
    run.add_argument('--jobs', type=int, help=f'Replication workers, overrides {JOBS_VARIABLE}.')
    run.add_argument('--out', help='Output directory.')
    run.add_argument('--format', choices=['csv', 'table'], help='Report format.')

    validate = commands.add_parser('validate', help='Validate a study file.')
    validate.add_argument('config', help='TOML study file.')

    truth = commands.add_parser('true-values', help='Print the true values of every scenario.')
    truth.add_argument('config', help='TOML study file.')
    return parser


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        config = parse_config(args.config)
    except ConfigError as e:
        for issue in e.issues:
            print(issue, file=sys.stderr)
        return 2

    match args.command:
        case 'run':
            if args.reps is not None and args.reps < 1:
                print('--reps must be >= 1', file=sys.stderr)
                return 2
            return run_study(config, seed=args.seed, reps=args.reps, jobs=args.jobs, out=args.out,
                             format=args.format)
        case 'validate':
            print(f'{args.config}: {len(config.scenarios)} scenarios, '
                  f'{sum(s.replications * len(s.designs) for s in config.scenarios)} trials')
            return 0
        case 'true-values':
            print(true_values(config).to_string(index=False))
            return 0
        case _:
            raise ValueError(f'Unknown command: {args.command}')


if __name__ == '__main__':
    sys.exit(main())
