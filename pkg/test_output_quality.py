#!/usr/bin/env python3
"""
Output quality validation for experiment result directories.
Tests file presence, CSV headers and number format, moment sign constraints,
and that summaries carry everything needed to re-run an experiment.
"""

import json
import logging
import re
import sys
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from hilbert_core import CSV_SIGNIFICANT_DIGITS

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXPECTED_FILES = {
    'simulate': ['moments.csv'],
    'sap': ['sap_defect.csv', 'moments.csv'],
    'stability': ['diff.csv', 'envelope.csv'],
    'picard': ['picard_ratios.csv', 'picard_power_ratios.csv'],
    'verify-noise': ['noise_moments.csv', 'noise_covariance.csv'],
    'check-conditions': [],
    'verify-evolution': [],
}

SERIES_HEADERS = {
    'moments.csv': ['t', 'estimate', 'stderr'],
    'sap_defect.csv': ['t', 'estimate', 'stderr'],
    'diff.csv': ['t', 'estimate', 'stderr'],
    'envelope.csv': ['t', 'envelope'],
    'picard_ratios.csv': ['iter', 'distance', 'ratio'],
    'picard_power_ratios.csv': ['iter', 'distance', 'ratio'],
}

_DIGITS = re.compile(r'^-?\d+\.\d+$')


class OutputQualityTester:
    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.test_results = {}
        self.summaries = {p.name.split('.')[0]: json.loads(p.read_text())
                          for p in sorted(self.out_dir.glob("*.summary.json"))}

    def test_file_existence(self) -> bool:
        """Every experiment summary has its expected CSV files next to it."""
        logger.info("Testing file existence...")
        missing = []
        for kind in self.summaries:
            missing.extend(f for f in EXPECTED_FILES.get(kind, []) if not (self.out_dir / f).exists())
        passed = bool(self.summaries) and not missing
        self.test_results['file_existence'] = {'passed': passed, 'missing_files': missing,
                                               'summaries': sorted(self.summaries)}
        logger.info(f"File existence test: {'PASSED' if passed else 'FAILED'}")
        return passed

    def test_series_validity(self) -> bool:
        """Headers match, time grids increase, moments and standard errors are non-negative."""
        logger.info("Testing series validity...")
        tests = {}
        for name, header in SERIES_HEADERS.items():
            path = self.out_dir / name
            if not path.exists():
                continue
            df = pd.read_csv(path)
            checks = {'header': list(df.columns) == header, 'non_empty': len(df) > 0}
            if 't' in df.columns:
                checks['increasing_grid'] = bool(np.all(np.diff(df['t']) > 0))
            for column in ('estimate', 'stderr', 'envelope', 'distance'):
                if column in df.columns:
                    checks[f'{column}_non_negative'] = bool((df[column].dropna() >= 0).all())
            tests[name] = checks
        self.test_results['series_validity'] = tests
        passed = all(all(checks.values()) for checks in tests.values())
        logger.info(f"Series validity test: {'PASSED' if passed else 'FAILED'}")
        return passed

    def test_number_format(self) -> bool:
        """Non-integer CSV fields are positional with the fixed number of significant digits."""
        logger.info("Testing number format...")
        bad: List[str] = []
        for path in sorted(self.out_dir.glob("*.csv")):
            for line in path.read_text().splitlines()[1:]:
                for field in line.split(','):
                    if not field or field == "0" or field.lstrip('-').isdigit():
                        continue
                    digits = field.lstrip('-').replace('.', '').lstrip('0')
                    if not _DIGITS.match(field) or len(digits) != CSV_SIGNIFICANT_DIGITS:
                        bad.append(f"{path.name}: {field}")
        passed = not bad
        self.test_results['number_format'] = {'passed': passed, 'bad_fields': bad[:10]}
        logger.info(f"Number format test: {'PASSED' if passed else 'FAILED'}")
        return passed

    def test_summary_completeness(self) -> bool:
        """Summaries record tool version, the full config and the run verdict."""
        logger.info("Testing summary completeness...")
        tests = {}
        for kind, summary in self.summaries.items():
            tests[kind] = {
                'tool_version': bool(summary.get('tool_version')),
                'config_embedded': summary.get('config', {}).get('experiment') == kind,
                'exit_code': summary.get('exit_code') in (0, 2, 3),
                'files_listed': all((self.out_dir / f).exists() for f in summary.get('files', [])),
            }
            results = summary.get('results', {})
            conditions = results.get('conditions', results if 'constant_name' in results else None)
            if conditions is not None:
                tests[kind]['constants_recorded'] = all(
                    key in conditions for key in ('contraction_constant', 'stability_margin', 'inputs'))
        self.test_results['summary_completeness'] = tests
        passed = all(all(checks.values()) for checks in tests.values())
        logger.info(f"Summary completeness test: {'PASSED' if passed else 'FAILED'}")
        return passed

    def run_all_tests(self) -> Dict:
        """Run all output quality tests."""
        logger.info(f"Running output quality tests on {self.out_dir}...")
        test_results = {
            'file_existence': self.test_file_existence(),
            'series_validity': self.test_series_validity(),
            'number_format': self.test_number_format(),
            'summary_completeness': self.test_summary_completeness(),
        }
        overall_pass = all(test_results.values())
        logger.info(f"Overall test result: {'PASSED' if overall_pass else 'FAILED'}")
        return {
            'overall_passed': overall_pass,
            'individual_tests': test_results,
            'detailed_results': self.test_results,
        }

    def print_test_summary(self, results: Dict):
        """Print a detailed test summary."""
        print("\n" + "=" * 60)
        print("OUTPUT QUALITY TEST SUMMARY")
        print("=" * 60)

        print(f"\nOverall Result: {'✓ PASSED' if results['overall_passed'] else '✗ FAILED'}")

        print(f"\nIndividual Test Results:")
        for test_name, passed in results['individual_tests'].items():
            status = '✓ PASSED' if passed else '✗ FAILED'
            print(f"  {test_name}: {status}")

        if not results['overall_passed']:
            print(f"\nDetailed Failure Information:")
            for test_category, test_data in results['detailed_results'].items():
                failed = []
                for key, value in test_data.items():
                    if isinstance(value, dict):
                        failed.extend(f"{key}.{sub}" for sub, ok in value.items() if not ok)
                    elif value is False:
                        failed.append(key)
                if failed:
                    print(f"  {test_category}: {', '.join(failed)}")


def _run_quick_experiments(out_dir: Path) -> None:
    from run_experiment import run

    system = {'N': 2, 'omega': 1.0, 'family': {'mus': 'linear(4, 1)', 'rho': 0.2},
              'spectrum': 'geometric(0.5)', 'c0': [2.0, -1.0],
              'drift': {'kind': 'saturating', 'kappa': 0.5, 'b0': 1.0, 'b1': 1.0},
              'diffusion': {'kind': 'constant', 'sigma': 0.1}}
    configs = [
        {'experiment': 'sap', 'system': system, 'simulation': {'T': 6.0, 'dt': 0.02, 'P': 100, 'seed': 1}},
        {'experiment': 'stability', 'system': system, 'stability': {'c0_b': [0.0, 0.0]},
         'simulation': {'T': 2.0, 'dt': 0.02, 'P': 100, 'seed': 2}},
        {'experiment': 'picard', 'system': system, 'picard': {'iters': 4},
         'simulation': {'T': 1.0, 'dt': 0.02, 'P': 50, 'seed': 3}},
        {'experiment': 'check-conditions', 'system': system, 'conditions': {'p': 2}},
    ]
    for index, config in enumerate(configs):
        path = out_dir / f"config_{index}.json"
        path.write_text(json.dumps(config, indent=2))
        run(str(path), out=str(out_dir), quiet=True)


def test_experiment_outputs_pass_quality_checks(tmp_path):
    _run_quick_experiments(tmp_path)
    tester = OutputQualityTester(tmp_path)
    results = tester.run_all_tests()
    assert results['overall_passed'], results['detailed_results']


def test_quality_checks_catch_a_broken_header(tmp_path):
    (tmp_path / "moments.csv").write_text("time,value\n0.1,0.5\n")
    (tmp_path / "simulate.summary.json").write_text(json.dumps(
        {'tool_version': '1', 'experiment': 'simulate', 'exit_code': 0,
         'config': {'experiment': 'simulate'}, 'results': {}, 'files': ['moments.csv']}))
    results = OutputQualityTester(tmp_path).run_all_tests()
    assert not results['overall_passed']
    assert not results['individual_tests']['series_validity']
    assert not results['individual_tests']['number_format']


def main(argv=None):
    """Validate the result directories given on the command line."""
    directories = (argv if argv is not None else sys.argv[1:]) or ['results']
    all_results = {}
    for directory in directories:
        tester = OutputQualityTester(Path(directory))
        results = tester.run_all_tests()
        tester.print_test_summary(results)
        all_results[directory] = results
    return all_results


if __name__ == "__main__":
    main()
