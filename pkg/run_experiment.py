#!/usr/bin/env python3
"""
Experiment driver: reads a JSON experiment config, builds the stochastic evolution
system, runs one experiment kind and writes CSV series plus a JSON summary.

Exit codes: 0 pass/complete, 1 usage or config error, 2 check failed,
3 condition not certified (verdict not applicable).
"""

import re
import json
import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from coefficients import DiffusionFn, DriftFn, diffusion_from_config, drift_from_config
from diagnostics import (ConditionInputs, boundedness, condition_counterexamples, condition_report,
                         continuity_modulus, contraction_constant, convolution_sap_diagnostics,
                         sap_diagnostic, stability_experiment)
from evolution import DiagonalPeriodicFamily, EvolutionFamily, verify_family
from hilbert_core import (DEFAULT_DIMENSION, BlowUpError, DimensionMismatchError, HilbertVec,
                          InvalidInputError, moment_series)
from mild_solver import SimConfig, picard_iterate, simulate
from qwiener import (DiffusionOperator, QSpectrum, bdg_check, bdg_constant, ito_isometry_check,
                     noise_fidelity, parse_family)
from report import (EXIT_CHECK_FAILED, EXIT_NOT_CERTIFIED, EXIT_OK, EXIT_USAGE, ExperimentResult,
                    emit_report)

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "results"
PICARD_RATIO_SLACK = 0.1
NOISE_COVARIANCE_Z = 5.0
NOISE_TRACE_TOLERANCE = 0.02
ISOMETRY_Z = 3.0
EVOLUTION_RESIDUAL = 1e-12
EVOLUTION_DECAY_SLACK = 1e-10

NEEDS_SIMULATION = {'simulate', 'sap', 'stability', 'picard'}

_REQUIRED = object()


class ConfigError(InvalidInputError):
    """Malformed or inconsistent experiment config, anchored to a line when possible."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        self.source = source
        prefix = source or "<config>"
        if line is not None:
            prefix = f"{prefix}:{line}"
        super().__init__(f"{prefix}: {message}")


@dataclass
class System:
    omega: float
    dim: int
    family: Optional[EvolutionFamily] = None
    drift: Optional[DriftFn] = None
    diffusion: Optional[DiffusionFn] = None
    spectrum: Optional[QSpectrum] = None
    c0: Optional[HilbertVec] = None


@dataclass
class ExperimentConfig:
    kind: str
    raw: Dict
    text: str
    source: str
    output_dir: Path
    dump_ensemble: bool = False
    system: Optional[System] = None
    simulation: Optional[SimConfig] = None
    blocks: Dict[str, Dict] = field(default_factory=dict)
    settings: Dict[str, Dict] = field(default_factory=dict)
    c0_b: Optional[HilbertVec] = None

    def block(self, name: str) -> Dict:
        return self.blocks.get(name, {})


def _line_of(text: str, key: str) -> Optional[int]:
    """1-based line of the first ``"key":`` occurrence in the config text."""
    pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return None


def _block(raw: Dict, name: str) -> Dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise InvalidInputError(f"block {name!r} must be a JSON object, got {value!r}")
    return value


def _real(block: Dict, key: str, default=_REQUIRED, minimum: Optional[float] = None,
          positive: bool = False) -> float:
    if key not in block and default is _REQUIRED:
        raise KeyError(key)
    value = block.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
        raise InvalidInputError(f"{key} must be a finite number, got {value!r}")
    if positive and not value > 0:
        raise InvalidInputError(f"{key} must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvalidInputError(f"{key} must be >= {minimum:g}, got {value!r}")
    return float(value)


def _integer(block: Dict, key: str, default=_REQUIRED, minimum: Optional[int] = None) -> int:
    if key not in block and default is _REQUIRED:
        raise KeyError(key)
    value = block.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
        raise InvalidInputError(f"{key} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise InvalidInputError(f"{key} must be >= {minimum}, got {value!r}")
    return int(value)


def _optional_real(block: Dict, key: str) -> Optional[float]:
    return None if block.get(key) is None else _real(block, key)


def _vector(value, dim: int, what: str) -> HilbertVec:
    if isinstance(value, str):
        name, args = parse_family(value)
        if name == 'basis' and len(args) == 1:
            return HilbertVec.basis(int(args[0]), dim)
        if name == 'constant' and len(args) == 1:
            return HilbertVec(np.full(dim, args[0]))
        raise InvalidInputError(f"{what} must be a list, basis(i) or constant(x), got {value!r}")
    vec = HilbertVec(value)
    if vec.dim != dim:
        raise InvalidInputError(f"{what} has {vec.dim} entries, N = {dim}")
    return vec


def _build_system(block: Dict, kind: str) -> System:
    omega = _real(block, 'omega', positive=True)
    dim = _integer(block, 'N', DEFAULT_DIMENSION, minimum=1)
    system = System(omega=omega, dim=dim)
    if 'spectrum' in block:
        system.spectrum = QSpectrum.from_config(block['spectrum'], dim)
    if kind == 'verify-noise':
        if system.spectrum is None:
            raise KeyError('spectrum')
        return system
    system.family = DiagonalPeriodicFamily.from_config({**_block(block, 'family'), 'omega': omega}, dim)
    if block.get('drift') is not None:
        system.drift = drift_from_config({**_block(block, 'drift'), 'omega': omega}, dim)
    if block.get('diffusion') is not None:
        system.diffusion = diffusion_from_config({**_block(block, 'diffusion'), 'omega': omega}, dim)
        if system.spectrum is None:
            raise KeyError('spectrum')
    if system.spectrum is None:
        system.spectrum = QSpectrum(np.zeros(dim))
    system.c0 = _vector(block.get('c0', [0.0] * dim), dim, 'c0')
    return system


def _simulation(block: Dict, system: System) -> SimConfig:
    return SimConfig(T=_real(block, 'T'), dt=_real(block, 'dt'), N=system.dim,
                     P=_integer(block, 'P', 1, minimum=1), p=_real(block, 'p', 2.0, minimum=2.0),
                     seed=_integer(block, 'seed', 0, minimum=0), omega=system.omega,
                     record_stride=_integer(block, 'record_stride', 1, minimum=1))


def _explicit_conditions(block: Dict) -> bool:
    return all(key in block for key in ('M', 'a', 'Lf', 'Lg'))


def _condition_settings(block: Dict) -> Dict:
    p = _real(block, 'p', 2.0, minimum=2.0)
    Cp = _optional_real(block, 'Cp')
    bdg_constant(p, Cp)
    return {'p': p, 'Cp': Cp,
            'scan_samples': _integer(block, 'scan_samples', 0, minimum=0),
            'scan_seed': _integer(block, 'scan_seed', 0, minimum=0)}


def _picard_settings(block: Dict) -> Dict:
    return {'iters': _integer(block, 'iters', 10, minimum=3)}


def _noise_settings(block: Dict, system: Optional[System]) -> Dict:
    times = block.get('times', [0.5, 1.0, 2.0])
    if not isinstance(times, list) or not times:
        raise InvalidInputError(f"times must be a non-empty list, got {times!r}")
    bdg_p = _real(block, 'bdg_p', 4.0, minimum=2.0)
    Cp = _optional_real(block, 'Cp')
    bdg_constant(bdg_p, Cp)
    operator = None
    if 'operator' in block:
        operator = DiffusionOperator(block['operator'])
        if system is not None and operator.dim != system.dim:
            raise DimensionMismatchError(f"operator acts on N={operator.dim}, system has N={system.dim}")
    return {'dt': _real(block, 'dt', 0.5, positive=True),
            'samples': _integer(block, 'samples', 50000, minimum=1),
            'times': [_real({'times': t}, 'times', positive=True) for t in times],
            'T': _real(block, 'T', 1.0, positive=True),
            'operator': operator,
            'isometry_paths': _integer(block, 'isometry_paths', 100000, minimum=1),
            'bdg_paths': _integer(block, 'bdg_paths', 20000, minimum=1),
            'bdg_p': bdg_p,
            'bdg_steps': _integer(block, 'bdg_steps', 100, minimum=1),
            'Cp': Cp,
            'seed': _integer(block, 'seed', 0, minimum=0)}


def _evolution_settings(block: Dict) -> Dict:
    return {'probes': _integer(block, 'probes', 1000, minimum=1),
            'seed': _integer(block, 'seed', 0, minimum=0)}


def parse_config(path: str, output_dir: Optional[str] = None) -> ExperimentConfig:
    """Read and validate a config file (or a previous run's summary).

    Every block is parsed here, so a malformed value surfaces as a ConfigError
    anchored to the line of its block before any experiment starts.
    """
    source = str(path)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", source=source) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno, source=source) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", line=1, source=source)
    if 'tool_version' in raw and isinstance(raw.get('config'), dict):
        logger.info(f"Re-running from summary written by version {raw['tool_version']}")
        raw = raw['config']

    kind = raw.get('experiment')
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {sorted(EXPERIMENTS)}",
                          line=_line_of(text, 'experiment'), source=source)

    current = 'output'
    try:
        output = _block(raw, 'output')
        cfg = ExperimentConfig(kind=kind, raw=raw, text=text, source=source,
                               output_dir=Path(output_dir or output.get('dir', DEFAULT_OUTPUT_DIR)),
                               dump_ensemble=bool(output.get('dump_ensemble', False)),
                               blocks={k: v for k, v in raw.items() if isinstance(v, dict)})
        current = 'conditions'
        conditions = _block(raw, 'conditions')
        cfg.settings['conditions'] = _condition_settings(conditions)
        current = 'system'
        needs_system = not (kind == 'check-conditions' and _explicit_conditions(conditions))
        if needs_system:
            if 'system' not in raw:
                raise KeyError('system')
            cfg.system = _build_system(_block(raw, 'system'), kind)
        if kind in NEEDS_SIMULATION:
            current = 'simulation'
            if 'simulation' not in raw:
                raise KeyError('simulation')
            cfg.simulation = _simulation(_block(raw, 'simulation'), cfg.system)
        if not needs_system:
            current = 'conditions'
            _conditions_from_block(conditions, cfg.settings['conditions'])
        current = 'picard'
        cfg.settings['picard'] = _picard_settings(_block(raw, 'picard'))
        current = 'noise'
        cfg.settings['noise'] = _noise_settings(_block(raw, 'noise'), cfg.system)
        current = 'evolution'
        cfg.settings['evolution'] = _evolution_settings(_block(raw, 'evolution'))
        if kind == 'stability':
            current = 'stability'
            cfg.c0_b = _vector(_block(raw, 'stability')['c0_b'], cfg.system.dim, 'c0_b')
    except KeyError as e:
        missing = e.args[0]
        raise ConfigError(f"missing key {missing!r} in block {current!r}",
                          line=_line_of(text, current), source=source) from None
    except (InvalidInputError, TypeError, ValueError) as e:
        raise ConfigError(f"block {current!r}: {e}", line=_line_of(text, current), source=source) from None
    return cfg


def _conditions_from_block(block: Dict, settings: Dict) -> ConditionInputs:
    p = settings['p']
    return ConditionInputs(p=p, M=_real(block, 'M'), a=_real(block, 'a'), Lf=_real(block, 'Lf'),
                           Lg=_real(block, 'Lg'), Cp=bdg_constant(p, settings['Cp']))


def _system_conditions(cfg: ExperimentConfig, p: float) -> ConditionInputs:
    s = cfg.system
    return ConditionInputs.from_system(s.family, s.drift, s.diffusion, s.spectrum, p,
                                       cfg.settings['conditions']['Cp'])


def _verdict(passed: Optional[bool]) -> int:
    if passed is None:
        return EXIT_NOT_CERTIFIED
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def run_simulate(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    s, sim = cfg.system, cfg.simulation
    solution = simulate(sim, s.family, s.drift, s.diffusion, s.c0, s.spectrum, threads)
    series = moment_series(solution, sim.p)
    summary = {
        'conditions': condition_report(_system_conditions(cfg, sim.p)),
        'sup_moment': boundedness(series),
        'continuity_modulus': continuity_modulus(solution, sim.p),
        'invalid_paths': solution.invalid_count,
        'seed': sim.seed,
    }
    return ExperimentResult('simulate', {'moments': series.to_frame()}, summary, EXIT_OK, solution)


def run_check_conditions(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    block, settings = cfg.block('conditions'), cfg.settings['conditions']
    if _explicit_conditions(block):
        inputs = _conditions_from_block(block, settings)
    else:
        inputs = _system_conditions(cfg, settings['p'])
    report = condition_report(inputs)
    if settings['scan_samples']:
        report['counterexamples'] = condition_counterexamples(settings['scan_samples'], settings['scan_seed'])
    code = EXIT_OK if report['existence_certified'] else EXIT_NOT_CERTIFIED
    return ExperimentResult('check-conditions', {}, report, code)


def _non_sap_coefficients(system: System) -> List[str]:
    """Coefficients declared not S-asymptotically omega-periodic."""
    coefficients = {'drift': system.drift, 'diffusion': system.diffusion}
    return [name for name, fn in coefficients.items() if fn is not None and not fn.declared_sap]


def run_sap(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    s, sim = cfg.system, cfg.simulation
    inputs = _system_conditions(cfg, sim.p)
    non_sap = _non_sap_coefficients(s)
    certified = contraction_constant(inputs) < 1 and not non_sap
    if non_sap:
        logger.warning(f"Coefficients declared non-SAP: {', '.join(non_sap)}; the SAP verdict is not applicable")
    elif not certified:
        logger.warning("Contraction not certified; the SAP verdict is not applicable")
    solution = simulate(sim, s.family, s.drift, s.diffusion, s.c0, s.spectrum, threads,
                        keep_noise=sim.record_stride == 1)
    moments = moment_series(solution, sim.p)
    diagnostic = sap_diagnostic(solution, sim.omega, sim.p)
    series = {'sap_defect': diagnostic.series.to_frame(), 'moments': moments.to_frame()}
    summary = {
        'conditions': condition_report(inputs),
        'non_sap_coefficients': non_sap,
        'sap': diagnostic.summary(),
        'sup_moment': boundedness(moments),
        'continuity_modulus': continuity_modulus(solution, sim.p),
        'invalid_paths': solution.invalid_count,
        'seed': sim.seed,
    }
    if sim.record_stride == 1:
        terms = convolution_sap_diagnostics(solution, threads)
        summary['terms'] = {name: term.summary() for name, term in terms.items()}
        for name, term in terms.items():
            series[f"sap_{name}"] = term.series.to_frame()
    else:
        logger.warning("record_stride > 1: skipping the per-term SAP split")
    passed = diagnostic.passed if certified else None
    return ExperimentResult('sap', series, summary, _verdict(passed), solution)


def run_stability(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    s, sim = cfg.system, cfg.simulation
    result = stability_experiment(sim, s.family, s.drift, s.diffusion, s.c0, cfg.c0_b, s.spectrum,
                                  cfg.settings['conditions']['Cp'], threads)
    series = {
        'diff': result.diff.to_frame(),
        'envelope': pd.DataFrame({'t': result.diff.grid, 'envelope': result.envelope}),
    }
    summary = result.summary()
    summary['conditions'] = condition_report(result.inputs)
    summary['seed'] = sim.seed
    return ExperimentResult('stability', series, summary, _verdict(result.passed))


def picard_threshold(constant: float, p: float) -> float:
    """Bound on the sup-p-norm contraction ratio: constant^{1/p} plus slack."""
    return constant ** (1.0 / p) + PICARD_RATIO_SLACK


def run_picard(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    s, sim = cfg.system, cfg.simulation
    inputs = _system_conditions(cfg, sim.p)
    constant = contraction_constant(inputs)
    iters = cfg.settings['picard']['iters']
    result = picard_iterate(sim, s.family, s.drift, s.diffusion, s.c0, s.spectrum, iters, threads)

    def table(distances, ratios) -> pd.DataFrame:
        padded = [np.nan] + list(ratios) + [np.nan] * (len(distances) - len(ratios) - 1)
        return pd.DataFrame({'iter': np.arange(1, len(distances) + 1),
                             'distance': np.array(distances, dtype=float),
                             'ratio': np.array(padded[:len(distances)], dtype=float)})

    threshold = picard_threshold(constant, sim.p)
    final = result.ratios[-1] if result.ratios else 0.0
    passed = result.converged or final <= threshold
    summary = {
        'conditions': condition_report(inputs),
        'iters': iters,
        'converged': result.converged,
        'final_ratio': final,
        'ratio_threshold': threshold,
        'final_power_ratio': result.power_ratios[-1] if result.power_ratios else None,
        'passed': passed if constant < 1 else None,
        'seed': sim.seed,
    }
    series = {'picard_ratios': table(result.distances, result.ratios),
              'picard_power_ratios': table(result.power_distances, result.power_ratios)}
    return ExperimentResult('picard', series, summary, _verdict(summary['passed']))


def run_verify_noise(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    spectrum = cfg.system.spectrum
    settings = cfg.settings['noise']
    seed = settings['seed']
    fidelity = noise_fidelity(spectrum, settings['dt'], settings['samples'], seed, settings['times'])
    op = settings['operator']
    if op is None:
        op = DiffusionOperator.identity(spectrum.dim)
    isometry = ito_isometry_check(op, spectrum, settings['T'], settings['isometry_paths'], seed)
    bdg = bdg_check(op, spectrum, settings['T'], settings['bdg_p'], settings['bdg_paths'], seed,
                    settings['bdg_steps'], settings['Cp'])

    trace_ok = all(abs(m['estimate'] - m['analytic']) <= NOISE_TRACE_TOLERANCE * m['analytic']
                   for m in fidelity['w_moments'])
    checks = {
        'covariance': fidelity['covariance_max_z'] <= NOISE_COVARIANCE_Z,
        'cross_covariance': fidelity['cross_covariance_z'] <= NOISE_COVARIANCE_Z,
        'trace': trace_ok,
        'ito_isometry': isometry.zscore < ISOMETRY_Z,
        'bdg': bdg.sup_moment <= bdg.bound,
    }
    summary = {
        'checks': checks,
        'covariance_max_z': fidelity['covariance_max_z'],
        'cross_covariance_z': fidelity['cross_covariance_z'],
        'ito_isometry': asdict(isometry),
        'bdg': {**asdict(bdg), 'p': settings['bdg_p']},
        'seed': seed,
    }
    moments = pd.DataFrame(fidelity['w_moments'])[['t', 'estimate', 'stderr', 'analytic']]
    covariance = pd.DataFrame(fidelity['covariance'],
                              columns=[f"e{n + 1}" for n in range(spectrum.dim)])
    return ExperimentResult('verify-noise', {'noise_moments': moments, 'noise_covariance': covariance},
                            summary, _verdict(all(checks.values())))


def run_verify_evolution(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    settings = cfg.settings['evolution']
    residuals = verify_family(cfg.system.family, settings['probes'], settings['seed'])
    passed = (max(residuals['cocycle_residual'], residuals['periodicity_residual'],
                  residuals['identity_residual']) <= EVOLUTION_RESIDUAL
              and residuals['decay_worst_ratio'] <= 1 + EVOLUTION_DECAY_SLACK)
    summary = {'family': cfg.system.family.describe(), 'residuals': residuals, 'passed': passed}
    return ExperimentResult('verify-evolution', {}, summary, _verdict(passed))


EXPERIMENTS: Dict[str, Callable[[ExperimentConfig, int], ExperimentResult]] = {
    'simulate': run_simulate,
    'check-conditions': run_check_conditions,
    'sap': run_sap,
    'stability': run_stability,
    'picard': run_picard,
    'verify-noise': run_verify_noise,
    'verify-evolution': run_verify_evolution,
}


def print_banner(result: ExperimentResult, out_dir: Path) -> None:
    status = {EXIT_OK: '✅ PASSED / COMPLETE', EXIT_CHECK_FAILED: '❌ CHECK FAILED',
              EXIT_NOT_CERTIFIED: '⚠️  CONDITION NOT CERTIFIED'}[result.exit_code]
    print("\n" + "=" * 60)
    print(f"EXPERIMENT: {result.kind}")
    print("=" * 60)
    conditions = result.summary.get('conditions', result.summary if 'constant_name' in result.summary else None)
    if conditions:
        print(f"{conditions['constant_name']} = {conditions['contraction_constant']:.6g}")
        print(f"stability margin = {conditions['stability_margin']:.6g}")
    for key in ('fitted_rate', 'final_ratio', 'final_power_ratio', 'sup_moment', 'invalid_paths'):
        if result.summary.get(key) is not None:
            print(f"{key} = {result.summary[key]}")
    print(f"\nResult: {status}")
    print(f"Output: {out_dir}")


def _run_guarded(cfg: ExperimentConfig, threads: int) -> ExperimentResult:
    """Run one experiment; an ensemble with no surviving path is a failed check, not a usage error."""
    try:
        return EXPERIMENTS[cfg.kind](cfg, threads)
    except BlowUpError as e:
        logger.error(f"❌ {e}")
        return ExperimentResult(cfg.kind, {}, {'invalid_paths': e.invalid, 'error': str(e)}, EXIT_CHECK_FAILED)


def run(config_path: str, out: Optional[str] = None, threads: int = 1, quiet: bool = False) -> int:
    """Run one experiment end to end and return its exit code."""
    if threads < 1:
        logger.error(f"--threads must be >= 1, got {threads}")
        return EXIT_USAGE
    try:
        cfg = parse_config(config_path, out)
        logger.info(f"Running experiment {cfg.kind!r} from {config_path}")
        result = _run_guarded(cfg, threads)
        emit_report(result, cfg.output_dir, cfg.raw, dump=cfg.dump_ensemble)
    except InvalidInputError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"Cannot write results: {e}")
        return EXIT_USAGE
    if not quiet:
        print_banner(result, cfg.output_dir)
    return result.exit_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run an S-asymptotically periodic SEE experiment")
    parser.add_argument('--config', required=True, help="experiment config (JSON) or a previous summary")
    parser.add_argument('--out', help="output directory (overrides output.dir)")
    parser.add_argument('--threads', type=int, default=1, help="worker threads; never changes results")
    parser.add_argument('--quiet', action='store_true', help="warnings only, no result banner")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    return run(args.config, args.out, args.threads, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
