#!/usr/bin/env python3
"""
Result persistence for experiment runs: one CSV per series, a JSON summary that
doubles as a re-runnable config, and an optional binary dump of the raw ensemble.
"""

import json
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from hilbert_core import InvalidInputError, PathEnsemble, write_csv

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"

DUMP_MAGIC = b"SAPENS\x00\x01"
DUMP_VERSION = 1
# magic, version, N, P, grid length, dt; little-endian
DUMP_HEADER = struct.Struct("<8sIQQQd")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2
EXIT_NOT_CERTIFIED = 3


@dataclass
class ExperimentResult:
    """Everything one experiment hands to emit_report."""
    kind: str
    series: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: Dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    ensemble: Optional[PathEnsemble] = None


def _plain(value):
    """Convert numpy scalars and arrays so json can serialize them."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_summary(summary: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        json.dump(_plain(summary), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def dump_ensemble(ens: PathEnsemble, path: Union[str, Path]) -> Path:
    """Header then the (P, K, N) path array as row-major little-endian float64."""
    path = Path(path)
    header = DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, ens.dim, ens.n_paths, ens.grid.size, ens.dt)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(ens.paths, dtype='<f8').tobytes())
    return path


def load_ensemble_dump(path: Union[str, Path], seed: int = 0) -> PathEnsemble:
    """Read a dump written by dump_ensemble; the grid is rebuilt from dt starting at 0."""
    raw = Path(path).read_bytes()
    if len(raw) < DUMP_HEADER.size:
        raise InvalidInputError(f"{path}: truncated ensemble dump")
    magic, version, dim, n_paths, length, dt = DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise InvalidInputError(f"{path}: not an ensemble dump (version {version})")
    data = np.frombuffer(raw, dtype='<f8', offset=DUMP_HEADER.size)
    if data.size != n_paths * length * dim:
        raise InvalidInputError(f"{path}: expected {n_paths * length * dim} values, found {data.size}")
    return PathEnsemble(np.arange(length) * dt, data.reshape(n_paths, length, dim).copy(), seed)


def emit_report(result: ExperimentResult, out_dir: Union[str, Path], config: Dict,
                dump: bool = False) -> List[Path]:
    """Write ``<series>.csv`` per series and ``<kind>.summary.json``.

    The summary embeds the config it was produced from, so it can be passed back
    as ``--config`` to reproduce every CSV byte-for-byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, frame in result.series.items():
        written.append(write_csv(frame, out_dir / f"{name}.csv"))
    if dump:
        if result.ensemble is None:
            logger.warning(f"Experiment {result.kind!r} produced no ensemble to dump")
        else:
            written.append(dump_ensemble(result.ensemble, out_dir / f"{result.kind}.ensemble.bin"))
    summary = {
        'tool_version': TOOL_VERSION,
        'experiment': result.kind,
        'exit_code': result.exit_code,
        'config': config,
        'results': result.summary,
        'files': [p.name for p in written],
    }
    written.append(write_summary(summary, out_dir / f"{result.kind}.summary.json"))
    logger.info(f"Wrote {len(written)} file(s) to {out_dir}")
    return written
