"""Command-line harness: ``bsdelab list`` and ``bsdelab run <config.yaml>``.

Config schema (YAML)::

    experiment: delta-hedge      # registered name, see `bsdelab list`
    seed: 0                      # required integer
    grid: {N: 64, P: 100000, T: 1.0}
    model: {kind: standard, n: 1}          # or {kind: stopped, delta: 0.25}
    params: {...}                # experiment-specific block
    output_dir: runs/delta-hedge # optional, overridden by --output-dir

Outputs: one CSV per table, ``summary.json``, ``failure.json`` when a check
fails, and ``manifest.json`` written last with sha256 checksums.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional

import yaml

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _names():
    from .experiments import REGISTRY
    return list(REGISTRY)


def list_experiments():
    """(name, anchor, description) in registry order."""
    from .experiments import REGISTRY
    return [(s.name, s.anchor, s.description) for s in REGISTRY.values()]


def load_config(path, seed_override: Optional[int] = None, output_dir: Optional[str] = None):
    from .errors import ConfigurationError
    from .experiments import REGISTRY, ExperimentConfig
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"config: cannot read {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError("config: top level must be a mapping")
    name = raw.get("experiment")
    if name not in REGISTRY:
        raise UsageError(f"unknown experiment {name!r}; registered: {', '.join(REGISTRY)}")
    seed = raw.get("seed") if seed_override is None else seed_override
    if seed is None:
        raise ConfigurationError("seed: required field is missing")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigurationError("seed: must be a nonnegative integer")
    grid = raw.get("grid", {}) or {}
    if not isinstance(grid, dict):
        raise ConfigurationError("grid: must be a mapping")
    N, P, T = grid.get("N", 64), grid.get("P", 10000), grid.get("T", 1.0)
    if isinstance(N, bool) or not isinstance(N, int) or N < 2:
        raise ConfigurationError("grid.N: must be an integer >= 2")
    if isinstance(P, bool) or not isinstance(P, int) or P < 1:
        raise ConfigurationError("grid.P: must be an integer >= 1")
    if not isinstance(T, (int, float)) or not T > 0:
        raise ConfigurationError("grid.T: must be positive")
    for key in ("model", "params"):
        if not isinstance(raw.get(key, {}) or {}, dict):
            raise ConfigurationError(f"{key}: must be a mapping")
    unknown = set(raw) - {"experiment", "seed", "grid", "model", "params", "output_dir"}
    if unknown:
        raise ConfigurationError(f"{sorted(unknown)[0]}: unknown field")
    out = output_dir or raw.get("output_dir") or os.path.join("runs", name)
    return ExperimentConfig(name, int(seed), int(N), int(P), float(T), dict(raw.get("model") or {}),
                            dict(raw.get("params") or {}), str(out))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool,)):
        return "true" if v else "false"
    if isinstance(v, int) or (hasattr(v, "dtype") and v.dtype.kind in "iu"):
        return str(int(v))
    if isinstance(v, float) or (hasattr(v, "dtype") and v.dtype.kind == "f"):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_cell(v) for v in r) + "\n")


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if hasattr(o, "item"):
        o = o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    return o


def _write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions():
    import numpy
    import scipy
    v = {"python": platform.python_version(), "numpy": numpy.__version__, "scipy": scipy.__version__}
    try:
        import numba
        v["numba"] = numba.__version__
    except ImportError:
        pass
    from . import __version__
    v["bsdelab"] = __version__
    return v


def run(config_path, output_dir=None, seed=None) -> int:
    from .errors import ConfigurationError
    from .experiments import REGISTRY
    cfg = load_config(config_path, seed, output_dir)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    files: List[Path] = []
    failure = None
    result = None
    try:
        result = REGISTRY[cfg.name].run(cfg)
    except ConfigurationError:
        raise
    except Exception as exc:  # fail closed: record and exit nonzero
        failure = {"experiment": cfg.name, "error": type(exc).__name__, "message": str(exc)}
    if result is not None:
        for tname, (header, rows) in result.tables.items():
            p = out_dir / f"{tname}.csv"
            write_csv(p, header, rows)
            files.append(p)
        summary = {"experiment": cfg.name, "seed": cfg.seed, "checks": result.checks,
                   "pass": result.passed, "results": result.summary}
        p = out_dir / "summary.json"
        _write_json(p, summary)
        files.append(p)
        if not result.passed:
            failure = {"experiment": cfg.name, "error": "CheckFailed",
                       "failed_checks": [k for k, v in result.checks.items() if not v]}
    fail_path = out_dir / "failure.json"
    if failure is not None:
        _write_json(fail_path, failure)
        files.append(fail_path)
    elif fail_path.exists():
        fail_path.unlink()
    manifest = {"config": {"experiment": cfg.name, "seed": cfg.seed, "grid": {"N": cfg.N, "P": cfg.P,
                                                                              "T": cfg.T},
                           "model": cfg.model, "params": cfg.params, "output_dir": str(out_dir)},
                "versions": _versions(), "wall_time_seconds": time.time() - t0,
                "status": "pass" if failure is None else "fail",
                "outputs": {p.name: _sha256(p) for p in files}}
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK if failure is None else EXIT_FAIL


def _set_threads(k: Optional[int]):
    if not k:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(k)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsdelab", description="BSDE experiment harness")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a YAML config")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None)
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--threads", type=int, default=None, help="thread-count hint for BLAS/numba")
    sub.add_parser("list", help="list registered experiments")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name, anchor, desc in list_experiments():
            print(f"{name}\t{anchor}\t{desc}")
        return EXIT_OK
    _set_threads(args.threads)
    from .errors import ConfigurationError
    try:
        return run(args.config, args.output_dir, args.seed)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
