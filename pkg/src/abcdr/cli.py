"""Command-line runner: ``abcdr run <config>`` and ``abcdr validate <config>``.

A config is a JSON object::

    {
      "model_id": "gaussian-toy",          # or "table_path": "table.csv"
      "model_constants": {"k_noise": 4},
      "prior": {"theta": {"dist": "normal", "mean": 0, "sd": 3}},
      "n_sims": 10000,
      "seed": 1,
      "acceptance_fraction": 0.01,
      "n_star": 100,
      "param_sets": [["theta"]],
      "pipelines": [{"reduction": "none", "adjustment": "homoscedastic"}],
      "collinearity": {"enabled": false, "n_pseudo": 1000, "lambda": null},
      "output_dir": "out"
    }

Exit status is 0 on success (flagged rows included), 1 for an invalid
config and 2 when the run itself fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .core import ReferenceTable, read_table_header
from .evaluation import (PipelineSpec, collinearity_experiment, run_comparison,
                         write_condition_csv, write_traces)
from .models import get_model
from .sampler import SimulatorSpec, generate_table

TOP_KEYS = {"model_id", "model_constants", "prior", "n_sims", "seed",
            "acceptance_fraction", "n_star", "param_sets", "pipelines",
            "collinearity", "output_dir", "table_path"}
PIPELINE_KEYS = {"reduction", "adjustment", "regressor", "hyperparams", "name"}
DEFAULTS = {"acceptance_fraction": 0.01, "n_star": 100, "seed": 0,
            "model_constants": {}, "prior": {}, "output_dir": "abcdr-output"}


@dataclass(frozen=True)
class Diagnostic:
    path: str
    line: int
    message: str

    def __str__(self):
        return f"{self.path}:{self.line}: {self.message}"


def _line_of(text: str, key: str, occurrence: int = 0) -> int:
    """1-based line of the ``occurrence``-th appearance of ``"key"``."""
    pos = -1
    for _ in range(occurrence + 1):
        pos = text.find(f'"{key}"', pos + 1)
        if pos < 0:
            return 1
    return text.count("\n", 0, pos) + 1


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _load(path):
    with open(path) as fh:
        text = fh.read()
    return text, json.loads(text)


def _table_shape(cfg, base_dir):
    """(param names, stat names, n) without simulating anything."""
    if "table_path" in cfg:
        path = os.path.join(base_dir, cfg["table_path"])
        params, stats = read_table_header(path)
        with open(path) as fh:
            n = sum(1 for line in fh if line.strip()) - 1
        return list(params), list(stats), n
    sim = SimulatorSpec(cfg["model_id"], cfg.get("prior", {}),
                        cfg.get("model_constants", {}), int(cfg.get("seed", 0)))
    return (list(sim.model.param_names), list(sim.model.stat_names(sim.config)),
            cfg.get("n_sims"))


def check_config(cfg, text: str, path: str, base_dir: str = ".") -> list:
    """Schema and cross-field checks; returns diagnostics, never raises."""
    diags = []

    def err(key, message, occurrence=0):
        diags.append(Diagnostic(path, _line_of(text, key, occurrence), message))

    if not isinstance(cfg, dict):
        return [Diagnostic(path, 1, "config must be a JSON object")]
    for key in sorted(set(cfg) - TOP_KEYS):
        err(key, f"unknown key {key!r}")
    has_model, has_table = "model_id" in cfg, "table_path" in cfg
    if has_model == has_table:
        diags.append(Diagnostic(path, 1, "exactly one of model_id and table_path is required"))
        return diags
    if has_model:
        try:
            get_model(cfg["model_id"])
        except KeyError as exc:
            err("model_id", exc.args[0])
            return diags
        n = cfg.get("n_sims")
        if not _is_int(n) or n < 2:
            err("n_sims" if "n_sims" in cfg else "model_id",
                "n_sims must be an integer >= 2")
    elif not os.path.isfile(os.path.join(base_dir, str(cfg["table_path"]))):
        err("table_path", f"table file not found: {cfg['table_path']}")
        return diags
    seed = cfg.get("seed", 0)
    if not _is_int(seed) or not 0 <= seed < 2 ** 63:
        err("seed", "seed must be a non-negative integer")
    f = cfg.get("acceptance_fraction", DEFAULTS["acceptance_fraction"])
    if not isinstance(f, (int, float)) or isinstance(f, bool) or not 0 < f <= 1:
        err("acceptance_fraction", "acceptance_fraction must lie in (0, 1]")
        f = None
    try:
        params, stats, n = _table_shape(cfg, base_dir)
    except (KeyError, ValueError, TypeError) as exc:
        err("model_constants" if "model_constants" in cfg else "prior",
            f"invalid model setup: {exc}")
        return diags
    except OSError as exc:
        err("table_path", f"cannot read table: {exc}")
        return diags
    n_star = cfg.get("n_star", DEFAULTS["n_star"])
    if not _is_int(n_star) or n_star < 1:
        err("n_star", "n_star must be a positive integer")
    elif _is_int(n) and n_star > n:
        err("n_star", f"n_star={n_star} exceeds the table size {n}")
    if f is not None and _is_int(n) and math.ceil(round((n - 1) * f, 9)) < 2:
        err("acceptance_fraction", "acceptance fraction keeps fewer than 2 simulations")
    param_sets = cfg.get("param_sets", [params])
    if (not isinstance(param_sets, list) or not param_sets
            or not all(isinstance(s, list) and s for s in param_sets)):
        err("param_sets", "param_sets must be a non-empty list of non-empty name lists")
        param_sets = [params]
    for s in param_sets:
        missing = [name for name in s if name not in params]
        if missing:
            err("param_sets", f"unknown parameters {missing}; available: {params}")
    pipes = cfg.get("pipelines")
    if not isinstance(pipes, list) or not pipes:
        err("pipelines" if "pipelines" in cfg else "model_id" if has_model else "table_path",
            "pipelines must be a non-empty list")
        pipes = []
    for i, pipe in enumerate(pipes):
        anchor = ("reduction", i)
        if not isinstance(pipe, dict):
            err("pipelines", f"pipeline {i + 1} must be an object")
            continue
        extra = set(pipe) - PIPELINE_KEYS
        if extra:
            err(*anchor[:1], f"pipeline {i + 1}: unknown keys {sorted(extra)}", i)
        try:
            spec = PipelineSpec(pipe.get("reduction", "none"), pipe.get("adjustment", "none"),
                                pipe.get("regressor", "wls"), dict(pipe.get("hyperparams", {})),
                                pipe.get("name", ""))
        except (ValueError, TypeError) as exc:
            err("reduction", f"pipeline {i + 1}: {exc}", i)
            continue
        if spec.reduction == "eps-sufficiency" and any(len(s) != 1 for s in param_sets):
            err("reduction", f"pipeline {i + 1}: eps-sufficiency is restricted to a "
                "univariate parameter (q = 1); use single-name param_sets", i)
        if spec.hp("search") not in ("auto", "exhaustive", "forward", "backward"):
            err("reduction", f"pipeline {i + 1}: unknown search {spec.hp('search')!r}", i)
        if (spec.reduction in ("aic", "aicc", "bic", "entropy")
                and spec.hp("search") == "exhaustive" and len(stats) > spec.hp("max_exhaustive_p")):
            err("reduction", f"pipeline {i + 1}: exhaustive search requested with "
                f"p={len(stats)} > max_exhaustive_p={spec.hp('max_exhaustive_p')}", i)
    col = cfg.get("collinearity")
    if col is not None:
        if not isinstance(col, dict):
            err("collinearity", "collinearity must be an object")
        else:
            m = col.get("n_pseudo", 1000)
            if not _is_int(m) or m < 1 or (_is_int(n) and m > n):
                err("collinearity", "collinearity.n_pseudo must lie in [1, n]")
            lam = col.get("lambda")
            if lam is not None and not (isinstance(lam, (int, float)) and lam > 0):
                err("collinearity", "collinearity.lambda must be positive or null")
    out = cfg.get("output_dir")
    if out is not None and not isinstance(out, str):
        err("output_dir", "output_dir must be a string")
    return diags


def validate(config_path) -> list:
    """Diagnostics for a config file (empty when valid)."""
    try:
        text, cfg = _load(config_path)
    except OSError as exc:
        return [Diagnostic(str(config_path), 1, f"cannot read config: {exc.strerror}")]
    except json.JSONDecodeError as exc:
        return [Diagnostic(str(config_path), exc.lineno, f"invalid JSON: {exc.msg}")]
    return check_config(cfg, text, str(config_path),
                        os.path.dirname(os.path.abspath(config_path)))


def _pipelines(cfg):
    return [PipelineSpec(p.get("reduction", "none"), p.get("adjustment", "none"),
                         p.get("regressor", "wls"), dict(p.get("hyperparams", {})),
                         p.get("name", "")) for p in cfg["pipelines"]]


def run(config_path, output_dir: Optional[str] = None, seed: Optional[int] = None,
        threads: int = 1, stream=sys.stderr) -> int:
    """Execute a config; returns the process exit status."""
    diags = validate(config_path)
    try:
        text, cfg = _load(config_path)
    except (OSError, json.JSONDecodeError):
        cfg = None
    if cfg is not None and seed is not None:
        cfg["seed"] = int(seed)
        diags = check_config(cfg, text, str(config_path),
                             os.path.dirname(os.path.abspath(config_path)))
    if diags:
        for d in diags:
            print(d, file=stream)
        return 1
    base_dir = os.path.dirname(os.path.abspath(config_path))
    out = output_dir or cfg.get("output_dir") or DEFAULTS["output_dir"]
    if output_dir is None and not os.path.isabs(out):
        out = os.path.join(base_dir, out)
    try:
        os.makedirs(out, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory not writable: {out}")
    except OSError as exc:
        print(f"{config_path}:{_line_of(text, 'output_dir')}: {exc}", file=stream)
        return 1
    try:
        return _execute(cfg, base_dir, out, threads)
    except Exception as exc:
        print(f"{config_path}: run failed: {type(exc).__name__}: {exc}", file=stream)
        return 2


def _execute(cfg, base_dir, out, threads) -> int:
    seed = int(cfg.get("seed", 0))
    f = float(cfg.get("acceptance_fraction", DEFAULTS["acceptance_fraction"]))
    if "table_path" in cfg:
        table = ReferenceTable.from_csv(os.path.join(base_dir, cfg["table_path"]))
    else:
        sim = SimulatorSpec(cfg["model_id"], cfg.get("prior", {}),
                            cfg.get("model_constants", {}), seed)
        table = generate_table(sim, int(cfg["n_sims"]), threads)
        table.to_csv(os.path.join(out, "table.csv"))
    param_sets = cfg.get("param_sets", [list(table.param_names)])
    report = run_comparison(table, _pipelines(cfg), int(cfg.get("n_star", 100)), seed,
                            acceptance_fraction=f, param_sets=param_sets,
                            threads=threads)
    report.to_csv(os.path.join(out, "report.csv"))
    traces = write_traces(report, os.path.join(out, "selection_traces"))
    col = cfg.get("collinearity") or {}
    if col.get("enabled", bool(col)):
        diag = collinearity_experiment(table, int(col.get("n_pseudo", 1000)),
                                       col.get("lambda"), seed, acceptance_fraction=f)
        write_condition_csv(diag, os.path.join(out, "condition.csv"))
    manifest = {
        "config": cfg,
        "versions": {"abcdr": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "table": {"n": table.n, "params": list(table.param_names),
                  "stats": list(table.stat_names)},
        "pseudo_rows": report.pseudo_rows.tolist(),
        "rows": [{"params": r.params, "pipeline": r.pipeline, "n_eff": r.n_eff,
                  "n_failed": r.n_failed, "flags": list(r.flags),
                  "errors": list(r.warnings)} for r in report.rows],
        "selection_traces": sorted(os.path.relpath(p, out) for p in traces),
    }
    with open(os.path.join(out, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return 0


def _json_default(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    raise TypeError(type(obj).__name__)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="abcdr", description="ABC dimension-reduction "
                                 "experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "execute a config"), ("validate", "check a config")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be at least 1", file=sys.stderr)
        return 1
    if args.command == "validate":
        diags = validate(args.config)
        for d in diags:
            print(d, file=sys.stderr)
        if not diags:
            print(f"{args.config}: ok")
        return 1 if diags else 0
    return run(args.config, args.output_dir, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
