"""Reference-table generation and kernel-weighted rejection ABC."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (ReferenceTable, WeightedSample, calibrate_epsilon,
                   compute_scales, distances, kernel_weights)
from .models import SimulationError, get_model

BLOCK_SIZE = 1024
MAX_REDRAWS = 100


@dataclass(frozen=True)
class SimulatorSpec:
    """Which model to run, its prior, its constants and the master seed.

    ``prior_spec`` maps parameter name to ``{"dist": "uniform", "low", "high"}``
    or ``{"dist": "normal", "mean", "sd"}``. When empty the model's default
    prior is used.
    """

    model_id: str
    prior_spec: dict = field(default_factory=dict)
    model_constants: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        model = get_model(self.model_id)
        config = model.make_config(self.model_constants)
        prior = dict(model.default_prior(config))
        prior.update(self.prior_spec or {})
        for name in model.param_names:
            if name not in prior:
                raise ValueError(f"no prior for parameter {name!r}")
            _check_prior(name, prior[name])
        object.__setattr__(self, "prior_spec", prior)
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def model(self):
        return get_model(self.model_id)

    @property
    def config(self):
        return self.model.make_config(self.model_constants)

    def sample_prior(self, rng, size: int) -> np.ndarray:
        cols = []
        for name in self.model.param_names:
            d = self.prior_spec[name]
            if d["dist"] == "uniform":
                cols.append(rng.uniform(d["low"], d["high"], size))
            else:
                cols.append(rng.normal(d["mean"], d["sd"], size))
        return np.column_stack(cols)


def _check_prior(name, d):
    kind = d.get("dist")
    if kind == "uniform":
        lo, hi = float(d["low"]), float(d["high"])
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ValueError(f"prior for {name!r}: need finite low < high")
    elif kind == "normal":
        if not float(d["sd"]) > 0:
            raise ValueError(f"prior for {name!r}: sd must be positive")
    else:
        raise ValueError(f"prior for {name!r}: unknown distribution {kind!r}")


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(block),)))


def simulate_block(sim: SimulatorSpec, block: int):
    """Simulate one full block of rows; returns (params, stats, diagnostics).

    Whole blocks are always produced so that a row's values never depend on
    how many rows were requested in total.
    """
    model = sim.model
    config = sim.config
    rng = block_rng(sim.seed, block)
    diagnostics = {}
    if model.simulate_block is not None:
        thetas = sim.sample_prior(rng, BLOCK_SIZE)
        return thetas, model.simulate_block(config, thetas, rng), diagnostics
    thetas, stats = [], []
    for _ in range(BLOCK_SIZE):
        for attempt in range(MAX_REDRAWS):
            theta = sim.sample_prior(rng, 1)[0]
            try:
                s = model.simulate(config, theta, rng, diagnostics)
            except SimulationError as exc:
                last = exc
                continue
            if np.isfinite(s).all():
                break
            last = SimulationError(f"non-finite statistics at theta={theta.tolist()}")
        else:
            raise SimulationError(
                f"{sim.model_id}: {MAX_REDRAWS} consecutive prior draws failed "
                f"in block {block}; last error: {last}")
        thetas.append(theta)
        stats.append(s)
    return np.array(thetas), np.array(stats), diagnostics


def generate_table(sim: SimulatorSpec, n: int, threads: int = 1) -> ReferenceTable:
    """Draw ``n`` rows from the prior predictive distribution.

    Each block of ``BLOCK_SIZE`` rows has its own random stream derived from
    ``(seed, block index)``, so the output is the same for any ``threads``
    and the first rows do not change when ``n`` grows.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    n_blocks = -(-n // BLOCK_SIZE)
    if threads > 1 and n_blocks > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(simulate_block, [sim] * n_blocks, range(n_blocks)))
    else:
        parts = [simulate_block(sim, b) for b in range(n_blocks)]
    params = np.concatenate([p[0] for p in parts])[:n]
    stats = np.concatenate([p[1] for p in parts])[:n]
    diag = {}
    for _, _, d in parts:
        for key, val in d.items():
            diag[key] = diag.get(key, 0) + val
    if diag.get("capped"):
        warnings.warn(f"{diag['capped']} inclusion sizes capped", RuntimeWarning)
    model = sim.model
    return ReferenceTable(params, stats, model.param_names, model.stat_names(sim.config))


def rejection_abc(table: ReferenceTable, obs, mask=None, acceptance_fraction=0.01,
                  *, scales=None, exclude: Optional[int] = None,
                  n_accept: Optional[int] = None) -> WeightedSample:
    """Kernel-weighted rejection ABC on a stored reference table.

    Scales statistics by their mean absolute deviation (over the whole
    table unless ``scales`` is supplied), calibrates the Epanechnikov
    bandwidth to the requested acceptance fraction and returns the accepted
    rows with normalised weights. ``exclude`` drops one row first, which is
    how leave-one-out evaluation treats a simulated dataset as observed.
    """
    if scales is None:
        scales = compute_scales(table)
    d = distances(table, obs, scales, mask)
    rows = np.arange(table.n)
    if exclude is not None:
        keep = rows != exclude
        d, rows = d[keep], rows[keep]
    kernel = calibrate_epsilon(d, acceptance_fraction, n_accept=n_accept)
    w = kernel_weights(d, kernel)
    pos = w > 0
    return WeightedSample.from_unnormalised(table.params[rows[pos]], w[pos],
                                            rows[pos], kernel)
