"""Synthetic simulators used to exercise the reduction methods.

Three models are registered under the ids used by the CLI:

``gaussian-toy``
    Normal mean with a conjugate prior, so the exact posterior is known.
    Statistics are the sample mean (sufficient), the sample median, pure
    noise columns and optional near-copies of the mean column.
``hetero-toy``
    One statistic with multiplicative noise (conditional sd 0.3 theta) plus a
    noise column; used for the variance regression.
``stereology``
    Spherical inclusions in a slab observed through a planar section, with
    generalised Pareto exceedance sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable, Optional

import numpy as np


class SimulationError(RuntimeError):
    """A simulator could not produce statistics for a parameter draw."""


@dataclass(frozen=True)
class GaussianToyConfig:
    tau0: float = 3.0
    n0: int = 20
    k_noise: int = 4
    k_dup: int = 0
    dup_sd: float = 1e-6
    include_median: bool = True

    def __post_init__(self):
        if self.n0 < 2:
            raise ValueError("n0 must be at least 2")
        if self.k_noise < 0 or self.k_dup < 0:
            raise ValueError("k_noise and k_dup must be non-negative")
        if not self.tau0 > 0:
            raise ValueError("tau0 must be positive")


@dataclass(frozen=True)
class HeteroToyConfig:
    low: float = 1.0
    high: float = 10.0
    rel_sd: float = 0.3

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("prior bounds must satisfy low < high")


@dataclass(frozen=True)
class StereologyConfig:
    threshold: float = 5.0
    half_depth: float = 60.0
    n_quantiles: int = 20
    spacing: str = "equal"
    v_cap: float = 1e6
    tau_range: tuple = (10.0, 200.0)
    sigma_range: tuple = (0.1, 5.0)
    xi_range: tuple = (-0.5, 1.0)

    def __post_init__(self):
        if self.n_quantiles < 2:
            raise ValueError("n_quantiles must be at least 2")
        if self.spacing not in ("equal", "max-favouring"):
            raise ValueError(f"unknown quantile spacing {self.spacing!r}")
        if self.sigma_range[0] <= 0:
            raise ValueError("sigma prior must exclude non-positive values")
        for lo, hi in (self.tau_range, self.sigma_range, self.xi_range):
            if not lo < hi:
                raise ValueError("prior bounds must satisfy low < high")


# -- gaussian toy ---------------------------------------------------------


def gaussian_stat_names(config: GaussianToyConfig) -> list:
    names = ["mean"]
    if config.include_median:
        names.append("median")
    names += [f"noise{i + 1}" for i in range(config.k_noise)]
    names += [f"dup{i + 1}" for i in range(config.k_dup)]
    return names


def simulate_gaussian_toy_block(config: GaussianToyConfig, thetas, rng) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float).reshape(-1)
    m = len(thetas)
    y = thetas[:, None] + rng.standard_normal((m, config.n0))
    ybar = y.mean(axis=1)
    cols = [ybar]
    if config.include_median:
        cols.append(np.median(y, axis=1))
    noise = rng.standard_normal((m, config.k_noise))
    cols.extend(noise.T)
    dup = ybar[:, None] + config.dup_sd * rng.standard_normal((m, config.k_dup))
    cols.extend(dup.T)
    return np.column_stack(cols)


def simulate_gaussian_toy(config: GaussianToyConfig, theta, rng) -> np.ndarray:
    return simulate_gaussian_toy_block(config, np.atleast_1d(theta)[:1], rng)[0]


def gaussian_posterior(config: GaussianToyConfig, ybar):
    """Exact posterior mean and variance of theta given the sample mean."""
    t2 = config.tau0 ** 2
    denom = config.n0 * t2 + 1.0
    return t2 * config.n0 * np.asarray(ybar) / denom, t2 / denom


# -- heteroscedastic toy --------------------------------------------------


def simulate_hetero_toy_block(config: HeteroToyConfig, thetas, rng) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float).reshape(-1)
    e = rng.standard_normal((len(thetas), 2))
    s1 = thetas * (1.0 + config.rel_sd * e[:, 0])
    return np.column_stack([s1, e[:, 1]])


def simulate_hetero_toy(config: HeteroToyConfig, theta, rng) -> np.ndarray:
    return simulate_hetero_toy_block(config, np.atleast_1d(theta)[:1], rng)[0]


# -- stereology -----------------------------------------------------------


def gpd_sample(rng, size, sigma: float, xi: float) -> np.ndarray:
    """Generalised Pareto draws by inversion."""
    u = rng.random(size)
    if abs(xi) < 1e-12:
        return -sigma * np.log1p(-u)
    return sigma / xi * ((1.0 - u) ** (-xi) - 1.0)


def quantile_levels(n_quantiles: int, spacing: str = "equal") -> np.ndarray:
    """Probability levels of the quantile block; both ends always included.

    ``max-favouring`` packs levels towards the maximum.
    """
    u = np.linspace(0.0, 1.0, n_quantiles)
    if spacing == "equal":
        return u
    return 1.0 - (1.0 - u) ** 2


def stereology_stat_names(config: StereologyConfig) -> list:
    return ["count"] + [f"q{i + 1:03d}" for i in range(config.n_quantiles)]


def section_diameters(config: StereologyConfig, theta, rng, diagnostics=None):
    """Observed planar diameters for one slab realisation."""
    tau, sigma, xi = (float(v) for v in theta)
    if tau <= 0 or sigma <= 0:
        raise SimulationError(f"invalid parameters tau={tau}, sigma={sigma}")
    Z = config.half_depth
    n = rng.poisson(tau * Z)
    z = rng.uniform(-Z, Z, size=n)
    v = config.threshold + gpd_sample(rng, n, sigma, xi)
    if not np.isfinite(v).all():
        raise SimulationError("non-finite inclusion size")
    over = v > config.v_cap
    if over.any():
        v = np.minimum(v, config.v_cap)
    cut = np.abs(z) < 0.5 * v
    d = np.sqrt(v[cut] ** 2 - 4.0 * z[cut] ** 2)
    d = d[d > config.threshold]
    if diagnostics is not None:
        diagnostics["capped"] = diagnostics.get("capped", 0) + int(over.sum())
        diagnostics["wider_than_slab"] = (diagnostics.get("wider_than_slab", 0)
                                          + int((0.5 * v > Z).sum()))
    return d


def simulate_stereology(config: StereologyConfig, theta, rng, diagnostics=None) -> np.ndarray:
    d = section_diameters(config, theta, rng, diagnostics)
    out = np.zeros(config.n_quantiles + 1)
    out[0] = len(d)
    if len(d):
        out[1:] = np.quantile(d - config.threshold,
                              quantile_levels(config.n_quantiles, config.spacing))
    return out


# -- registry -------------------------------------------------------------


@dataclass(frozen=True)
class ModelDef:
    model_id: str
    config_cls: type
    param_names: tuple
    default_prior: Callable
    stat_names: Callable
    simulate: Callable
    simulate_block: Optional[Callable] = None

    def make_config(self, constants=None):
        constants = dict(constants or {})
        known = {f.name for f in fields(self.config_cls)}
        unknown = set(constants) - known
        if unknown:
            raise KeyError(f"unknown constants for {self.model_id}: {sorted(unknown)}")
        for key, val in list(constants.items()):
            if isinstance(val, list):
                constants[key] = tuple(val)
        return replace(self.config_cls(), **constants)


def _gaussian_prior(config):
    return {"theta": {"dist": "normal", "mean": 0.0, "sd": config.tau0}}


def _hetero_prior(config):
    return {"theta": {"dist": "uniform", "low": config.low, "high": config.high}}


def _stereology_prior(config):
    return {
        "tau": {"dist": "uniform", "low": config.tau_range[0], "high": config.tau_range[1]},
        "sigma": {"dist": "uniform", "low": config.sigma_range[0], "high": config.sigma_range[1]},
        "xi": {"dist": "uniform", "low": config.xi_range[0], "high": config.xi_range[1]},
    }


MODELS = {
    "gaussian-toy": ModelDef("gaussian-toy", GaussianToyConfig, ("theta",),
                             _gaussian_prior, gaussian_stat_names,
                             simulate_gaussian_toy, simulate_gaussian_toy_block),
    "hetero-toy": ModelDef("hetero-toy", HeteroToyConfig, ("theta",),
                           _hetero_prior, lambda c: ["s1", "s2"],
                           simulate_hetero_toy, simulate_hetero_toy_block),
    "stereology": ModelDef("stereology", StereologyConfig, ("tau", "sigma", "xi"),
                           _stereology_prior, stereology_stat_names,
                           simulate_stereology),
}


def get_model(model_id: str) -> ModelDef:
    try:
        return MODELS[model_id]
    except KeyError:
        raise KeyError(f"unknown model id {model_id!r}; "
                       f"registered: {sorted(MODELS)}") from None
