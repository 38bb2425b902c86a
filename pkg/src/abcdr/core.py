"""Reference tables, statistic scaling, distances and the Epanechnikov kernel.

Everything here is shared by the samplers, the regression adjustments and the
selection criteria. Types are frozen dataclasses whose arrays are made
read-only on construction.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ABCError(Exception):
    """Base class for recoverable numerical failures."""


class DegenerateDistancesError(ABCError):
    pass


class EmptyAcceptanceError(ABCError):
    pass


def _frozen(a, dtype=float, ndim=None):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ReferenceTable:
    """n simulated (parameter, statistic) pairs.

    Row ``i`` of ``params`` and row ``i`` of ``stats`` come from the same
    simulation.
    """

    params: np.ndarray
    stats: np.ndarray
    param_names: tuple
    stat_names: tuple

    def __post_init__(self):
        params = _frozen(self.params, ndim=2)
        stats = _frozen(self.stats, ndim=2)
        if params.shape[0] != stats.shape[0]:
            raise ValueError("params and stats must have the same number of rows")
        if params.shape[0] < 1 or params.shape[1] < 1 or stats.shape[1] < 1:
            raise ValueError("reference table needs n >= 1, q >= 1 and p >= 1")
        if not (np.isfinite(params).all() and np.isfinite(stats).all()):
            raise ValueError("reference table contains non-finite entries")
        names_p = tuple(str(x) for x in self.param_names)
        names_s = tuple(str(x) for x in self.stat_names)
        if len(names_p) != params.shape[1] or len(names_s) != stats.shape[1]:
            raise ValueError("name lists do not match table dimensions")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "stats", stats)
        object.__setattr__(self, "param_names", names_p)
        object.__setattr__(self, "stat_names", names_s)

    @property
    def n(self) -> int:
        return self.params.shape[0]

    @property
    def q(self) -> int:
        return self.params.shape[1]

    @property
    def p(self) -> int:
        return self.stats.shape[1]

    def subset(self, rows) -> "ReferenceTable":
        rows = np.asarray(rows)
        return ReferenceTable(self.params[rows], self.stats[rows],
                              self.param_names, self.stat_names)

    def with_stats(self, stats, stat_names) -> "ReferenceTable":
        return ReferenceTable(self.params, stats, self.param_names, stat_names)

    def param_index(self, names: Sequence[str]) -> list:
        try:
            return [self.param_names.index(n) for n in names]
        except ValueError as exc:
            raise KeyError(f"unknown parameter in {list(names)}") from exc

    def observation(self, row: int) -> "Observation":
        """Treat simulation ``row`` as observed data with a known truth."""
        return Observation(self.stats[row], theta_true=self.params[row])

    # -- CSV ------------------------------------------------------------

    def to_csv(self, path) -> None:
        header = [f"param:{n}" for n in self.param_names]
        header += [f"stat:{n}" for n in self.stat_names]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for prow, srow in zip(self.params.tolist(), self.stats.tolist()):
                writer.writerow([repr(v) for v in prow] + [repr(v) for v in srow])

    @classmethod
    def from_csv(cls, path) -> "ReferenceTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader if r]
        pcols = [i for i, h in enumerate(header) if h.startswith("param:")]
        scols = [i for i, h in enumerate(header) if h.startswith("stat:")]
        if len(pcols) + len(scols) != len(header):
            bad = [h for h in header if not h.startswith(("param:", "stat:"))]
            raise ValueError(f"{path}: unrecognised header columns {bad}")
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
        return cls(data[:, pcols], data[:, scols],
                   [header[i][len("param:"):] for i in pcols],
                   [header[i][len("stat:"):] for i in scols])


def read_table_header(path) -> tuple:
    """Return ``(param_names, stat_names)`` without loading the body."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    return ([h[6:] for h in header if h.startswith("param:")],
            [h[5:] for h in header if h.startswith("stat:")])


@dataclass(frozen=True)
class Observation:
    s_obs: np.ndarray
    theta_true: Optional[np.ndarray] = None

    def __post_init__(self):
        s = _frozen(self.s_obs, ndim=1)
        if not np.isfinite(s).all():
            raise ValueError("observed statistics must be finite")
        object.__setattr__(self, "s_obs", s)
        if self.theta_true is not None:
            object.__setattr__(self, "theta_true", _frozen(self.theta_true, ndim=1))


@dataclass(frozen=True)
class KernelSpec:
    """Epanechnikov kernel scale.

    ``epsilon`` is the bandwidth used for weighting. ``threshold`` is the
    order-statistic distance that defined acceptance and ``n_accepted`` the
    realised number of rows with positive weight (ties included).
    """

    epsilon: float
    family: str = "epanechnikov"
    threshold: Optional[float] = None
    n_accepted: Optional[int] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.family != "epanechnikov":
            raise ValueError(f"unsupported kernel family {self.family!r}")


@dataclass(frozen=True)
class WeightedSample:
    thetas: np.ndarray
    weights: np.ndarray
    source_rows: np.ndarray
    kernel: Optional[KernelSpec] = None

    def __post_init__(self):
        thetas = _frozen(self.thetas, ndim=2)
        w = _frozen(self.weights, ndim=1)
        rows = _frozen(self.source_rows, dtype=np.int64, ndim=1)
        if not (len(w) == thetas.shape[0] == len(rows)):
            raise ValueError("thetas, weights and source_rows disagree in length")
        if len(w) == 0:
            raise EmptyAcceptanceError("empty acceptance region")
        if (w <= 0).any():
            raise ValueError("weighted sample must only hold strictly positive weights")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "source_rows", rows)

    @property
    def n_eff(self) -> int:
        return len(self.weights)

    @classmethod
    def from_unnormalised(cls, thetas, raw_weights, rows, kernel=None):
        raw = np.asarray(raw_weights, dtype=float)
        keep = raw > 0
        if not keep.any():
            raise EmptyAcceptanceError("empty acceptance region")
        w = raw[keep] / raw[keep].sum()
        # one extra pass removes the last-ulp drift of the division
        w = w / w.sum()
        return cls(np.asarray(thetas)[keep], w, np.asarray(rows)[keep], kernel)

    def uniform(self) -> "WeightedSample":
        """Same accepted rows with equal weights (evaluation convention)."""
        m = self.n_eff
        return WeightedSample(self.thetas, np.full(m, 1.0 / m), self.source_rows,
                              self.kernel)

    def mean(self) -> np.ndarray:
        return self.weights @ self.thetas


@dataclass(frozen=True)
class StandardisationSpec:
    scales: np.ndarray
    method: str = "mean-absolute-deviation"
    degenerate: tuple = field(default=())

    def __post_init__(self):
        s = _frozen(self.scales, ndim=1)
        if (s <= 0).any():
            raise ValueError("scales must be positive")
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "degenerate", tuple(int(i) for i in self.degenerate))


def compute_scales(table_or_stats) -> StandardisationSpec:
    """Mean absolute deviation about the mean, one scale per statistic.

    Constant columns get scale 1 and are listed in ``degenerate``; a warning
    is emitted for them.
    """
    stats = getattr(table_or_stats, "stats", table_or_stats)
    stats = np.asarray(stats, dtype=float)
    if stats.ndim != 2 or stats.shape[0] < 1:
        raise ValueError("need a nonempty n x p statistics matrix")
    mad = np.abs(stats - stats.mean(axis=0)).mean(axis=0)
    degenerate = np.flatnonzero(~(mad > 0))
    if len(degenerate):
        warnings.warn(f"statistics {degenerate.tolist()} have zero spread; "
                      "scale set to 1", RuntimeWarning, stacklevel=2)
        mad = mad.copy()
        mad[degenerate] = 1.0
    return StandardisationSpec(mad, degenerate=tuple(degenerate))


def mask_indices(mask, p: int) -> np.ndarray:
    """Column indices selected by a mask-like value (None means all)."""
    if mask is None:
        return np.arange(p)
    include = getattr(mask, "include", mask)
    include = np.asarray(include)
    if include.dtype == bool:
        if include.shape != (p,):
            raise ValueError(f"mask has length {include.shape}, expected {p}")
        idx = np.flatnonzero(include)
    else:
        idx = np.asarray(include, dtype=int)
    if len(idx) == 0:
        raise ValueError("mask selects no statistic")
    return idx


def distances(table, obs, spec: StandardisationSpec, mask=None) -> np.ndarray:
    """Scaled Euclidean distance of every simulated row to the observation."""
    stats = getattr(table, "stats", table)
    s_obs = getattr(obs, "s_obs", obs)
    idx = mask_indices(mask, stats.shape[1])
    z = (stats[:, idx] - np.asarray(s_obs)[idx]) / spec.scales[idx]
    return np.sqrt(np.einsum("ij,ij->i", z, z))


def calibrate_epsilon(dists, acceptance_fraction: Optional[float] = None,
                      n_accept: Optional[int] = None) -> KernelSpec:
    """Bandwidth that gives positive weight to the k closest rows.

    ``k = ceil(n * acceptance_fraction)`` unless ``n_accept`` is given
    directly. Rows tied with the k-th distance are all accepted. The returned
    ``epsilon`` sits halfway to the next larger distance so that every
    accepted row has strictly positive Epanechnikov weight.
    """
    d = np.asarray(dists, dtype=float)
    n = len(d)
    if n_accept is None:
        if acceptance_fraction is None or not 0 < acceptance_fraction <= 1:
            raise ValueError("acceptance_fraction must lie in (0, 1]")
        # guard against 0.01 * 1e5 evaluating to 1000.0000000000001
        k = int(math.ceil(round(n * acceptance_fraction, 9)))
    else:
        k = int(n_accept)
    if k < 2 or k > n:
        raise ValueError(f"acceptance count {k} outside [2, {n}]")
    if d.min() == d.max():
        raise DegenerateDistancesError("degenerate distance distribution")
    kth = np.partition(d, k - 1)[k - 1]
    larger = d[d > kth]
    if len(larger):
        eps = 0.5 * (kth + larger.min())
    else:
        eps = kth * (1 + 1e-9) if kth > 0 else np.nextafter(0.0, 1.0)
    n_acc = int(np.count_nonzero(d <= kth))
    return KernelSpec(float(eps), threshold=float(kth), n_accepted=n_acc)


def kernel_weights(dists, kernel: KernelSpec) -> np.ndarray:
    """Unnormalised Epanechnikov weights ``1 - (d/eps)^2`` on ``d < eps``."""
    d = np.asarray(dists, dtype=float)
    with np.errstate(over="ignore"):
        u = d / kernel.epsilon
        w = np.where(u < 1.0, 1.0 - u * u, 0.0)
    if not (w > 0).any():
        raise EmptyAcceptanceError("empty acceptance region")
    return w
