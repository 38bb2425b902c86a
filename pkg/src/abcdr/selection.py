"""Best-subset selection of summary statistics.

Scores for a candidate subset: AIC/AICc/BIC of the local-linear model, the
epsilon-sufficiency posterior-ratio test, the k-nearest-neighbour entropy of
the ABC posterior and the mean RSSE over nearby pseudo-observed datasets.
:func:`subset_search` drives exhaustive or greedy searches over any scorer.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .core import compute_scales, distances, mask_indices
from .regression import DesignMatrix, SingularDesignError, fit_wls
from .sampler import rejection_abc

DEFAULT_MAX_EXHAUSTIVE_P = 15
DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class SubsetMask:
    include: tuple

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(bool(b) for b in self.include))

    @classmethod
    def full(cls, p: int) -> "SubsetMask":
        return cls((True,) * p)

    @classmethod
    def from_indices(cls, indices, p: int) -> "SubsetMask":
        idx = set(int(i) for i in indices)
        return cls(tuple(i in idx for i in range(p)))

    @classmethod
    def from_bitstring(cls, bits: str) -> "SubsetMask":
        return cls(tuple(c == "1" for c in bits))

    @property
    def p(self) -> int:
        return len(self.include)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.include)

    @property
    def size(self) -> int:
        return sum(self.include)

    @property
    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.include)

    def with_index(self, j: int, value: bool) -> "SubsetMask":
        inc = list(self.include)
        inc[j] = value
        return SubsetMask(inc)

    def __str__(self):
        return self.bitstring


@dataclass(frozen=True)
class CriterionScore:
    value: float
    criterion_id: str
    n_eff: int
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SelectionResult:
    best_mask: SubsetMask
    trace: tuple
    search_kind: str
    criterion_id: str = ""

    @property
    def best_score(self) -> float:
        return min(s for _, s in self.trace)

    def trace_rows(self) -> list:
        return [(m.bitstring, self.criterion_id, s) for m, s in self.trace]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mask", "criterion", "score"])
            for bits, crit, score in self.trace_rows():
                writer.writerow([bits, crit, repr(float(score))])


# -- information criteria -------------------------------------------------


def n_regression_params(q: int, k_mask: int) -> int:
    return q * (k_mask + 1)


def information_value(n_eff: int, sigma2, d: int, variant: str,
                      conventional_aicc: bool = False) -> float:
    """AIC, AICc or BIC from weighted residual variances.

    ``AICc`` swaps the AIC penalty ``2d`` for ``2 d(d+1)/(n-d-1)``; with
    ``conventional_aicc`` the correction is added to ``2d`` instead.
    """
    sigma2 = np.maximum(np.asarray(sigma2, dtype=float), 1e-300)
    fit = n_eff * float(np.sum(np.log(sigma2)))
    if variant == "AIC":
        return fit + 2.0 * d
    if variant == "BIC":
        return fit + d * math.log(n_eff)
    if variant == "AICc":
        if n_eff <= d + 1:
            raise ValueError("AICc needs n_eff > d + 1")
        corr = d * (d + 1) / (n_eff - d - 1)
        return fit + 2.0 * corr + (2.0 * d if conventional_aicc else 0.0)
    raise ValueError(f"unknown criterion {variant!r}")


def information_criterion(table, obs, mask=None, acceptance_fraction=0.01,
                          variant: str = "BIC", *, param_idx=None, scales=None,
                          exclude=None, conventional_aicc: bool = False
                          ) -> CriterionScore:
    """Score a subset by the information criterion of its local-linear fit.

    The bandwidth is recalibrated on this subset so that every subset keeps
    the same number of accepted simulations. A singular fit scores +inf.
    """
    if scales is None:
        scales = compute_scales(table)
    idx = mask_indices(mask, table.p)
    sample = rejection_abc(table, obs, idx, acceptance_fraction,
                           scales=scales, exclude=exclude)
    pidx = list(range(table.q)) if param_idx is None else list(param_idx)
    thetas = sample.thetas[:, pidx]
    n_eff = sample.n_eff
    d = n_regression_params(len(pidx), len(idx))
    if variant == "AICc" and n_eff <= d + 2:
        raise ValueError(f"AICc needs n_eff > d + 2 (n_eff={n_eff}, d={d})")
    S = table.stats[sample.source_rows][:, idx] / scales.scales[idx]
    try:
        fit = fit_wls(DesignMatrix.from_stats(S), thetas, sample.weights, strict=True)
    except SingularDesignError as exc:
        return CriterionScore(math.inf, variant, n_eff,
                              {"d": d, "singular": True, "condition": exc.condition})
    resid = thetas - fit.predict(S)
    w = sample.weights
    sigma2 = (w @ resid ** 2) / w.sum()
    value = information_value(n_eff, sigma2, d, variant, conventional_aicc)
    return CriterionScore(value, variant, n_eff, {"d": d, "sigma2": sigma2.tolist()})


# -- epsilon-sufficiency --------------------------------------------------


@dataclass(frozen=True)
class SufficiencyResult:
    accepted: bool
    score: float
    ratios: np.ndarray
    thresholds: np.ndarray


def _kish_ess(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(w.sum() ** 2 / (w @ w))


def _index_list(mask) -> list:
    if mask is None:
        return []
    inc = np.asarray(getattr(mask, "include", mask))
    if inc.dtype == bool:
        return [int(i) for i in np.flatnonzero(inc)]
    return sorted(int(i) for i in inc)


def epsilon_sufficiency_test(table, obs, base_mask, candidate_index: int,
                             grid_size: int = 50, threshold_multiplier: float = 4.0,
                             acceptance_fraction: float = 0.01, *, param_index=None,
                             scales=None, exclude=None, support=None) -> SufficiencyResult:
    """Does adding ``candidate_index`` change the univariate posterior?

    Posterior masses are binned on a regular grid over the parameter's range
    in the table. Bin ratios (with/without the candidate) are compared to
    ``threshold_multiplier`` binomial standard errors of the ratio under the
    base posterior; bins with base mass below ``5 / n_eff`` are ignored.
    ``score`` is the largest ratio deviation in units of the threshold.
    An empty ``base_mask`` means the prior (every row, equal weights).
    """
    if param_index is None:
        if table.q != 1:
            raise ValueError("epsilon-sufficiency is restricted to a univariate "
                             "parameter; pass param_index")
        param_index = 0
    if scales is None:
        scales = compute_scales(table)
    base_idx = _index_list(base_mask)
    if candidate_index in base_idx:
        raise ValueError("candidate already in the base subset")
    theta_all = table.params[:, param_index]
    lo, hi = support if support is not None else (theta_all.min(), theta_all.max())
    edges = np.linspace(lo, hi, grid_size + 1)

    if base_idx:
        base = rejection_abc(table, obs, base_idx, acceptance_fraction,
                             scales=scales, exclude=exclude)
        b_theta, b_w = base.thetas[:, param_index], base.weights
    else:
        keep = np.ones(table.n, bool)
        if exclude is not None:
            keep[exclude] = False
        b_theta = theta_all[keep]
        b_w = np.full(len(b_theta), 1.0 / len(b_theta))
    cand = rejection_abc(table, obs, sorted(base_idx + [candidate_index]),
                         acceptance_fraction, scales=scales, exclude=exclude)
    m_base = np.histogram(b_theta, edges, weights=b_w)[0]
    m_cand = np.histogram(cand.thetas[:, param_index], edges, weights=cand.weights)[0]
    ess = _kish_ess(b_w)
    usable = m_base >= 5.0 / len(b_w)
    if not usable.any():
        warnings.warn("no posterior bin has enough mass; candidate rejected",
                      RuntimeWarning, stacklevel=2)
        return SufficiencyResult(False, 0.0, np.array([]), np.array([]))
    pb = m_base[usable]
    ratios = m_cand[usable] / pb
    se = np.sqrt(pb * (1 - pb) / ess) / pb
    thresholds = threshold_multiplier * se
    with np.errstate(divide="ignore", invalid="ignore"):
        excess = np.abs(ratios - 1.0) / thresholds
    excess = np.nan_to_num(excess, nan=0.0, posinf=0.0)
    score = float(excess.max())
    return SufficiencyResult(bool(score > 1.0), score, ratios, thresholds)


def epsilon_sufficiency_search(table, obs, acceptance_fraction=0.01, *,
                               grid_size=50, threshold_multiplier=4.0,
                               param_index=None, scales=None, exclude=None,
                               max_sweeps: int = 10) -> SelectionResult:
    """Stepwise inclusion by the sufficiency test, in statistic order.

    A statistic is added when the test accepts it. After each addition every
    other included statistic is re-tested against the rest and dropped if it
    no longer changes the posterior. Sweeps stop when nothing changes.
    """
    p = table.p
    current: list = []
    trace = []
    kw = dict(grid_size=grid_size, threshold_multiplier=threshold_multiplier,
              acceptance_fraction=acceptance_fraction, param_index=param_index,
              scales=scales, exclude=exclude)
    for _ in range(max_sweeps):
        changed = False
        for j in range(p):
            if j in current:
                continue
            res = epsilon_sufficiency_test(table, obs, current, j, **kw)
            trace.append((SubsetMask.from_indices(current + [j], p), res.score))
            if not res.accepted:
                continue
            current = sorted(current + [j])
            changed = True
            for other in list(current):
                if other == j or len(current) == 1:
                    continue
                rest = [c for c in current if c != other]
                if not epsilon_sufficiency_test(table, obs, rest, other, **kw).accepted:
                    current = rest
        if not changed:
            break
    if not current:
        current = list(range(p))
    best = SubsetMask.from_indices(current, p)
    return SelectionResult(best, tuple(trace), "stepwise", "eps-sufficiency")


# -- entropy --------------------------------------------------------------


def log_unit_ball_volume(q: int) -> float:
    return 0.5 * q * math.log(math.pi) - gammaln(0.5 * q + 1.0)


def knn_quantile_distances(thetas, weights, k: int = 4) -> np.ndarray:
    """Per point, the smallest distance at which the renormalised weight of
    the other points reaches ``k / (m - 1)``.

    With equal weights this is the distance to the k-th nearest neighbour.
    """
    X = np.asarray(thetas, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    m = len(X)
    if m <= k:
        raise ValueError(f"need more than k={k} points, got {m}")
    target = k / (m - 1) * (1.0 - 1e-12)
    tree = cKDTree(X)
    out = np.full(m, np.nan)
    todo = np.arange(m)
    kk = min(m, 2 * k + 2)
    while len(todo):
        dist, nbr = tree.query(X[todo], k=kk)
        dist, nbr = np.atleast_2d(dist), np.atleast_2d(nbr)
        # drop self; if duplicates pushed it out, drop the last column instead
        is_self = nbr == todo[:, None]
        missing = ~is_self.any(axis=1)
        is_self[missing, -1] = True
        dist = dist[~is_self].reshape(len(todo), kk - 1)
        nbr = nbr[~is_self].reshape(len(todo), kk - 1)
        wt = w[nbr] / (1.0 - w[todo])[:, None]
        reached = np.cumsum(wt, axis=1) >= target
        done = reached.any(axis=1)
        pos = reached.argmax(axis=1)
        out[todo[done]] = dist[done, pos[done]]
        if kk == m and not done.all():
            # rounding at the full sample: take the farthest point
            out[todo[~done]] = dist[~done, -1]
            break
        todo = todo[~done]
        kk = min(m, 2 * kk)
    return out


def knn_entropy(sample_or_thetas, k: int = 4, weights=None) -> float:
    """k-th nearest neighbour entropy estimate for a weighted sample."""
    if weights is None and hasattr(sample_or_thetas, "thetas"):
        X = np.asarray(sample_or_thetas.thetas, dtype=float)
        w = np.asarray(sample_or_thetas.weights, dtype=float)
    elif weights is None:
        X = np.asarray(sample_or_thetas, dtype=float)
        w = np.ones(len(X))
    else:
        X = np.asarray(sample_or_thetas, dtype=float)
        w = np.asarray(weights, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m, q = X.shape
    w = w / w.sum()
    rho = knn_quantile_distances(X, w, k)
    if (rho < DISTANCE_FLOOR).any():
        warnings.warn("coincident points; neighbour distances floored at 1e-12",
                      RuntimeWarning, stacklevel=2)
        rho = np.maximum(rho, DISTANCE_FLOOR)
    return float(log_unit_ball_volume(q) - digamma(k) + math.log(m)
                 + q * (w @ np.log(rho)))


# -- RSSE -----------------------------------------------------------------


def rsse(sample, theta_true, param_scales=None) -> float:
    """Root of the weighted sum of squared scaled errors against the truth."""
    thetas = np.asarray(sample.thetas, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float).reshape(-1)
    w = np.asarray(sample.weights, dtype=float)
    err = thetas - theta_true
    if param_scales is not None:
        ps = np.asarray(param_scales, dtype=float).reshape(-1)
        if not (ps > 0).all():
            raise ValueError("parameter scales must be positive")
        err = err / ps
    return float(np.sqrt(w @ (err ** 2).sum(axis=1) / w.sum()))


def param_scales(table, param_idx=None) -> np.ndarray:
    """Standard deviations of the parameters over the whole table."""
    P = table.params if param_idx is None else table.params[:, list(param_idx)]
    return P.std(axis=0)


def rejection_posterior(table, row: int, mask, acceptance_fraction=0.01, *,
                        scales=None, n_accept=None):
    """Leave-one-out rejection posterior for simulated row ``row``."""
    return rejection_abc(table, table.observation(row), mask, acceptance_fraction,
                         scales=scales, exclude=row, n_accept=n_accept)


def minimum_entropy_mask(table, obs, acceptance_fraction=0.01, *, k: int = 4,
                         param_idx=None, scales=None, exclude=None, mode=None,
                         max_exhaustive_p=DEFAULT_MAX_EXHAUSTIVE_P) -> SelectionResult:
    """First stage: subset whose ABC posterior has the smallest entropy.

    Parameters are divided by their table standard deviation first so that
    distances between parameter vectors are isotropic.
    """
    if scales is None:
        scales = compute_scales(table)
    pidx = list(range(table.q)) if param_idx is None else list(param_idx)
    ps = param_scales(table, pidx)

    def scorer(mask):
        s = rejection_abc(table, obs, mask.indices, acceptance_fraction,
                          scales=scales, exclude=exclude)
        return knn_entropy(s.thetas[:, pidx] / ps, k, weights=s.weights)

    if mode is None:
        mode = "exhaustive" if table.p <= max_exhaustive_p else "forward"
    res = subset_search(scorer, table.p, mode, max_exhaustive_p)
    return SelectionResult(res.best_mask, res.trace, res.search_kind, "entropy")


def closest_datasets(table, obs, me_mask, n_star: int, *, scales=None,
                     exclude_rows=()) -> np.ndarray:
    """Rows whose minimum-entropy statistics are nearest the observation's."""
    if scales is None:
        scales = compute_scales(table)
    d = distances(table, obs, scales, me_mask)
    if len(exclude_rows):
        d = d.copy()
        d[np.asarray(exclude_rows, dtype=int)] = np.inf
    if n_star > np.isfinite(d).sum():
        raise ValueError("n_star exceeds the number of available simulations")
    order = np.argsort(d, kind="stable")
    return order[:n_star]


def mean_rsse(table, obs, mask, method: Optional[Callable] = None, n_star: int = 100,
              *, acceptance_fraction=0.01, param_idx=None, scales=None,
              me_mask=None, pseudo_rows=None, exclude=None, k: int = 4) -> float:
    """Average leave-one-out RSSE of ``method`` over nearby pseudo-datasets.

    ``method(table, row, mask)`` returns a weighted (possibly adjusted)
    posterior for simulated row ``row`` with that row left out; the default is
    plain rejection. RSSE uses equal weights over the accepted rows and
    parameters divided by their table standard deviation. Pseudo-datasets
    are the ``n_star`` rows nearest ``obs`` in the minimum-entropy statistics
    (searched here unless ``me_mask`` or ``pseudo_rows`` is given).
    """
    if scales is None:
        scales = compute_scales(table)
    pidx = list(range(table.q)) if param_idx is None else list(param_idx)
    if pseudo_rows is None:
        if me_mask is None:
            me_mask = minimum_entropy_mask(table, obs, acceptance_fraction, k=k,
                                           param_idx=pidx, scales=scales,
                                           exclude=exclude).best_mask
        excl = () if exclude is None else (exclude,)
        pseudo_rows = closest_datasets(table, obs, getattr(me_mask, "indices", me_mask),
                                       n_star, scales=scales, exclude_rows=excl)
    if method is None:
        def method(tab, row, m):
            return rejection_posterior(tab, row, m, acceptance_fraction, scales=scales)
    ps = param_scales(table, pidx)
    idx = mask_indices(mask, table.p)
    total = 0.0
    for row in pseudo_rows:
        post = method(table, int(row), idx).uniform()
        thetas = post.thetas
        if thetas.shape[1] != len(pidx):
            thetas = thetas[:, pidx]
        err = (thetas - table.params[row, pidx]) / ps
        total += math.sqrt(float((err ** 2).sum(axis=1).mean()))
    return total / len(pseudo_rows)


# -- search drivers -------------------------------------------------------


def _value(score) -> float:
    return float(getattr(score, "value", score))


def subset_search(scorer: Callable, p: int, mode: str = "exhaustive",
                  max_exhaustive_p: int = DEFAULT_MAX_EXHAUSTIVE_P) -> SelectionResult:
    """Minimise ``scorer(SubsetMask)`` over nonempty subsets of ``p`` statistics.

    ``exhaustive`` scores all ``2**p - 1`` subsets. ``forward`` starts at the
    best single statistic and adds the most improving one while the score
    drops; ``backward`` starts from all statistics and removes. Ties go to the
    lexicographically smallest bit string.
    """
    trace = []

    def score(mask):
        v = _value(scorer(mask))
        trace.append((mask, v))
        return v

    def pick(cands):
        return min(cands, key=lambda mv: (mv[1], mv[0].bitstring))

    if mode == "exhaustive":
        if p > max_exhaustive_p:
            raise ValueError(f"exhaustive search limited to p <= {max_exhaustive_p}")
        cands = [(m, score(m)) for m in
                 (SubsetMask(bits) for bits in itertools.product((False, True), repeat=p)
                  if any(bits))]
        best = pick(cands)[0]
    elif mode == "forward":
        current, cur = pick([(m, score(m)) for m in
                             (SubsetMask.from_indices([j], p) for j in range(p))])
        while current.size < p:
            cands = [(current.with_index(j, True), None) for j in range(p)
                     if not current.include[j]]
            cands = [(m, score(m)) for m, _ in cands]
            nxt, val = pick(cands)
            if not val < cur:
                break
            current, cur = nxt, val
        best = current
    elif mode == "backward":
        current = SubsetMask.full(p)
        cur = score(current)
        while current.size > 1:
            cands = [(m, score(m)) for m in
                     (current.with_index(j, False) for j in current.indices)]
            nxt, val = pick(cands)
            if not val < cur:
                break
            current, cur = nxt, val
        best = current
    else:
        raise ValueError(f"unknown search mode {mode!r}")
    return SelectionResult(best, tuple(trace), mode)
