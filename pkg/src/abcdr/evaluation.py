"""Comparison harness for reduction and adjustment pipelines.

Each pipeline is run on the same set of pseudo-observed rows, each row left
out of the table for its own evaluation, and scored by RSSE over equally
weighted accepted draws.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ReferenceTable, compute_scales
from .projection import choose_pls_components, fit_pls, fit_posterior_loss
from .regression import (LAMBDA_GRID, DesignMatrix, adjust, fit_neural_net, fit_ridge,
                         fit_variance_model, fit_wls, log_squared,
                         select_lambda_cv)
from .sampler import rejection_abc
from .selection import (DEFAULT_MAX_EXHAUSTIVE_P, closest_datasets,
                        epsilon_sufficiency_search, information_criterion,
                        mean_rsse, minimum_entropy_mask, param_scales, rsse,
                        subset_search)

REDUCTIONS = ("none", "aic", "aicc", "bic", "eps-sufficiency", "entropy", "pls",
              "posterior-loss", "ridge")
ADJUSTMENTS = ("none", "homoscedastic", "heteroscedastic")
REGRESSORS = ("wls", "ridge", "neural-net")
IC_VARIANT = {"aic": "AIC", "aicc": "AICc", "bic": "BIC"}
SENTINEL_KAPPA = 1e25
FAILURE_LIMIT = 0.10

DEFAULT_HYPERPARAMS = {
    "lambda_grid": list(LAMBDA_GRID),
    "lambda_rule": "median",        # or "cv"
    "hidden_units": None,
    "restarts": 10,
    "search": "auto",
    "max_exhaustive_p": DEFAULT_MAX_EXHAUSTIVE_P,
    "conventional_aicc": False,
    "grid_size": 50,
    "threshold_multiplier": 4.0,
    "inner_n_star": 20,
    "knn_k": 4,
    "n_components": "auto",
    "pls_max_components": 10,
    "pls_fit_rows": 2000,
    "pls_threshold": 0.01,
    "split_fraction": 0.10,
    "basis": "auto",
}


@dataclass(frozen=True)
class PipelineSpec:
    reduction: str = "none"
    adjustment: str = "none"
    regressor: str = "wls"
    hyperparams: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        for value, allowed, what in ((self.reduction, REDUCTIONS, "reduction"),
                                     (self.adjustment, ADJUSTMENTS, "adjustment"),
                                     (self.regressor, REGRESSORS, "regressor")):
            if value not in allowed:
                raise ValueError(f"unknown {what} {value!r}; allowed: {list(allowed)}")
        if self.reduction == "ridge":
            if self.regressor != "ridge":
                raise ValueError("ridge reduction requires the ridge regressor")
            if self.adjustment == "none":
                raise ValueError("ridge reduction needs a regression adjustment")
        if self.adjustment == "none" and self.regressor != "wls":
            raise ValueError(f"regressor {self.regressor!r} has no effect without "
                             "an adjustment")
        unknown = set(self.hyperparams) - set(DEFAULT_HYPERPARAMS)
        if unknown:
            raise ValueError(f"unknown hyperparameters {sorted(unknown)}")

    def hp(self, key):
        return self.hyperparams.get(key, DEFAULT_HYPERPARAMS[key])

    @property
    def label(self) -> str:
        return self.name or f"{self.reduction}/{self.adjustment}/{self.regressor}"

    @property
    def key(self) -> tuple:
        return (self.reduction, self.adjustment, self.regressor,
                tuple(sorted((k, repr(v)) for k, v in self.hyperparams.items())))


BASELINE = PipelineSpec("none", "none", "wls", name="baseline")


def is_baseline(spec: PipelineSpec) -> bool:
    return spec.key == BASELINE.key


# -- regression adjustment of one accepted sample -------------------------


def _seed_of(seed, *keys) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
               .generate_state(1)[0])


def _regularised_fits(spec: PipelineSpec, X, T, w, grid, seed):
    """Ridge: one fit per grid value. Network: ``restarts`` single-start fits,
    each with a penalty drawn uniformly from the grid."""
    if spec.regressor == "ridge":
        return [fit_ridge(X, T, w, lam) for lam in grid]
    rng = np.random.default_rng(seed)
    lams = rng.choice(grid, int(spec.hp("restarts")))
    return [fit_neural_net(X, T, w, spec.hp("hidden_units"), float(lam), restarts=1,
                           seed=_seed_of(seed, i)) for i, lam in enumerate(lams)]


def _mean_and_sigma(spec: PipelineSpec, S, S_obs, T, w, seed, want_sigma):
    """Fitted means (and sds) at the accepted rows and at the observation."""
    points = np.vstack([S, S_obs[None, :]])
    X = DesignMatrix.from_stats(S)
    grid = [float(g) for g in spec.hp("lambda_grid")]
    info = {"rank_deficient": False}
    if spec.regressor == "wls":
        fit = fit_wls(X, T, w)
        info["rank_deficient"] = fit.rank_deficient
        mean = fit.predict(points)
    else:
        if spec.hp("lambda_rule") == "cv":
            grid = [select_lambda_cv(X, T, w, grid, spec.regressor,
                                     spec.hp("hidden_units"), seed)]
        fits = _regularised_fits(spec, X, T, w, grid, seed)
        mean = np.median(np.stack([f.predict(points) for f in fits]), axis=0)
    if not want_sigma:
        return mean[:-1], mean[-1], None, None, info
    resid = T - mean[:-1]
    if spec.regressor == "wls":
        var_fits = [fit_variance_model(X, resid, w)]
    else:
        var_fits = _regularised_fits(spec, X, log_squared(resid), w, grid, seed + 1)
    sigma = np.median(np.stack([np.exp(0.5 * f.predict(points)) for f in var_fits]),
                      axis=0)
    return mean[:-1], mean[-1], sigma[:-1], sigma[-1], info


def adjusted_posterior(spec: PipelineSpec, table: ReferenceTable, obs_stats, sample,
                       idx, scales, pidx, seed=0):
    """Apply the pipeline's adjustment to an accepted sample.

    Statistics enter the regression divided by their scales; kernel weights
    are rescaled to mean one.
    """
    if spec.adjustment == "none":
        return adjust(sample, columns=pidx), {"rank_deficient": False}
    sc = scales.scales[idx]
    S = table.stats[sample.source_rows][:, idx] / sc
    s_obs = np.asarray(obs_stats, dtype=float)[idx] / sc
    T = sample.thetas[:, pidx]
    w = sample.weights * sample.n_eff
    hetero = spec.adjustment == "heteroscedastic"
    m_rows, m_obs, s_rows, s_o, info = _mean_and_sigma(spec, S, s_obs, T, w, seed, hetero)
    return adjust(sample, m_rows, m_obs, s_rows, s_o, columns=pidx), info


# -- per-pipeline evaluation ----------------------------------------------


@dataclass
class _Context:
    table: ReferenceTable
    pidx: list
    f: float
    n_accept: int
    scales: object
    ps: np.ndarray
    pseudo_rows: np.ndarray
    seed: int
    set_id: int


@dataclass
class _Prepared:
    """A pipeline bound to a parameter set, with any global fits done."""

    spec: PipelineSpec
    ctx: _Context
    table: ReferenceTable
    scales: object
    local_row: object
    flags: tuple = ()

    def posterior(self, row: int):
        spec, ctx = self.spec, self.ctx
        tab = self.table
        r = self.local_row(row)
        obs = tab.stats[r]
        seed = _seed_of(ctx.seed, 1, ctx.set_id, row)
        selection = None
        idx = np.arange(tab.p)
        if spec.reduction in IC_VARIANT or spec.reduction == "entropy":
            selection = self._search(r, obs, seed)
            idx = selection.best_mask.indices
        elif spec.reduction == "eps-sufficiency":
            selection = epsilon_sufficiency_search(
                tab, obs, ctx.f, grid_size=spec.hp("grid_size"),
                threshold_multiplier=spec.hp("threshold_multiplier"),
                param_index=ctx.pidx[0], scales=self.scales, exclude=r)
            idx = selection.best_mask.indices
        sample = rejection_abc(tab, obs, idx, ctx.f, scales=self.scales, exclude=r,
                               n_accept=ctx.n_accept)
        post, info = adjusted_posterior(spec, tab, obs, sample, idx, self.scales,
                                        ctx.pidx, seed)
        return post, selection, info

    def _mode(self):
        mode = self.spec.hp("search")
        if mode == "auto":
            mode = ("exhaustive" if self.table.p <= self.spec.hp("max_exhaustive_p")
                    else "forward")
        return mode

    def _search(self, r, obs, seed):
        spec, ctx, tab = self.spec, self.ctx, self.table
        mode = self._mode()
        if spec.reduction in IC_VARIANT:
            variant = IC_VARIANT[spec.reduction]

            def scorer(mask):
                return information_criterion(
                    tab, obs, mask.indices, ctx.f, variant, param_idx=ctx.pidx,
                    scales=self.scales, exclude=r,
                    conventional_aicc=spec.hp("conventional_aicc"))

            res = subset_search(scorer, tab.p, mode, spec.hp("max_exhaustive_p"))
            return type(res)(res.best_mask, res.trace, res.search_kind, variant)
        # two-stage entropy selection, restricted to rows other than r
        k = spec.hp("knn_k")
        me = minimum_entropy_mask(tab, obs, ctx.f, k=k, param_idx=ctx.pidx,
                                  scales=self.scales, exclude=r, mode=mode,
                                  max_exhaustive_p=spec.hp("max_exhaustive_p"))
        inner = closest_datasets(tab, obs, me.best_mask.indices, spec.hp("inner_n_star"),
                                 scales=self.scales, exclude_rows=(r,))

        def method(t, row, m):
            s = rejection_abc(t, t.stats[row], m, ctx.f, scales=self.scales,
                              exclude=row, n_accept=ctx.n_accept)
            return adjusted_posterior(spec, t, t.stats[row], s, m, self.scales,
                                      ctx.pidx, seed)[0]

        def scorer(mask):
            return mean_rsse(tab, obs, mask.indices, method, param_idx=ctx.pidx,
                             scales=self.scales, pseudo_rows=inner)

        res = subset_search(scorer, tab.p, mode, spec.hp("max_exhaustive_p"))
        return type(res)(res.best_mask, res.trace, res.search_kind, "entropy")


def _prepare(spec: PipelineSpec, ctx: _Context) -> _Prepared:
    table = ctx.table
    if spec.reduction == "pls":
        rest = np.setdiff1d(np.arange(table.n), ctx.pseudo_rows)
        rng = np.random.default_rng(_seed_of(ctx.seed, 2, ctx.set_id))
        m = min(int(spec.hp("pls_fit_rows")), len(rest))
        fit_rows = np.sort(rng.choice(rest, m, replace=False))
        S, Y = table.stats[fit_rows], table.params[fit_rows][:, ctx.pidx]
        keep = S.std(axis=0) > 0
        rank = np.linalg.matrix_rank(S[:, keep] - S[:, keep].mean(axis=0))
        kmax = max(2, min(int(spec.hp("pls_max_components")), rank))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_pls(S, Y, kmax, seed=_seed_of(ctx.seed, 3, ctx.set_id),
                          stat_names=table.stat_names)
        k = spec.hp("n_components")
        k = choose_pls_components(res.rmse, spec.hp("pls_threshold"),
                                                    res.rmse0) if k == "auto" else int(k)
        pmap = res.maps[k - 1]
        derived = table.with_stats(pmap.expand(table.stats) @ pmap.coefficients.T,
                                   pmap.derived_names)
        flags = ("pls-10-fold",) if res.cv_kind == "10-fold" else ()
        return _Prepared(spec, ctx, derived, compute_scales(derived), int, flags)
    if spec.reduction == "posterior-loss":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = fit_posterior_loss(table, spec.hp("split_fraction"), spec.hp("basis"),
                                     _seed_of(ctx.seed, 4, ctx.set_id),
                                     param_idx=ctx.pidx, reserved_rows=ctx.pseudo_rows)
        return _Prepared(spec, ctx, res.table, compute_scales(res.table), res.local_row)
    flags = ()
    if spec.regressor == "neural-net" and spec.hp("lambda_rule") == "cv":
        flags = ("nn-10-fold-cv",)
    return _Prepared(spec, ctx, table, ctx.scales, int, flags)


# -- report ---------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    params: str
    pipeline: str
    reduction: str
    adjustment: str
    regressor: str
    mean_rsse: float
    relative_pct: float
    n_pseudo: int
    n_failed: int
    n_eff: float
    flags: tuple = ()
    warnings: tuple = ()


CSV_COLUMNS = ("params", "pipeline", "reduction", "adjustment", "regressor",
               "mean_rsse", "relative_pct", "n_pseudo", "n_eff", "flags")


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple
    pseudo_rows: np.ndarray
    traces: dict = field(default_factory=dict)
    rsse_values: dict = field(default_factory=dict)

    def row(self, pipeline: str, params: Optional[str] = None) -> ReportRow:
        for r in self.rows:
            if r.pipeline == pipeline and (params is None or r.params == params):
                return r
        raise KeyError(pipeline)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.params, r.pipeline, r.reduction, r.adjustment, r.regressor,
                            _fmt(r.mean_rsse, ".10g"), _fmt(r.relative_pct, ".1f"),
                            r.n_pseudo - r.n_failed, _fmt(r.n_eff, ".6g"),
                            ";".join(r.flags)])


def _fmt(x, spec):
    return "nan" if not math.isfinite(x) else format(x, spec)


def _evaluate_one(prep: _Prepared, row: int):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            post, selection, info = prep.posterior(row)
        value = rsse(post.uniform(), prep.ctx.table.params[row, prep.ctx.pidx],
                     prep.ctx.ps)
        return value, post.n_eff, selection, info, None
    except Exception as exc:  # failures are tallied, never fatal
        return math.nan, 0, None, {}, f"{type(exc).__name__}: {exc}"


def draw_pseudo_rows(n: int, n_star: int, seed: int) -> np.ndarray:
    if not 1 <= n_star <= n:
        raise ValueError(f"n_star must lie in [1, n={n}]")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0,)))
    return np.sort(rng.choice(n, n_star, replace=False))


def run_comparison(table: ReferenceTable, pipelines: Sequence[PipelineSpec],
                   n_star: int = 100, seed: int = 0, *, acceptance_fraction=0.01,
                   param_sets: Optional[Sequence[Sequence[str]]] = None,
                   threads: int = 1, pseudo_rows=None) -> EvaluationReport:
    """League table of pipelines against rejection on all statistics.

    The pseudo-observed rows are drawn once and shared, as are the random
    seeds for each row, so identical pipelines give identical rows. A
    pipeline failing on more than 10% of rows is flagged ``incomplete``.
    """
    pipelines = list(pipelines)
    if not any(is_baseline(p) for p in pipelines):
        pipelines.insert(0, BASELINE)
    if param_sets is None:
        param_sets = [list(table.param_names)]
    for spec in pipelines:
        if spec.reduction == "eps-sufficiency" and any(len(ps) != 1 for ps in param_sets):
            raise ValueError("eps-sufficiency handles a single parameter only")
    rows = (draw_pseudo_rows(table.n, n_star, seed) if pseudo_rows is None
            else np.asarray(pseudo_rows, dtype=int))
    scales = compute_scales(table)
    n_accept = math.ceil(round((table.n - 1) * acceptance_fraction, 9))
    out, traces, values = [], {}, {}
    for set_id, names in enumerate(param_sets):
        pidx = table.param_index(names)
        label = "+".join(names)
        ctx = _Context(table, pidx, acceptance_fraction, n_accept, scales,
                       param_scales(table, pidx), rows, seed, set_id)
        results = []
        for spec in pipelines:
            try:
                prep = _prepare(spec, ctx)
            except Exception as exc:
                err = f"{type(exc).__name__}: {exc}"
                results.append((spec, [(math.nan, 0, None, {}, err)] * len(rows), ()))
                continue
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    res = list(pool.map(lambda r: _evaluate_one(prep, int(r)), rows))
            else:
                res = [_evaluate_one(prep, int(r)) for r in rows]
            results.append((spec, res, prep.flags))
        base = next(np.array([v[0] for v in res]) for spec, res, _ in results
                    if is_baseline(spec))
        base_mean = float(np.nanmean(base)) if np.isfinite(base).any() else math.nan
        for spec, res, extra in results:
            vals = np.array([v[0] for v in res])
            ok = np.isfinite(vals)
            n_failed = int((~ok).sum())
            mean = float(vals[ok].mean()) if ok.any() else math.nan
            rel = 0.0 if is_baseline(spec) else 100.0 * (mean / base_mean - 1.0)
            flags = list(extra)
            if n_failed > FAILURE_LIMIT * len(rows):
                flags.append("incomplete")
            n_rd = sum(bool(v[3].get("rank_deficient")) for v in res)
            if n_rd:
                flags.append(f"rank-deficient:{n_rd}")
            errs = tuple(sorted({v[4] for v in res if v[4]}))
            n_eff = float(np.mean([v[1] for v, good in zip(res, ok) if good])) if ok.any() \
                else math.nan
            out.append(ReportRow(label, spec.label, spec.reduction, spec.adjustment,
                                 spec.regressor, mean, rel, len(rows), n_failed, n_eff,
                                 tuple(flags), errs))
            values[(label, spec.label)] = vals
            sel = [(int(r), v[2]) for r, v in zip(rows, res) if v[2] is not None]
            if sel:
                traces[(label, spec.label)] = sel
    return EvaluationReport(tuple(out), rows, traces, values)


def write_traces(report: EvaluationReport, directory) -> list:
    """One CSV per (parameter set, pipeline) with a ``pseudo_row`` column."""
    import os
    os.makedirs(directory, exist_ok=True)
    paths = []
    for (params, label), sel in sorted(report.traces.items()):
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in f"{params}__{label}")
        path = os.path.join(directory, f"{safe}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pseudo_row", "mask", "criterion", "score", "selected"])
            for row, res in sel:
                best = res.best_mask.bitstring
                for mask, score in res.trace:
                    w.writerow([row, mask.bitstring, res.criterion_id, repr(float(score)),
                                int(mask.bitstring == best)])
        paths.append(path)
    return paths


# -- conditioning ---------------------------------------------------------


def condition_number(design, weights=None) -> float:
    """``sqrt(lmax / lmin)`` for ``X'WX``; numerically singular gives 1e25."""
    X = np.atleast_2d(np.asarray(getattr(design, "rows", design), dtype=float))
    if X.size == 0:
        raise ValueError("empty design")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    G = X.T @ (w[:, None] * X)
    ev = np.linalg.eigvalsh(0.5 * (G + G.T))
    if ev[-1] <= 0 or ev[0] <= ev[-1] * len(ev) * np.finfo(float).eps:
        return SENTINEL_KAPPA
    return float(math.sqrt(ev[-1] / ev[0]))


@dataclass(frozen=True)
class ConditionDiagnostic:
    row: int
    kappa: float
    rel_rsse_wls: float
    rel_rsse_ridge: float

    @property
    def singular(self) -> bool:
        return self.kappa >= SENTINEL_KAPPA


def collinearity_experiment(table: ReferenceTable, n_pseudo: int = 1000,
                            lam=None, seed: int = 0, *, acceptance_fraction=0.01,
                            param_idx=None) -> list:
    """Conditioning of the local regression against adjustment quality.

    For each pseudo-observed row: kappa of ``X'WX`` (intercept plus scaled
    statistics, normalised kernel weights) and the percentage change in RSSE
    of WLS and of ridge homoscedastic adjustment over plain rejection.
    ``lam=None`` takes the median over the default penalty grid.
    """
    rows = draw_pseudo_rows(table.n, n_pseudo, seed)
    pidx = list(range(table.q)) if param_idx is None else list(param_idx)
    scales = compute_scales(table)
    ps = param_scales(table, pidx)
    grid = list(LAMBDA_GRID) if lam is None else [float(lam)]
    wls = PipelineSpec("none", "homoscedastic", "wls")
    ridge = PipelineSpec("ridge", "homoscedastic", "ridge", {"lambda_grid": grid})
    idx = np.arange(table.p)
    out = []
    for r in rows:
        r = int(r)
        obs = table.stats[r]
        truth = table.params[r, pidx]
        sample = rejection_abc(table, obs, None, acceptance_fraction, scales=scales,
                               exclude=r)
        X = DesignMatrix.from_stats(table.stats[sample.source_rows] / scales.scales)
        kappa = condition_number(X, sample.weights)
        base = rsse(adjust(sample, columns=pidx).uniform(), truth, ps)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rel = []
            for spec in (wls, ridge):
                post = adjusted_posterior(spec, table, obs, sample, idx, scales, pidx)[0]
                rel.append(100.0 * (rsse(post.uniform(), truth, ps) / base - 1.0))
        out.append(ConditionDiagnostic(r, kappa, rel[0], rel[1]))
    return out


def write_condition_csv(diagnostics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "kappa", "rel_rsse_wls", "rel_rsse_ridge"])
        for d in diagnostics:
            w.writerow([d.row, repr(d.kappa), repr(d.rel_rsse_wls), repr(d.rel_rsse_ridge)])
