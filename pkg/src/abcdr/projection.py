"""Projection of the statistics onto a few derived summaries.

Two constructions are provided: partial least squares components chosen by a
cross-validated RMSE curve, and regression estimates of the posterior mean
fitted on a held-out slice of the reference table.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, stats as sps

from .core import ReferenceTable

BASES = ("identity", "powers", "log-powers")
EXACT_LOO_MAX_N = 10_000


@dataclass(frozen=True)
class ProjectionMap:
    """Affine map on a basis expansion of standardised statistics.

    ``derived = offset + coefficients @ f(z)`` where ``z = (t(s) - centre) /
    scale``, ``t`` is the identity (or ``log`` for ``log-powers``) and ``f``
    stacks powers 1..4 of every ``z`` (identity basis: ``f(z) = z``).
    """

    basis_spec: str
    centre: np.ndarray
    scale: np.ndarray
    offset: np.ndarray
    coefficients: np.ndarray
    n_components: int
    stat_names: tuple = ()
    derived_names: tuple = ()

    def __post_init__(self):
        if self.basis_spec not in BASES:
            raise ValueError(f"unknown basis {self.basis_spec!r}")
        p = len(self.centre)
        width = p if self.basis_spec == "identity" else 4 * p
        coef = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if coef.shape[1] != width or len(self.offset) != coef.shape[0]:
            raise ValueError(f"coefficient shape {coef.shape} inconsistent with "
                             f"{self.basis_spec} basis on {p} statistics")
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if not self.stat_names:
            object.__setattr__(self, "stat_names", tuple(f"s{i + 1}" for i in range(p)))
        if not self.derived_names:
            object.__setattr__(self, "derived_names",
                               tuple(f"c{i + 1}" for i in range(coef.shape[0])))

    def expand(self, stats) -> np.ndarray:
        S = np.atleast_2d(np.asarray(stats, dtype=float))
        if S.shape[1] != len(self.centre):
            raise ValueError(f"expected {len(self.centre)} statistics, got {S.shape[1]}")
        if self.basis_spec == "log-powers":
            bad = ~(S > 0).all(axis=0)
            if bad.any():
                names = [self.stat_names[j] for j in np.flatnonzero(bad)]
                raise ValueError(f"log basis needs strictly positive statistics; "
                                 f"offending: {names}")
            S = np.log(S)
        Z = (S - self.centre) / self.scale
        return basis_expand(Z, self.basis_spec)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["basis", self.basis_spec])
            w.writerow(["n_components", self.n_components])
            w.writerow(["stat_names", *self.stat_names])
            w.writerow(["centre", *map(repr, self.centre.tolist())])
            w.writerow(["scale", *map(repr, self.scale.tolist())])
            for name, off, row in zip(self.derived_names, self.offset.tolist(),
                                      self.coefficients.tolist()):
                w.writerow(["derived", name, repr(off), *map(repr, row)])

    @classmethod
    def from_csv(cls, path) -> "ProjectionMap":
        fields, derived = {}, []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if row and row[0] == "derived":
                    derived.append(row[1:])
                elif row:
                    fields[row[0]] = row[1:]
        return cls(fields["basis"][0],
                   np.array(fields["centre"], dtype=float),
                   np.array(fields["scale"], dtype=float),
                   np.array([float(d[1]) for d in derived]),
                   np.array([[float(v) for v in d[2:]] for d in derived]),
                   int(fields["n_components"][0]),
                   tuple(fields["stat_names"]), tuple(d[0] for d in derived))


def basis_expand(Z, basis_spec: str) -> np.ndarray:
    if basis_spec == "identity":
        return Z
    return np.concatenate([Z, Z ** 2, Z ** 3, Z ** 4], axis=1)


def apply_projection(pmap: ProjectionMap, stats) -> np.ndarray:
    """Derived statistics for one p-vector (or an n x p matrix)."""
    single = np.ndim(stats) == 1
    out = pmap.expand(stats) @ pmap.coefficients.T + pmap.offset
    return out[0] if single else out


# -- partial least squares ------------------------------------------------


@dataclass(frozen=True)
class PLSModel:
    x_centre: np.ndarray
    x_scale: np.ndarray
    y_centre: np.ndarray
    y_scale: np.ndarray
    weights: np.ndarray      # p x K
    loadings: np.ndarray     # p x K
    y_loadings: np.ndarray   # q x K
    scores: np.ndarray       # n x K
    kept: np.ndarray         # columns with non-zero variance

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    def rotation(self, k: int) -> np.ndarray:
        W, P = self.weights[:, :k], self.loadings[:, :k]
        return W @ np.linalg.inv(P.T @ W)

    def transform(self, stats, k: int) -> np.ndarray:
        Z = (np.atleast_2d(stats)[:, self.kept] - self.x_centre) / self.x_scale
        return Z @ self.rotation(k)

    def predict(self, stats, k: int) -> np.ndarray:
        T = self.transform(stats, k)
        return (T @ self.y_loadings[:, :k].T) * self.y_scale + self.y_centre


def _nipals(X, Y, K, tol=1e-12, max_iter=500):
    X, Y = X.copy(), Y.copy()
    n, p = X.shape
    q = Y.shape[1]
    W, P, C, T = (np.zeros((p, K)), np.zeros((p, K)), np.zeros((q, K)), np.zeros((n, K)))
    for a in range(K):
        u = Y[:, np.argmax((Y ** 2).sum(axis=0))]
        t_old = None
        for _ in range(max_iter):
            w = X.T @ u
            w /= np.linalg.norm(w)
            t = X @ w
            c = Y.T @ t / (t @ t)
            if q == 1:
                break
            u = Y @ c / (c @ c)
            if t_old is not None and np.linalg.norm(t - t_old) <= tol * np.linalg.norm(t):
                break
            t_old = t
        pl = X.T @ t / (t @ t)
        X -= np.outer(t, pl)
        Y -= np.outer(t, c)
        W[:, a], P[:, a], C[:, a], T[:, a] = w, pl, c, t
    return W, P, C, T


def _pls_fit(S, Y, K) -> PLSModel:
    xc, xs = S.mean(axis=0), S.std(axis=0)
    kept = np.flatnonzero(xs > 0)
    yc, ys = Y.mean(axis=0), Y.std(axis=0)
    ys = np.where(ys > 0, ys, 1.0)
    Xz = (S[:, kept] - xc[kept]) / xs[kept]
    Yz = (Y - yc) / ys
    W, P, C, T = _nipals(Xz, Yz, K)
    return PLSModel(xc[kept], xs[kept], yc, ys, W, P, C, T, kept)


@dataclass(frozen=True)
class PLSResult:
    model: PLSModel
    rmse: np.ndarray
    cv_kind: str
    maps: tuple
    rmse0: float = float("nan")   # intercept-only model on the same folds

    def predict(self, stats, k: int) -> np.ndarray:
        return self.model.predict(stats, k)


def fit_pls(stats, targets, n_components_max: int, *, cv: Optional[str] = None,
            seed: int = 0, stat_names: Sequence[str] = ()) -> PLSResult:
    """Multi-target NIPALS PLS with a cross-validated RMSE per component count.

    Statistics and targets are z-scored; zero-variance statistics are dropped
    with a warning. ``cv`` defaults to exact leave-one-out up to 10 000 rows
    and 10-fold above (``cv_kind`` records which). RMSE is on the z-scored
    target scale, and ``rmse0`` is the matching value for the intercept-only
    model.
    """
    S = np.asarray(stats, dtype=float)
    Y = np.asarray(targets, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    n = len(S)
    if (S.std(axis=0) == 0).any():
        warnings.warn("zero-variance statistics dropped before PLS",
                      RuntimeWarning, stacklevel=2)
    kept = S.std(axis=0) > 0
    rank = np.linalg.matrix_rank(S[:, kept] - S[:, kept].mean(axis=0))
    if n_components_max > rank:
        raise ValueError(f"n_components_max={n_components_max} exceeds the "
                         f"statistic matrix rank {rank}")
    K = int(n_components_max)
    model = _pls_fit(S, Y, K)
    if cv is None:
        cv = "loo" if n <= EXACT_LOO_MAX_N else "10-fold"
    if cv == "loo":
        folds = [np.array([i]) for i in range(n)]
    elif cv == "10-fold":
        order = np.random.default_rng(seed).permutation(n)
        folds = [order[f::10] for f in range(10)]
    else:
        raise ValueError(f"unknown cv scheme {cv!r}")
    sq = np.zeros(K)
    sq0 = 0.0
    mask = np.ones(n, bool)
    for test in folds:
        mask[test] = False
        sub = _pls_fit(S[mask], Y[mask], K)
        sq0 += (((Y[mask].mean(axis=0) - Y[test]) / model.y_scale) ** 2).sum()
        for k in range(1, K + 1):
            err = (sub.predict(S[test], k) - Y[test]) / model.y_scale
            sq[k - 1] += (err ** 2).sum()
        mask[test] = True
    rmse = np.sqrt(sq / n)
    names = tuple(stat_names) or tuple(f"s{i + 1}" for i in range(S.shape[1]))
    maps = tuple(_pls_map(model, k, S.shape[1], names) for k in range(1, K + 1))
    return PLSResult(model, rmse, cv, maps, float(np.sqrt(sq0 / n)))


def _pls_map(model: PLSModel, k: int, p: int, names) -> ProjectionMap:
    centre = np.zeros(p)
    scale = np.ones(p)
    centre[model.kept] = model.x_centre
    scale[model.kept] = model.x_scale
    coef = np.zeros((k, p))
    coef[:, model.kept] = model.rotation(k).T
    return ProjectionMap("identity", centre, scale, np.zeros(k), coef, k, names,
                         tuple(f"pls{i + 1}" for i in range(k)))


def choose_pls_components(rmse_curve, threshold: float = 0.01,
                          baseline: Optional[float] = None) -> int:
    """Smallest k after which one more component gains less than ``threshold``.

    Gains are measured relative to ``baseline``, normally the RMSE of the
    intercept-only model, falling back to the one-component RMSE
    (``rmse_curve[0]`` is for k = 1).
    """
    r = np.asarray(rmse_curve, dtype=float)
    if len(r) < 2:
        raise ValueError("need at least two points on the RMSE curve")
    ref = r[0] if baseline is None else float(baseline)
    if not ref > 0:
        return 1
    gains = (r[:-1] - r[1:]) / ref
    small = np.flatnonzero(gains < threshold)
    return int(small[0] + 1) if len(small) else len(r)


# -- posterior-loss summaries ---------------------------------------------


def choose_basis(train_stats) -> str:
    """``log-powers`` for strictly positive, strongly right-skewed statistics
    (median column skewness above 2), else ``powers``."""
    S = np.asarray(train_stats, dtype=float)
    if (S > 0).all() and np.median(sps.skew(S, axis=0)) > 2:
        return "log-powers"
    return "powers"


def _ols_dropping_collinear(F, Y):
    Fc = np.column_stack([np.ones(len(F)), F])
    Q, R, piv = linalg.qr(Fc, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(Fc.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    if rank < Fc.shape[1]:
        warnings.warn(f"{Fc.shape[1] - rank} collinear basis columns dropped",
                      RuntimeWarning, stacklevel=3)
    coef = np.zeros((Fc.shape[1], Y.shape[1]))
    coef[keep] = np.linalg.lstsq(Fc[:, keep], Y, rcond=None)[0]
    return coef


def fit_projection_map(stats, targets, basis_spec: str = "powers",
                       stat_names: Sequence[str] = (), param_names: Sequence[str] = ()
                       ) -> ProjectionMap:
    """Least-squares regression of each target on the basis expansion."""
    S = np.asarray(stats, dtype=float)
    Y = np.asarray(targets, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    if basis_spec not in BASES:
        raise ValueError(f"unknown basis {basis_spec!r}")
    T = np.log(S) if basis_spec == "log-powers" else S
    if basis_spec == "log-powers" and not np.isfinite(T).all():
        raise ValueError("log basis needs strictly positive statistics")
    centre = T.mean(axis=0)
    scale = T.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    F = basis_expand((T - centre) / scale, basis_spec)
    coef = _ols_dropping_collinear(F, Y)
    names = tuple(stat_names) or tuple(f"s{i + 1}" for i in range(S.shape[1]))
    derived = tuple(f"E[{n}]" for n in param_names) if param_names else ()
    return ProjectionMap(basis_spec, centre, scale, coef[0], coef[1:].T, Y.shape[1],
                         names, derived)


@dataclass(frozen=True)
class PosteriorLossResult:
    projection: ProjectionMap
    table: ReferenceTable
    train_rows: np.ndarray
    table_rows: np.ndarray   # original row index of each row of ``table``

    def local_row(self, original_row: int) -> int:
        pos = np.searchsorted(self.table_rows, original_row)
        if pos >= len(self.table_rows) or self.table_rows[pos] != original_row:
            raise KeyError(f"row {original_row} was used for training")
        return int(pos)


def fit_posterior_loss(table: ReferenceTable, split_fraction: float = 0.10,
                       basis_spec: str = "auto", seed: int = 0, *,
                       param_idx=None, reserved_rows=()) -> PosteriorLossResult:
    """Fit posterior-mean summaries on a random slice of the table.

    ``split_fraction`` of the rows (never any of ``reserved_rows``) train
    the regression; the rest are returned as a new reference table whose
    statistics are the q fitted posterior means.
    """
    if not 0 < split_fraction < 1:
        raise ValueError("split_fraction must lie in (0, 1)")
    pidx = list(range(table.q)) if param_idx is None else list(param_idx)
    n_train = int(round(split_fraction * table.n))
    eligible = np.setdiff1d(np.arange(table.n), np.asarray(reserved_rows, dtype=int))
    if n_train < 2 or n_train > len(eligible):
        raise ValueError("training split too small or too large")
    rng = np.random.default_rng(seed)
    train = np.sort(rng.choice(eligible, n_train, replace=False))
    rest = np.setdiff1d(np.arange(table.n), train)
    S_train = table.stats[train]
    if basis_spec == "auto":
        basis_spec = choose_basis(S_train)
    names = [table.param_names[i] for i in pidx]
    pmap = fit_projection_map(S_train, table.params[train][:, pidx], basis_spec,
                              table.stat_names, names)
    derived = apply_projection(pmap, table.stats[rest])
    held = ReferenceTable(table.params[rest], derived, table.param_names,
                          pmap.derived_names)
    return PosteriorLossResult(pmap, held, train, rest)
