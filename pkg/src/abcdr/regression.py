"""Regression adjustment: weighted least squares, ridge, log-variance models and a
one-hidden-layer network with weight decay.

All fits standardise the statistics and targets internally (weighted mean and
weighted standard deviation over the fitting rows) and report coefficients on
the original scale. Fits use the weights exactly as passed, so the size of a
ridge or decay penalty is relative to the total weight.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .core import ABCError, WeightedSample

LAMBDA_GRID = (1e-3, 1e-2, 1e-1)
LOG_FLOOR = 1e-300
RATIO_CLAMP = (1e-6, 1e6)


class SingularDesignError(ABCError):
    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class DesignMatrix:
    """Intercept column followed by the selected (scaled) statistics."""

    rows: np.ndarray

    def __post_init__(self):
        X = np.array(self.rows, dtype=float)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError("design must be a 2-d array")
        if not np.all(X[:, 0] == 1.0):
            raise ValueError("first design column must be all ones")
        if not np.isfinite(X).all():
            raise ValueError("design has non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "rows", X)

    @classmethod
    def from_stats(cls, stats) -> "DesignMatrix":
        stats = np.atleast_2d(np.asarray(stats, dtype=float))
        return cls(np.column_stack([np.ones(len(stats)), stats]))

    @property
    def stats(self) -> np.ndarray:
        return self.rows[:, 1:]


def _stats_of(design) -> np.ndarray:
    if isinstance(design, DesignMatrix):
        return design.stats
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or not np.all(X[:, 0] == 1.0):
        raise ValueError("design must be a DesignMatrix or an array whose "
                         "first column is all ones")
    return X[:, 1:]


def _as_2d(targets) -> np.ndarray:
    t = np.asarray(targets, dtype=float)
    return t[:, None] if t.ndim == 1 else t


def _weighted_moments(a, w):
    wn = w / w.sum()
    centre = wn @ a
    sd = np.sqrt(wn @ (a - centre) ** 2)
    return centre, np.where(sd > 0, sd, 1.0)


@dataclass(frozen=True)
class Standardiser:
    x_centre: np.ndarray
    x_scale: np.ndarray
    y_centre: np.ndarray
    y_scale: np.ndarray

    @classmethod
    def fit(cls, S, T, w) -> "Standardiser":
        xc, xs = _weighted_moments(S, w)
        yc, ys = _weighted_moments(T, w)
        return cls(xc, xs, yc, ys)

    def design(self, S) -> np.ndarray:
        Z = (np.atleast_2d(S) - self.x_centre) / self.x_scale
        return np.column_stack([np.ones(len(Z)), Z])

    def targets(self, T) -> np.ndarray:
        return (_as_2d(T) - self.y_centre) / self.y_scale


@dataclass(frozen=True)
class LinearFit:
    """``m(s) = alpha + beta @ s`` for each target.

    ``alpha`` has shape (q,) and ``beta`` (q, k). ``coef_std`` holds the
    solution in standardised coordinates, shape (k+1, q).
    """

    alpha: np.ndarray
    beta: np.ndarray
    lam: float
    coef_std: np.ndarray
    standardiser: Standardiser
    rank: int
    condition: float

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.coef_std.shape[0]

    def predict(self, stats) -> np.ndarray:
        S = np.atleast_2d(np.asarray(stats, dtype=float))
        return S @ self.beta.T + self.alpha


def _from_std(coef, st: Standardiser, lam, rank, cond) -> LinearFit:
    beta = (coef[1:] * st.y_scale / st.x_scale[:, None]).T
    alpha = st.y_centre + coef[0] * st.y_scale - beta @ st.x_centre
    return LinearFit(alpha, beta, float(lam), coef, st, int(rank), float(cond))


def fit_wls(design, targets, weights, *, strict: bool = False) -> LinearFit:
    """Weighted least squares via an SVD of the weighted design.

    A rank-deficient design gets the minimum-norm solution and a warning,
    or raises :class:`SingularDesignError` when ``strict``.
    """
    S = _stats_of(design)
    T = _as_2d(targets)
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or not w.sum() > 0:
        raise ValueError("weights must be non-negative and not all zero")
    st = Standardiser.fit(S, T, w)
    sw = np.sqrt(w)[:, None]
    A = sw * st.design(S)
    B = sw * st.targets(T)
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    tol = sv[0] * max(A.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(sv > tol))
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if rank < A.shape[1]:
        if strict:
            raise SingularDesignError("singular design (use ridge)", cond)
        warnings.warn(f"rank-deficient design (rank {rank} of {A.shape[1]}); "
                      "using the minimum-norm solution", RuntimeWarning, stacklevel=2)
    coef = Vt[:rank].T @ ((U[:, :rank].T @ B) / sv[:rank, None])
    return _from_std(coef, st, 0.0, rank, cond)


def _penalty(k1: int, lam: float) -> np.ndarray:
    d = np.full(k1, float(lam))
    d[0] = 0.0
    return np.diag(d)


def fit_ridge(design, targets, weights, lam: float) -> LinearFit:
    """Ridge regression with the intercept left unpenalised.

    Solves ``(X'WX + lam * diag(0, 1, ..., 1)) b = X'W T`` in standardised
    coordinates.
    """
    if not lam > 0:
        raise ValueError("ridge penalty must be positive")
    S = _stats_of(design)
    T = _as_2d(targets)
    w = np.asarray(weights, dtype=float)
    st = Standardiser.fit(S, T, w)
    X = st.design(S)
    G = X.T @ (w[:, None] * X)
    rhs = X.T @ (w[:, None] * st.targets(T))
    coef = np.linalg.solve(G + _penalty(X.shape[1], lam), rhs)
    ev = np.linalg.eigvalsh(G)
    cond = np.sqrt(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
    return _from_std(coef, st, lam, X.shape[1], cond)


def ridge_loo_error(design, targets, weights, lam: float) -> float:
    """Weighted mean squared leave-one-out error from the hat-matrix diagonal.

    Errors are measured on the standardised target scale so that several
    targets contribute equally.
    """
    S = _stats_of(design)
    T = _as_2d(targets)
    w = np.asarray(weights, dtype=float)
    st = Standardiser.fit(S, T, w)
    X = st.design(S)
    Y = st.targets(T)
    G = X.T @ (w[:, None] * X) + _penalty(X.shape[1], lam)
    Ginv_Xt = np.linalg.solve(G, X.T)
    coef = Ginv_Xt @ (w[:, None] * Y)
    h = w * np.einsum("ij,ji->i", X, Ginv_Xt)
    resid = (Y - X @ coef) / np.maximum(1.0 - h, 1e-12)[:, None]
    return float(w @ (resid ** 2).sum(axis=1) / w.sum())


@dataclass(frozen=True)
class VarianceFit:
    """Regression of log squared residuals; ``sigma`` gives the fitted sd."""

    model: object

    def log_variance(self, stats) -> np.ndarray:
        return self.model.predict(stats)

    def sigma(self, stats) -> np.ndarray:
        return np.exp(0.5 * self.log_variance(stats))

    def predict(self, stats) -> np.ndarray:
        return self.log_variance(stats)


def log_squared(residuals) -> np.ndarray:
    r2 = _as_2d(residuals) ** 2
    return np.log(np.maximum(r2, LOG_FLOOR))


def fit_variance_model(design, residuals, weights, lam: float = 0.0) -> VarianceFit:
    """WLS (``lam == 0``) or ridge fit of ``log(residual**2)``."""
    y = log_squared(residuals)
    if lam > 0:
        return VarianceFit(fit_ridge(design, y, weights, lam))
    return VarianceFit(fit_wls(design, y, weights))


@dataclass(frozen=True)
class AdjustedSample:
    thetas_star: np.ndarray
    weights: np.ndarray
    source_rows: np.ndarray
    adjustment_kind: str

    @property
    def thetas(self) -> np.ndarray:
        return self.thetas_star

    @property
    def n_eff(self) -> int:
        return len(self.weights)

    def uniform(self) -> "AdjustedSample":
        m = self.n_eff
        return AdjustedSample(self.thetas_star, np.full(m, 1.0 / m),
                              self.source_rows, self.adjustment_kind)


def adjust(sample: WeightedSample, fitted_rows=None, fitted_obs=None,
           sigma_rows=None, sigma_obs=None, columns: Optional[Sequence[int]] = None
           ) -> AdjustedSample:
    """Shift (and optionally rescale) accepted draws towards the observation.

    Homoscedastic: ``theta* = m(s_obs) + theta - m(s_i)``. With ``sigma_*``
    the residual is also multiplied by ``sigma(s_obs) / sigma(s_i)``, the
    ratio clamped to [1e-6, 1e6]. ``fitted_rows`` is (m, q') and
    ``fitted_obs`` (q',); ``columns`` picks the adjusted parameters.
    """
    thetas = sample.thetas if columns is None else sample.thetas[:, list(columns)]
    if fitted_rows is None:
        if sigma_rows is not None or sigma_obs is not None:
            raise ValueError("a variance model needs a mean model")
        return AdjustedSample(thetas.copy(), sample.weights, sample.source_rows, "none")
    fitted_rows = _as_2d(fitted_rows)
    fitted_obs = np.asarray(fitted_obs, dtype=float).reshape(-1)
    resid = thetas - fitted_rows
    kind = "homoscedastic"
    if sigma_rows is not None:
        ratio = np.asarray(sigma_obs, dtype=float).reshape(-1) / _as_2d(sigma_rows)
        resid = resid * np.clip(ratio, *RATIO_CLAMP)
        kind = "heteroscedastic"
    return AdjustedSample(fitted_obs + resid, sample.weights, sample.source_rows, kind)


def adjust_with_fits(sample, stats_rows, s_obs, mean_fit, variance_fit=None,
                     columns=None) -> AdjustedSample:
    if mean_fit is None:
        if variance_fit is not None:
            raise ValueError("a variance model needs a mean model")
        return adjust(sample, columns=columns)
    s_obs = np.atleast_2d(s_obs)
    kw = {}
    if variance_fit is not None:
        kw = dict(sigma_rows=variance_fit.sigma(stats_rows),
                  sigma_obs=variance_fit.sigma(s_obs)[0])
    return adjust(sample, mean_fit.predict(stats_rows), mean_fit.predict(s_obs)[0],
                  columns=columns, **kw)


# -- neural network -------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class NeuralNetFit:
    """Logistic hidden layer, identity output.

    ``first_layer_weights`` is (H, k+1) with the bias in column 0 and
    ``second_layer_weights`` is (q, H+1), bias first. Weights act on
    standardised inputs and outputs.
    """

    first_layer_weights: np.ndarray
    second_layer_weights: np.ndarray
    hidden_units: int
    decay: float
    standardiser: Standardiser
    objective: float
    converged: bool
    history: tuple = ()

    def predict(self, stats) -> np.ndarray:
        st = self.standardiser
        X = st.design(np.atleast_2d(np.asarray(stats, dtype=float)))
        h = _sigmoid(X @ self.first_layer_weights.T)
        out = h @ self.second_layer_weights[:, 1:].T + self.second_layer_weights[:, 0]
        return out * st.y_scale + st.y_centre


def _unpack(omega, H, k1, q):
    n1 = H * k1
    return omega[:n1].reshape(H, k1), omega[n1:].reshape(q, H + 1)


def nn_objective(omega, X, Y, w, H, decay):
    """Penalised weighted squared error and its gradient.

    ``X`` already carries the intercept column; every weight, biases
    included, is penalised.
    """
    k1, q = X.shape[1], Y.shape[1]
    W1, W2 = _unpack(omega, H, k1, q)
    h = _sigmoid(X @ W1.T)
    out = h @ W2[:, 1:].T + W2[:, 0]
    err = out - Y
    f = float(w @ (err ** 2).sum(axis=1) + decay * omega @ omega)
    d_out = 2.0 * w[:, None] * err
    g2 = np.column_stack([d_out.sum(axis=0), d_out.T @ h])
    d_a = (d_out @ W2[:, 1:]) * h * (1.0 - h)
    g1 = d_a.T @ X
    grad = np.concatenate([g1.ravel(), g2.ravel()]) + 2.0 * decay * omega
    return f, grad


def fit_neural_net(design, targets, weights, hidden_units: Optional[int] = None,
                   decay: float = 1e-2, restarts: int = 1, seed: int = 0,
                   max_iter: int = 500, gtol: float = 1e-6, init_range: float = 0.7
                   ) -> NeuralNetFit:
    """Fit the network by L-BFGS from ``restarts`` random starts.

    ``hidden_units`` defaults to the number of targets. The restart with the
    lowest penalised objective is returned; ``converged`` is False when the
    optimiser stopped on the iteration cap.
    """
    S = _stats_of(design)
    T = _as_2d(targets)
    w = np.asarray(weights, dtype=float)
    H = T.shape[1] if hidden_units is None else int(hidden_units)
    if H < 1:
        raise ValueError("need at least one hidden unit")
    if not decay > 0:
        raise ValueError("weight decay must be positive")
    st = Standardiser.fit(S, T, w)
    X, Y = st.design(S), st.targets(T)
    k1, q = X.shape[1], Y.shape[1]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        omega0 = rng.uniform(-init_range, init_range, H * k1 + q * (H + 1))
        history = [nn_objective(omega0, X, Y, w, H, decay)[0]]

        def record(intermediate_result):
            history.append(float(intermediate_result.fun))

        res = optimize.minimize(nn_objective, omega0, args=(X, Y, w, H, decay),
                                jac=True, method="L-BFGS-B", callback=record,
                                options={"maxiter": max_iter, "gtol": gtol})
        if best is None or res.fun < best[0].fun:
            best = (res, tuple(history))
    res, history = best
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"network fit stopped early: {res.message}", RuntimeWarning,
                      stacklevel=2)
    W1, W2 = _unpack(res.x, H, k1, q)
    return NeuralNetFit(W1, W2, H, float(decay), st, float(res.fun), converged, history)


# -- aggregation and penalty choice ---------------------------------------


def median_aggregate_predictions(fits, eval_points, kind: str = "mean") -> np.ndarray:
    """Pointwise median over fits of their predictions at ``eval_points``.

    ``kind="sigma"`` aggregates fitted standard deviations of variance fits.
    """
    if len(fits) == 0:
        raise ValueError("need at least one fit")
    if kind == "sigma":
        preds = [f.sigma(eval_points) for f in fits]
    else:
        preds = [f.predict(eval_points) for f in fits]
    return np.median(np.stack(preds), axis=0)


def _kfold_nn_error(S, T, w, lam, hidden_units, seed, folds=10):
    n = len(S)
    order = np.random.default_rng(seed).permutation(n)
    err = 0.0
    for f in range(folds):
        test = order[f::folds]
        train = np.setdiff1d(order, test)
        net = fit_neural_net(np.column_stack([np.ones(len(train)), S[train]]), T[train],
                             w[train], hidden_units, lam, 1, seed + f)
        pred = net.predict(S[test])
        st = net.standardiser
        err += float(w[test] @ (((pred - T[test]) / st.y_scale) ** 2).sum(axis=1))
    return err / w.sum()


def select_lambda_cv(design, targets, weights, grid: Sequence[float] = LAMBDA_GRID,
                     regressor: str = "ridge", hidden_units=None, seed: int = 0) -> float:
    """Penalty with the smallest cross-validated error; ties go to the smaller.

    Ridge uses exact leave-one-out through the hat matrix. The network uses
    10-fold cross-validation instead, since refitting once per row is too
    slow.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("empty penalty grid")
    if len(grid) == 1:
        return grid[0]
    S = _stats_of(design)
    T = _as_2d(targets)
    w = np.asarray(weights, dtype=float)
    best_lam, best_err = grid[0], np.inf
    for lam in grid:
        if regressor == "ridge":
            err = ridge_loo_error(design, T, w, lam)
        elif regressor == "neural-net":
            err = _kfold_nn_error(S, T, w, lam, hidden_units, seed)
        else:
            raise ValueError(f"unknown regressor {regressor!r}")
        if err < best_err:
            best_lam, best_err = lam, err
    return best_lam
