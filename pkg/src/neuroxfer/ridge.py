"""Multi-target cross-validated ridge regression and the single-lag sweep.

The solver eigendecomposes the Gram matrix of the (standardized) design
once per fit and reuses it across the whole regularization grid, so a
sweep over many alphas costs one decomposition plus cheap per-alpha
solves.  Scores are Pearson correlations on held-out contiguous blocks;
regularization strength is selected per response channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import FeatureMatrix, lag_shift, valid_rows_for_lags
from .errors import ConfigError, DataError
from .tensorio import TimeSeries, write_tensor, read_tensor

DEFAULT_ALPHAS = np.logspace(0, 8, 10)


def pearson_scores(pred: np.ndarray, actual: np.ndarray, return_flags: bool = False):
    """Per-channel (column-wise) Pearson r between two samples x C arrays.

    Channels with zero variance in either input score 0 and are flagged.
    """
    pred = np.atleast_2d(pred)
    actual = np.atleast_2d(actual)
    if pred.shape != actual.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    if pred.shape[0] < 3:
        raise DataError(f"need at least 3 samples, got {pred.shape[0]}")
    p = pred - pred.mean(axis=0)
    a = actual - actual.mean(axis=0)
    pn = np.sqrt((p ** 2).sum(axis=0))
    an = np.sqrt((a ** 2).sum(axis=0))
    flags = (pn == 0) | (an == 0)
    denom = np.where(flags, 1.0, pn * an)
    r = (p * a).sum(axis=0) / denom
    r[flags] = 0.0
    r = np.clip(r, -1.0, 1.0)
    return (r, flags) if return_flags else r


def ridge_solve(Z: np.ndarray, Y: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Solve (Z'Z + aI) B = Z'Y for every alpha via one eigendecomposition.

    Returns betas of shape (n_alphas, F, C).  Z is used as given; callers
    standardize first.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    lam, Q = np.linalg.eigh(Z.T @ Z)
    QtZy = Q.T @ (Z.T @ Y)
    betas = np.empty((alphas.size, Z.shape[1], Y.shape[1]))
    for i, a in enumerate(alphas):
        betas[i] = Q @ (QtZy / (lam + a)[:, None])
    return betas


def _standardize(M: np.ndarray):
    mean = M.mean(axis=0)
    scale = M.std(axis=0)
    scale = np.where(scale == 0, 1.0, scale)
    return (M - mean) / scale, mean, scale


def _fold_bounds(n: int, n_folds: int) -> np.ndarray:
    return np.linspace(0, n, n_folds + 1).astype(int)


@dataclass
class RidgeSolution:
    """Fitted multi-target ridge model in standardized coordinates.

    ``beta`` maps the standardized design to standardized responses;
    :func:`predict` applies the stored training statistics.
    """

    beta: np.ndarray                 # (F, C)
    alpha_per_channel: np.ndarray    # (C,)
    cv_score_per_channel: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    fold_bounds: np.ndarray
    zero_variance: np.ndarray        # per-channel degeneracy flags
    alphas: np.ndarray = field(default_factory=lambda: DEFAULT_ALPHAS.copy())

    def raw_coefficients(self):
        """Coefficients and intercept in the original (unstandardized) units."""
        W = self.beta * (self.y_scale[None, :] / self.x_scale[:, None])
        intercept = self.y_mean - self.x_mean @ W
        return W, intercept

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "beta.nst", self.beta)
        write_tensor(out / "x_stats.nst", np.stack([self.x_mean, self.x_scale]))
        write_tensor(out / "y_stats.nst", np.stack([self.y_mean, self.y_scale]))
        sidecar = {
            "alphas": self.alphas.tolist(),
            "alpha_per_channel": self.alpha_per_channel.tolist(),
            "cv_score_per_channel": self.cv_score_per_channel.tolist(),
            "fold_bounds": self.fold_bounds.tolist(),
            "zero_variance": self.zero_variance.astype(int).tolist(),
        }
        with open(out / "solution.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_solution(in_dir) -> RidgeSolution:
    src = Path(in_dir)
    beta, _ = read_tensor(src / "beta.nst")
    x_stats, _ = read_tensor(src / "x_stats.nst")
    y_stats, _ = read_tensor(src / "y_stats.nst")
    raw = json.loads((src / "solution.json").read_text())
    return RidgeSolution(
        beta=beta,
        alpha_per_channel=np.asarray(raw["alpha_per_channel"]),
        cv_score_per_channel=np.asarray(raw["cv_score_per_channel"]),
        x_mean=x_stats[0], x_scale=x_stats[1],
        y_mean=y_stats[0], y_scale=y_stats[1],
        fold_bounds=np.asarray(raw["fold_bounds"], dtype=int),
        zero_variance=np.asarray(raw["zero_variance"], dtype=bool),
        alphas=np.asarray(raw["alphas"]),
    )


def fit_ridge_cv(X: np.ndarray, Y: np.ndarray, alphas=DEFAULT_ALPHAS,
                 n_folds: int = 4, valid: np.ndarray | None = None,
                 alpha_per_channel: np.ndarray | None = None,
                 return_heldout: bool = False):
    """Cross-validated ridge with per-channel regularization selection.

    Columns of X and channels of Y are z-scored with training-fold
    statistics only.  For each channel the alpha maximizing the mean
    held-out Pearson r across contiguous folds is selected (first grid
    entry on ties); the returned beta is refit on all rows with that
    alpha, while ``cv_score_per_channel`` keeps the cross-validated score.

    ``valid`` drops rows (e.g. zero-filled edges) from both fitting and
    scoring.  ``alpha_per_channel`` bypasses selection and scores each
    channel at the given fixed alpha.  With ``return_heldout`` the
    stitched held-out predictions (original Y units, valid rows only)
    are returned alongside the solution.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if n_folds < 2:
        raise ConfigError("need at least 2 folds")
    if valid is not None:
        X = X[valid]
        Y = Y[valid]
    n, F = X.shape
    C = Y.shape[1]
    if return_heldout and alpha_per_channel is None:
        raise ConfigError("return_heldout requires alpha_per_channel")
    if alpha_per_channel is not None:
        alpha_per_channel = np.asarray(alpha_per_channel, dtype=np.float64)
        grid = np.unique(alpha_per_channel)
        chan_alpha_idx = np.searchsorted(grid, alpha_per_channel)
    else:
        grid = np.asarray(alphas, dtype=np.float64)
        chan_alpha_idx = None
    if grid.size == 0 or np.any(grid <= 0):
        raise ConfigError("alpha grid must be non-empty and positive")
    bounds = _fold_bounds(n, n_folds)
    if np.any(np.diff(bounds) < 3):
        raise DataError(f"folds too small: {n} rows across {n_folds} folds")

    fold_scores = np.zeros((grid.size, n_folds, C))
    heldout = np.zeros((n, C)) if return_heldout else None
    for f in range(n_folds):
        te = slice(bounds[f], bounds[f + 1])
        tr_mask = np.ones(n, dtype=bool)
        tr_mask[te] = False
        Z_tr, mu, sd = _standardize(X[tr_mask])
        Yz_tr, muY, sdY = _standardize(Y[tr_mask])
        betas = ridge_solve(Z_tr, Yz_tr, grid)
        Z_te = (X[te] - mu) / sd
        for i in range(grid.size):
            pred = Z_te @ betas[i]
            fold_scores[i, f] = pearson_scores(pred, Y[te])
        if return_heldout:
            block = heldout[te]
            for i in range(grid.size):
                cols = np.flatnonzero(chan_alpha_idx == i)
                if cols.size:
                    pred_z = Z_te @ betas[i][:, cols]
                    block[:, cols] = pred_z * sdY[cols] + muY[cols]
    mean_scores = fold_scores.mean(axis=1)  # (n_alphas, C)

    if chan_alpha_idx is None:
        chan_alpha_idx = np.argmax(mean_scores, axis=0)
    cv_score = mean_scores[chan_alpha_idx, np.arange(C)]

    # refit on all rows at the selected per-channel alpha
    Z, mu, sd = _standardize(X)
    Yz, muY, sdY = _standardize(Y)
    betas_full = ridge_solve(Z, Yz, grid)
    beta = betas_full[chan_alpha_idx, :, np.arange(C)].T  # (F, C)

    zero_var = Y.std(axis=0) == 0
    cv_score = np.where(zero_var, 0.0, cv_score)

    sol = RidgeSolution(
        beta=beta,
        alpha_per_channel=grid[chan_alpha_idx],
        cv_score_per_channel=cv_score,
        x_mean=mu, x_scale=sd, y_mean=muY, y_scale=sdY,
        fold_bounds=bounds,
        zero_variance=zero_var,
        alphas=grid,
    )
    return (sol, heldout) if return_heldout else sol


def predict(sol: RidgeSolution, X: np.ndarray) -> np.ndarray:
    """Standardized-response predictions: z(X) @ beta."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != sol.beta.shape[0]:
        raise DataError(f"design width {X.shape[1]} != beta rows {sol.beta.shape[0]}")
    return ((X - sol.x_mean) / sol.x_scale) @ sol.beta


def predict_response(sol: RidgeSolution, X: np.ndarray) -> np.ndarray:
    """Predictions in the original response units."""
    return predict(sol, X) * sol.y_scale + sol.y_mean


def _break_ties(lags: np.ndarray, scores_col: np.ndarray) -> int:
    """Index of the best lag: max score, then nearest zero, then positive."""
    best = scores_col.max()
    cand = np.flatnonzero(scores_col == best)
    order = sorted(cand, key=lambda i: (abs(lags[i]), -np.sign(lags[i])))
    return int(order[0])


@dataclass
class LagSweepResult:
    """Per-channel scores over a lag grid plus the selected best lag."""

    lags: np.ndarray                        # (L,)
    score_per_lag_per_channel: np.ndarray   # (L, C)
    best_lag_per_channel: np.ndarray        # (C,)
    best_score_per_channel: np.ndarray      # (C,)
    alpha_per_channel_per_lag: np.ndarray   # (L, C)
    tie_count: int = 0

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "lag_scores.nst", self.score_per_lag_per_channel)
        sidecar = {
            "lags": self.lags.tolist(),
            "best_lag_per_channel": self.best_lag_per_channel.tolist(),
            "best_score_per_channel": self.best_score_per_channel.tolist(),
            "tie_break": "nearest-zero-then-positive",
            "tie_count": self.tie_count,
        }
        with open(out / "lag_sweep.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def lag_sweep(feats: FeatureMatrix, resp: TimeSeries, lags,
              alphas=DEFAULT_ALPHAS, n_folds: int = 4) -> LagSweepResult:
    """One ridge fit per candidate stimulus-response lag.

    Rows inside the zero-filled edge of the *largest* |lag| are excluded
    from every fit identically, so scores are comparable across lags.
    """
    if abs(feats.rate_hz - resp.rate_hz) > 1e-9:
        raise DataError(
            f"feature rate {feats.rate_hz} != response rate {resp.rate_hz}"
        )
    if feats.n_samples != resp.n_samples:
        raise DataError(
            f"feature rows {feats.n_samples} != response samples {resp.n_samples}"
        )
    lags = np.asarray(list(lags), dtype=int)
    valid = valid_rows_for_lags(feats.n_samples, lags)
    Y = resp.values.T
    C = Y.shape[1]
    scores = np.zeros((lags.size, C))
    alphas_sel = np.zeros((lags.size, C))
    for li, lag in enumerate(lags):
        X = lag_shift(feats, int(lag)).values
        sol = fit_ridge_cv(X, Y, alphas=alphas, n_folds=n_folds, valid=valid)
        scores[li] = sol.cv_score_per_channel
        alphas_sel[li] = sol.alpha_per_channel
    best_idx = np.empty(C, dtype=int)
    ties = 0
    for c in range(C):
        best_idx[c] = _break_ties(lags, scores[:, c])
        ties += int((scores[:, c] == scores[best_idx[c], c]).sum() > 1)
    return LagSweepResult(
        lags=lags,
        score_per_lag_per_channel=scores,
        best_lag_per_channel=lags[best_idx],
        best_score_per_channel=scores[best_idx, np.arange(C)],
        alpha_per_channel_per_lag=alphas_sel,
        tie_count=ties,
    )


def cv_residuals_at_best_lags(feats: FeatureMatrix, resp: TimeSeries,
                              sweep: LagSweepResult, alphas=DEFAULT_ALPHAS,
                              n_folds: int = 4):
    """Held-out residuals with each channel taken at its own best lag.

    Returns (residual TimeSeries over the sweep's valid rows, valid mask).
    Residuals are actual minus stitched cross-validation predictions, in
    original response units.
    """
    valid = valid_rows_for_lags(feats.n_samples, sweep.lags)
    Y = resp.values.T
    resid = np.empty((valid.sum(), Y.shape[1]))
    for lag in np.unique(sweep.best_lag_per_channel):
        cols = np.flatnonzero(sweep.best_lag_per_channel == lag)
        li = int(np.flatnonzero(sweep.lags == lag)[0])
        X = lag_shift(feats, int(lag)).values
        _, heldout = fit_ridge_cv(
            X, Y[:, cols], alphas=alphas, n_folds=n_folds, valid=valid,
            alpha_per_channel=sweep.alpha_per_channel_per_lag[li, cols],
            return_heldout=True,
        )
        resid[:, cols] = Y[valid][:, cols] - heldout
    return TimeSeries(resid.T, resp.rate_hz), valid
