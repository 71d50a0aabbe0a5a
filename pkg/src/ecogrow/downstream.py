"""Regression evaluation of embeddings: Lasso by coordinate descent, K-fold scoring, KL drift."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import CityPanel

L1_GRID = (1e-3, 1e-4, 1e-5, 1e-6)
K_FOLDS = 5
TASK_COLUMNS = {"new_companies_next_year": "new_companies", "employment_next_year": "employment"}


@dataclass
class LassoResult:
    coef: np.ndarray
    intercept: float
    n_iter: int
    converged: bool
    objective: list[float] = field(default_factory=list)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.coef + self.intercept


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def lasso_fit(x, y, l1_weight: float, tol: float = 1e-6, max_iter: int = 1000) -> LassoResult:
    """Minimise (1/2n)|y - b0 - Xs b|^2 + l1_weight |b|_1 on standardised columns.

    Columns are standardised with the population std; constant columns are
    dropped and get coefficient 0. Coefficients come back on the original
    scale. Sweeps stop when the largest coefficient change falls below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("lasso_fit: inputs must be finite")
    if l1_weight < 0:
        raise ValueError("lasso_fit: l1_weight must be nonnegative")
    n, p = x.shape
    mu, sd = x.mean(axis=0), x.std(axis=0)
    live = sd > 0
    xs = (x[:, live] - mu[live]) / sd[live]
    y_mean = y.mean()
    yc = y - y_mean
    beta = np.zeros(xs.shape[1])
    resid = yc.copy()
    col_sq = (xs ** 2).sum(axis=0) / n  # 1 for standardised columns, kept for rounding honesty

    def objective():
        return 0.5 * np.mean(resid ** 2) + l1_weight * np.abs(beta).sum()

    history = [objective()]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(xs.shape[1]):
            old = beta[j]
            rho = xs[:, j] @ resid / n + col_sq[j] * old
            new = soft_threshold(rho, l1_weight) / col_sq[j]
            if new != old:
                resid -= xs[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        history.append(objective())
        if max_change < tol:
            converged = True
            break
    coef = np.zeros(p)
    coef[live] = beta / sd[live]
    intercept = y_mean - mu @ coef
    return LassoResult(coef, float(intercept), it, converged, history)


def rmse(y, pred) -> float:
    return float(np.sqrt(np.mean((np.asarray(y) - np.asarray(pred)) ** 2)))


def mae(y, pred) -> float:
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(pred))))


def r2(y, pred) -> float:
    y = np.asarray(y, dtype=np.float64)
    ss_tot = ((y - y.mean()) ** 2).sum()
    if ss_tot == 0:
        return 0.0
    return float(1.0 - ((y - np.asarray(pred)) ** 2).sum() / ss_tot)


@dataclass
class EvalResult:
    rmse: list[float]
    mae: list[float]
    r2: list[float]
    l1_weight: list[float]
    folds: list[list[str]]
    predictions: dict[str, float] = field(default_factory=dict)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.r2))

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(mean_rmse=self.mean_rmse, mean_mae=self.mean_mae, mean_r2=self.mean_r2)
        return out

    def write_json(self, path: Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def fold_order(ids: list[str], seed: int) -> np.ndarray:
    """Row order by a seeded hash of each id, so fold membership ignores input order."""
    keys = [hashlib.sha256(f"{seed}:{name}".encode()).hexdigest() for name in ids]
    return np.array(sorted(range(len(ids)), key=lambda i: (keys[i], ids[i])), dtype=np.intp)


def _select_l1(x, y, grid, inner_frac: float = 0.8) -> float:
    n_fit = int(round(inner_frac * len(y)))
    n_fit = min(max(n_fit, 1), len(y) - 1)
    best, best_err = grid[0], np.inf
    for lam in grid:
        fit = lasso_fit(x[:n_fit], y[:n_fit], lam)
        err = np.mean((fit.predict(x[n_fit:]) - y[n_fit:]) ** 2)
        if err < best_err:
            best, best_err = lam, err
    return best


def cross_validate(x, y, ids: list[str], grid=L1_GRID, k_folds: int = K_FOLDS, seed: int = 0) -> EvalResult:
    """K-fold scores; within each training split, an 80/20 holdout picks the L1 weight."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < k_folds:
        raise ValueError(f"{len(y)} rows cannot fill {k_folds} folds")
    order = fold_order(ids, seed)
    x, y = x[order], y[order]
    ids = [ids[i] for i in order]
    fold_of = np.arange(len(y)) % k_folds
    res = EvalResult([], [], [], [], [])
    for f in range(k_folds):
        test = fold_of == f
        train = ~test
        lam = _select_l1(x[train], y[train], grid)
        fit = lasso_fit(x[train], y[train], lam)
        pred = fit.predict(x[test])
        res.rmse.append(rmse(y[test], pred))
        res.mae.append(mae(y[test], pred))
        res.r2.append(r2(y[test], pred))
        res.l1_weight.append(lam)
        res.folds.append([ids[i] for i in np.flatnonzero(test)])
        res.predictions.update({ids[i]: float(p) for i, p in zip(np.flatnonzero(test), pred)})
    return res


def regression_design(panel: CityPanel, year: int, task: str, embeddings: np.ndarray | None = None):
    """Design [embedding | explicit features at ``year``] and the target at ``year + 1``.

    Cities with a missing target are dropped. Feature gaps use the within-year median.
    """
    if task not in TASK_COLUMNS:
        raise ValueError(f"unknown task {task!r}")
    target = panel.feature(TASK_COLUMNS[task], year + 1)
    feats, _ = panel.imputed_features(year)
    x = feats if embeddings is None else np.hstack([np.asarray(embeddings), feats])
    keep = np.isfinite(target)
    ids = [c for c, k in zip(panel.cities, keep) if k]
    return x[keep], target[keep], ids


def evaluate(embeddings: np.ndarray | None, panel: CityPanel, year: int,
             task: str = "new_companies_next_year", grid=L1_GRID, k_folds: int = K_FOLDS,
             seed: int = 0) -> EvalResult:
    x, y, ids = regression_design(panel, year, task, embeddings)
    return cross_validate(x, y, ids, grid, k_folds, seed)


def kl_yearly(a, b, bins: int = 20, eps: float = 1e-9) -> float:
    """KL(a || b) of histograms on shared log-spaced bins over the pooled range."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("kl_yearly: both samples must be nonempty")
    edges = log_bins(np.concatenate([a, b]), bins)
    pa = _smoothed_hist(a, edges, eps)
    pb = _smoothed_hist(b, edges, eps)
    return float(max(np.sum(pa * np.log(pa / pb)), 0.0))


def log_bins(pooled: np.ndarray, bins: int) -> np.ndarray:
    positive = pooled[pooled > 0]
    lo = positive.min() if positive.size else 1.0
    hi = max(pooled.max(), lo)
    if hi == lo:
        return np.array([lo, lo * (1 + 1e-12) + 1e-300])
    return np.geomspace(lo, hi, bins + 1)


def _smoothed_hist(x, edges, eps):
    # values below the first edge (including nonpositive ones) land in the first bin
    counts, _ = np.histogram(np.clip(x, edges[0], edges[-1]), bins=edges)
    p = counts / counts.sum() + eps
    return p / p.sum()
