"""Downstream evaluation: log-return GBM estimator, OU regression
estimator, invalid-path filtering, and marginal-distribution comparison.

Both parameter estimators pool all consecutive observation pairs of all
paths. The GBM estimator is the standard log-return moment estimator:
``sigma = sqrt(Var(r)/dt)``, ``mu = mean(r)/dt + sigma^2/2`` for
``r = log(X_{t+dt}/X_t)``. The OU estimator regresses the next value on
the current one and maps the regression line back to the SDE parameters
through the exact transition law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EstimationDomainError
from .sde import PathDataset

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass
class MarginalComparison:
    time: float
    ks: float
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float
    quantiles_a: List[float]
    quantiles_b: List[float]
    bin_edges: np.ndarray
    hist_a: np.ndarray
    hist_b: np.ndarray
    label: str = ""

    def to_json(self) -> dict:
        return {
            "label": self.label, "time": self.time, "ks": self.ks,
            "mean_a": self.mean_a, "mean_b": self.mean_b,
            "var_a": self.var_a, "var_b": self.var_b,
            "mean_delta": self.mean_b - self.mean_a,
            "var_delta": self.var_b - self.var_a,
            "quantile_levels": list(QUANTILES),
            "quantiles_a": self.quantiles_a, "quantiles_b": self.quantiles_b,
            "bin_edges": [float(x) for x in self.bin_edges],
            "hist_a": [int(x) for x in self.hist_a],
            "hist_b": [int(x) for x in self.hist_b],
        }


@dataclass
class EvalReport:
    parameters: Dict[str, Dict[str, float]] = field(default_factory=dict)
    invalid_counts: Dict[str, int] = field(default_factory=dict)
    marginals: List[MarginalComparison] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"parameters": self.parameters,
                "invalid_counts": self.invalid_counts,
                "marginals": [m.to_json() for m in self.marginals]}

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def filter_invalid_gbm(ds: PathDataset) -> Tuple[PathDataset, int]:
    """Drop paths containing values that are invalid for a GBM (<= 0)."""
    if ds.dim != 1:
        raise ConfigError("filter_invalid_gbm: requires 1-d paths")
    with np.errstate(invalid="ignore"):
        bad = np.any(ds.values <= 0.0, axis=(1, 2)) \
            | np.any(~np.isfinite(ds.values), axis=(1, 2))
    keep = np.where(~bad)[0]
    return ds.subset(keep), int(np.sum(bad))


def estimate_gbm(ds: PathDataset, dt: Optional[float] = None
                 ) -> Tuple[float, float]:
    """Pooled log-return estimates of the GBM parameters (mu, sigma)."""
    dt = ds.dt if dt is None else dt
    x = ds.values[:, :, 0]
    if np.any(x <= 0.0):
        raise EstimationDomainError("estimate_gbm: non-positive path values; "
                                    "filter invalid paths first")
    r = np.diff(np.log(x), axis=1).reshape(-1)
    sigma = float(np.sqrt(np.var(r, ddof=1) / dt))
    mu = float(np.mean(r) / dt + 0.5 * sigma ** 2)
    return mu, sigma


def estimate_ou(ds: PathDataset, dt: Optional[float] = None
                ) -> Tuple[float, float, float]:
    """OU parameters (kappa, theta, sigma) via the pooled lag-1 regression
    X_{t+1} = alpha + beta X_t + eps."""
    dt = ds.dt if dt is None else dt
    x = ds.values[:, :, 0]
    if x.shape[1] < 2:
        raise ConfigError("estimate_ou: need at least 2 grid points")
    cur = x[:, :-1].reshape(-1)
    nxt = x[:, 1:].reshape(-1)
    var_cur = np.var(cur)
    if var_cur <= 0:
        raise EstimationDomainError("estimate_ou: degenerate regressor "
                                    "(constant paths)")
    beta = float(np.cov(cur, nxt, ddof=0)[0, 1] / var_cur)
    alpha = float(np.mean(nxt) - beta * np.mean(cur))
    if beta <= 0.0 or beta >= 1.0:
        raise EstimationDomainError(
            f"estimate_ou: regression slope {beta:.6g} outside (0, 1); "
            "mean-reversion rate undefined")
    resid = nxt - (alpha + beta * cur)
    dof = max(len(resid) - 2, 1)
    s = float(np.sqrt(np.sum(resid ** 2) / dof))
    kappa = -np.log(beta) / dt
    theta = alpha / (1.0 - beta)
    sigma = s * np.sqrt(2.0 * kappa) / np.sqrt(1.0 - beta ** 2)
    return float(kappa), float(theta), float(sigma)


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ConfigError("ks_statistic: empty sample")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample rejection threshold c(alpha) sqrt((n+m)/nm)."""
    c = np.sqrt(-0.5 * np.log(alpha / 2.0))
    return float(c * np.sqrt((n + m) / (n * m)))


def _shared_bins(sample: np.ndarray, max_bins: int = 200) -> np.ndarray:
    """Freedman-Diaconis bins over the union sample."""
    lo, hi = float(np.min(sample)), float(np.max(sample))
    if hi <= lo:
        return np.array([lo - 0.5, lo + 0.5])
    q75, q25 = np.percentile(sample, [75, 25])
    iqr = q75 - q25
    width = 2.0 * iqr / sample.size ** (1.0 / 3.0)
    if width <= 0:
        n_bins = int(np.ceil(np.sqrt(sample.size)))
    else:
        n_bins = int(np.ceil((hi - lo) / width))
    n_bins = min(max(n_bins, 1), max_bins)
    return np.linspace(lo, hi, n_bins + 1)


def _column_at(ds: PathDataset, t: float) -> np.ndarray:
    pos = int(round((t - ds.times[0]) / ds.dt))
    if pos < 0 or pos >= ds.n_grid or abs(ds.times[pos] - t) > 1e-9:
        raise ConfigError(f"compare.times: t={t} is not on the dataset grid")
    return ds.values[:, pos, 0]


def compare_marginals(ds_a: PathDataset, ds_b: PathDataset,
                      times: Sequence[float]) -> List[MarginalComparison]:
    """Per-time two-sample comparison of the marginal laws."""
    if ds_a.n_paths == 0 or ds_b.n_paths == 0:
        raise ConfigError("compare_marginals: empty dataset")
    out = []
    for t in times:
        a = _column_at(ds_a, t)
        b = _column_at(ds_b, t)
        edges = _shared_bins(np.concatenate([a, b]))
        out.append(MarginalComparison(
            time=float(t), ks=ks_statistic(a, b),
            mean_a=float(a.mean()), mean_b=float(b.mean()),
            var_a=float(a.var(ddof=1)), var_b=float(b.var(ddof=1)),
            quantiles_a=[float(q) for q in np.quantile(a, QUANTILES)],
            quantiles_b=[float(q) for q in np.quantile(b, QUANTILES)],
            bin_edges=edges,
            hist_a=np.histogram(a, bins=edges)[0],
            hist_b=np.histogram(b, bins=edges)[0]))
    return out
