"""Generative Euler-Maruyama sampling from learned (or exact)
coefficients.

Starting from an observation history, each step queries the drift and
diffusion estimators at the current time, truncates them at the level K,
takes a positive semi-definite square root, draws the Gaussian step, and
appends the new point to the information sequence as a fully observed
observation. Coefficients are held constant within each step.

Paths use independent counter-based noise substreams, so campaigns are
reproducible and exchangeable regardless of batch size. Diverged paths
(non-finite values) are dropped and counted rather than aborting the
campaign.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from . import losses as ls
from .errors import ConfigError, DataError
from .model import InputLayout, ModelCursor, model_checksum
from .sde import ObservationSequence, PathDataset, _draw_path_noise
from .training import ModelBundle
from .util import derive_seed


@dataclass
class GenerationRun:
    """Configuration of one sampling campaign."""

    start_history: ObservationSequence
    delta: float
    truncation: float
    horizon: float
    n_paths: int
    seed: int
    record_estimates: bool = False


@dataclass
class GenerationResult:
    dataset: PathDataset
    n_invalid: int
    info: Dict
    mu_log: Optional[np.ndarray] = None      # (n_steps, n_paths, d)
    sigma_log: Optional[np.ndarray] = None   # (n_steps, n_paths, d, d)


class OracleCoefficients:
    """Exact instantaneous coefficients, bypassing any learning.

    ``mu_fn(t, x) -> (n, d)`` and ``sigma_sq_fn(t, x) -> (n, d, d)`` give
    the drift vector and instantaneous variance matrix per path.
    """

    def __init__(self, mu_fn: Callable, sigma_sq_fn: Callable):
        self.mu_fn = mu_fn
        self.sigma_sq_fn = sigma_sq_fn


def _truncate_batch(mu: np.ndarray, sigma: np.ndarray, level: float
                    ) -> Tuple[np.ndarray, np.ndarray, int, int]:
    """Vectorized elementwise clamp; returns counts of affected paths."""
    mu_k = np.clip(mu, -level, level)
    sigma_k = np.clip(sigma, -level, level)
    n_mu = int(np.sum(np.any(mu_k != mu, axis=-1)))
    n_sigma = int(np.sum(np.any(sigma_k != sigma, axis=(-2, -1))))
    return mu_k, sigma_k, n_mu, n_sigma


def _psd_sqrt_batch(sigma: np.ndarray) -> Tuple[np.ndarray, int]:
    """Batched symmetric PSD square root of (n, d, d) matrices."""
    n, d, _ = sigma.shape
    if d == 1:
        clamped = int(np.sum(sigma < 0.0))
        return np.sqrt(np.clip(sigma, 0.0, None)), clamped
    sym = 0.5 * (sigma + sigma.transpose(0, 2, 1))
    lam, vec = np.linalg.eigh(sym)
    clamped = int(np.sum(lam < 0.0))
    lam = np.maximum(lam, 0.0)
    root = np.einsum("nij,nj,nkj->nik", vec, np.sqrt(lam), vec)
    return root, clamped


def default_truncation_level(obs_list, times: np.ndarray, d: int,
                             factor: float = 10.0) -> float:
    """Truncation surrogate: `factor` times the empirical maximum of the
    quadratic increment quotient over the training observations."""
    layout = InputLayout(d=d, include_z=False)
    tb = ls.build_targets(list(obs_list), times, layout, "instant")
    peak = 0.0
    for cell in tb.cells.values():
        if cell["zq"].size:
            peak = max(peak, float(np.max(np.abs(cell["zq"]))))
        if cell["iq"].size:
            peak = max(peak, float(np.max(np.abs(cell["iq"]))))
    return max(factor * peak, 1.0)


def _start_value(history: ObservationSequence, x_head: Optional[np.ndarray]
                 ) -> np.ndarray:
    """Observed coordinates are taken as observed; missing ones are filled
    with the model's conditional-expectation readout."""
    mask = history.masks[-1]
    if np.all(mask == 1):
        return history.values[-1].copy()
    if x_head is None:
        raise DataError("history ends with missing values; a model with a "
                        "drift head is required to predict the start value")
    return np.where(mask > 0, history.values[-1], x_head)


def generate(source, run: GenerationRun, grid_dt: Optional[float] = None,
             scheme: Optional[str] = None) -> GenerationResult:
    """Run the iterative estimation-and-sampling scheme.

    `source` is either an `OracleCoefficients` (exact instantaneous
    coefficients) or a trained `ModelBundle` whose scheme must match
    `scheme` when given. `grid_dt` is the model's internal evolution step
    (the data grid step); the generation step must be a multiple of it.
    """
    if run.delta <= 0 or run.n_paths < 1:
        raise ConfigError("generate.delta/n_paths: must be positive")
    t_start = float(run.start_history.times[-1])
    n_steps = int(round((run.horizon - t_start) / run.delta))
    if n_steps < 1 or abs(t_start + n_steps * run.delta - run.horizon) > 1e-9:
        raise ConfigError("generate.horizon: must exceed the history end by "
                          "a multiple of delta")
    if run.truncation <= 0:
        raise ConfigError("generate.truncation: level K must be > 0")

    is_oracle = isinstance(source, OracleCoefficients)
    if not is_oracle:
        if not isinstance(source, ModelBundle):
            raise ConfigError("generate.source: expected OracleCoefficients "
                              "or a trained ModelBundle")
        if scheme is not None and scheme != source.scheme:
            raise ConfigError(f"generate.scheme: bundle was trained for "
                              f"{source.scheme!r}, not {scheme!r}")
        scheme = source.scheme
        if grid_dt is None:
            raise ConfigError("generate.grid_dt: required for model sources")
        ratio = run.delta / grid_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("generate.delta: must be a multiple of the "
                              "evaluation grid step")
    instant_flow = is_oracle or ls.scheme_is_instant(scheme)

    n, K = run.n_paths, run.truncation
    d = run.start_history.dim
    eps = _draw_path_noise(derive_seed(run.seed, "generate"), n, n_steps, d)
    sqrt_delta = np.sqrt(run.delta)

    cursors: Dict[str, ModelCursor] = {}
    if not is_oracle:
        for role, params in source.models.items():
            cursors[role] = ModelCursor(params, run.start_history, n, grid_dt)
    x_role = "joint" if "joint" in cursors else "drift"
    z_role = "joint" if "joint" in cursors else "diff"

    def x_readout() -> Optional[np.ndarray]:
        if is_oracle:
            return None
        cur = cursors[x_role]
        return cur.head(cur.readout(), "x")

    def z_factor(outputs_by_role: Dict[str, np.ndarray]) -> np.ndarray:
        cur = cursors[z_role]
        g2 = cur.head(outputs_by_role[z_role], "z")
        return g2.reshape(n, d, d)

    if not np.all(run.start_history.masks[-1] == 1) \
            and (is_oracle or instant_flow):
        # predicting the missing start coordinates needs a conditional-
        # expectation head; instantaneous drift heads predict the
        # increment quotient instead
        raise DataError("starting from an incompletely observed history "
                        "requires a base-family model (its drift head "
                        "predicts the conditional expectation of X)")
    x0_row = _start_value(run.start_history,
                          x_readout()[0] if not is_oracle else None)
    x = np.tile(x0_row, (n, 1))
    values = np.full((n, n_steps + 1, d), np.nan)
    values[:, 0, :] = x
    alive = np.ones(n, dtype=bool)
    mu_log = np.full((n_steps, n, d), np.nan) if run.record_estimates else None
    sigma_log = np.full((n_steps, n, d, d), np.nan) \
        if run.record_estimates else None
    counts = {"truncated_mu": 0, "truncated_sigma": 0,
              "clamped_eigenvalues": 0}

    for m in range(n_steps):
        t = t_start + m * run.delta
        factor = None
        if is_oracle:
            mu = np.asarray(source.mu_fn(t, x), dtype=np.float64).reshape(n, d)
            sigma = np.asarray(source.sigma_sq_fn(t, x),
                               dtype=np.float64).reshape(n, d, d)
        elif instant_flow:
            outs = {role: cur.readout() for role, cur in cursors.items()}
            mu = cursors[x_role].head(outs[x_role], "x")
            g2 = z_factor(outs)
            sigma = np.einsum("nij,nkj->nik", g2, g2)
            factor = g2
        else:
            for cur in cursors.values():
                cur.evolve(run.delta)
            outs = {role: cur.readout() for role, cur in cursors.items()}
            g1_end = cursors[x_role].head(outs[x_role], "x")
            mu = (g1_end - x) / run.delta
            s_end = z_factor(outs)
            sigma = np.einsum("nij,nkj->nik", s_end, s_end) / run.delta

        mu_k, sigma_k, n_mu, n_sig = _truncate_batch(mu, sigma, K)
        counts["truncated_mu"] += n_mu
        counts["truncated_sigma"] += n_sig
        if factor is not None and n_sig == 0:
            root = factor
        else:
            root, clamped = _psd_sqrt_batch(sigma_k)
            counts["clamped_eigenvalues"] += clamped
        if run.record_estimates:
            mu_log[m] = mu_k
            sigma_log[m] = sigma_k
        with np.errstate(over="ignore", invalid="ignore"):
            step = mu_k * run.delta \
                + np.einsum("nij,nj->ni", root, eps[:, m, :]) * sqrt_delta
            x = x + step
        ok = np.isfinite(x).all(axis=1)
        alive &= ok
        x[~alive] = 0.0  # frozen; their recorded values stay NaN
        values[alive, m + 1, :] = x[alive]
        if not is_oracle:
            if instant_flow:
                for cur in cursors.values():
                    cur.evolve(run.delta)
            for cur in cursors.values():
                cur.jump(x)

    keep = np.where(alive)[0]
    times = t_start + np.arange(n_steps + 1) * run.delta
    ds = PathDataset(times=times, values=values[keep], dt=run.delta,
                     seed=run.seed, spec=None,
                     source_indices=keep.astype(np.int64))
    info = {"n_invalid": int(n - len(keep)), "delta": run.delta,
            "truncation": K, "seed": run.seed, "scheme": scheme,
            "t_start": t_start, **counts}
    if not is_oracle:
        info["model_checksums"] = {role: model_checksum(p)
                                   for role, p in source.models.items()}
    return GenerationResult(
        dataset=ds, n_invalid=info["n_invalid"], info=info,
        mu_log=mu_log[:, keep] if mu_log is not None else None,
        sigma_log=sigma_log[:, keep] if sigma_log is not None else None)


def generate_continuations(source, history: ObservationSequence,
                           n_paths: int, delta: float, truncation: float,
                           horizon: float, seed: int,
                           grid_dt: Optional[float] = None,
                           scheme: Optional[str] = None) -> GenerationResult:
    """Continuations conditioning on a shared observation history: every
    path sees identical past observations but fresh noise."""
    run = GenerationRun(start_history=history, delta=delta,
                        truncation=truncation, horizon=horizon,
                        n_paths=n_paths, seed=seed)
    return generate(source, run, grid_dt=grid_dt, scheme=scheme)


def save_generated(result: GenerationResult, out_dir: str) -> None:
    """Dataset files plus ``gen_meta.json`` (delta, K, scheme, model
    checksum, seed, invalid count)."""
    from .sde import save_dataset

    save_dataset(result.dataset, out_dir,
                 extra_meta={"t_start": result.info["t_start"]})
    with open(os.path.join(out_dir, "gen_meta.json"), "w") as fh:
        json.dump(result.info, fh, indent=2, sort_keys=True)
        fh.write("\n")
