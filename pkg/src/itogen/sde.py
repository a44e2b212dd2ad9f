"""Synthetic Ito-process datasets on a regular grid, plus the random
observation framework (irregular times, missing values).

Paths are sampled with the explicit Euler scheme
``X_{s+dt} = X_s + mu(s, X_s) dt + sigma(s, X_s) sqrt(dt) eps``.
Exact-transition samplers for GBM and OU are provided for oracle tests
only; the data pipeline always uses the Euler scheme.

Grid arithmetic uses integer step indices (times are ``index * dt``) so
grid-membership checks never suffer floating-point drift. Every path owns
a counter-based RNG substream keyed by ``(seed, path index)``, making
parallel generation order-independent.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, SimulationDivergenceError
from .util import derive_seed, path_rng, run_chunked

FLOAT_FMT = "%.17g"

KINDS = ("gbm", "ou", "custom")

# drift(t, X) and diagonal diffusion(t, X), both (n, d) -> (n, d)
_CUSTOM_KINDS: Dict[str, Tuple[Callable, Callable]] = {}


def register_custom_sde(name: str, drift: Callable, diffusion: Callable) -> None:
    """Register coefficient functions for ``SdeSpec(kind='custom', ...)``
    with ``params={'name': name}``."""
    _CUSTOM_KINDS[name] = (drift, diffusion)


@dataclass
class SdeSpec:
    """Which process to simulate and with what parameters.

    GBM params: ``mu`` (per unit time), ``sigma`` (per sqrt-time).
    OU params: ``kappa`` (> 0, per unit time), ``theta`` (level),
    ``sigma`` (per sqrt-time).
    """

    kind: str
    params: Dict[str, float]
    x0: np.ndarray
    dim: int = 1

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in KINDS:
            raise ConfigError(f"sde.kind: unknown kind {self.kind!r}")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if self.x0.shape != (self.dim,):
            raise ConfigError(f"sde.x0: expected {self.dim} entries, "
                              f"got shape {self.x0.shape}")
        if not np.all(np.isfinite(self.x0)):
            raise ConfigError("sde.x0: entries must be finite")
        if self.kind == "gbm":
            if self.params.get("sigma", 0.0) < 0:
                raise ConfigError("sde.params.sigma: must be >= 0")
            if "mu" not in self.params:
                raise ConfigError("sde.params.mu: required for GBM")
        elif self.kind == "ou":
            if self.params.get("kappa", 0.0) <= 0:
                raise ConfigError("sde.params.kappa: must be > 0")
            if self.params.get("sigma", 0.0) < 0:
                raise ConfigError("sde.params.sigma: must be >= 0")
            if "theta" not in self.params:
                raise ConfigError("sde.params.theta: required for OU")
        else:
            if self.params.get("name") not in _CUSTOM_KINDS:
                raise ConfigError("sde.params.name: custom kind not registered")

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.kind == "gbm":
            return self.params["mu"] * x
        if self.kind == "ou":
            return self.params["kappa"] * (self.params["theta"] - x)
        return _CUSTOM_KINDS[self.params["name"]][0](t, x)

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        """Diagonal diffusion loading, same shape as ``x``."""
        if self.kind == "gbm":
            return self.params["sigma"] * x
        if self.kind == "ou":
            return np.full_like(x, self.params["sigma"])
        return _CUSTOM_KINDS[self.params["name"]][1](t, x)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params),
                "x0": self.x0.tolist(), "dim": self.dim}

    @classmethod
    def from_json(cls, obj: dict) -> "SdeSpec":
        return cls(kind=obj["kind"], params=dict(obj["params"]),
                   x0=np.asarray(obj["x0"], dtype=np.float64),
                   dim=int(obj["dim"]))


@dataclass
class PathDataset:
    """A batch of sample paths on a shared regular grid.

    ``values`` has shape (n_paths, n_grid, d) with ``values[:, 0, :]``
    equal to the initial condition for simulated datasets.
    """

    times: np.ndarray
    values: np.ndarray
    dt: float
    seed: int
    spec: Optional[SdeSpec] = None
    source_indices: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_grid(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def T(self) -> float:
        return float((self.n_grid - 1) * self.dt)

    def subset(self, idx: np.ndarray) -> "PathDataset":
        src = self.source_indices[idx] if self.source_indices is not None \
            else np.asarray(idx, dtype=np.int64)
        return PathDataset(times=self.times, values=self.values[idx],
                           dt=self.dt, seed=self.seed, spec=self.spec,
                           source_indices=src)


@dataclass
class ObservationSequence:
    """The information sequence of one path: ordered (time, values, mask).

    The first observation is always the initial time with a full mask.
    ``values`` holds the raw path values at the observed grid points;
    masked-out coordinates must be read through ``masks``.
    """

    time_indices: np.ndarray
    times: np.ndarray
    values: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.time_indices = np.asarray(self.time_indices, dtype=np.int64)
        if self.time_indices.size == 0 or self.time_indices[0] != 0:
            raise DataError("observation sequence must start at the grid origin")
        if np.any(np.diff(self.time_indices) <= 0):
            raise DataError("observation times must be strictly increasing")
        if not np.all(self.masks[0] == 1):
            raise DataError("initial observation must have a full mask")

    @property
    def n_obs(self) -> int:
        """Observations after the initial time (the loss denominator)."""
        return len(self.time_indices) - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def tau(self, t: float) -> float:
        """Last observation time <= t."""
        pos = np.searchsorted(self.times, t, side="right") - 1
        if pos < 0:
            raise ValueError(f"no observation at or before t={t}")
        return float(self.times[pos])

    def kappa(self, t: float) -> int:
        """Number of observations with time <= t."""
        return int(np.searchsorted(self.times, t, side="right"))

    def truncated(self, t: float) -> "ObservationSequence":
        """Observations up to and including time t."""
        k = self.kappa(t)
        if k == 0:
            raise ValueError(f"no observation at or before t={t}")
        return ObservationSequence(self.time_indices[:k], self.times[:k],
                                   self.values[:k], self.masks[:k])


# ---------------------------------------------------------------------------
# simulation

def _grid(T: float, dt: float) -> np.ndarray:
    if dt <= 0 or T <= 0:
        raise ConfigError("sim.dt and sim.T must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ConfigError(f"sim.T: horizon {T} is not an integer multiple "
                          f"of dt {dt}")
    return np.arange(n_steps + 1, dtype=np.float64) * dt


def _draw_path_noise(seed: int, n_paths: int, n_steps: int, d: int,
                     threads: int = 1) -> np.ndarray:
    eps = np.empty((n_paths, n_steps, d), dtype=np.float64)

    def fill(start: int, stop: int) -> None:
        for i in range(start, stop):
            eps[i] = path_rng(seed, i).standard_normal((n_steps, d))

    run_chunked(fill, n_paths, threads)
    return eps


def simulate(spec: SdeSpec, T: float, dt: float, n_paths: int, seed: int,
             threads: int = 1) -> PathDataset:
    """Euler-scheme sample paths; reproducible given the seed."""
    if n_paths < 1:
        raise ConfigError("sim.n_paths: must be >= 1")
    times = _grid(T, dt)
    n_steps = len(times) - 1
    d = spec.dim
    eps = _draw_path_noise(seed, n_paths, n_steps, d, threads)
    values = np.empty((n_paths, n_steps + 1, d), dtype=np.float64)
    values[:, 0, :] = spec.x0
    sqrt_dt = np.sqrt(dt)
    x = values[:, 0, :].copy()
    for k in range(n_steps):
        t = times[k]
        x = x + spec.drift(t, x) * dt + spec.diffusion(t, x) * sqrt_dt * eps[:, k, :]
        if not np.all(np.isfinite(x)):
            bad = np.where(~np.isfinite(x).all(axis=1))[0]
            raise SimulationDivergenceError(
                f"non-finite value at step {k + 1} (t={times[k + 1]:g}) "
                f"on path {int(bad[0])}")
        values[:, k + 1, :] = x
    return PathDataset(times=times, values=values, dt=dt, seed=seed, spec=spec)


def simulate_exact_gbm(mu: float, sigma: float, x0: np.ndarray, T: float,
                       dt: float, n_paths: int, seed: int) -> PathDataset:
    """Exact-transition GBM sampler (oracle tests only)."""
    times = _grid(T, dt)
    n_steps = len(times) - 1
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    d = x0.shape[0]
    eps = _draw_path_noise(seed, n_paths, n_steps, d)
    incr = (mu - 0.5 * sigma ** 2) * dt + sigma * np.sqrt(dt) * eps
    log_paths = np.concatenate(
        [np.zeros((n_paths, 1, d)), np.cumsum(incr, axis=1)], axis=1)
    values = x0 * np.exp(log_paths)
    spec = SdeSpec(kind="gbm", params={"mu": mu, "sigma": sigma}, x0=x0, dim=d)
    return PathDataset(times=times, values=values, dt=dt, seed=seed, spec=spec)


def simulate_exact_ou(kappa: float, theta: float, sigma: float,
                      x0: np.ndarray, T: float, dt: float, n_paths: int,
                      seed: int) -> PathDataset:
    """Exact-transition OU sampler (oracle tests only)."""
    times = _grid(T, dt)
    n_steps = len(times) - 1
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    d = x0.shape[0]
    eps = _draw_path_noise(seed, n_paths, n_steps, d)
    a = np.exp(-kappa * dt)
    noise_sd = sigma * np.sqrt((1.0 - np.exp(-2.0 * kappa * dt)) / (2.0 * kappa))
    values = np.empty((n_paths, n_steps + 1, d), dtype=np.float64)
    values[:, 0, :] = x0
    for k in range(n_steps):
        values[:, k + 1, :] = (values[:, k, :] * a + theta * (1.0 - a)
                               + noise_sd * eps[:, k, :])
    spec = SdeSpec(kind="ou",
                   params={"kappa": kappa, "theta": theta, "sigma": sigma},
                   x0=x0, dim=d)
    return PathDataset(times=times, values=values, dt=dt, seed=seed, spec=spec)


# ---------------------------------------------------------------------------
# observation framework

def observe(ds: PathDataset, p: float, seed: int,
            coord_probs: Optional[Sequence[float]] = None
            ) -> List[ObservationSequence]:
    """Random observation times and masks for every path.

    Each grid time after the origin is included independently with
    probability ``p``; the origin is always observed with a full mask.
    With ``coord_probs`` given, each coordinate of a selected observation
    is kept with its own probability (times whose mask comes out all-zero
    are dropped); by default all coordinates are observed jointly.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError("observe.p: probability must be in [0, 1]")
    d = ds.dim
    if coord_probs is not None and len(coord_probs) != d:
        raise ConfigError("observe.coord_probs: need one probability per "
                          "coordinate")
    out: List[ObservationSequence] = []
    n_inner = ds.n_grid - 1
    for i in range(ds.n_paths):
        rng = path_rng(derive_seed(seed, "observe"), i)
        draws = rng.random(n_inner)
        picked = np.where(draws < p)[0] + 1
        if coord_probs is None:
            masks = np.ones((len(picked), d))
        else:
            masks = (rng.random((len(picked), d))
                     < np.asarray(coord_probs)).astype(np.float64)
            nonzero = masks.any(axis=1)
            picked, masks = picked[nonzero], masks[nonzero]
        idx = np.concatenate([[0], picked]).astype(np.int64)
        full_masks = np.concatenate([np.ones((1, d)), masks], axis=0)
        out.append(ObservationSequence(
            time_indices=idx, times=ds.times[idx],
            values=ds.values[i, idx, :], masks=full_masks))
    return out


def split(ds: PathDataset, fraction: float, seed: int
          ) -> Tuple[PathDataset, PathDataset]:
    """Disjoint train/validation split by path index after a seeded
    shuffle; original path order is preserved inside each part."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("split.fraction: must be in (0, 1)")
    rng = path_rng(derive_seed(seed, "split"), 0)
    perm = rng.permutation(ds.n_paths)
    n_train = int(round(ds.n_paths * fraction))
    n_train = min(max(n_train, 1), ds.n_paths - 1)
    train_idx = np.sort(perm[:n_train])
    valid_idx = np.sort(perm[n_train:])
    return ds.subset(train_idx), ds.subset(valid_idx)


# ---------------------------------------------------------------------------
# dataset file format

def save_dataset(ds: PathDataset, out_dir: str,
                 obs: Optional[List[ObservationSequence]] = None,
                 extra_meta: Optional[dict] = None) -> None:
    """Write ``meta.json`` + ``paths.csv`` (+ ``obs.csv``) to a directory.

    Floats are serialized with 17 significant digits so reloading is
    bit-exact.
    """
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "T": ds.T, "dt": ds.dt, "seed": int(ds.seed),
        "n_paths": int(ds.n_paths), "d": int(ds.dim),
        "spec": ds.spec.to_json() if ds.spec is not None else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    d = ds.dim
    with open(os.path.join(out_dir, "paths.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "time_index"]
                        + [f"coord_{j}" for j in range(d)])
        for i in range(ds.n_paths):
            vals = ds.values[i]
            for k in range(ds.n_grid):
                writer.writerow([i, k] + [FLOAT_FMT % v for v in vals[k]])
    if obs is not None:
        if len(obs) != ds.n_paths:
            raise DataError("obs list length does not match dataset paths")
        with open(os.path.join(out_dir, "obs.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "time_index"]
                            + [f"mask_{j}" for j in range(d)])
            for i, seq in enumerate(obs):
                for k, m in zip(seq.time_indices, seq.masks):
                    writer.writerow([i, int(k)] + [int(b) for b in m])


def load_dataset(in_dir: str
                 ) -> Tuple[PathDataset, Optional[List[ObservationSequence]]]:
    """Read a dataset directory written by ``save_dataset``."""
    meta_path = os.path.join(in_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"missing dataset metadata: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    dt = float(meta["dt"])
    t_start = float(meta.get("t_start", 0.0))
    n_paths, d = int(meta["n_paths"]), int(meta["d"])
    n_grid = int(round(float(meta["T"]) / dt)) + 1
    values = np.full((n_paths, n_grid, d), np.nan)
    with open(os.path.join(in_dir, "paths.csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, k = int(row[0]), int(row[1])
            values[i, k, :] = [float(v) for v in row[2:2 + d]]
    if np.any(np.isnan(values)):
        raise DataError("paths.csv does not cover the full grid")
    spec = SdeSpec.from_json(meta["spec"]) if meta.get("spec") else None
    times = t_start + np.arange(n_grid, dtype=np.float64) * dt
    ds = PathDataset(times=times, values=values, dt=dt,
                     seed=int(meta["seed"]), spec=spec)
    obs_path = os.path.join(in_dir, "obs.csv")
    obs = None
    if os.path.exists(obs_path):
        per_path: List[List[Tuple[int, np.ndarray]]] = [[] for _ in range(n_paths)]
        with open(obs_path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                i, k = int(row[0]), int(row[1])
                per_path[i].append((k, np.array([float(b) for b in row[2:2 + d]])))
        obs = []
        for i, entries in enumerate(per_path):
            entries.sort(key=lambda e: e[0])
            idx = np.array([e[0] for e in entries], dtype=np.int64)
            masks = np.stack([e[1] for e in entries])
            obs.append(ObservationSequence(
                time_indices=idx, times=times[idx],
                values=values[i, idx, :], masks=masks))
    return ds, obs
