"""Declarative run configuration: one JSON document drives the whole
pipeline (simulate, train, generate, evaluate, plot).

Validation errors always name the offending field. Command-line flags
override config fields, and the ITOGEN_SEED environment variable
overrides the global seed. All randomness is derived from the global
seed per pipeline stage; no implicit entropy is ever used.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Optional

import numpy as np

from .errors import ConfigError
from .losses import SCHEMES
from .sde import SdeSpec

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/out",
    "threads": 1,
    "sde": {
        "kind": "gbm",
        "params": {"mu": 2.0, "sigma": 0.3},
        "x0": [1.0],
        "dim": 1,
    },
    "sim": {"T": 1.0, "dt": 0.01, "n_paths": 20000},
    "observe": {"p": 0.1, "coord_probs": None},
    "split": {"fraction": 0.8},
    "train": {
        "scheme": "joint-instant",
        "epochs": 200,
        "batch_size": 200,
        "lr": 0.001,
        "betas": [0.9, 0.999],
        "weight_decay": 0.0005,
        "dropout": 0.1,
        "latent_dim": 100,
        "hidden": 50,
        "n_sub": 1,
        "long_term_training": False,
        "long_term_keep": 0.1,
    },
    "generate": {
        "delta": 0.01,
        "n_paths": 5000,
        "horizon": 1.0,
        "truncation": None,       # null: 10x the training quotient maximum
        "record_estimates": False,
    },
    "evaluate": {"times": [0.5, 1.0]},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown configuration field")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _require(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {message}")


class RunConfig:
    """Validated configuration document."""

    def __init__(self, doc: Optional[dict] = None):
        self.doc = _merge(DEFAULT_CONFIG, doc or {})
        self.validate()

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config: file not found: {path}")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"config: invalid JSON: {err}") from err
        return cls(doc)

    def override(self, *, seed: Optional[int] = None,
                 out_dir: Optional[str] = None,
                 scheme: Optional[str] = None,
                 threads: Optional[int] = None) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        env_seed = os.environ.get("ITOGEN_SEED")
        if env_seed is not None:
            try:
                doc["seed"] = int(env_seed)
            except ValueError as err:
                raise ConfigError("ITOGEN_SEED: must be an integer") from err
        if seed is not None:
            doc["seed"] = seed
        if out_dir is not None:
            doc["out_dir"] = out_dir
        if scheme is not None:
            doc["train"]["scheme"] = scheme
        if threads is not None:
            doc["threads"] = threads
        return RunConfig(doc)

    def validate(self) -> None:
        d = self.doc
        _require(isinstance(d["seed"], int) and d["seed"] >= 0, "seed",
                 "must be a nonnegative integer")
        _require(isinstance(d["threads"], int) and d["threads"] >= 1,
                 "threads", "must be a positive integer")
        sde = d["sde"]
        _require(sde["kind"] in ("gbm", "ou", "custom"), "sde.kind",
                 f"unknown kind {sde['kind']!r}")
        _require(len(sde["x0"]) == sde["dim"], "sde.x0",
                 f"needs {sde['dim']} entries")
        sim = d["sim"]
        _require(sim["T"] > 0 and sim["dt"] > 0, "sim.T", "T and dt must be "
                 "positive")
        _require(sim["n_paths"] >= 2, "sim.n_paths", "need at least 2 paths")
        _require(0.0 <= d["observe"]["p"] <= 1.0, "observe.p",
                 "probability must be in [0, 1]")
        _require(0.0 < d["split"]["fraction"] < 1.0, "split.fraction",
                 "must be in (0, 1)")
        tr = d["train"]
        _require(tr["scheme"] in SCHEMES, "train.scheme",
                 f"must be one of {SCHEMES}")
        _require(tr["epochs"] >= 0, "train.epochs", "must be >= 0")
        _require(tr["batch_size"] >= 1, "train.batch_size", "must be >= 1")
        gen = d["generate"]
        _require(gen["delta"] > 0, "generate.delta", "must be > 0")
        _require(gen["n_paths"] >= 1, "generate.n_paths", "must be >= 1")
        _require(0 < gen["horizon"] <= sim["T"] + 1e-12, "generate.horizon",
                 "must be in (0, sim.T]")
        if gen["truncation"] is not None:
            _require(gen["truncation"] > 0, "generate.truncation",
                     "must be > 0 when given")
        for t in d["evaluate"]["times"]:
            _require(0.0 <= t <= sim["T"], "evaluate.times",
                     f"time {t} outside [0, T]")

    def sde_spec(self) -> SdeSpec:
        sde = self.doc["sde"]
        return SdeSpec(kind=sde["kind"], params=dict(sde["params"]),
                       x0=np.asarray(sde["x0"], dtype=np.float64),
                       dim=int(sde["dim"]))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def __getitem__(self, key: str):
        return self.doc[key]
