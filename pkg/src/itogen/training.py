"""Mini-batch training loop: Adam with decoupled weight decay, dropout,
optional long-prediction-window augmentation, validation-based model
selection with an early-stopping floor, and checkpointing.

Schemes map to model roles as follows. Joint schemes train one model with
two heads on a shared latent state; separate schemes train two
independent models (drift, then diffusion). The squared-increment input
channel is enabled exactly for the models whose diffusion target jumps to
zero at observations (the base family).
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import model as mdl
from . import nn
from .errors import (ConfigError, DataError, SimulationDivergenceError,
                     TrainingDivergenceError)
from .sde import ObservationSequence
from .util import derive_seed, path_rng


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the reference experimental setup."""

    scheme: str = "joint-instant"
    epochs: int = 200
    batch_size: int = 200
    lr: float = 0.001
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0005
    dropout: float = 0.1
    latent_dim: int = 100
    hidden: int = 50
    n_sub: int = 1
    long_term_training: bool = False
    long_term_keep: float = 0.1
    stop_bias_grad: bool = True
    seed: int = 0
    eval_batch_size: int = 1000

    def __post_init__(self):
        ls.validate_scheme(self.scheme)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs/batch_size: must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout: rate must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr/weight_decay: must be >= 0")

    def early_stop_floors(self) -> Tuple[int, int]:
        """(trigger, floor): when the best validation epoch falls before
        `trigger`, selection is restricted to epochs >= `floor`. The
        reference rule is (90, 100) at 200 epochs; shorter runs scale the
        floors proportionally."""
        return (int(round(0.45 * self.epochs)), int(round(0.5 * self.epochs)))


@dataclass
class ModelBundle:
    """Trained model(s) for one scheme."""

    scheme: str
    models: Dict[str, mdl.NjodeParams]   # {"joint": m} or {"drift": m, "diff": m}
    meta: dict = field(default_factory=dict)

    def roles(self) -> List[str]:
        return list(self.models.keys())


def roles_for_scheme(scheme: str) -> List[Tuple[str, Tuple[str, ...], bool]]:
    """(role, heads, include_z) per model the scheme trains."""
    if ls.scheme_is_joint(scheme):
        return [("joint", ("x", "z"), not ls.scheme_is_instant(scheme))]
    return [("drift", ("x",), False),
            ("diff", ("z",), not ls.scheme_is_instant(scheme))]


def init_bundle(config: TrainConfig, d: int) -> ModelBundle:
    models = {}
    for role, heads, include_z in roles_for_scheme(config.scheme):
        rng = np.random.default_rng(derive_seed(config.seed, f"init:{role}"))
        models[role] = mdl.init_njode(
            rng, d=d, heads=heads, latent_dim=config.latent_dim,
            hidden=config.hidden, include_z=include_z)
    return ModelBundle(scheme=config.scheme, models=models,
                       meta={"seed": config.seed})


def head_outputs(params: mdl.NjodeParams, records: List[mdl.CellRecord]
                 ) -> Dict[str, Dict[int, Tuple]]:
    """Slice sweep records into per-head {cell: (pre, post)} maps."""
    out: Dict[str, Dict[int, Tuple]] = {h: {} for h in params.heads}
    for rec in records:
        for h in params.heads:
            sl = params.head_slice(h)
            out[h][rec.cell] = (
                ad.slice_cols(rec.g_pre, sl.start, sl.stop),
                ad.slice_cols(rec.g_post, sl.start, sl.stop))
    return out


def role_loss(scheme: str, role: str, tb: ls.TargetBatch,
              outputs: Dict[str, Dict[int, Tuple]],
              stop_bias_grad: bool = True):
    if role == "joint":
        return ls.joint_loss(tb, outputs["x"], outputs["z"], stop_bias_grad)
    if role == "drift":
        return ls.drift_loss(tb, outputs["x"])
    return ls.diffusion_loss(tb, outputs["z"])


def _eval_loss(params: mdl.NjodeParams, scheme: str, role: str,
               cached: List[Tuple[mdl.ObsBatch, ls.TargetBatch]],
               n_sub: int) -> float:
    total, weight = 0.0, 0
    for batch, tb in cached:
        if tb.n_valid == 0:
            continue
        records, *_ = mdl.sweep(params, batch, graph=False, n_sub=n_sub)
        outputs = head_outputs(params, records)
        total += float(role_loss(scheme, role, tb, outputs)) * tb.n_valid
        weight += tb.n_valid
    return total / max(weight, 1)


def select_epoch(valid_losses: Sequence[float], trigger: int,
                 floor: int) -> int:
    """Best-validation model selection with the early-stopping floor.

    Returns the 1-based epoch whose weights are retained: the overall
    validation minimum, unless that minimum falls before `trigger`, in
    which case selection is restricted to epochs >= `floor`.
    """
    losses = np.asarray(valid_losses, dtype=np.float64)
    if losses.size == 0:
        return 0
    finite = np.where(np.isfinite(losses), losses, np.inf)
    best = int(np.argmin(finite)) + 1
    if best < trigger and floor <= losses.size:
        restricted = finite[floor - 1:]
        if np.any(np.isfinite(restricted)):
            best = int(np.argmin(restricted)) + floor
    return best


def augment_longterm(obs_batch: Sequence[ObservationSequence], seed: int,
                     keep_prob: float = 0.1) -> List[ObservationSequence]:
    """Sub-sample dense observation sequences to create long prediction
    windows. Only sequences observing every grid cell are touched;
    already-sparse sequences pass through unchanged. The origin is always
    kept."""
    if not 0.0 <= keep_prob <= 1.0:
        raise ConfigError("train.long_term_keep: must be in [0, 1]")
    out = []
    for i, seq in enumerate(obs_batch):
        dense = seq.n_obs + 1 == seq.time_indices[-1] + 1 \
            and seq.n_obs == seq.time_indices[-1]
        if not dense or keep_prob >= 1.0:
            out.append(seq)
            continue
        rng = path_rng(derive_seed(seed, "longterm"), i)
        keep = rng.random(seq.n_obs) < keep_prob
        sel = np.concatenate([[0], np.where(keep)[0] + 1])
        out.append(ObservationSequence(
            time_indices=seq.time_indices[sel], times=seq.times[sel],
            values=seq.values[sel], masks=seq.masks[sel]))
    return out


@dataclass
class EpochLog:
    role: str
    epoch: int
    train_loss: float
    valid_loss: float
    wall_time: float


def write_train_log(rows: List[EpochLog], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "valid_loss", "wall_time"])
        for r in rows:
            writer.writerow([r.epoch, "%.17g" % r.train_loss,
                             "%.17g" % r.valid_loss, "%.3f" % r.wall_time])


def _train_one_role(config: TrainConfig, role: str, params: mdl.NjodeParams,
                    layout: mdl.InputLayout,
                    train_obs: Sequence[ObservationSequence],
                    valid_obs: Sequence[ObservationSequence],
                    times: np.ndarray,
                    progress: Optional[callable] = None
                    ) -> Tuple[mdl.NjodeParams, List[EpochLog], int]:
    scheme = config.scheme
    arrays = params.param_arrays()
    adam = nn.AdamState.for_params(arrays, lr=config.lr, betas=config.betas,
                                   weight_decay=config.weight_decay)
    valid_cached = []
    for s in range(0, len(valid_obs), config.eval_batch_size):
        chunk = list(valid_obs[s:s + config.eval_batch_size])
        batch = mdl.prepare_batch(chunk, times, layout)
        valid_cached.append((batch, ls.build_targets(batch, times, layout,
                                                     scheme)))
    logs: List[EpochLog] = []
    valid_losses: List[float] = []
    snapshots: Dict[int, List[np.ndarray]] = {}
    best_any = (np.inf, 0)
    best_floored = (np.inf, 0)
    trigger, floor = config.early_stop_floors()
    start = time.monotonic()
    n_train = len(train_obs)
    aborted = False
    prepared = mdl.prepare_paths(train_obs, layout)
    for epoch in range(1, config.epochs + 1):
        epoch_prepared = prepared
        if config.long_term_training:
            epoch_obs = augment_longterm(
                train_obs, derive_seed(config.seed, f"augment:{epoch}"),
                config.long_term_keep)
            epoch_prepared = mdl.prepare_paths(epoch_obs, layout)
        order = path_rng(derive_seed(config.seed, "shuffle"),
                         epoch).permutation(n_train)
        train_total, train_weight = 0.0, 0
        try:
            for b, s0 in enumerate(range(0, n_train, config.batch_size)):
                idx = order[s0:s0 + config.batch_size]
                batch = mdl.assemble_batch(epoch_prepared, idx, times, layout)
                tb = ls.build_targets(batch, times, layout, scheme)
                if tb.n_valid == 0:
                    continue
                drop_rng = path_rng(
                    derive_seed(config.seed, f"dropout:{role}:{epoch}"), b)
                records, ctx, _, _ = mdl.sweep(
                    params, batch, graph=True, dropout_rate=config.dropout,
                    dropout_rng=drop_rng, n_sub=config.n_sub)
                outputs = head_outputs(params, records)
                loss = role_loss(scheme, role, tb, outputs,
                                 config.stop_bias_grad)
                loss_val = float(ad.value_of(loss))
                if not np.isfinite(loss_val):
                    raise TrainingDivergenceError(
                        f"non-finite training loss at epoch {epoch}")
                ad.backward(loss)
                grads = [leaf.grad if leaf.grad is not None
                         else np.zeros_like(leaf.value)
                         for leaf in ctx.leaves]
                nn.adam_step(adam, arrays, grads)
                train_total += loss_val * tb.n_valid
                train_weight += tb.n_valid
        except (TrainingDivergenceError, SimulationDivergenceError):
            aborted = True
        try:
            valid_loss = _eval_loss(params, scheme, role, valid_cached,
                                    config.n_sub)
        except SimulationDivergenceError:
            aborted = True
            valid_loss = np.inf
        train_loss = train_total / max(train_weight, 1)
        valid_losses.append(valid_loss)
        logs.append(EpochLog(role=role, epoch=epoch, train_loss=train_loss,
                             valid_loss=valid_loss,
                             wall_time=time.monotonic() - start))
        if np.isfinite(valid_loss):
            if valid_loss < best_any[0]:
                best_any = (valid_loss, epoch)
                snapshots[epoch] = params.copy_arrays()
            if epoch >= floor and valid_loss < best_floored[0]:
                best_floored = (valid_loss, epoch)
                snapshots[epoch] = params.copy_arrays()
        if progress is not None:
            progress(role, epoch, train_loss, valid_loss)
        if aborted:
            break
    if config.epochs == 0 or not valid_losses:
        return params, logs, 0
    if not np.isfinite(best_any[0]):
        raise TrainingDivergenceError("training diverged before any usable "
                                      "checkpoint")
    chosen = select_epoch(valid_losses, trigger, floor)
    if chosen not in snapshots:
        chosen = best_any[1]
    params.set_param_arrays(snapshots[chosen])
    return params, logs, chosen


def train(config: TrainConfig,
          train_obs: Sequence[ObservationSequence],
          valid_obs: Sequence[ObservationSequence],
          times: np.ndarray, d: int,
          progress: Optional[callable] = None
          ) -> Tuple[ModelBundle, List[EpochLog]]:
    """Train the scheme's model(s); returns the bundle holding the
    best-validation-epoch weights and the per-epoch log."""
    if len(train_obs) == 0 or len(valid_obs) == 0:
        raise DataError("training and validation sets must be nonempty")
    bundle = init_bundle(config, d)
    all_logs: List[EpochLog] = []
    best_epochs = {}
    for role, params in bundle.models.items():
        params, logs, best_epoch = _train_one_role(
            config, role, params, params.layout, train_obs, valid_obs,
            times, progress)
        all_logs.extend(logs)
        best_epochs[role] = best_epoch
    bundle.meta.update({
        "scheme": config.scheme,
        "best_epochs": best_epochs,
        "epochs": config.epochs,
        "seed": config.seed,
    })
    return bundle, all_logs


# ---------------------------------------------------------------------------
# bundle persistence

def save_bundle(bundle: ModelBundle, out_dir: str,
                extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"scheme": bundle.scheme, "roles": bundle.roles(),
                "meta": bundle.meta}
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "bundle.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for role, params in bundle.models.items():
        mdl.save_model(params, os.path.join(out_dir, role),
                       extra={"role": role,
                              "training_step": bundle.meta.get(
                                  "best_epochs", {}).get(role, 0),
                              "seed": bundle.meta.get("seed", 0)})


def load_bundle(in_dir: str) -> ModelBundle:
    manifest_path = os.path.join(in_dir, "bundle.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing checkpoint bundle: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    models = {}
    for role in manifest["roles"]:
        params, _ = mdl.load_model(os.path.join(in_dir, role))
        models[role] = params
    return ModelBundle(scheme=manifest["scheme"], models=models,
                       meta=manifest.get("meta", {}))
