"""The Input-Output Neural Jump ODE.

A latent state H evolves between observations by a learned vector field
(explicit Euler substeps) and jumps through a learned encoder whenever an
observation arrives; a decoder reads out the prediction G at any time.
Three networks: encoder rho, vector field f, decoder g. The encoder is
recurrent (it sees the pre-jump latent state) and encoder/decoder each
carry a linear skip path.

Observation features are laid out as
``[X_imputed (d), mask (d), (z, d*d, optional), t, t - tau]`` where
missing coordinates are imputed with the last observed value and flagged
through the mask channel. Models predicting the squared-increment channel
additionally receive that channel as an input, which is the constant 0 at
observation times (the process jumps to 0 there).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DataError, SimulationDivergenceError
from .sde import ObservationSequence


@dataclass
class InputLayout:
    """Which channels feed the model and their widths."""

    d: int
    include_z: bool = False

    @property
    def static_dim(self) -> int:
        return 2 * self.d + (self.d * self.d if self.include_z else 0)

    @property
    def feature_dim(self) -> int:
        # static block plus the two time channels (t, t - tau)
        return self.static_dim + 2


@dataclass
class NjodeParams:
    """Weights and architecture metadata of one NJODE instance.

    ``heads`` lists the output blocks in order: "x" is a d-dimensional
    conditional-expectation head, "z" a d*d head whose Gram square is the
    squared-increment prediction. Joint models carry both heads on one
    latent state.
    """

    encoder: nn.MlpParams
    vector_field: nn.MlpParams
    decoder: nn.MlpParams
    latent_dim: int
    layout: InputLayout
    heads: Tuple[str, ...]
    encoder_skip: Optional[np.ndarray] = None
    decoder_skip: Optional[np.ndarray] = None
    recurrent_encoder: bool = True

    def __post_init__(self):
        d = self.layout.d
        enc_in = (self.latent_dim if self.recurrent_encoder else 0) \
            + self.layout.feature_dim
        vf_in = self.latent_dim + self.layout.feature_dim
        if self.encoder.input_dim != enc_in or self.encoder.output_dim != self.latent_dim:
            raise ConfigError("encoder dims inconsistent with layout")
        if self.vector_field.input_dim != vf_in \
                or self.vector_field.output_dim != self.latent_dim:
            raise ConfigError("vector field dims inconsistent with layout")
        if self.decoder.input_dim != self.latent_dim \
                or self.decoder.output_dim != self.output_dim:
            raise ConfigError("decoder dims inconsistent with heads")

    @property
    def output_dim(self) -> int:
        d = self.layout.d
        return sum(d if h == "x" else d * d for h in self.heads)

    def head_slice(self, head: str) -> slice:
        d = self.layout.d
        off = 0
        for h in self.heads:
            width = d if h == "x" else d * d
            if h == head:
                return slice(off, off + width)
            off += width
        raise KeyError(f"model has no {head!r} head")

    def param_arrays(self) -> List[np.ndarray]:
        """Flat weight list in the documented checkpoint order."""
        out = list(self.encoder.arrays())
        if self.encoder_skip is not None:
            out.append(self.encoder_skip)
        out.extend(self.vector_field.arrays())
        out.extend(self.decoder.arrays())
        if self.decoder_skip is not None:
            out.append(self.decoder_skip)
        return out

    def param_names(self) -> List[str]:
        names = []
        for part, mlp in (("encoder", self.encoder),
                          ("vector_field", self.vector_field),
                          ("decoder", self.decoder)):
            for i in range(len(mlp.weights)):
                names.extend([f"{part}.w{i}", f"{part}.b{i}"])
            if part == "encoder" and self.encoder_skip is not None:
                names.append("encoder.skip")
        if self.decoder_skip is not None:
            names.append("decoder.skip")
        # reorder: encoder block first, then vf, then decoder (skip handled above)
        ordered = [n for n in names if n.startswith("encoder")]
        ordered += [n for n in names if n.startswith("vector_field")]
        ordered += [n for n in names if n.startswith("decoder")]
        return ordered

    def set_param_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        current = self.param_arrays()
        if len(arrays) != len(current):
            raise DataError("checkpoint parameter count mismatch")
        for dst, src in zip(current, arrays):
            if dst.shape != src.shape:
                raise DataError(f"checkpoint shape mismatch {src.shape} "
                                f"vs {dst.shape}")
            dst[...] = src

    def copy_arrays(self) -> List[np.ndarray]:
        return [a.copy() for a in self.param_arrays()]


def init_njode(rng: np.random.Generator, d: int, heads: Sequence[str],
               latent_dim: int = 100, hidden: int = 50,
               include_z: bool = False, recurrent_encoder: bool = True,
               residual_encoder: bool = True, residual_decoder: bool = True,
               activation: str = "relu",
               output_clamp: Optional[float] = None) -> NjodeParams:
    """Fresh model with He-uniform weights from the given generator."""
    layout = InputLayout(d=d, include_z=include_z)
    enc_in = (latent_dim if recurrent_encoder else 0) + layout.feature_dim
    vf_in = latent_dim + layout.feature_dim
    out_dim = sum(d if h == "x" else d * d for h in heads)
    encoder = nn.init_mlp(rng, enc_in, [hidden], latent_dim, activation)
    vf = nn.init_mlp(rng, vf_in, [hidden], latent_dim, activation,
                     output_clamp=output_clamp)
    decoder = nn.init_mlp(rng, latent_dim, [hidden], out_dim, activation)
    enc_skip = None
    dec_skip = None
    if residual_encoder:
        lim = nn.init_limit(enc_in)
        enc_skip = rng.uniform(-lim, lim, size=(enc_in, latent_dim))
    if residual_decoder:
        lim = nn.init_limit(latent_dim)
        dec_skip = rng.uniform(-lim, lim, size=(latent_dim, out_dim))
    return NjodeParams(encoder=encoder, vector_field=vf, decoder=decoder,
                       latent_dim=latent_dim, layout=layout,
                       heads=tuple(heads), encoder_skip=enc_skip,
                       decoder_skip=dec_skip,
                       recurrent_encoder=recurrent_encoder)


# ---------------------------------------------------------------------------
# batched observation structure

@dataclass
class ObsEventBlock:
    """All observations landing on one grid cell, row-batched."""

    cell: int
    rows: np.ndarray            # path indices in the batch
    feats: np.ndarray           # (m, feature_dim) new-observation features
    x: np.ndarray               # (m, d) raw observed values
    mask: np.ndarray            # (m, d)
    x_imp: np.ndarray           # (m, d) values after imputation
    prev: np.ndarray            # (m, d) per-coordinate last observed value
    dt_coord: np.ndarray        # (m, d) per-coordinate elapsed time
    dt_event: np.ndarray        # (m,) time since the previous observation


@dataclass
class ObsBatch:
    """Precomputed sweep structure for a batch of observation sequences."""

    n: int
    d: int
    times: np.ndarray
    layout: InputLayout
    feats0: np.ndarray          # (n, feature_dim) initial-observation features
    blocks: Dict[int, ObsEventBlock]
    n_obs: np.ndarray           # (n,) observations after the initial time
    static0: np.ndarray         # (n, static_dim) initial static features
    degenerate_dt_count: int = 0


@dataclass
class PathEvents:
    """One path's precomputed observation events (cacheable per dataset)."""

    feats0: np.ndarray
    static0: np.ndarray
    cells: np.ndarray       # (m,) grid indices of post-origin observations
    feats: np.ndarray       # (m, feature_dim)
    x: np.ndarray
    mask: np.ndarray
    x_imp: np.ndarray
    prev: np.ndarray
    dt_coord: np.ndarray
    dt_event: np.ndarray
    degenerate: int


def prepare_paths(obs_list: Sequence[ObservationSequence],
                  layout: InputLayout) -> List[PathEvents]:
    """Precompute per-path model features and increment quantities.

    Missing coordinates are imputed with the coordinate's last observed
    value; elapsed times are tracked per coordinate so increment targets
    stay well defined under partial observations. Observation pairs less
    than 1e-12 apart in time are dropped (counted as degenerate).
    """
    d = layout.d
    out: List[PathEvents] = []
    for seq in obs_list:
        if seq.dim != d:
            raise DataError("observation dimension does not match layout")
        last_val = np.where(seq.masks[0] > 0, seq.values[0], 0.0)
        last_coord_t = np.zeros(d)
        last_t = 0.0
        static0 = np.zeros(layout.static_dim)
        static0[:d] = last_val
        static0[d:2 * d] = 1.0
        feats0 = np.zeros(layout.feature_dim)
        feats0[:layout.static_dim] = static0
        events = []
        degenerate = 0
        for j in range(1, len(seq.time_indices)):
            k = int(seq.time_indices[j])
            t = float(seq.times[j])
            m = seq.masks[j]
            x = seq.values[j]
            x_imp = np.where(m > 0, x, last_val)
            # masked coordinates carry a dummy elapsed time; the mask
            # projection removes their target contribution entirely
            dt_coord = np.where(m > 0, t - last_coord_t, 1.0)
            dt_event = t - last_t
            if dt_event <= 1e-12:
                degenerate += 1
                continue
            feat = np.zeros(layout.feature_dim)
            feat[:d] = x_imp
            feat[d:2 * d] = m
            # z block stays 0: the squared-increment channel jumps to 0
            feat[layout.static_dim] = t
            feat[layout.static_dim + 1] = dt_event
            events.append((k, feat, x, m, x_imp, last_val.copy(),
                           dt_coord, dt_event))
            last_val = x_imp
            last_coord_t = np.where(m > 0, t, last_coord_t)
            last_t = t
        m_ev = len(events)

        def col(i, width):
            if m_ev == 0:
                return np.zeros((0, width))
            return np.stack([e[i] for e in events])

        out.append(PathEvents(
            feats0=feats0, static0=static0,
            cells=np.array([e[0] for e in events], dtype=np.int64),
            feats=col(1, layout.feature_dim), x=col(2, d), mask=col(3, d),
            x_imp=col(4, d), prev=col(5, d), dt_coord=col(6, d),
            dt_event=np.array([e[7] for e in events]),
            degenerate=degenerate))
    return out


def assemble_batch(paths: Sequence[PathEvents], indices: Sequence[int],
                   times: np.ndarray, layout: InputLayout) -> ObsBatch:
    """Bucket precomputed path events into per-cell blocks for a sweep."""
    indices = list(indices)
    n = len(indices)
    chosen = [paths[i] for i in indices]
    feats0 = np.stack([p.feats0 for p in chosen])
    static0 = np.stack([p.static0 for p in chosen])
    n_obs = np.array([len(p.cells) for p in chosen], dtype=np.int64)
    degenerate = int(sum(p.degenerate for p in chosen))
    blocks: Dict[int, ObsEventBlock] = {}
    if n_obs.sum() > 0:
        rows_all = np.repeat(np.arange(n, dtype=np.int64), n_obs)
        cat = lambda attr: np.concatenate([getattr(p, attr) for p in chosen])
        cells_all = cat("cells")
        order = np.argsort(cells_all, kind="stable")
        cells_sorted = cells_all[order]
        arrays = {attr: cat(attr)[order] for attr in
                  ("feats", "x", "mask", "x_imp", "prev", "dt_coord",
                   "dt_event")}
        rows_sorted = rows_all[order]
        uniq, starts = np.unique(cells_sorted, return_index=True)
        bounds = list(starts) + [len(cells_sorted)]
        for i, k in enumerate(uniq):
            sl = slice(bounds[i], bounds[i + 1])
            blocks[int(k)] = ObsEventBlock(
                cell=int(k), rows=rows_sorted[sl],
                feats=arrays["feats"][sl], x=arrays["x"][sl],
                mask=arrays["mask"][sl], x_imp=arrays["x_imp"][sl],
                prev=arrays["prev"][sl], dt_coord=arrays["dt_coord"][sl],
                dt_event=arrays["dt_event"][sl])
    return ObsBatch(n=n, d=layout.d,
                    times=np.asarray(times, dtype=np.float64),
                    layout=layout, feats0=feats0, blocks=blocks,
                    n_obs=n_obs, static0=static0,
                    degenerate_dt_count=degenerate)


def prepare_batch(obs_list: Sequence[ObservationSequence], times: np.ndarray,
                  layout: InputLayout) -> ObsBatch:
    """Per-cell observation structure for a batch of sequences."""
    paths = prepare_paths(obs_list, layout)
    return assemble_batch(paths, range(len(paths)), times, layout)


# ---------------------------------------------------------------------------
# network application helpers (shared by training, evaluation, generation)

class _NetCtx:
    """Resolved parameter views for one sweep: plain arrays in evaluation
    mode, graph leaves in training mode."""

    def __init__(self, params: NjodeParams, graph: bool,
                 dropout_rate: float = 0.0,
                 dropout_rng: Optional[np.random.Generator] = None):
        self.params = params
        self.graph = graph
        self.dropout_rate = dropout_rate if dropout_rng is not None else 0.0
        self.dropout_rng = dropout_rng
        arrays = params.param_arrays()
        self.leaves = [ad.leaf(a) for a in arrays] if graph else list(arrays)
        n_enc = len(params.encoder.arrays())
        n_vf = len(params.vector_field.arrays())
        n_dec = len(params.decoder.arrays())
        pos = 0
        self.enc_nodes = self.leaves[pos:pos + n_enc]; pos += n_enc
        self.enc_skip = None
        if params.encoder_skip is not None:
            self.enc_skip = self.leaves[pos]; pos += 1
        self.vf_nodes = self.leaves[pos:pos + n_vf]; pos += n_vf
        self.dec_nodes = self.leaves[pos:pos + n_dec]; pos += n_dec
        self.dec_skip = None
        if params.decoder_skip is not None:
            self.dec_skip = self.leaves[pos]; pos += 1

    def _masks(self, mlp: nn.MlpParams, n_rows: int):
        if self.dropout_rate <= 0.0:
            return None
        return nn.dropout_masks(self.dropout_rng, self.dropout_rate, n_rows,
                                mlp.hidden_dims)

    def encode(self, h_pre, feats):
        p = self.params
        x = ad.concat_cols([h_pre, feats]) if p.recurrent_encoder else feats
        n_rows = np.shape(ad.value_of(x))[0]
        out = nn.mlp_forward(p.encoder, x, self._masks(p.encoder, n_rows),
                             param_nodes=self.enc_nodes if self.graph else None)
        if self.enc_skip is not None:
            out = ad.add(out, ad.matmul(x, self.enc_skip))
        return out

    def vf(self, h, feats):
        p = self.params
        x = ad.concat_cols([h, feats])
        n_rows = np.shape(ad.value_of(x))[0]
        return nn.mlp_forward(p.vector_field, x,
                              self._masks(p.vector_field, n_rows),
                              param_nodes=self.vf_nodes if self.graph else None)

    def decode(self, h):
        p = self.params
        n_rows = np.shape(ad.value_of(h))[0]
        out = nn.mlp_forward(p.decoder, h, self._masks(p.decoder, n_rows),
                             param_nodes=self.dec_nodes if self.graph else None)
        if self.dec_skip is not None:
            out = ad.add(out, ad.matmul(h, self.dec_skip))
        return out


def _evolve_cell(ctx: _NetCtx, h, static, tau_arr, t_from: float,
                 t_to: float, n_sub: int):
    """Euler substeps of the vector field over one grid cell."""
    step = (t_to - t_from) / n_sub
    n = np.shape(ad.value_of(h))[0]
    for s in range(n_sub):
        t = t_from + s * step
        t_col = np.full((n, 1), t)
        dt_col = (t - tau_arr)[:, None]
        feats = np.concatenate([static, t_col, dt_col], axis=1)
        dh = ctx.vf(h, feats)
        h = ad.add(h, ad.scale(dh, step))
    return h


@dataclass
class CellRecord:
    """Pre/post-jump decoder outputs for the paths observing at one cell."""

    cell: int
    rows: np.ndarray
    g_pre: object     # (m, out_dim) node or array
    g_post: object


def sweep(params: NjodeParams, batch: ObsBatch, *, graph: bool = False,
          dropout_rate: float = 0.0,
          dropout_rng: Optional[np.random.Generator] = None,
          n_sub: int = 1, n_cells: Optional[int] = None,
          record_all_cells: bool = False):
    """Run the jump ODE over the grid for a whole batch.

    Returns ``(records, ctx, h, state)`` where records are per-cell
    pre/post outputs at observations (plus per-cell outputs and latents
    for all rows when ``record_all_cells``), ``h`` is the final latent
    state and ``state`` carries the running (static features, tau) arrays
    so a caller can continue the evolution.
    """
    ctx = _NetCtx(params, graph, dropout_rate, dropout_rng)
    times = batch.times
    n = batch.n
    n_cells = len(times) - 1 if n_cells is None else n_cells
    static = batch.static0.copy()
    tau_arr = np.zeros(n)
    h = ctx.encode(np.zeros((n, params.latent_dim)), batch.feats0)
    records: List[CellRecord] = []
    all_outputs = []
    all_latents = []
    if record_all_cells:
        all_outputs.append(ctx.decode(h))
        all_latents.append(np.array(ad.value_of(h), copy=True))
    for k in range(1, n_cells + 1):
        h = _evolve_cell(ctx, h, static, tau_arr, times[k - 1], times[k], n_sub)
        block = batch.blocks.get(k)
        if block is not None:
            rows = block.rows
            h_pre_rows = ad.gather_rows(h, rows)
            g_pre = ctx.decode(h_pre_rows)
            h_post_rows = ctx.encode(h_pre_rows, block.feats)
            g_post = ctx.decode(h_post_rows)
            keep = np.ones((n, 1))
            keep[rows] = 0.0
            h = ad.add(ad.mul(h, keep),
                       ad.scatter_rows(h_post_rows, rows, n))
            records.append(CellRecord(cell=k, rows=rows, g_pre=g_pre,
                                      g_post=g_post))
            static[rows, :batch.layout.static_dim] = \
                block.feats[:, :batch.layout.static_dim]
            tau_arr[rows] = times[k]
        if record_all_cells:
            all_outputs.append(ctx.decode(h))
            all_latents.append(np.array(ad.value_of(h), copy=True))
        hv = ad.value_of(h)
        if not np.all(np.isfinite(hv)):
            bad = np.where(~np.isfinite(hv).all(axis=1))[0]
            raise SimulationDivergenceError(
                f"non-finite latent state at grid cell {k} "
                f"(t={times[k]:g}) on batch row {int(bad[0])}")
    state = {"static": static, "tau": tau_arr, "t": times[n_cells]}
    if record_all_cells:
        return records, ctx, h, state, all_outputs, all_latents
    return records, ctx, h, state


# ---------------------------------------------------------------------------
# single-path conveniences

@dataclass
class NjodeTrajectory:
    """Evaluation-mode trajectory on the full grid for one path."""

    times: np.ndarray
    latent: np.ndarray          # (n_grid, d_H) post-jump latent states
    outputs: np.ndarray         # (n_grid, out_dim) post-jump outputs
    jump_cells: np.ndarray      # grid indices of observations after t0
    outputs_pre: np.ndarray     # (n_jumps, out_dim) left limits at jumps
    outputs_post: np.ndarray    # (n_jumps, out_dim)


def forward(params: NjodeParams, obs: ObservationSequence,
            eval_times: np.ndarray, mode: str = "eval",
            dropout_seed: Optional[int] = None, dropout_rate: float = 0.1,
            n_sub: int = 1) -> NjodeTrajectory:
    """Run one path over the grid, recording outputs everywhere.

    ``eval_times`` is the regular data grid (``index * dt``); it must
    contain every observation time. Temporal refinement between grid
    cells is done with ``n_sub`` Euler substeps per cell.
    """
    eval_times = np.asarray(eval_times, dtype=np.float64)
    if obs.time_indices[-1] > len(eval_times) - 1 or not np.allclose(
            eval_times[obs.time_indices], obs.times, atol=1e-9):
        raise DataError("eval grid must contain every observation time")
    batch = prepare_batch([obs], eval_times, params.layout)
    rng = None
    rate = 0.0
    if mode == "train":
        rng = np.random.default_rng(dropout_seed)
        rate = dropout_rate
    records, ctx, h, state, all_out, all_lat = sweep(
        params, batch, graph=False, dropout_rate=rate, dropout_rng=rng,
        n_sub=n_sub, record_all_cells=True)
    outputs = np.stack([np.asarray(ad.value_of(o))[0] for o in all_out])
    jump_cells = np.array([r.cell for r in records], dtype=np.int64)
    pre = np.stack([np.asarray(ad.value_of(r.g_pre))[0] for r in records]) \
        if records else np.zeros((0, params.output_dim))
    post = np.stack([np.asarray(ad.value_of(r.g_post))[0] for r in records]) \
        if records else np.zeros((0, params.output_dim))
    latent = np.stack([l[0] for l in all_lat])
    return NjodeTrajectory(times=eval_times, latent=latent, outputs=outputs,
                           jump_cells=jump_cells, outputs_pre=pre,
                           outputs_post=post)


def predict_window(params: NjodeParams, obs: ObservationSequence, s: float,
                   horizon: float, dt: float, n_sub: int = 1,
                   t_max: Optional[float] = None
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Outputs G_{s,h} for h in [0, horizon], conditioning on observations
    up to s and evolving freely afterwards.

    Returns ``(offsets, outputs)`` with ``offsets[0] == 0`` giving the
    post-jump output at s. Offsets advance in steps of ``dt``. With
    ``t_max`` given, windows reaching past it are rejected.
    """
    if t_max is not None and s + horizon > t_max + 1e-9:
        raise ConfigError(f"predict.horizon: window end {s + horizon:g} "
                          f"exceeds the horizon {t_max:g}")
    truncated = obs.truncated(s)
    if abs(truncated.times[-1] - s) > 1e-9:
        raise DataError(f"s={s} must be an observation time")
    n_extra = int(round(horizon / dt))
    if abs(n_extra * dt - horizon) > 1e-9:
        raise ConfigError("predict.horizon must be a multiple of dt")
    last_cell = int(truncated.time_indices[-1])
    times = np.arange(last_cell + n_extra + 1, dtype=np.float64) * dt
    batch = prepare_batch([truncated], times, params.layout)
    _, ctx, h, state, all_out, _ = sweep(params, batch, graph=False,
                                         n_sub=n_sub, record_all_cells=True)
    outputs = np.stack([np.asarray(ad.value_of(o))[0]
                        for o in all_out])[last_cell:]
    offsets = np.arange(n_extra + 1, dtype=np.float64) * dt
    return offsets, outputs


# ---------------------------------------------------------------------------
# incremental cursor for the generative scheme

class ModelCursor:
    """Latent-state cursor advanced one generation step at a time.

    Shares the network helpers with `sweep`, so generation uses exactly
    the arithmetic the model was trained with.
    """

    def __init__(self, params: NjodeParams, history: ObservationSequence,
                 n_paths: int, dt: float, n_sub: int = 1):
        self.params = params
        self.ctx = _NetCtx(params, graph=False)
        self.n_sub = n_sub
        self.dt = dt
        last_cell = int(history.time_indices[-1])
        times = np.arange(last_cell + 1, dtype=np.float64) * dt
        batch = prepare_batch([history], times, params.layout)
        _, _, h, state = sweep(params, batch, graph=False, n_sub=n_sub)
        self.h = np.repeat(np.asarray(h), n_paths, axis=0)
        self.static = np.repeat(state["static"], n_paths, axis=0)
        self.tau = np.repeat(state["tau"], n_paths)
        self.t = float(state["t"])
        self.n = n_paths

    def readout(self) -> np.ndarray:
        return np.asarray(self.ctx.decode(self.h))

    def head(self, outputs: np.ndarray, name: str) -> np.ndarray:
        return outputs[:, self.params.head_slice(name)]

    def evolve(self, delta: float) -> None:
        """Continuous evolution by ``delta`` with no jump."""
        steps = max(1, int(round(delta / self.dt)))
        sub = self.n_sub
        t0 = self.t
        h = self.h
        target = t0 + delta
        per = delta / steps
        for i in range(steps):
            h = _evolve_cell(self.ctx, h, self.static, self.tau,
                             t0 + i * per, t0 + (i + 1) * per, sub)
        self.h = np.asarray(h)
        self.t = target

    def jump(self, x_new: np.ndarray) -> None:
        """Encoder jump with a fully observed value at the current time."""
        d = self.params.layout.d
        feats = np.zeros((self.n, self.params.layout.feature_dim))
        feats[:, :d] = x_new
        feats[:, d:2 * d] = 1.0
        feats[:, self.params.layout.static_dim] = self.t
        feats[:, self.params.layout.static_dim + 1] = self.t - self.tau
        self.h = np.asarray(self.ctx.encode(self.h, feats))
        self.static[:, :self.params.layout.static_dim] = \
            feats[:, :self.params.layout.static_dim]
        self.tau[:] = self.t

    def keep(self, rows: np.ndarray) -> None:
        """Drop all batch rows except ``rows`` (diverged-path removal)."""
        self.h = self.h[rows]
        self.static = self.static[rows]
        self.tau = self.tau[rows]
        self.n = len(rows)


# ---------------------------------------------------------------------------
# checkpoint format

def _arch_json(params: NjodeParams) -> dict:
    return {
        "latent_dim": params.latent_dim,
        "d": params.layout.d,
        "include_z": params.layout.include_z,
        "heads": list(params.heads),
        "hidden_dims": params.encoder.hidden_dims,
        "activation": params.encoder.activation,
        "recurrent_encoder": params.recurrent_encoder,
        "residual_encoder": params.encoder_skip is not None,
        "residual_decoder": params.decoder_skip is not None,
        "output_clamp": params.vector_field.output_clamp,
        "param_order": params.param_names(),
        "param_shapes": [list(a.shape) for a in params.param_arrays()],
    }


def save_model(params: NjodeParams, out_dir: str,
               extra: Optional[dict] = None) -> None:
    """Write ``model.json`` + ``weights.bin`` (little-endian float64 in
    the documented parameter order)."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = _arch_json(params)
    if extra:
        manifest.update(extra)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in params.param_arrays())
    manifest["weights_sha256"] = hashlib.sha256(blob).hexdigest()
    with open(os.path.join(out_dir, "model.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "weights.bin"), "wb") as fh:
        fh.write(blob)


def load_model(in_dir: str) -> Tuple[NjodeParams, dict]:
    """Read a checkpoint directory; returns the model and its manifest."""
    manifest_path = os.path.join(in_dir, "model.json")
    weights_path = os.path.join(in_dir, "weights.bin")
    if not os.path.exists(manifest_path) or not os.path.exists(weights_path):
        raise DataError(f"missing checkpoint files in {in_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    rng = np.random.default_rng(0)
    params = init_njode(
        rng, d=int(manifest["d"]), heads=manifest["heads"],
        latent_dim=int(manifest["latent_dim"]),
        hidden=int(manifest["hidden_dims"][0]),
        include_z=bool(manifest["include_z"]),
        recurrent_encoder=bool(manifest["recurrent_encoder"]),
        residual_encoder=bool(manifest["residual_encoder"]),
        residual_decoder=bool(manifest["residual_decoder"]),
        activation=manifest["activation"],
        output_clamp=manifest.get("output_clamp"))
    raw = np.frombuffer(open(weights_path, "rb").read(), dtype="<f8")
    arrays = []
    off = 0
    for shape in manifest["param_shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(raw[off:off + size].reshape(shape).astype(np.float64))
        off += size
    if off != raw.size:
        raise DataError("weights.bin size does not match manifest shapes")
    params.set_param_arrays(arrays)
    return params, manifest


def model_checksum(params: NjodeParams) -> str:
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in params.param_arrays())
    return hashlib.sha256(blob).hexdigest()
