"""Loss functions and the four target-construction schemes.

Schemes
-------
base            squared-increment targets, both pre- and post-jump terms
joint-base      as base, with the diffusion target centered at the drift
                head's own prediction (self-injected bias reduction)
instant         increment-quotient targets, pre-jump (noise-adapted) loss
joint-instant   as instant, diffusion target centered at the drift head

The diffusion prediction is always the Gram square S = G2 G2^T of the
raw diffusion head, so it is symmetric positive semi-definite for every
parameter value. Increment targets use per-coordinate last observations
so partial masks stay well defined; with joint masks they reduce to the
textbook definitions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .model import InputLayout, ObsBatch, prepare_batch
from .sde import ObservationSequence

SCHEMES = ("base", "joint-base", "instant", "joint-instant")


def validate_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme: unknown scheme {scheme!r}; "
                          f"expected one of {SCHEMES}")
    return scheme


def scheme_is_joint(scheme: str) -> bool:
    return scheme.startswith("joint")


def scheme_is_instant(scheme: str) -> bool:
    return scheme.endswith("instant")


@dataclass
class TargetBatch:
    """Per-cell training targets aligned with an `ObsBatch` sweep."""

    scheme: str
    obs: ObsBatch
    cells: Dict[int, Dict[str, np.ndarray]]
    weights: Dict[int, np.ndarray]   # per-event 1 / (n_j * n_valid_paths)
    n_valid: int
    n_excluded: int                  # paths without post-origin observations
    n_degenerate: int                # zero-increment quotients excluded


def build_targets(obs, times: np.ndarray, layout: InputLayout,
                  scheme: str) -> TargetBatch:
    """Construct the target arrays for one scheme.

    `obs` is an `ObsBatch`, a list of `ObservationSequence`, or a single
    sequence. Quotient targets (increment over elapsed time) are defined
    only strictly after the last observation; observation pairs closer
    than 1e-12 in time are excluded and counted.
    """
    validate_scheme(scheme)
    if isinstance(obs, ObservationSequence):
        obs = [obs]
    batch = obs if isinstance(obs, ObsBatch) else \
        prepare_batch(obs, times, layout)
    d = batch.d
    n_valid = int(np.sum(batch.n_obs > 0))
    weights: Dict[int, np.ndarray] = {}
    cells: Dict[int, Dict[str, np.ndarray]] = {}
    denom = max(n_valid, 1)
    for k, block in batch.blocks.items():
        m = len(block.rows)
        incr = block.mask * (block.x_imp - block.prev)
        dt_outer = np.sqrt(
            np.einsum("ni,nj->nij", block.dt_coord, block.dt_coord))
        z = np.einsum("ni,nj->nij", incr, incr)
        proj_z = np.einsum("ni,nj->nij", block.mask, block.mask)
        cells[k] = {
            "x": block.x_imp * block.mask,
            "proj_x": block.mask,
            "iq": incr / block.dt_coord,
            "z": z.reshape(m, d * d),
            "zq": (z / dt_outer).reshape(m, d * d),
            "proj_z": proj_z.reshape(m, d * d),
            "dt_event": block.dt_event,
        }
        weights[k] = 1.0 / (batch.n_obs[block.rows] * denom)
    return TargetBatch(scheme=scheme, obs=batch, cells=cells,
                       weights=weights, n_valid=n_valid,
                       n_excluded=batch.n - n_valid,
                       n_degenerate=batch.degenerate_dt_count)


# ---------------------------------------------------------------------------
# the two loss shapes

def _psi_contrib(v_pre, v_post, proj: np.ndarray, eta_pre, eta_post):
    """Per-observation term of the squared-sum loss:
    (|M (V_post - eta_post)|_2 + |M (V_pre - eta_pre)|_2)^2."""
    a = ad.l2norm_rows(ad.mul(ad.sub(v_post, eta_post), proj))
    b = ad.l2norm_rows(ad.mul(ad.sub(v_pre, eta_pre), proj))
    return ad.square(ad.add(a, b))


def _psi_noisy_contrib(v_pre, proj: np.ndarray, eta_pre):
    """Per-observation term of the noise-adapted loss:
    |M (V_pre - eta_pre)|_2^2 (no post-jump term)."""
    diff = ad.mul(ad.sub(v_pre, eta_pre), proj)
    return ad.sum_cols_of_squares(diff)


def _aggregate(tb: TargetBatch, contribs: Dict[int, object]):
    """Mean over paths of the per-path observation averages."""
    total = 0.0
    for k, contrib in contribs.items():
        total = ad.add(total, ad.dot_const(contrib, tb.weights[k]))
    return total


def loss_psi(tb: TargetBatch, channel: str, outputs: Dict[int, Tuple]):
    """Squared-sum loss of one output channel against its targets.

    `channel` is "x" or "z"; `outputs` maps grid cells to (pre, post)
    head outputs aligned with the cell's observation block. For the "z"
    channel the outputs are the raw diffusion head, squared here.
    """
    contribs = {}
    for k, (pre, post) in outputs.items():
        t = tb.cells[k]
        if channel == "x":
            contribs[k] = _psi_contrib(t["x"], t["x"], t["proj_x"], pre, post)
        else:
            d = tb.obs.d
            s_pre = ad.gram_rows(pre, d)
            s_post = ad.gram_rows(post, d)
            contribs[k] = _psi_contrib(t["z"], np.zeros_like(t["z"]),
                                       t["proj_z"], s_pre, s_post)
    return _aggregate(tb, contribs)


def loss_psi_noisy(tb: TargetBatch, channel: str, outputs: Dict[int, Tuple]):
    """Noise-adapted loss (pre-jump only) of one channel."""
    contribs = {}
    for k, (pre, _post) in outputs.items():
        t = tb.cells[k]
        if channel == "x":
            contribs[k] = _psi_noisy_contrib(t["iq"], t["proj_x"], pre)
        else:
            d = tb.obs.d
            s_pre = ad.gram_rows(pre, d)
            contribs[k] = _psi_noisy_contrib(t["zq"], t["proj_z"], s_pre)
    return _aggregate(tb, contribs)


# ---------------------------------------------------------------------------
# scheme composition

def drift_loss(tb: TargetBatch, x_outputs: Dict[int, Tuple]):
    if scheme_is_instant(tb.scheme):
        return loss_psi_noisy(tb, "x", x_outputs)
    return loss_psi(tb, "x", x_outputs)


def diffusion_loss(tb: TargetBatch, z_outputs: Dict[int, Tuple],
                   x_outputs: Optional[Dict[int, Tuple]] = None,
                   stop_bias_grad: bool = True):
    """Diffusion-channel loss under the scheme's target construction.

    Joint schemes center the increment at the drift head's pre-jump
    prediction; with `stop_bias_grad` (the default) that prediction is
    treated as a constant inside the target so the diffusion loss cannot
    pull on the drift head.
    """
    scheme = tb.scheme
    if not scheme_is_joint(scheme):
        if scheme == "base":
            return loss_psi(tb, "z", z_outputs)
        return loss_psi_noisy(tb, "z", z_outputs)
    if x_outputs is None:
        raise ConfigError(f"scheme: {scheme} needs the drift head outputs "
                          "for its bias-corrected diffusion target")
    d = tb.obs.d
    contribs = {}
    for k, (z_pre, z_post) in z_outputs.items():
        t = tb.cells[k]
        g1_pre = x_outputs[k][0]
        if stop_bias_grad:
            g1_pre = ad.stopgrad(g1_pre)
        s_pre = ad.gram_rows(z_pre, d)
        if scheme == "joint-base":
            # increments centered at the drift prediction of X itself;
            # post-jump the conditioning includes the observation, so the
            # target is exactly 0 (as for the raw squared increments)
            centered = ad.mul(ad.sub(t["x"], g1_pre), t["proj_x"])
            target_pre = ad.outer_rows(centered, centered)
            s_post = ad.gram_rows(z_post, d)
            contribs[k] = _psi_contrib(target_pre,
                                       np.zeros((len(t["dt_event"]), d * d)),
                                       t["proj_z"], s_pre, s_post)
        else:
            # quotient form: (t - tau) (X_IQ - G1)(X_IQ - G1)^T
            centered = ad.mul(ad.sub(t["iq"], g1_pre), t["proj_x"])
            outer = ad.outer_rows(centered, centered)
            target_pre = ad.mul(outer, t["dt_event"][:, None])
            contribs[k] = _psi_noisy_contrib(target_pre, t["proj_z"], s_pre)
    return _aggregate(tb, contribs)


def joint_loss(tb: TargetBatch, x_outputs: Dict[int, Tuple],
               z_outputs: Dict[int, Tuple], stop_bias_grad: bool = True):
    """Total loss: drift channel plus diffusion channel, unit weights."""
    return ad.add(drift_loss(tb, x_outputs),
                  diffusion_loss(tb, z_outputs, x_outputs, stop_bias_grad))
