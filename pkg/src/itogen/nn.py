"""Dense-network building blocks: MLP parameters, forward pass, dropout,
and the Adam optimizer with decoupled weight decay.

Weight decay is decoupled (applied directly to the parameters, not folded
into the gradient) so runs are reproducible against the documented update
rule. All arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import TrainingDivergenceError

ACTIVATIONS = ("relu", "identity", "tanh")


@dataclass
class MlpParams:
    """Weights of one feedforward network.

    `weights[i]`, `biases[i]` map layer i to layer i+1; hidden layers use
    `activation`, the output layer is affine. `output_clamp`, when set,
    bounds the output elementwise (off by default).
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "relu"
    output_clamp: Optional[float] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights/biases length mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not "
                                 f"match weight {w.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not "
                                 f"chain with previous output "
                                 f"{self.weights[i - 1].shape[1]}")
        for i, w in enumerate(self.weights):
            if not np.all(np.isfinite(w)) or not np.all(np.isfinite(self.biases[i])):
                raise ValueError(f"layer {i}: non-finite parameter entries")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_dims(self) -> List[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    def arrays(self) -> List[np.ndarray]:
        """Flat parameter list in documented order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_limit(fan_in: int) -> float:
    """Bound of the uniform fan-in initialization, U(-1/sqrt(fan_in), +).

    The scale is deliberately contractive: the jump-ODE recursion applies
    these networks hundreds of times per trajectory, and larger gains
    (e.g. the classic sqrt(6/fan_in)) compound into exploding latents
    before training starts.
    """
    return 1.0 / np.sqrt(fan_in)


def init_mlp(rng: np.random.Generator, input_dim: int,
             hidden_dims: Sequence[int], output_dim: int,
             activation: str = "relu",
             output_clamp: Optional[float] = None) -> MlpParams:
    """Uniform fan-in initialization, biases zero."""
    dims = [input_dim, *hidden_dims, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = init_limit(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation=activation,
                     output_clamp=output_clamp)


def _activate(x, activation: str):
    if activation == "relu":
        return ad.relu(x)
    if activation == "tanh":
        return ad.tanh(x)
    return x


def mlp_forward(params: MlpParams, x, dropout_masks: Optional[list] = None,
                param_nodes: Optional[list] = None):
    """Evaluate the network on row-stacked inputs.

    `x` is an (n, input_dim) array or graph node. `dropout_masks`, when
    given, holds one multiplicative mask per hidden layer (entries are
    0 or 1/keep_prob, so evaluation mode is exactly the identity).
    `param_nodes` substitutes graph leaves for the stored weights in the
    order of `arrays()`; without it the pass is evaluation-only for the
    parameters.
    """
    n_in = np.shape(ad.value_of(x))[-1]
    if n_in != params.input_dim:
        raise ValueError(f"input dim {n_in} != expected {params.input_dim}")
    ws: list = params.weights
    bs: list = params.biases
    if param_nodes is not None:
        ws = param_nodes[0::2]
        bs = param_nodes[1::2]
    h = x
    n_layers = len(params.weights)
    for i in range(n_layers):
        h = ad.linear(h, ws[i], bs[i])
        if i < n_layers - 1:
            h = _activate(h, params.activation)
            if dropout_masks is not None:
                h = ad.mul(h, dropout_masks[i])
    if params.output_clamp is not None:
        h = ad.clip(h, -params.output_clamp, params.output_clamp)
    return h


def dropout_masks(rng: np.random.Generator, rate: float, n_rows: int,
                  hidden_dims: Sequence[int]) -> Optional[list]:
    """Inverted-dropout masks for one forward call, or None when rate=0."""
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return [(rng.random((n_rows, h)) < keep) / keep for h in hidden_dims]


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay

@dataclass
class AdamState:
    """First/second-moment accumulators and hyperparameters."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 0.001,
                   betas=(0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.0) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   step=0, lr=lr, beta1=betas[0], beta2=betas[1],
                   eps=eps, weight_decay=weight_decay)


def adam_step(state: AdamState, params: List[np.ndarray],
              grads: List[np.ndarray]):
    """One Adam update with bias correction and decoupled weight decay.

    Updates `params` and `state` in place and returns them. The decay is
    applied directly to the parameters: p <- p - lr*wd*p, independent of
    the gradient moments.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in adam_step")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay != 0.0:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
