"""Turning model outputs into drift and diffusion estimates.

Baseline estimators difference the conditional-expectation window over a
step: mu = (G_{t,D} - G_{t,0}) / D and Sigma = S_{t,D} / D, replacing
G_{t,0} by the observed X_t when available. Instantaneous estimators read
the post-jump outputs directly. Estimates are clamped elementwise at the
truncation level K and carry a positive semi-definite square root.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError


@dataclass
class CoefficientEstimate:
    """A drift vector and diffusion matrix with its square root.

    ``sqrt_sigma @ sqrt_sigma.T`` reproduces ``sigma_sq_hat`` (after any
    eigenvalue clamping). Flags record whether truncation or clamping
    altered the raw values.
    """

    mu_hat: np.ndarray           # (d,)
    sigma_sq_hat: np.ndarray     # (d, d)
    sqrt_sigma: np.ndarray       # (d, d)
    truncation_level: float
    truncated_mu: bool = False
    truncated_sigma: bool = False
    clamped_eigenvalues: int = 0
    used_model_factor: bool = False


def psd_sqrt(S: np.ndarray, tol: float = 1e-10) -> Tuple[np.ndarray, int]:
    """Symmetric PSD square root via eigendecomposition.

    The input must be symmetric within `tol` (it is symmetrized before
    decomposing); negative eigenvalues are clamped to zero and counted.
    Returns ``(root, n_clamped)`` with ``root = V sqrt(diag(lam)) V^T``.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ConfigError("psd_sqrt: input must be a square matrix")
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > tol:
        raise ConfigError(f"psd_sqrt: matrix asymmetry {asym:.3g} exceeds "
                          f"tolerance {tol:g}")
    sym = 0.5 * (S + S.T)
    lam, vec = np.linalg.eigh(sym)
    n_clamped = int(np.sum(lam < 0.0))
    lam = np.maximum(lam, 0.0)
    root = (vec * np.sqrt(lam)) @ vec.T
    return root, n_clamped


def truncate(est: CoefficientEstimate, level: float) -> CoefficientEstimate:
    """Elementwise clamp of drift and diffusion to [-K, K].

    Clamping the matrix elementwise can break positive semi-definiteness;
    the PSD square root is re-established downstream by eigenvalue
    clamping (see `finalize_estimate`).
    """
    if level <= 0:
        raise ConfigError("truncation level K must be > 0")
    mu = np.clip(est.mu_hat, -level, level)
    sigma = np.clip(est.sigma_sq_hat, -level, level)
    return replace(est,
                   mu_hat=mu, sigma_sq_hat=sigma, truncation_level=level,
                   truncated_mu=bool(np.any(mu != est.mu_hat)),
                   truncated_sigma=bool(np.any(sigma != est.sigma_sq_hat)))


def finalize_estimate(mu: np.ndarray, sigma_sq: np.ndarray, level: float,
                      model_factor: Optional[np.ndarray] = None
                      ) -> CoefficientEstimate:
    """Truncate and attach a square root.

    When the model's own diffusion factor is supplied and truncation did
    not alter the matrix, the factor is used directly (it satisfies
    R R^T = Sigma by construction); otherwise the symmetric PSD root of
    the truncated matrix is taken.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    d = mu.shape[0]
    sigma_sq = np.asarray(sigma_sq, dtype=np.float64).reshape(d, d)
    est = CoefficientEstimate(mu_hat=mu, sigma_sq_hat=sigma_sq,
                              sqrt_sigma=np.zeros((d, d)),
                              truncation_level=level)
    est = truncate(est, level)
    if model_factor is not None and not est.truncated_sigma:
        est.sqrt_sigma = np.asarray(model_factor, dtype=np.float64).reshape(d, d)
        est.used_model_factor = True
    else:
        est.sqrt_sigma, est.clamped_eigenvalues = psd_sqrt(est.sigma_sq_hat)
    return est


def estimate_baseline(g1_window: np.ndarray, s_window: np.ndarray,
                      delta: float, x_t: Optional[np.ndarray] = None,
                      level: float = np.inf,
                      model_factor: Optional[np.ndarray] = None
                      ) -> CoefficientEstimate:
    """Step-quotient estimators from a prediction window.

    ``g1_window``/``s_window`` hold the conditional-expectation outputs at
    offsets 0..delta (first and last rows are used). With ``x_t`` given,
    the observed value replaces the model's time-zero readout in the
    drift quotient.
    """
    if delta <= 0:
        raise ConfigError("estimate.delta: step must be > 0")
    g1_window = np.atleast_2d(np.asarray(g1_window, dtype=np.float64))
    s_window = np.asarray(s_window, dtype=np.float64)
    d = g1_window.shape[1]
    start = np.asarray(x_t, dtype=np.float64) if x_t is not None \
        else g1_window[0]
    mu = (g1_window[-1] - start) / delta
    s_end = s_window[-1] if s_window.ndim > 2 or s_window.ndim == 2 \
        and s_window.shape != (d, d) else s_window
    sigma_sq = np.asarray(s_end).reshape(d, d) / delta
    factor = None
    if model_factor is not None:
        factor = np.asarray(model_factor).reshape(d, d) / np.sqrt(delta)
    return finalize_estimate(mu, sigma_sq, level, factor)


def estimate_instant(g1_post: np.ndarray, s_post: np.ndarray,
                     level: float = np.inf,
                     model_factor: Optional[np.ndarray] = None
                     ) -> CoefficientEstimate:
    """Direct post-jump readout of the instantaneous coefficients."""
    mu = np.atleast_1d(np.asarray(g1_post, dtype=np.float64))
    d = mu.shape[0]
    sigma_sq = np.asarray(s_post, dtype=np.float64).reshape(d, d)
    return finalize_estimate(mu, sigma_sq, level, model_factor)
