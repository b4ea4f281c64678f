"""Action, mode and latent distributions.

* rescaled Beta on [-h, h] for bounded actions,
* categorical over modes with a straight-through one-hot sample,
* diagonal Gaussian for the VAE latent (plus the clipped Gaussian baseline policy).

Functions that feed a loss take and return :class:`~dhal.nn.Tensor` so
gradients flow to the network outputs; plain arrays are accepted and treated
as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dhal.errors import DomainError
from dhal.nn import tensor as T
from dhal.nn.rng import RngStream
from dhal.nn.tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
BOUNDARY_NUDGE = 1e-6
LOG_2PI = float(np.log(2 * np.pi))


def softplus_with_offset(x) -> Tensor:
    return T.softplus_offset(x)


# -- Beta ------------------------------------------------------------------
@dataclass
class BetaActionParams:
    alpha: Tensor
    beta: Tensor
    bound: np.ndarray  # h per action dimension

    def __post_init__(self):
        self.alpha = T.tensor(self.alpha)
        self.beta = T.tensor(self.beta)
        self.bound = np.asarray(self.bound, dtype=np.float64)
        if np.any(self.bound <= 0):
            raise DomainError(f"action bound must be positive, got {self.bound}")
        if np.any(self.alpha.data <= 0) or np.any(self.beta.data <= 0):
            raise DomainError("Beta shape parameters must be positive")


def beta_sample_scaled(params: BetaActionParams, rng: RngStream) -> np.ndarray:
    """Draw a' = 2h * Beta(alpha, beta) - h.

    A draw that lands exactly on 0 or 1 (only plausible for alpha = beta = 1)
    is moved inward by 1e-6 so its log-density stays finite.
    """
    a = params.alpha.data.astype(np.float64)
    b = params.beta.data.astype(np.float64)
    u = rng.beta(a, b)
    u = np.where(u <= 0.0, BOUNDARY_NUDGE, np.where(u >= 1.0, 1.0 - BOUNDARY_NUDGE, u))
    h = params.bound
    return u * 2.0 * h - h


def beta_logprob_scaled(params: BetaActionParams, action) -> Tensor:
    """Log-density of the rescaled Beta, summed over the last (action) axis."""
    h = params.bound
    act = np.asarray(action.data if isinstance(action, Tensor) else action, dtype=np.float64)
    if np.any(np.abs(act) >= h):
        raise DomainError(f"action on or outside the support (-{h}, {h}); max |a| = {np.max(np.abs(act))}")
    u = (act + h) / (2.0 * h)
    alpha, beta = params.alpha, params.beta
    log_u = np.log(u).astype(alpha.data.dtype)
    log_1mu = np.log1p(-u).astype(alpha.data.dtype)
    log_b = T.lgamma(alpha) + T.lgamma(beta) - T.lgamma(alpha + beta)
    per_dim = (alpha - 1.0) * log_u + (beta - 1.0) * log_1mu - log_b - np.log(2.0 * h).astype(alpha.data.dtype)
    return per_dim.sum(axis=-1)


def beta_entropy(params: BetaActionParams) -> Tensor:
    """Differential entropy of the rescaled Beta, summed over action dimensions."""
    alpha, beta = params.alpha, params.beta
    total = alpha + beta
    log_b = T.lgamma(alpha) + T.lgamma(beta) - T.lgamma(total)
    per_dim = (
        log_b
        - (alpha - 1.0) * T.digamma(alpha)
        - (beta - 1.0) * T.digamma(beta)
        + (total - 2.0) * T.digamma(total)
        + np.log(2.0 * params.bound).astype(alpha.data.dtype)
    )
    return per_dim.sum(axis=-1)


def beta_mean_action(params: BetaActionParams) -> np.ndarray:
    """Deterministic deployment action: the mean of the rescaled Beta."""
    a = params.alpha.data.astype(np.float64)
    b = params.beta.data.astype(np.float64)
    h = params.bound
    return a / (a + b) * 2.0 * h - h


def beta_variance_scaled(alpha, beta, h) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    return 4.0 * np.asarray(h, dtype=np.float64) ** 2 * a * b / ((a + b) ** 2 * (a + b + 1.0))


# -- categorical -----------------------------------------------------------
@dataclass
class CategoricalParams:
    logits: Tensor

    def __post_init__(self):
        self.logits = T.tensor(self.logits)
        if self.logits.shape[-1] < 1:
            raise DomainError("need at least one mode")

    @property
    def num_modes(self) -> int:
        return self.logits.shape[-1]

    def probs(self) -> Tensor:
        return T.softmax(self.logits, axis=-1)


def sample_categorical_index(probs: np.ndarray, rng: RngStream) -> np.ndarray:
    """Inverse-CDF draw of one index per row of ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    u = rng.uniform(size=p.shape[:-1] + (1,)) * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), p.shape[-1] - 1)


def one_hot(index, k: int) -> np.ndarray:
    index = np.asarray(index)
    return (index[..., None] == np.arange(k)).astype(T.default_dtype())


def straight_through(delta: np.ndarray, probs: Tensor) -> Tensor:
    """Forward value ``delta``; backward behaves as if the output were ``probs``."""
    return T.add(T.sub(probs, probs.detach()), T.tensor(delta))


def categorical_sample_st(params: CategoricalParams, rng: RngStream, probs: Tensor | None = None):
    """Sample a one-hot indicator with a straight-through gradient.

    Returns ``(delta, index, probs)`` where ``delta`` is a tensor whose value is
    exactly one-hot and whose gradient flows to the logits through softmax.
    """
    if probs is None:
        probs = params.probs()
    idx = sample_categorical_index(probs.data, rng)
    delta = straight_through(one_hot(idx, params.num_modes), probs)
    return delta, idx, probs


def categorical_entropy(probs) -> Tensor:
    """-sum p ln p over the last axis with 0 ln 0 := 0."""
    p = T.tensor(probs)
    safe = T.where(p.data > 0, p, 1.0)
    return -(p * T.log(safe)).sum(axis=-1)


# -- Gaussian --------------------------------------------------------------
@dataclass
class DiagGaussianParams:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mean = T.tensor(self.mean)
        self.logvar = T.tensor(self.logvar)

    def clamped_logvar(self) -> Tensor:
        return T.clip(self.logvar, LOGVAR_MIN, LOGVAR_MAX)


def gaussian_reparameterize(params: DiagGaussianParams, rng: RngStream | None, deterministic: bool = False) -> Tensor:
    """z = mean + exp(logvar / 2) * eps; ``deterministic`` returns the mean."""
    if deterministic:
        return params.mean
    eps = rng.normal(size=params.mean.shape).astype(params.mean.data.dtype)
    std = T.exp(params.clamped_logvar() * 0.5)
    return params.mean + std * eps


def gaussian_kl_unit(params: DiagGaussianParams) -> Tensor:
    """KL(N(mean, diag exp(logvar)) || N(0, I)), summed over the last axis."""
    lv = params.clamped_logvar()
    return ((T.exp(lv) + params.mean * params.mean - 1.0 - lv) * 0.5).sum(axis=-1)


def gaussian_logprob(mean: Tensor, log_std: Tensor, action) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis (baseline policy)."""
    act = T.tensor(action)
    z = (act - mean) * T.exp(-log_std)
    return (z * z * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    return (T.tensor(log_std) + 0.5 * (1.0 + LOG_2PI)).sum(axis=-1)
