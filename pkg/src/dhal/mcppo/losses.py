"""Multi-critic PPO algebra: per-group GAE, normalization, combination, losses."""

from __future__ import annotations

import numpy as np

from dhal.errors import ConfigError, ContractError, NumericalError
from dhal.nn import tensor as T
from dhal.nn.tensor import Tensor

NORM_EPS = 1e-8
WEIGHT_TOL = 1e-6


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Backward GAE over a (time, ...) layout for one reward group.

    ``values[t]`` is V(s_t); ``last_values`` bootstraps the step after the
    horizon. Returns ``(advantages, value_targets)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ContractError(f"rewards {rewards.shape}, values {values.shape}, dones {dones.shape} must match")
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    next_adv = np.zeros_like(next_value)
    for t in reversed(range(len(rewards))):
        keep = 1.0 - dones[t]
        delta = rewards[t] + gamma * keep * next_value - values[t]
        next_adv = delta + gamma * keep * lam * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def compute_group_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """GAE for every group at once; group is the last axis of rewards/values."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    last_values = np.asarray(last_values, dtype=np.float64)
    adv = np.zeros_like(rewards)
    targets = np.zeros_like(rewards)
    for g in range(rewards.shape[-1]):
        adv[..., g], targets[..., g] = compute_gae(
            rewards[..., g], values[..., g], dones, last_values[..., g], gamma, lam
        )
    return adv, targets


def normalize_advantages(adv) -> np.ndarray:
    """Standardize each group (last axis) over the whole batch with population std."""
    adv = np.asarray(adv, dtype=np.float64)
    flat = adv.reshape(-1, adv.shape[-1])
    if flat.shape[0] < 2:
        raise ContractError("advantage normalization needs a batch of at least 2")
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    return (adv - mu) / (sigma + NORM_EPS)


def check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ConfigError(f"advantage weights must be non-negative and sum to 1, got {w.tolist()}")
    return w


def combine_advantages(norm_adv, weights) -> np.ndarray:
    """Weighted sum over the group axis (last)."""
    w = check_weights(weights)
    norm_adv = np.asarray(norm_adv, dtype=np.float64)
    if norm_adv.shape[-1] != len(w):
        raise ContractError(f"{norm_adv.shape[-1]} advantage groups but {len(w)} weights")
    return norm_adv @ w


def value_loss(values: list, targets) -> tuple[Tensor, list[float]]:
    """Sum over groups of each critic's mean squared error to its own targets."""
    targets = np.asarray(targets, dtype=np.float64)
    total = None
    parts = []
    for g, v in enumerate(values):
        err = v.reshape(-1) - targets[..., g].reshape(-1)
        lg = (err * err).mean()
        parts.append(lg.item())
        total = lg if total is None else total + lg
    return total, parts


def surrogate_loss(new_logp: Tensor, old_logp, adv, clip: float) -> Tensor:
    """Clipped surrogate objective (to be maximized)."""
    new_logp = T.tensor(new_logp)
    old = np.asarray(old_logp, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if new_logp.shape != old.shape or old.shape != adv.shape:
        raise ContractError(f"surrogate shapes differ: {new_logp.shape}, {old.shape}, {adv.shape}")
    ratio = T.exp(new_logp - old)
    if not np.all(np.isfinite(ratio.data)):
        bad = int(np.sum(~np.isfinite(ratio.data)))
        raise NumericalError(
            f"{bad} non-finite probability ratios (max log-ratio {np.nanmax(new_logp.data - old):.3g})",
            component="mcppo.surrogate",
        )
    unclipped = ratio * adv
    clipped = T.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    return T.minimum(unclipped, clipped).mean()


def clip_fraction(new_logp, old_logp, clip: float) -> float:
    new = new_logp.data if isinstance(new_logp, Tensor) else np.asarray(new_logp)
    ratio = np.exp(new - np.asarray(old_logp))
    return float(np.mean(np.abs(ratio - 1.0) > clip))


def total_ppo_loss(surrogate, l_value, entropy, coef: float) -> Tensor:
    """L = L_value - surrogate - c * H."""
    return T.tensor(l_value) - T.tensor(surrogate) - T.tensor(entropy) * coef


def adaptive_lr_update(kl: float, target: float, lr: float, lo: float = 1e-6, hi: float = 1e-2) -> float:
    if kl > 2.0 * target:
        lr = lr / 1.5
    elif kl < target / 2.0:
        lr = lr * 1.5
    return float(min(max(lr, lo), hi))
