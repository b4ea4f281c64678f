"""Discrete hybrid automaton: mode selector plus one beta-VAE per mode.

The selector maps a history window to mode probabilities ``p``. A one-hot
indicator ``delta`` picks one encoder/decoder pair; the encoder turns the
window into a Gaussian latent ``z`` and the decoder predicts the next
observation and contact probabilities from ``z``. Training is unsupervised:
prediction error, contact cross-entropy, a weighted KL to N(0, I) and an
entropy penalty on ``p``. The selector only ever sees gradients from that
loss, through the straight-through path of ``delta`` and the entropy term.

Decoder ``i`` always reads the latent drawn from encoder ``i``. With a one-hot
``delta`` the forward value equals decoding the gated latent, but the
straight-through gradient then scores each encoder/decoder pair as a whole
instead of feeding one mode's latent into every other mode's decoder.

History windows are arrays of shape (batch, channels, window) with channels
``[obs..., previous action..., valid mask]``; the last column holds o_t and
a_{t-1}. Slots before an episode start are zero with mask 0.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from dhal import distributions as D
from dhal.envs.dataset import Dataset
from dhal.errors import DataError, DimensionError, NumericalError
from dhal.nn import tensor as T
from dhal.nn.checkpoint import load_checkpoint, save_checkpoint
from dhal.nn.layers import (
    HIDDEN_ACTIVATIONS,
    Conv1dSpec,
    MlpSpec,
    ParamStore,
    conv1d_forward,
    init_conv1d,
    init_mlp,
    mlp_forward,
)
from dhal.nn.optim import Adam
from dhal.nn.rng import RngStream
from dhal.nn.tensor import Tensor

CONTACT_CLAMP = 1e-6


@dataclass
class DhaConfig:
    num_modes: int = 3
    window: int = 20
    latent_dim: int = 20
    kl_weight: float = 1e-2
    entropy_weight: float = 1e-2
    selector_hidden: tuple = (256, 64, 32)
    conv_channels: tuple = (20, 20)
    conv_kernels: tuple = (6, 4)
    conv_strides: tuple = (2, 2)
    decoder_hidden: tuple = (256, 128, 64)
    activation: str = "elu"
    lr: float = 1e-3
    lr_final: float = 1e-5  # cosine decay target for offline training
    entropy_warmup: float = 0.5  # fraction of offline epochs over which w_H ramps from 0
    batch_size: int = 256

    def __post_init__(self):
        for name in ("selector_hidden", "conv_channels", "conv_kernels", "conv_strides", "decoder_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_modes < 1:
            raise DimensionError("need at least one mode")


@dataclass
class ModeBelief:
    probs: Tensor
    delta: Tensor
    index: np.ndarray


@dataclass
class Prediction:
    obs: Tensor
    contact_logits: Tensor
    contact: Tensor


@dataclass
class DhaModel:
    cfg: DhaConfig
    obs_dim: int
    act_dim: int
    contact_dim: int
    params: ParamStore = field(default_factory=ParamStore)

    @property
    def channels(self) -> int:
        return self.obs_dim + self.act_dim + 1

    @property
    def num_modes(self) -> int:
        return self.cfg.num_modes

    def selector_spec(self) -> MlpSpec:
        return MlpSpec((self.channels * self.cfg.window, *self.cfg.selector_hidden, self.num_modes), self.cfg.activation)

    def conv_spec(self) -> Conv1dSpec:
        return Conv1dSpec((self.channels, *self.cfg.conv_channels), self.cfg.conv_kernels, self.cfg.conv_strides)

    def head_spec(self) -> MlpSpec:
        flat = self.cfg.conv_channels[-1] * self.conv_spec().output_length(self.cfg.window)
        return MlpSpec((flat, 2 * self.cfg.latent_dim), self.cfg.activation)

    def decoder_spec(self) -> MlpSpec:
        return MlpSpec(
            (self.cfg.latent_dim, *self.cfg.decoder_hidden, self.obs_dim + self.contact_dim), self.cfg.activation
        )

    def selector_params(self) -> list[Tensor]:
        return self.params.subset("selector.")

    def encoder_params(self) -> list[Tensor]:
        return self.params.subset("enc")

    def all_params(self) -> list[Tensor]:
        return [p for _, p in self.params.items()]


def build_dha(cfg: DhaConfig, obs_dim: int, act_dim: int, contact_dim: int, rng: RngStream) -> DhaModel:
    model = DhaModel(cfg, obs_dim, act_dim, contact_dim)
    init_mlp(model.selector_spec(), model.params, "selector", rng.split("selector"), zero_last=True)
    for i in range(cfg.num_modes):
        init_conv1d(model.conv_spec(), model.params, f"enc{i}.conv", rng.split("enc", i))
        init_mlp(model.head_spec(), model.params, f"enc{i}.head", rng.split("enc", i, "head"))
        init_mlp(model.decoder_spec(), model.params, f"dec{i}", rng.split("dec", i))
    return model


# -- history windows ---------------------------------------------------------
def build_windows(obs: np.ndarray, prev_action: np.ndarray, starts: np.ndarray, window: int) -> np.ndarray:
    """Windows for every row of a flat, segment-ordered sequence.

    ``prev_action[i]`` is the action applied before ``obs[i]`` (zero at a
    segment start); ``starts`` marks rows that begin a new segment.
    """
    n = len(obs)
    seg_start = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    offsets = np.arange(window) - (window - 1)
    src = np.arange(n)[:, None] + offsets[None, :]
    valid = src >= seg_start[:, None]
    src = np.where(valid, src, 0)
    obs_w = obs[src] * valid[..., None]
    act_w = prev_action[src] * valid[..., None]
    win = np.concatenate([obs_w, act_w, valid[..., None].astype(np.float64)], axis=2)
    return np.ascontiguousarray(win.transpose(0, 2, 1)).astype(np.float32)


def dataset_windows(ds: Dataset, window: int) -> np.ndarray:
    starts = ds.segment_starts()
    prev_action = np.zeros_like(ds.action)
    prev_action[1:] = ds.action[:-1]
    prev_action[starts] = 0.0
    return build_windows(ds.obs, prev_action, starts, window)


class HistoryBuffer:
    """Rolling windows for a batch of environments stepping online."""

    def __init__(self, num_envs: int, obs_dim: int, act_dim: int, window: int):
        self.obs_dim, self.act_dim, self.window = obs_dim, act_dim, window
        self.buf = np.zeros((num_envs, obs_dim + act_dim + 1, window), dtype=np.float32)

    def reset(self, env_ids, obs) -> None:
        """Start fresh histories whose first entry is ``obs`` with a zero previous action."""
        env_ids = np.atleast_1d(env_ids)
        self.buf[env_ids] = 0.0
        self.buf[env_ids, : self.obs_dim, -1] = np.asarray(obs).reshape(len(env_ids), -1)
        self.buf[env_ids, -1, -1] = 1.0

    def push(self, obs, prev_action) -> None:
        """Append o_t together with a_{t-1} for every environment."""
        self.buf[:, :, :-1] = self.buf[:, :, 1:]
        self.buf[:, : self.obs_dim, -1] = obs
        self.buf[:, self.obs_dim : self.obs_dim + self.act_dim, -1] = prev_action
        self.buf[:, -1, -1] = 1.0

    def windows(self) -> np.ndarray:
        return self.buf.copy()


# -- forward pieces ----------------------------------------------------------
def _check_window(model: DhaModel, window) -> np.ndarray:
    w = window.data if isinstance(window, Tensor) else np.asarray(window)
    if w.ndim == 2:
        w = w[None]
    if w.shape[1:] != (model.channels, model.cfg.window):
        raise DimensionError(f"window shape {w.shape[1:]} does not match model ({model.channels}, {model.cfg.window})")
    return w


def selector_logits(model: DhaModel, window) -> Tensor:
    w = _check_window(model, window)
    return mlp_forward(model.selector_spec(), model.params, w.reshape(len(w), -1), "selector")


def mode_probabilities(model: DhaModel, window) -> Tensor:
    return T.softmax(selector_logits(model, window), axis=-1)


def select_mode(probs: Tensor, rng: RngStream | None = None, mode: str = "sample") -> ModeBelief:
    """One-hot mode indicator; ``argmax`` breaks ties toward the lowest index."""
    probs = T.tensor(probs)
    k = probs.shape[-1]
    if mode == "sample":
        idx = D.sample_categorical_index(probs.data, rng)
    elif mode == "argmax":
        idx = np.argmax(probs.data, axis=-1)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    delta = D.straight_through(D.one_hot(idx, k), probs)
    return ModeBelief(probs, delta, np.asarray(idx))


def _gate(stacked: Tensor, delta) -> Tensor:
    """sum_i delta[:, i] * stacked[:, i, :]"""
    d = T.tensor(delta)
    return (stacked * d.reshape(d.shape[0], d.shape[1], 1)).sum(axis=1)


def encoder_outputs(model: DhaModel, window) -> Tensor:
    """All K encoders' (mean, logvar) rows stacked to (batch, K, 2 * latent)."""
    w = _check_window(model, window)
    act = HIDDEN_ACTIVATIONS[model.cfg.activation]
    outs = []
    for i in range(model.num_modes):
        h = act(conv1d_forward(model.conv_spec(), model.params, w, f"enc{i}.conv", model.cfg.activation))
        h = h.reshape(h.shape[0], -1)
        outs.append(mlp_forward(model.head_spec(), model.params, h, f"enc{i}.head"))
    return T.stack(outs, axis=1)


def encode_modes(model: DhaModel, window, delta, rng: RngStream | None = None, deterministic: bool = False):
    """Every encoder's latent sample plus the selected encoder's Gaussian.

    Returns ``(z_modes, DiagGaussianParams)`` where ``z_modes`` has shape
    (batch, K, latent) and row ``i`` is drawn from encoder ``i``. The Gaussian
    is gated by ``delta`` and is what the KL term sees.
    """
    stacked = encoder_outputs(model, window)
    b, k, n = stacked.shape[0], model.num_modes, model.cfg.latent_dim
    per_mode = D.DiagGaussianParams(stacked[:, :, :n].reshape(b * k, n), stacked[:, :, n:].reshape(b * k, n))
    z_modes = D.gaussian_reparameterize(per_mode, rng, deterministic).reshape(b, k, n)
    gated = _gate(stacked, delta)
    return z_modes, D.DiagGaussianParams(gated[:, :n], gated[:, n:])


def encode(model: DhaModel, window, delta, rng: RngStream | None = None, deterministic: bool = False):
    """``z = sum_i delta_i * sample_i``; returns ``(z, DiagGaussianParams)``."""
    z_modes, gauss = encode_modes(model, window, delta, rng, deterministic)
    return _gate(z_modes, delta), gauss


def policy_latent(model: DhaModel, window, delta: np.ndarray) -> Tensor:
    """Gaussian-mean latent for a fixed (recorded) indicator.

    The indicator is a constant here, so gradients of a policy loss reach the
    encoders but never the selector.
    """
    gated = _gate(encoder_outputs(model, window), np.asarray(delta, dtype=T.default_dtype()))
    return gated[:, : model.cfg.latent_dim]


def decode(model: DhaModel, z, delta) -> Prediction:
    """Gate the K decoders by ``delta``.

    ``z`` is either one latent per row (batch, latent), fed to every decoder,
    or per-mode latents (batch, K, latent) where decoder ``i`` reads row ``i``.
    """
    z = T.tensor(z)
    if len(z.shape) == 3:
        outs = [mlp_forward(model.decoder_spec(), model.params, z[:, i, :], f"dec{i}") for i in range(model.num_modes)]
    else:
        outs = [mlp_forward(model.decoder_spec(), model.params, z, f"dec{i}") for i in range(model.num_modes)]
    gated = _gate(T.stack(outs, axis=1), delta)
    obs_hat = gated[:, : model.obs_dim]
    logits = gated[:, model.obs_dim :]
    return Prediction(obs_hat, logits, T.sigmoid(logits))


def predict_next(model: DhaModel, window, rng: RngStream | None = None, deterministic: bool = True):
    """Selector -> indicator -> encoder -> decoder. Deterministic uses argmax and the latent mean.

    Returns ``(belief, prediction, z)`` with ``z`` the selected mode's latent.
    """
    probs = mode_probabilities(model, window)
    belief = select_mode(probs, rng, "argmax" if deterministic else "sample")
    z_modes, _ = encode_modes(model, window, belief.delta, rng, deterministic)
    return belief, decode(model, z_modes, belief.delta), _gate(z_modes, belief.delta)


# -- loss and training -------------------------------------------------------
def dha_loss(model: DhaModel, windows, next_obs, next_contact, rng: RngStream, entropy_scale: float = 1.0):
    """Unsupervised DHA objective on a batch; returns ``(loss, metrics)``.

    ``entropy_scale`` multiplies the configured entropy weight (used for the
    warm-up in :func:`train_dha`).
    """
    windows = _check_window(model, windows)
    if len(windows) == 0:
        raise DataError("empty batch")
    c = np.asarray(next_contact, dtype=np.float64).reshape(len(windows), model.contact_dim)
    if np.any((c != 0) & (c != 1)):
        raise DataError("contact targets must be 0 or 1")
    probs = mode_probabilities(model, windows)
    belief = select_mode(probs, rng.split("select"), "sample")
    z_modes, gauss = encode_modes(model, windows, belief.delta, rng.split("latent"))
    pred = decode(model, z_modes, belief.delta)

    err = pred.obs - np.asarray(next_obs, dtype=np.float64)
    mse = (err * err).mean()
    if model.contact_dim:
        ch = T.clip(pred.contact, CONTACT_CLAMP, 1 - CONTACT_CLAMP)
        bce = -(T.log(ch) * c + T.log(1.0 - ch) * (1.0 - c)).mean()
    else:
        bce = T.tensor(0.0)
    kl = D.gaussian_kl_unit(gauss).mean()
    ent = D.categorical_entropy(probs).mean()
    loss = mse + bce + kl * model.cfg.kl_weight + ent * (model.cfg.entropy_weight * entropy_scale)
    metrics = {
        "loss": loss.item(),
        "mse": mse.item(),
        "bce": bce.item(),
        "kl": kl.item(),
        "entropy": ent.item(),
        "mode_hist": np.bincount(belief.index, minlength=model.num_modes).tolist(),
    }
    if not np.isfinite(metrics["loss"]):
        raise NumericalError("non-finite DHA loss", component="dha")
    return loss, metrics


def dha_update(
    model: DhaModel, opt: Adam, windows, next_obs, next_contact, rng: RngStream, entropy_scale: float = 1.0
) -> dict:
    opt.zero_grad()
    loss, metrics = dha_loss(model, windows, next_obs, next_contact, rng, entropy_scale)
    T.backward(loss)
    opt.step()
    return metrics


def make_dha_optimizer(model: DhaModel) -> Adam:
    return Adam(model.all_params(), lr=model.cfg.lr)


def check_dataset(model: DhaModel, ds: Dataset) -> None:
    dims = (ds.obs_dim, ds.act_dim, ds.contact_dim)
    if dims != (model.obs_dim, model.act_dim, model.contact_dim):
        raise DimensionError(
            f"dataset dims (obs, act, contact) = {dims} do not match model "
            f"{(model.obs_dim, model.act_dim, model.contact_dim)}"
        )


def cosine_lr(lr: float, lr_final: float, epoch: int, epochs: int) -> float:
    return float(lr_final + 0.5 * (lr - lr_final) * (1.0 + np.cos(np.pi * epoch / max(epochs, 1))))


def train_dha(
    model: DhaModel,
    ds: Dataset,
    epochs: int,
    rng: RngStream,
    checkpoint: str | None = None,
    log=None,
) -> list[dict]:
    """Mini-batch Adam on :func:`dha_loss`; returns one metrics dict per epoch.

    The learning rate follows a cosine from ``cfg.lr`` to ``cfg.lr_final`` and
    the entropy weight ramps linearly from zero over the first
    ``cfg.entropy_warmup`` fraction of epochs. Without the ramp the entropy
    penalty tends to collapse the selector onto one mode before the experts
    have specialised.
    """
    check_dataset(model, ds)
    windows = dataset_windows(ds, model.cfg.window)
    opt = make_dha_optimizer(model)
    cfg = model.cfg
    bs = cfg.batch_size
    curve = []
    for epoch in range(epochs):
        erng = rng.split("epoch", epoch)
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final, epoch, epochs)
        scale = min(1.0, epoch / (cfg.entropy_warmup * epochs)) if cfg.entropy_warmup > 0 else 1.0
        order = erng.permutation(len(ds))
        totals: dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start : start + bs]
            m = dha_update(model, opt, windows[idx], ds.next_obs[idx], ds.contact[idx], erng.split("batch", b), scale)
            for key in ("loss", "mse", "bce", "kl", "entropy"):
                totals[key] = totals.get(key, 0.0) + m[key]
            n_batches += 1
        row = {"epoch": epoch, "lr": opt.lr, **{k: v / n_batches for k, v in totals.items()}}
        curve.append(row)
        if log is not None:
            log(row)
    if checkpoint is not None:
        save_dha(checkpoint, model)
    return curve


def predict_dataset(model: DhaModel, windows: np.ndarray, chunk: int = 4096):
    """Deterministic predictions for many windows: (mode index, obs_hat, contact prob)."""
    idx, obs, con = [], [], []
    for s in range(0, len(windows), chunk):
        belief, pred, _ = predict_next(model, windows[s : s + chunk], deterministic=True)
        idx.append(belief.index)
        obs.append(pred.obs.data.astype(np.float64))
        con.append(pred.contact.data.astype(np.float64))
    return np.concatenate(idx), np.concatenate(obs), np.concatenate(con)


def _bce_rows(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    if prob.shape[1] == 0:
        return np.zeros(len(prob))
    p = np.clip(prob, CONTACT_CLAMP, 1 - CONTACT_CLAMP)
    return -(target * np.log(p) + (1 - target) * np.log(1 - p)).mean(axis=1)


def prediction_errors(model: DhaModel, ds: Dataset):
    """Per-record squared error (mean over obs dims), BCE, and predicted mode."""
    check_dataset(model, ds)
    modes, obs_hat, con_hat = predict_dataset(model, dataset_windows(ds, model.cfg.window))
    sq = ((obs_hat - ds.next_obs) ** 2).mean(axis=1)
    return sq, _bce_rows(con_hat, ds.contact), modes, obs_hat


def summarize_errors(sq: np.ndarray, bce: np.ndarray, modes: np.ndarray, num_modes: int) -> dict:
    per_mode = []
    for k in range(num_modes):
        sel = modes == k
        if sel.any():
            per_mode.append(
                {"mode": k + 1, "count": int(sel.sum()), "mse": float(sq[sel].mean()), "bce": float(bce[sel].mean())}
            )
    return {
        "overall_mse": float(sq.mean()),
        "overall_mse_std": float(sq.std()),
        "overall_bce": float(bce.mean()),
        "per_mode": per_mode,
        "mode_histogram": np.bincount(modes, minlength=num_modes).tolist(),
    }


def eval_prediction_mse(model: DhaModel, ds: Dataset) -> dict:
    if len(ds) == 0:
        raise DataError("empty dataset")
    sq, bce, modes, _ = prediction_errors(model, ds)
    return summarize_errors(sq, bce, modes, model.num_modes)


# -- persistence -------------------------------------------------------------
def dha_meta(model: DhaModel) -> dict:
    return {
        "kind": "dha",
        "config": asdict(model.cfg),
        "obs_dim": model.obs_dim,
        "act_dim": model.act_dim,
        "contact_dim": model.contact_dim,
    }


def save_dha(path, model: DhaModel, extra: dict | None = None) -> str:
    return save_checkpoint(path, model.params.state_dict(), {**dha_meta(model), **(extra or {})})


def dha_from_state(state: dict, meta: dict, prefix: str = "") -> DhaModel:
    cfg = DhaConfig(**meta["config"])
    model = build_dha(cfg, meta["obs_dim"], meta["act_dim"], meta["contact_dim"], RngStream(0))
    sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
    model.params.load_state_dict(sub)
    return model


def load_dha(path) -> tuple[DhaModel, dict]:
    state, meta = load_checkpoint(path)
    if meta.get("kind") == "policy":
        return dha_from_state(state, meta["dha"], prefix="dha/"), meta
    return dha_from_state(state, meta), meta
