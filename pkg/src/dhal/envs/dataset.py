"""DHAL-DATA-1 transition files and the generators that produce them.

A file is one JSON header line followed by little-endian float32 records,
one per transition, in episode-major order::

    [obs | action | next_obs | contact (0/1) | done | true_mode (-1 if absent)]

The header carries ``version, env, obs_dim, act_dim, contact_dim, episodes,
steps, seed`` plus ``checksum`` (sha256 of the record bytes), verified on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dhal.envs import ball as ball_env
from dhal.envs.cart import CartConfig, CartEnv
from dhal.envs.slds import SldsSpec, default_slds2, slds_rollout
from dhal.errors import ContractError, CorruptFileError, DataError
from dhal.nn.rng import RngStream

VERSION = "DHAL-DATA-1"
ENV_NAMES = ("slds2", "ball", "cart")


def _as_rows(a, n: int) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim >= 2:
        return a.reshape(len(a), int(np.prod(a.shape[1:])))
    return a.reshape(n, -1) if n else a.reshape(len(a), 0)


@dataclass
class Dataset:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    contact: np.ndarray
    done: np.ndarray
    true_mode: np.ndarray
    env: str = "unknown"
    episodes: int = 0
    steps: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.obs)
        self.action = _as_rows(self.action, n)
        self.contact = _as_rows(self.contact, n)
        for name in ("action", "next_obs", "contact", "done", "true_mode"):
            if len(getattr(self, name)) != n:
                raise DataError(f"field {name!r} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.action.shape[1]

    @property
    def contact_dim(self) -> int:
        return self.contact.shape[1]

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.true_mode >= 0))

    def header(self) -> dict:
        return {
            "version": VERSION,
            "env": self.env,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "contact_dim": self.contact_dim,
            "episodes": self.episodes,
            "steps": self.steps,
            "seed": self.seed,
            **({"extra": self.extra} if self.extra else {}),
        }

    def records(self) -> np.ndarray:
        return np.concatenate(
            [
                self.obs,
                self.action,
                self.next_obs,
                self.contact,
                self.done.reshape(-1, 1),
                self.true_mode.reshape(-1, 1),
            ],
            axis=1,
        ).astype("<f4")

    def segment_starts(self) -> np.ndarray:
        """Boolean mask of records that begin a fresh history (episode start or after done)."""
        starts = np.zeros(len(self), dtype=bool)
        if len(self):
            starts[0] = True
            starts[1:] = self.done[:-1] > 0.5
            if self.steps:
                starts[:: self.steps] = True
        return starts


def encode_dataset(ds: Dataset) -> bytes:
    body = ds.records().tobytes()
    header = dict(ds.header(), checksum=hashlib.sha256(body).hexdigest(), records=len(ds))
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode() + body


def write_dataset(path, ds: Dataset) -> str:
    """Write ``ds`` and return the sha256 of the whole file."""
    data = encode_dataset(ds)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def decode_dataset(data: bytes) -> Dataset:
    head, sep, body = data.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError:
        raise CorruptFileError(f"not a {VERSION} file (unreadable header)") from None
    if not sep or header.get("version") != VERSION:
        raise CorruptFileError(f"not a {VERSION} file")
    if hashlib.sha256(body).hexdigest() != header.get("checksum"):
        raise CorruptFileError("dataset checksum mismatch")
    od, ad, cd = header["obs_dim"], header["act_dim"], header["contact_dim"]
    width = 2 * od + ad + cd + 2
    if len(body) % (4 * width):
        raise CorruptFileError("dataset body is not a whole number of records")
    rec = np.frombuffer(body, dtype="<f4").reshape(-1, width).astype(np.float64)
    cols = np.cumsum([od, ad, od, cd, 1])
    obs, act, nxt, con, done, mode = np.split(rec, cols, axis=1)
    return Dataset(
        obs=obs,
        action=act,
        next_obs=nxt,
        contact=con,
        done=done[:, 0],
        true_mode=mode[:, 0].astype(np.int64),
        env=header["env"],
        episodes=header["episodes"],
        steps=header["steps"],
        seed=header["seed"],
        extra=header.get("extra", {}),
    )


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- generators ------------------------------------------------------------
def _check_counts(episodes: int, steps: int) -> None:
    if episodes < 1 or steps < 1:
        raise ContractError(f"episodes and steps must be >= 1, got {episodes} and {steps}")


def slds_dataset(
    spec: SldsSpec,
    episodes: int,
    steps: int,
    rng: RngStream,
    input_policy: str = "zero",
    x0=None,
    seed: int = 0,
) -> Dataset:
    _check_counts(episodes, steps)
    parts = {k: [] for k in ("obs", "action", "next_obs", "done", "mode")}
    for ep in range(episodes):
        states, inputs, modes = slds_rollout(spec, steps, rng.split("episode", ep), input_policy, x0)
        done = np.zeros(steps)
        done[-1] = 1.0
        parts["obs"].append(states[:-1])
        parts["next_obs"].append(states[1:])
        parts["action"].append(inputs)
        parts["done"].append(done)
        parts["mode"].append(modes)
    n = episodes * steps
    return Dataset(
        obs=np.concatenate(parts["obs"]),
        action=np.concatenate(parts["action"]),
        next_obs=np.concatenate(parts["next_obs"]),
        contact=np.zeros((n, 0)),
        done=np.concatenate(parts["done"]),
        true_mode=np.concatenate(parts["mode"]),
        env=spec.name,
        episodes=episodes,
        steps=steps,
        seed=seed,
        extra={"input_policy": input_policy},
    )


def ball_dataset(episodes: int, steps: int, rng: RngStream, restitution: float = 0.8, seed: int = 0) -> Dataset:
    _check_counts(episodes, steps)
    rows = []
    for ep in range(episodes):
        r = rng.split("episode", ep)
        state = ball_env.BallState(y=float(r.uniform(0.5, 2.0)), v=0.0, restitution=restitution)
        for t in range(steps):
            nxt, contact, mode = ball_env.ball_step(state)
            rows.append(([state.y, state.v], [0.0], [nxt.y, nxt.v], [float(contact)], float(t == steps - 1), mode))
            state = nxt
    return _from_rows(rows, "ball", episodes, steps, seed)


def scripted_cart_action(obs: np.ndarray, rng: RngStream, noise: float = 0.3) -> float:
    """Phase-following push/lift controller with bounded noise, used for data collection."""
    v, theta, _, contact, _, _, glide, push, command = obs
    if push > 0.5 and command > 0:
        base = (0.8 if contact else 0.4) if v < command else -0.35
    else:
        base = -0.6 if theta > 0.3 else -0.3
    a = base + noise * (2.0 * rng.beta(2.0, 2.0) - 1.0)
    return float(np.clip(a, -0.999, 0.999))


def cart_dataset(
    episodes: int, steps: int, rng: RngStream, cfg: CartConfig | None = None, seed: int = 0
) -> Dataset:
    _check_counts(episodes, steps)
    cfg = cfg or CartConfig()
    cfg = CartConfig(**{**cfg.__dict__, "horizon": max(cfg.horizon, steps)})
    rows = []
    for ep in range(episodes):
        r = rng.split("episode", ep)
        env = CartEnv(cfg, r.split("env"))
        act_rng = r.split("policy")
        obs = env.reset()
        for t in range(steps):
            a = scripted_cart_action(obs, act_rng)
            res = env.step(a)
            done = res.done or t == steps - 1
            rows.append((obs, [a], res.obs, res.contact, float(done), res.true_mode))
            obs = env.reset() if res.done else res.obs
    return _from_rows(rows, "cart", episodes, steps, seed, extra={"period": cfg.period})


def _from_rows(rows, env, episodes, steps, seed, extra=None) -> Dataset:
    obs, act, nxt, con, done, mode = zip(*rows)
    return Dataset(
        obs=np.array(obs, dtype=np.float64),
        action=np.array(act, dtype=np.float64),
        next_obs=np.array(nxt, dtype=np.float64),
        contact=np.array(con, dtype=np.float64),
        done=np.array(done, dtype=np.float64),
        true_mode=np.array(mode, dtype=np.int64),
        env=env,
        episodes=episodes,
        steps=steps,
        seed=seed,
        extra=extra or {},
    )


def generate(env: str, episodes: int, steps: int, seed: int, period: float | None = None) -> Dataset:
    """Dataset for one of the named environments, deterministic in ``seed``."""
    rng = RngStream(seed).split("data", env)
    if env == "slds2":
        return slds_dataset(default_slds2(), episodes, steps, rng, seed=seed)
    if env == "ball":
        return ball_dataset(episodes, steps, rng, seed=seed)
    if env == "cart":
        cfg = CartConfig(period=period) if period else CartConfig()
        return cart_dataset(episodes, steps, rng, cfg, seed=seed)
    raise ContractError(f"unknown env {env!r}; choose from {ENV_NAMES}")
