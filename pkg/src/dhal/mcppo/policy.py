"""Actor (Beta or clipped-Gaussian baseline) and per-group critics.

Both consume ``[z, obs, previous action]``. The actor has one shared torso
whose last layer emits ``2 * act_dim`` raw values: the first half feeds
alpha and the second half beta, each through softplus-plus-one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dhal import distributions as D
from dhal.errors import ConfigError
from dhal.nn import tensor as T
from dhal.nn.layers import MlpSpec, ParamStore, init_mlp, mlp_forward
from dhal.nn.rng import RngStream
from dhal.nn.tensor import Tensor

POLICY_KINDS = ("beta", "gaussian")


@dataclass
class ActionDist:
    """Batch of action distributions produced by the actor."""

    kind: str
    bound: np.ndarray
    beta: D.BetaActionParams | None = None
    mean: Tensor | None = None
    log_std: Tensor | None = None

    def sample(self, rng: RngStream) -> np.ndarray:
        if self.kind == "beta":
            return D.beta_sample_scaled(self.beta, rng)
        std = np.exp(self.log_std.data.astype(np.float64))
        return self.mean.data.astype(np.float64) + std * rng.normal(size=self.mean.shape)

    def log_prob(self, action) -> Tensor:
        if self.kind == "beta":
            return D.beta_logprob_scaled(self.beta, action)
        return D.gaussian_logprob(self.mean, self.log_std, action)

    def entropy(self) -> Tensor:
        if self.kind == "beta":
            return D.beta_entropy(self.beta)
        ent = D.gaussian_entropy(self.log_std)
        return ent * np.ones(self.mean.shape[0], dtype=ent.data.dtype)

    def mode(self) -> np.ndarray:
        """Deterministic action: Beta mean, or the clipped Gaussian mean."""
        if self.kind == "beta":
            return D.beta_mean_action(self.beta)
        return np.clip(self.mean.data.astype(np.float64), -self.bound, self.bound)

    def to_env(self, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Action sent to the environment and a per-sample flag for clipping."""
        clipped = np.clip(action, -self.bound, self.bound)
        return clipped, np.any(clipped != action, axis=-1)


@dataclass
class ActorCritic:
    input_dim: int
    act_dim: int
    bound: np.ndarray
    groups: tuple
    kind: str = "beta"
    actor_hidden: tuple = (512, 256, 128)
    critic_hidden: tuple = (512, 256, 128)
    init_log_std: float = 0.0
    params: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; choose from {POLICY_KINDS}")
        self.bound = np.broadcast_to(np.asarray(self.bound, dtype=np.float64), (self.act_dim,)).copy()
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    def actor_spec(self) -> MlpSpec:
        out = 2 * self.act_dim if self.kind == "beta" else self.act_dim
        return MlpSpec((self.input_dim, *self.actor_hidden, out))

    def critic_spec(self) -> MlpSpec:
        return MlpSpec((self.input_dim, *self.critic_hidden, 1))

    def init(self, rng: RngStream) -> "ActorCritic":
        init_mlp(self.actor_spec(), self.params, "actor", rng.split("actor"))
        if self.kind == "gaussian":
            self.params.add("actor.log_std", np.full(self.act_dim, self.init_log_std))
        for g in self.groups:
            init_mlp(self.critic_spec(), self.params, f"critic.{g}", rng.split("critic", g))
        return self

    def actor_params(self) -> list[Tensor]:
        return self.params.subset("actor.")

    def critic_params(self, group: str | None = None) -> list[Tensor]:
        return self.params.subset(f"critic.{group}." if group else "critic.")

    def distribution(self, x, return_hidden: bool = False):
        out, hidden = mlp_forward(self.actor_spec(), self.params, x, "actor", return_hidden=True)
        if self.kind == "beta":
            a = self.act_dim
            dist = ActionDist(
                "beta", self.bound, beta=D.BetaActionParams(T.softplus_offset(out[:, :a]), T.softplus_offset(out[:, a:]), self.bound)
            )
        else:
            dist = ActionDist("gaussian", self.bound, mean=out, log_std=self.params["actor.log_std"])
        return (dist, hidden) if return_hidden else dist

    def values(self, x) -> list[Tensor]:
        """One (batch,) value tensor per critic group."""
        return [mlp_forward(self.critic_spec(), self.params, x, f"critic.{g}").reshape(-1) for g in self.groups]


def policy_input(z, obs, prev_action) -> Tensor:
    """Actor/critic input ``[z, o_t, a_{t-1}]``."""
    const = np.concatenate([np.asarray(obs), np.asarray(prev_action)], axis=-1).astype(T.default_dtype())
    return T.concat([T.tensor(z), T.tensor(const)], axis=-1)
