"""Rollout collection and the multi-critic PPO iteration on the cart env."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dhal import dha as dha_mod
from dhal.envs.cart import CartConfig, CartEnv
from dhal.errors import ConfigError, ContractError, DataError, NumericalError
from dhal.mcppo import losses as L
from dhal.mcppo.policy import ActorCritic, policy_input
from dhal.nn import tensor as T
from dhal.nn.checkpoint import load_checkpoint, save_checkpoint
from dhal.nn.optim import Adam
from dhal.nn.rng import RngStream

REWARD_GROUPS = ("glide", "push", "reg")
CRITIC_PRESETS = ("multi", "single-transfer", "single-raw")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.9
    clip: float = 0.2
    target_kl: float = 0.01
    num_minibatches: int = 4
    learning_epochs: int = 5
    horizon: int = 24
    num_envs: int = 64
    entropy_coef: float = 0.01
    lr: float = 1e-3
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    max_grad_norm: float = 1.0
    weights: tuple = (0.35, 0.4, 0.25)
    policy: str = "beta"
    critics: str = "multi"
    actor_hidden: tuple = (512, 256, 128)
    critic_hidden: tuple = (512, 256, 128)
    init_log_std: float = 0.0

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        self.actor_hidden = tuple(int(w) for w in self.actor_hidden)
        self.critic_hidden = tuple(int(w) for w in self.critic_hidden)
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ConfigError("gamma and lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip must be positive")
        if self.critics not in CRITIC_PRESETS:
            raise ConfigError(f"unknown critic preset {self.critics!r}; choose from {CRITIC_PRESETS}")
        if len(self.weights) != len(REWARD_GROUPS):
            raise ConfigError(f"need one advantage weight per group {REWARD_GROUPS}")
        L.check_weights(self.weights)
        if self.horizon < 1 or self.num_envs < 1 or self.num_minibatches < 1 or self.learning_epochs < 0:
            raise ConfigError("horizon, num_envs and num_minibatches must be >= 1")
        if self.horizon * self.num_envs < 2:
            raise ConfigError("a rollout needs at least two transitions")

    @property
    def critic_groups(self) -> tuple:
        return REWARD_GROUPS if self.critics == "multi" else ("total",)

    @property
    def critic_weights(self) -> tuple:
        return self.weights if self.critics == "multi" else (1.0,)

    def group_rewards(self, rewards: np.ndarray) -> np.ndarray:
        """Map raw (glide, push, reg) rewards onto the critic groups of this preset."""
        if self.critics == "multi":
            return rewards
        if self.critics == "single-transfer":
            return (rewards @ np.asarray(self.weights))[..., None]
        return rewards.sum(axis=-1, keepdims=True)


@dataclass
class RolloutBuffer:
    windows: np.ndarray  # (T, N, C, L)
    delta: np.ndarray  # (T, N, K) one-hot mode indicator used for z
    obs: np.ndarray
    prev_action: np.ndarray
    action: np.ndarray  # raw policy sample (before any clipping)
    log_prob: np.ndarray
    rewards: np.ndarray  # (T, N, 3) raw groups, never pre-summed
    values: np.ndarray  # (T, N, G)
    dones: np.ndarray
    next_obs: np.ndarray
    contact: np.ndarray
    true_mode: np.ndarray
    clipped: np.ndarray
    timeout_values: np.ndarray  # (T, N, G) V(s_{t+1}) where the time limit cut the episode, else 0
    last_values: np.ndarray  # (N, G)

    @property
    def size(self) -> int:
        return self.dones.size

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(self.size, *arr.shape[2:])


@dataclass
class Learner:
    cfg: PpoConfig
    dha: dha_mod.DhaModel
    ac: ActorCritic
    env_cfg: CartConfig
    seed: int
    envs: list = field(default_factory=list)
    iteration: int = 0

    def __post_init__(self):
        root = RngStream(self.seed)
        self.envs = [CartEnv(self.env_cfg, root.split("env", i)) for i in range(self.cfg.num_envs)]
        ppo_params = self.ac.actor_params() + self.ac.critic_params() + self.dha.encoder_params()
        self.ppo_opt = Adam(ppo_params, lr=self.cfg.lr, max_grad_norm=self.cfg.max_grad_norm)
        self.dha_opt = dha_mod.make_dha_optimizer(self.dha)
        self.history = dha_mod.HistoryBuffer(self.cfg.num_envs, CartEnv.obs_dim, CartEnv.act_dim, self.dha.cfg.window)
        self.obs = np.stack([env.reset() for env in self.envs])
        self.prev_action = np.zeros((self.cfg.num_envs, CartEnv.act_dim))
        self.history.reset(np.arange(self.cfg.num_envs), self.obs)
        self.rng = root.split("learner")


def build_learner(
    cfg: PpoConfig,
    dha_cfg: dha_mod.DhaConfig | None = None,
    env_cfg: CartConfig | None = None,
    seed: int = 0,
) -> Learner:
    env_cfg = env_cfg or CartConfig()
    dha_cfg = dha_cfg or dha_mod.DhaConfig()
    root = RngStream(seed).split("init")
    dha = dha_mod.build_dha(dha_cfg, CartEnv.obs_dim, CartEnv.act_dim, CartEnv.contact_dim, root.split("dha"))
    ac = ActorCritic(
        input_dim=dha_cfg.latent_dim + CartEnv.obs_dim + CartEnv.act_dim,
        act_dim=CartEnv.act_dim,
        bound=env_cfg.bound,
        groups=cfg.critic_groups,
        kind=cfg.policy,
        actor_hidden=cfg.actor_hidden,
        critic_hidden=cfg.critic_hidden,
        init_log_std=cfg.init_log_std,
    ).init(root.split("ac"))
    return Learner(cfg, dha, ac, env_cfg, seed)


def _policy_step(learner: Learner, windows: np.ndarray, obs: np.ndarray, prev_action: np.ndarray):
    belief, _, z = dha_mod.predict_next(learner.dha, windows, deterministic=True)
    x = policy_input(z.data, obs, prev_action)
    return belief, x


def collect_rollouts(learner: Learner, rng: RngStream) -> RolloutBuffer:
    cfg, n = learner.cfg, learner.cfg.num_envs
    steps: dict[str, list] = {k: [] for k in RolloutBuffer.__dataclass_fields__ if k != "last_values"}
    for t in range(cfg.horizon):
        windows = learner.history.windows()
        belief, x = _policy_step(learner, windows, learner.obs, learner.prev_action)
        dist = learner.ac.distribution(x)
        action = dist.sample(rng.split("action", t))
        log_prob = dist.log_prob(action).data.astype(np.float64)
        values = np.stack([v.data for v in learner.ac.values(x)], axis=-1).astype(np.float64)
        env_action, clipped = dist.to_env(action)

        rewards = np.zeros((n, 3))
        dones = np.zeros(n)
        next_obs = np.zeros_like(learner.obs)
        contact = np.zeros((n, CartEnv.contact_dim))
        modes = np.zeros(n, dtype=np.int64)
        timeouts = np.zeros(n, dtype=bool)
        for i, env in enumerate(learner.envs):
            try:
                res = env.step(env_action[i])
            except ContractError as exc:
                raise ContractError(f"env {i}: {exc}") from exc
            rewards[i], dones[i], next_obs[i], contact[i], modes[i], timeouts[i] = (
                res.rewards, float(res.done), res.obs, res.contact, res.true_mode, res.timeout
            )

        learner.history.push(next_obs, env_action)
        timeout_values = np.zeros_like(values)
        cut = np.flatnonzero(timeouts)
        if len(cut):
            # truncated episodes bootstrap from the state the clock cut them at
            _, x_cut = _policy_step(learner, learner.history.windows()[cut], next_obs[cut], env_action[cut])
            timeout_values[cut] = np.stack([v.data for v in learner.ac.values(x_cut)], axis=-1)
        done_ids = np.flatnonzero(dones)
        new_obs = next_obs.copy()
        for i in done_ids:
            new_obs[i] = learner.envs[i].reset()

        for key, val in (
            ("windows", windows), ("delta", belief.delta.data.copy()), ("obs", learner.obs),
            ("prev_action", learner.prev_action), ("action", action), ("log_prob", log_prob),
            ("rewards", rewards), ("values", values), ("dones", dones), ("next_obs", next_obs),
            ("contact", contact), ("true_mode", modes), ("clipped", clipped), ("timeout_values", timeout_values),
        ):
            steps[key].append(np.array(val))

        learner.prev_action = np.where(dones[:, None] > 0, 0.0, env_action)
        learner.obs = new_obs
        if len(done_ids):
            learner.history.reset(done_ids, new_obs[done_ids])

    _, x = _policy_step(learner, learner.history.windows(), learner.obs, learner.prev_action)
    last_values = np.stack([v.data for v in learner.ac.values(x)], axis=-1).astype(np.float64)
    return RolloutBuffer(**{k: np.stack(v) for k, v in steps.items()}, last_values=last_values)


def buffer_advantages(cfg: PpoConfig, buf: RolloutBuffer):
    """Per-group GAE, per-group normalization, weighted combination (flattened)."""
    rewards = cfg.group_rewards(buf.rewards) + cfg.gamma * buf.timeout_values
    adv, targets = L.compute_group_gae(rewards, buf.values, buf.dones, buf.last_values, cfg.gamma, cfg.lam)
    g = rewards.shape[-1]
    norm = L.normalize_advantages(adv.reshape(-1, g))
    return L.combine_advantages(norm, cfg.critic_weights), targets.reshape(-1, g)


def ppo_minibatch_loss(learner: Learner, buf: RolloutBuffer, idx, combined, targets):
    """Total PPO loss on rows ``idx`` of the flattened buffer, plus diagnostics."""
    cfg = learner.cfg
    z = dha_mod.policy_latent(learner.dha, buf.flat("windows")[idx], buf.flat("delta")[idx])
    x = policy_input(z, buf.flat("obs")[idx], buf.flat("prev_action")[idx])
    dist = learner.ac.distribution(x)
    new_logp = dist.log_prob(buf.flat("action")[idx])
    old_logp = buf.flat("log_prob")[idx]
    surr = L.surrogate_loss(new_logp, old_logp, combined[idx], cfg.clip)
    l_value, parts = L.value_loss(learner.ac.values(x), targets[idx])
    entropy = dist.entropy().mean()
    loss = L.total_ppo_loss(surr, l_value, entropy, cfg.entropy_coef)
    info = {
        "surrogate": surr.item(),
        "value_loss": l_value.item(),
        "entropy": entropy.item(),
        "clip_frac": L.clip_fraction(new_logp, old_logp, cfg.clip),
    }
    if not np.isfinite(loss.item()):
        raise NumericalError(f"non-finite PPO loss ({info})", component="mcppo")
    return loss, info


def measure_kl(learner: Learner, buf: RolloutBuffer) -> float:
    """Batch mean of (old log-prob - new log-prob) on the collected actions."""
    z = dha_mod.policy_latent(learner.dha, buf.flat("windows"), buf.flat("delta"))
    x = policy_input(z.data, buf.flat("obs"), buf.flat("prev_action"))
    new = learner.ac.distribution(x).log_prob(buf.flat("action")).data
    return float(np.mean(buf.flat("log_prob") - new))


def ppo_update(learner: Learner, buf: RolloutBuffer, rng: RngStream, dha_updates: bool = True) -> dict:
    cfg = learner.cfg
    combined, targets = buffer_advantages(cfg, buf)
    infos, dha_metrics = [], []
    for epoch in range(cfg.learning_epochs):
        order = rng.split("epoch", epoch).permutation(buf.size)
        for idx in np.array_split(order, cfg.num_minibatches):
            learner.ppo_opt.zero_grad()
            loss, info = ppo_minibatch_loss(learner, buf, idx, combined, targets)
            T.backward(loss)
            learner.ppo_opt.step()
            infos.append(info)
    if dha_updates:
        # one DHA step on the same buffer, independent of the PPO objective
        dha_metrics.append(
            dha_mod.dha_update(
                learner.dha, learner.dha_opt, buf.flat("windows"), buf.flat("next_obs"),
                buf.flat("contact"), rng.split("dha"),
            )
        )
    kl = measure_kl(learner, buf)
    learner.ppo_opt.lr = L.adaptive_lr_update(kl, cfg.target_kl, learner.ppo_opt.lr, cfg.lr_min, cfg.lr_max)
    out = {"kl": kl, "lr": learner.ppo_opt.lr}
    for key in ("surrogate", "value_loss", "entropy", "clip_frac"):
        out[key] = float(np.mean([i[key] for i in infos])) if infos else 0.0
    for key in ("mse", "bce", "kl", "entropy"):
        out[f"dha_{key}"] = float(np.mean([m[key] for m in dha_metrics])) if dha_metrics else 0.0
    return out


def train_iteration(learner: Learner, dha_updates: bool = True) -> dict:
    it_rng = learner.rng.split("iter", learner.iteration)
    buf = collect_rollouts(learner, it_rng.split("collect"))
    upd = ppo_update(learner, buf, it_rng.split("update"), dha_updates)
    modes = np.argmax(buf.delta, axis=-1).reshape(-1)
    metrics = {
        "iter": learner.iteration,
        "return_total": float(buf.rewards.sum(axis=-1).mean()),
        "return_glide": float(buf.rewards[..., 0].mean()),
        "return_push": float(buf.rewards[..., 1].mean()),
        "return_reg": float(buf.rewards[..., 2].mean()),
        "clip_rate": float(buf.clipped.mean()),
        "episodes_done": int(buf.dones.sum()),
        "mode_hist": np.bincount(modes, minlength=learner.dha.num_modes).tolist(),
        **upd,
    }
    learner.iteration += 1
    return metrics


# -- metrics and checkpoints -------------------------------------------------
class MetricsLog:
    """Append-only JSON-lines log, flushed after every record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def append(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {lineno} is not valid JSON ({exc.msg})") from None
    return rows


def save_learner(path, learner: Learner) -> str:
    state = {f"dha/{k}": v for k, v in learner.dha.params.state_dict().items()}
    state.update({f"ac/{k}": v for k, v in learner.ac.params.state_dict().items()})
    meta = {
        "kind": "policy",
        "iteration": learner.iteration,
        "seed": learner.seed,
        "dha": dha_mod.dha_meta(learner.dha),
        "ppo": asdict(learner.cfg),
        "env": asdict(learner.env_cfg),
        "lr": learner.ppo_opt.lr,
    }
    return save_checkpoint(path, state, meta)


def load_learner(path) -> Learner:
    state, meta = load_checkpoint(path)
    env = meta["env"]
    env["command_range"] = tuple(env["command_range"])
    learner = build_learner(
        PpoConfig(**meta["ppo"]), dha_mod.DhaConfig(**meta["dha"]["config"]), CartConfig(**env), meta["seed"]
    )
    learner.dha.params.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("dha/")})
    learner.ac.params.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("ac/")})
    learner.iteration = meta["iteration"]
    learner.ppo_opt.lr = meta["lr"]
    return learner
