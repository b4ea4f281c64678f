"""Push-glide cart: a one-legged rider propelling a board.

The leg is a single hinged link hanging from the board. Its tip touches the
ground when ``pivot_height - leg_length * sin(theta) <= 0``. Pressing the tip
into the ground (positive torque while in contact) drives the board forward
until the stroke is used up; lifting the tip clear of the ground re-arms the
stroke. Entering contact zeroes the tip velocity (inelastic impact).

Rewards come in three groups, mirroring a phase-scheduled task:

* glide: velocity tracking gated by the glide indicator, plus a bonus for
  keeping the leg lifted during glide,
* push: velocity tracking gated by the push indicator, plus a bonus for
  ground contact during push,
* regularization: squared action-rate and torque penalties.

Observation layout (9 values)::

    [board velocity, leg angle, leg angular velocity, contact flag,
     sin phase, cos phase, glide indicator, push indicator, command velocity]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dhal.errors import ContractError
from dhal.nn.rng import RngStream

GLIDE, TRANSITION, PUSH = 0, 1, 2
OBS_FIELDS = (
    "board_velocity",
    "leg_angle",
    "leg_velocity",
    "contact",
    "phase_sin",
    "phase_cos",
    "glide_indicator",
    "push_indicator",
    "command_velocity",
)
PRIVILEGED_FIELDS = ("board_position", "stroke", "true_mode")
LPF_DECAY = 0.9


@dataclass
class PhaseClock:
    period: float = 4.0
    t: float = 0.0
    still: bool = False
    glide: float = 1.0
    push: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ContractError("clock period must be positive")

    @property
    def phase(self) -> float:
        return float(np.sin(2 * np.pi * self.t / self.period))

    def raw(self) -> tuple[float, float]:
        phi = self.phase
        glide = (phi < 0.5) or self.still
        push = (phi >= 0.5) and not self.still
        return float(glide), float(push)

    def reset_filter(self) -> None:
        self.glide, self.push = self.raw()

    def advance(self, dt: float) -> None:
        self.t += dt
        self.glide, self.push = phase_indicators(self)


def phase_indicators(clock: PhaseClock) -> tuple[float, float]:
    """Low-pass filtered (glide, push) indicators for the clock's current time."""
    g, p = clock.raw()
    return (
        LPF_DECAY * clock.glide + (1 - LPF_DECAY) * g,
        LPF_DECAY * clock.push + (1 - LPF_DECAY) * p,
    )


@dataclass
class CartConfig:
    dt: float = 0.02
    horizon: int = 400
    period: float = 4.0
    bound: float = 1.0
    friction: float = 0.1  # rolling deceleration, m/s^2
    pivot_height: float = 0.2
    leg_length: float = 0.3
    torque_gain: float = 12.0
    leg_gravity: float = 4.0
    leg_damping: float = 4.0
    push_gain: float = 4.0
    max_speed: float = 2.5
    stroke_length: float = 0.6
    lift_clearance: float = 0.05
    angle_limit: float = 1.2
    command_range: tuple = (1.0, 2.0)
    still_probability: float = 0.1
    random_phase: bool = True  # start each episode at a uniformly drawn clock time
    tracking_sigma: float = 0.5
    posture_bonus: float = 0.5
    action_rate_weight: float = 0.05
    torque_weight: float = 0.02

    @property
    def contact_angle(self) -> float:
        return float(np.arcsin(self.pivot_height / self.leg_length))


@dataclass
class CartEnvState:
    x: float = 0.0
    v: float = 0.0
    theta: float = 0.0
    omega: float = 0.0
    clock: PhaseClock = field(default_factory=PhaseClock)
    friction: float = 0.1
    command: float = 1.0
    contact: bool = False
    stroke: float = 0.0
    prev_action: float = 0.0
    steps: int = 0
    true_mode: int = GLIDE


@dataclass
class StepResult:
    obs: np.ndarray
    rewards: np.ndarray  # (glide, push, regularization)
    contact: np.ndarray
    done: bool
    true_mode: int | None = None
    timeout: bool = False  # episode cut by the time limit rather than a failure


def tip_height(cfg: CartConfig, theta: float) -> float:
    return cfg.pivot_height - cfg.leg_length * np.sin(theta)


def make_observation(state: CartEnvState) -> np.ndarray:
    phase = 2 * np.pi * state.clock.t / state.clock.period
    return np.array(
        [
            state.v,
            state.theta,
            state.omega,
            float(state.contact),
            np.sin(phase),
            np.cos(phase),
            state.clock.glide,
            state.clock.push,
            state.command,
        ]
    )


def _mode(cfg: CartConfig, state: CartEnvState) -> int:
    if state.contact:
        return PUSH
    return GLIDE if tip_height(cfg, state.theta) >= cfg.lift_clearance else TRANSITION


def cart_step(cfg: CartConfig, state: CartEnvState, action: float) -> StepResult:
    """Advance ``state`` in place by one control step."""
    a = float(np.asarray(action).reshape(-1)[0])
    if not abs(a) <= cfg.bound:
        raise ContractError(f"action {a} outside [-{cfg.bound}, {cfg.bound}]")
    dt = cfg.dt
    theta_c = cfg.contact_angle
    was_contact = state.contact

    acc = cfg.torque_gain * a + cfg.leg_gravity * np.cos(state.theta) - cfg.leg_damping * state.omega
    omega = state.omega + acc * dt
    theta = state.theta + omega * dt
    contact = theta >= theta_c
    if contact:
        # inelastic impact / ground constraint: tip velocity drops to zero
        theta, omega = theta_c, 0.0
    state.theta, state.omega, state.contact = theta, omega, contact

    v = state.v
    if contact and a > 0 and state.stroke < cfg.stroke_length:
        v += cfg.push_gain * a * max(0.0, 1.0 - v / cfg.max_speed) * dt
    v = np.sign(v) * max(abs(v) - state.friction * dt, 0.0)
    state.v = float(v)
    state.x += state.v * dt
    if contact:
        state.stroke += state.v * dt if was_contact else 0.0
    elif tip_height(cfg, theta) >= cfg.lift_clearance:
        state.stroke = 0.0

    state.clock.advance(dt)
    state.steps += 1
    state.true_mode = _mode(cfg, state)

    track = np.exp(-((state.v - state.command) ** 2) / cfg.tracking_sigma)
    lifted = float(tip_height(cfg, theta) >= cfg.lift_clearance)
    g, p = state.clock.glide, state.clock.push
    rewards = np.array(
        [
            g * (track + cfg.posture_bonus * lifted),
            p * (track + cfg.posture_bonus * float(contact)),
            -cfg.action_rate_weight * (a - state.prev_action) ** 2 - cfg.torque_weight * a * a,
        ]
    )
    state.prev_action = a
    failed = abs(theta) > cfg.angle_limit
    timeout = state.steps >= cfg.horizon and not failed
    obs = make_observation(state)
    return StepResult(obs, rewards, np.array([float(contact)]), bool(failed or timeout), state.true_mode, timeout)


class CartEnv:
    obs_dim = len(OBS_FIELDS)
    act_dim = 1
    contact_dim = 1
    num_modes = 3

    def __init__(self, cfg: CartConfig | None = None, rng: RngStream | None = None):
        self.cfg = cfg or CartConfig()
        self.rng = rng or RngStream(0)
        self.state = CartEnvState()

    @property
    def bound(self) -> np.ndarray:
        return np.full(self.act_dim, self.cfg.bound)

    def reset(self) -> np.ndarray:
        cfg = self.cfg
        still = self.rng.uniform() < cfg.still_probability
        command = 0.0 if still else float(self.rng.uniform(*cfg.command_range))
        t0 = float(self.rng.uniform(0.0, cfg.period)) if cfg.random_phase else 0.0
        clock = PhaseClock(period=cfg.period, t=t0, still=still)
        clock.reset_filter()
        theta = cfg.contact_angle - float(self.rng.uniform(0.0, 0.3))
        self.state = CartEnvState(
            theta=theta, clock=clock, friction=cfg.friction, command=command, contact=False
        )
        self.state.true_mode = _mode(cfg, self.state)
        return make_observation(self.state)

    def step(self, action) -> StepResult:
        return cart_step(self.cfg, self.state, action)
