"""Switching linear dynamical systems with ground-truth mode labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dhal.errors import ContractError, DimensionError
from dhal.nn.rng import RngStream

SWITCHING_RULES = ("region", "markov", "dwell")
INPUT_POLICIES = ("zero", "white_noise")


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class SldsSpec:
    """x' = A[i] x + B[i] u + noise, with mode i picked by ``rule``.

    ``region``: mode 0 when x[region_dim] >= 0, else mode 1.
    ``markov``: mode drawn from ``transition[prev_mode]``.
    ``dwell``: mode = (t // dwell) % K.
    Mode labels are 0-based.
    """

    A: np.ndarray
    B: np.ndarray
    noise_std: float = 0.0
    rule: str = "region"
    region_dim: int = 0
    transition: np.ndarray | None = None
    dwell: int = 1
    x0_range: float = 2.0
    input_std: float = 1.0
    name: str = "slds"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim == 2:
            self.A = self.A[None]
        if self.B.ndim == 2:
            self.B = self.B[None]
        k, n, n2 = self.A.shape
        if n != n2 or self.B.shape[:2] != (k, n):
            raise DimensionError(f"A {self.A.shape} and B {self.B.shape} do not describe {k} modes of an n-state system")
        if self.noise_std < 0:
            raise ContractError("noise std must be non-negative")
        if self.rule not in SWITCHING_RULES:
            raise ContractError(f"unknown switching rule {self.rule!r}")
        for i in range(k):
            for j in range(i + 1, k):
                if np.max(np.abs(self.A[i] - self.A[j])) <= 1e-3:
                    raise ContractError(f"modes {i} and {j} share the same dynamics")
        if self.rule == "region" and k > 2:
            raise ContractError("the region rule partitions the state space into at most 2 modes")
        if self.rule == "markov":
            P = np.asarray(self.transition, dtype=np.float64)
            if P.shape != (k, k) or np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1)) > 1e-9:
                raise ContractError("markov rule needs a row-stochastic K x K transition matrix")
            self.transition = P
        if self.rule == "dwell" and self.dwell < 1:
            raise ContractError("dwell time must be >= 1")

    @property
    def num_modes(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def input_dim(self) -> int:
        return self.B.shape[2]


def default_slds2() -> SldsSpec:
    """The two-mode acceptance system: damped rotation for x1 >= 0, contraction otherwise."""
    b = np.array([[0.0], [1.0]])
    return SldsSpec(
        A=np.stack([0.95 * rotation(0.2), 0.7 * np.eye(2)]),
        B=np.stack([b, b]),
        noise_std=0.01,
        rule="region",
        x0_range=2.0,
        name="slds2",
    )


def slds_mode(spec: SldsSpec, x: np.ndarray, t: int, prev_mode: int, rng: RngStream | None) -> int:
    if spec.num_modes == 1:
        return 0
    if spec.rule == "region":
        return 0 if x[spec.region_dim] >= 0 else 1
    if spec.rule == "dwell":
        return (t // spec.dwell) % spec.num_modes
    if t == 0 or prev_mode < 0:
        return 0
    return int(rng.gen.choice(spec.num_modes, p=spec.transition[prev_mode]))


def slds_step(spec: SldsSpec, x, u, rng: RngStream | None = None, t: int = 0, prev_mode: int = -1):
    """Advance one step; returns ``(x_next, mode)``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if x.shape != (spec.state_dim,) or u.shape != (spec.input_dim,):
        raise DimensionError(
            f"expected state ({spec.state_dim},) and input ({spec.input_dim},), got {x.shape} and {u.shape}"
        )
    mode = slds_mode(spec, x, t, prev_mode, rng)
    x_next = spec.A[mode] @ x + spec.B[mode] @ u
    if spec.noise_std > 0:
        x_next = x_next + rng.normal(0.0, spec.noise_std, size=x.shape)
    return x_next, mode


def slds_rollout(spec: SldsSpec, steps: int, rng: RngStream, input_policy: str = "zero", x0=None):
    """One episode. Returns (states[steps+1], inputs[steps], modes[steps])."""
    if input_policy not in INPUT_POLICIES:
        raise ContractError(f"unknown input policy {input_policy!r}")
    if x0 is None:
        x = rng.uniform(-spec.x0_range, spec.x0_range, size=spec.state_dim)
    else:
        x = np.asarray(x0, dtype=np.float64).reshape(spec.state_dim)
    states = [x]
    inputs, modes = [], []
    mode = -1
    for t in range(steps):
        if input_policy == "zero":
            u = np.zeros(spec.input_dim)
        else:
            u = rng.normal(0.0, spec.input_std, size=spec.input_dim)
        x, mode = slds_step(spec, x, u, rng, t, mode)
        states.append(x)
        inputs.append(u)
        modes.append(mode)
    return np.array(states), np.array(inputs).reshape(steps, spec.input_dim), np.array(modes)
