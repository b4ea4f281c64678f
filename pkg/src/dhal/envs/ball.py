from __future__ import annotations

from dataclasses import dataclass, replace

FLIGHT, CONTACT = 0, 1


@dataclass(frozen=True)
class BallState:
    y: float
    v: float
    restitution: float = 0.0
    gravity: float = 9.81
    dt: float = 0.02

    def energy(self) -> float:
        return 0.5 * self.v**2 + self.gravity * self.y


def ball_step(state: BallState) -> tuple[BallState, bool, int]:
    """Euler flight step with the impact map v <- -e v applied at y = 0.

    Returns ``(next_state, contact, mode)``.
    """
    y = state.y + state.v * state.dt
    if y <= 0.0:
        return replace(state, y=0.0, v=-state.restitution * state.v), True, CONTACT
    return replace(state, y=y, v=state.v - state.gravity * state.dt), False, FLIGHT
