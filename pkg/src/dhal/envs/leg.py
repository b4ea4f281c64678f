"""Planar two-link leg: foot kinematics and contact-point velocity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LegModel:
    l1: float
    l2: float
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        if self.l1 <= 0 or self.l2 <= 0:
            raise ValueError("link lengths must be positive")
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qd = np.asarray(self.qd, dtype=np.float64)


def foot_position(l1: float, l2: float, q) -> np.ndarray:
    q1, q2 = q
    return np.array([l1 * np.cos(q1) + l2 * np.cos(q1 + q2), l1 * np.sin(q1) + l2 * np.sin(q1 + q2)])


def foot_jacobian(l1: float, l2: float, q) -> np.ndarray:
    q1, q2 = q
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    return np.array([[-l1 * s1 - l2 * s12, -l2 * s12], [l1 * c1 + l2 * c12, l2 * c12]])


def leg_contact_velocity(model: LegModel) -> np.ndarray:
    return foot_jacobian(model.l1, model.l2, model.q) @ model.qd
