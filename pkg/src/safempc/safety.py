"""Circular obstacles, barrier and clearance functions, constraint residuals.

``h`` is the squared-distance barrier (units m^2) and ``l`` the plain
Euclidean clearance (units m).  Both are negative inside the disk inflated
by the robot radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np


@dataclass(frozen=True)
class Obstacle:
    """Disk moving with constant velocity from ``center0`` at t = 0."""

    center0: tuple[float, float]
    radius: float
    speed: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")
        if self.speed < 0:
            raise ValueError("obstacle speed must be non-negative")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])


@dataclass(frozen=True)
class SafetyConfig:
    robot_radius: float
    gamma: float = 0.3
    scheme: Literal["cbf", "bt"] = "cbf"

    def __post_init__(self):
        if not self.robot_radius > 0:
            raise ValueError("robot_radius must be positive")
        if self.scheme not in ("cbf", "bt"):
            raise ValueError(f"unknown safety scheme {self.scheme!r}")
        if self.scheme == "cbf":
            check_gamma(self.gamma)


def check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")


def obstacle_center(obstacle: Obstacle, t: float) -> np.ndarray:
    return np.asarray(obstacle.center0, dtype=float) + t * obstacle.velocity


def obstacle_centers(obstacles: Sequence[Obstacle], times) -> np.ndarray:
    """Centres of all obstacles at all times, shape ``(len(times), M, 2)``."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if not obstacles:
        return np.zeros((t.shape[0], 0, 2))
    c0 = np.array([o.center0 for o in obstacles], dtype=float)
    vel = np.array([o.velocity for o in obstacles])
    return c0[None, :, :] + t[:, None, None] * vel[None, :, :]


def inflated_radii(obstacles: Sequence[Obstacle], robot_radius: float) -> np.ndarray:
    return np.array([o.radius + robot_radius for o in obstacles], dtype=float)


def barrier_h(robot_xy, obstacle: Obstacle, t: float, robot_radius: float) -> float:
    d = np.asarray(robot_xy, dtype=float)[:2] - obstacle_center(obstacle, t)
    return float(d @ d - (robot_radius + obstacle.radius) ** 2)


def clearance_l(robot_xy, obstacle: Obstacle, t: float, robot_radius: float) -> float:
    d = np.asarray(robot_xy, dtype=float)[:2] - obstacle_center(obstacle, t)
    return float(math.hypot(d[0], d[1]) - (robot_radius + obstacle.radius))


def cbf_residual(h_next: float, h_curr: float, gamma: float) -> float:
    """Discrete barrier decay residual; the constraint holds iff it is >= 0."""
    check_gamma(gamma)
    return h_next - (1.0 - gamma) * h_curr


def bt_residual(robot_xy_next, obstacle: Obstacle, t_next: float, robot_radius: float) -> float:
    return clearance_l(robot_xy_next, obstacle, t_next, robot_radius)


def barrier_values(positions: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """``h`` for every (time, obstacle) pair.

    ``positions`` is ``(K, 2)``, ``centers`` is ``(K, M, 2)``; returns ``(K, M)``.
    """
    d = positions[:, None, :] - centers
    return np.einsum("kmi,kmi->km", d, d) - radii[None, :] ** 2


def clearance_values(positions: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    d = positions[:, None, :] - centers
    return np.sqrt(np.einsum("kmi,kmi->km", d, d)) - radii[None, :]
