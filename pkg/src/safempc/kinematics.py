"""Unicycle kinematics, reference signals and the tracking error transform.

State is the pose ``(x, y, theta)`` in the world frame, the input is the
pair ``(v, omega)`` of linear and angular velocity.  Batched helpers operate
on ``(K, 3)`` state arrays and ``(K, 2)`` input arrays and are what the
transcription uses; the scalar functions wrap them for single poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.theta)):
            raise ValueError(f"non-finite robot state {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "RobotState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float

    def __post_init__(self):
        if not (math.isfinite(self.v) and math.isfinite(self.omega)):
            raise ValueError(f"non-finite control input {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class ReferencePoint:
    state: RobotState
    control: ControlInput


@dataclass(frozen=True)
class ErrorState:
    xe: float
    ye: float
    thetae: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xe, self.ye, self.thetae], dtype=float)


@dataclass(frozen=True)
class ReferenceSignal:
    """Either a fixed target pose or a circle centred at the origin.

    The circle is ``(A cos(rho t + phase), A sin(rho t + phase))`` with the
    heading tangent to the path.
    """

    kind: Literal["fixed-point", "circular"]
    target: RobotState | None = None
    amplitude: float = 0.0
    angular_rate: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind == "fixed-point":
            if self.target is None:
                raise ValueError("fixed-point reference needs a target pose")
        elif self.kind == "circular":
            if not self.amplitude > 0:
                raise ValueError("circular reference needs amplitude > 0")
        else:
            raise ValueError(f"unknown reference kind {self.kind!r}")

    @classmethod
    def fixed(cls, x: float, y: float, theta: float) -> "ReferenceSignal":
        return cls("fixed-point", target=RobotState(x, y, theta))

    @classmethod
    def circle(cls, amplitude: float, angular_rate: float, phase: float = 0.0) -> "ReferenceSignal":
        return cls("circular", amplitude=amplitude, angular_rate=angular_rate, phase=phase)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


# --- batched primitives ---------------------------------------------------

def dynamics_batch(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    th = X[..., 2]
    v = U[..., 0]
    return np.stack([v * np.cos(th), v * np.sin(th), U[..., 1]], axis=-1)


def _dynamics_partials(X, U):
    K = X.shape[0]
    c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
    v = U[:, 0]
    fx = np.zeros((K, 3, 3), dtype=X.dtype)
    fx[:, 0, 2] = -v * s
    fx[:, 1, 2] = v * c
    fu = np.zeros((K, 3, 2), dtype=X.dtype)
    fu[:, 0, 0] = c
    fu[:, 1, 0] = s
    fu[:, 2, 1] = 1.0
    return fx, fu


def rk4_batch(X: np.ndarray, U: np.ndarray, dt: float, substeps: int = 1) -> np.ndarray:
    """Integrate each row of ``X`` over ``dt`` with its input held constant."""
    h = dt / substeps
    X = np.array(X, dtype=float)
    for _ in range(substeps):
        k1 = dynamics_batch(X, U)
        k2 = dynamics_batch(X + 0.5 * h * k1, U)
        k3 = dynamics_batch(X + 0.5 * h * k2, U)
        k4 = dynamics_batch(X + h * k3, U)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def rk4_batch_jacobian(X: np.ndarray, U: np.ndarray, dt: float, substeps: int = 1):
    """RK4 rollout plus its exact Jacobians with respect to state and input.

    Returns ``(X_next, dX_next/dX, dX_next/dU)`` with shapes ``(K, 3)``,
    ``(K, 3, 3)`` and ``(K, 3, 2)``.  Derivatives are propagated through all
    four stages of every sub-step.
    """
    K = X.shape[0]
    h = dt / substeps
    # complex inputs are allowed so callers can complex-step the Jacobian
    dtype = np.result_type(X, U, float)
    X = np.array(X, dtype=dtype)
    U = np.asarray(U, dtype=dtype)
    Sx = np.broadcast_to(np.eye(3, dtype=dtype), (K, 3, 3)).copy()
    Su = np.zeros((K, 3, 2), dtype=dtype)
    for _ in range(substeps):
        ks, kx, ku = [], [], []
        for c in (0.0, 0.5, 0.5, 1.0):
            if ks:
                Xi = X + c * h * ks[-1]
                dXi_x = Sx + c * h * kx[-1]
                dXi_u = Su + c * h * ku[-1]
            else:
                Xi, dXi_x, dXi_u = X, Sx, Su
            fx, fu = _dynamics_partials(Xi, U)
            ks.append(dynamics_batch(Xi, U))
            kx.append(fx @ dXi_x)
            ku.append(fx @ dXi_u + fu)
        w = (h / 6.0, h / 3.0, h / 3.0, h / 6.0)
        X = X + sum(wi * ki for wi, ki in zip(w, ks))
        Sx = Sx + sum(wi * ki for wi, ki in zip(w, kx))
        Su = Su + sum(wi * ki for wi, ki in zip(w, ku))
    return X, Sx, Su


def error_state_batch(X: np.ndarray, Xr: np.ndarray) -> np.ndarray:
    dx = Xr[..., 0] - X[..., 0]
    dy = Xr[..., 1] - X[..., 1]
    c, s = np.cos(X[..., 2]), np.sin(X[..., 2])
    return np.stack([c * dx + s * dy, -s * dx + c * dy, wrap_angle(Xr[..., 2] - X[..., 2])], axis=-1)


def reference_batch(signal: ReferenceSignal, times) -> tuple[np.ndarray, np.ndarray]:
    """Reference poses ``(K, 3)`` and inputs ``(K, 2)`` at the given times."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    K = t.shape[0]
    if signal.kind == "fixed-point":
        Xr = np.tile(signal.target.as_array(), (K, 1))
        return Xr, np.zeros((K, 2))
    A, rho = signal.amplitude, signal.angular_rate
    ang = rho * t + signal.phase
    # tangent heading points along the direction of travel
    heading = ang + math.copysign(np.pi / 2, rho) if rho != 0 else ang + np.pi / 2
    Xr = np.stack([A * np.cos(ang), A * np.sin(ang), heading], axis=-1)
    Ur = np.tile([A * abs(rho), rho], (K, 1))
    return Xr, Ur


# --- single-pose API ----------------------------------------------------

def dynamics(state: RobotState, u: ControlInput) -> np.ndarray:
    """State derivative ``(v cos theta, v sin theta, omega)``."""
    return dynamics_batch(state.as_array()[None], u.as_array()[None])[0]


def rk4_step(state: RobotState, u: ControlInput, dt: float, substeps: int = 1) -> RobotState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    out = rk4_batch(state.as_array()[None], u.as_array()[None], dt, substeps)[0]
    return RobotState.from_array(out)


def error_state(current: RobotState, reference: RobotState) -> ErrorState:
    """Reference pose expressed in the robot's body frame.

    Heading error is wrapped to (-pi, pi].
    """
    e = error_state_batch(current.as_array(), reference.as_array())
    return ErrorState(float(e[0]), float(e[1]), float(e[2]))


def error_dynamics(error: ErrorState, u: ControlInput, reference_input: ControlInput) -> np.ndarray:
    xe, ye, te = error.xe, error.ye, error.thetae
    v, w = u.v, u.omega
    vr, wr = reference_input.v, reference_input.omega
    return np.array([w * ye - v + vr * math.cos(te), -w * xe + vr * math.sin(te), wr - w])


def error_input(error: ErrorState, u: ControlInput, reference_input: ControlInput) -> np.ndarray:
    """Transformed input ``(v_r cos theta_e - v, omega_r - omega)``."""
    return np.array([reference_input.v * math.cos(error.thetae) - u.v, reference_input.omega - u.omega])


def linearize_error_dynamics(reference_input: ControlInput) -> tuple[np.ndarray, np.ndarray]:
    """Linear error model about the reference; only used as a controllability diagnostic."""
    vr, wr = reference_input.v, reference_input.omega
    A = np.array([[0.0, wr, 0.0], [-wr, 0.0, vr], [0.0, 0.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    return A, B


def controllability_rank(A: np.ndarray, B: np.ndarray, tol: float = 1e-9) -> int:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return int(np.linalg.matrix_rank(np.hstack(blocks), tol=tol))


def sample_reference(signal: ReferenceSignal, t: float) -> ReferencePoint:
    if t < 0:
        raise ValueError("reference time must be non-negative")
    Xr, Ur = reference_batch(signal, [t])
    return ReferencePoint(RobotState.from_array(Xr[0]), ControlInput.from_array(Ur[0]))
