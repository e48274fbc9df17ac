"""Multiple-shooting transcription of the safety-constrained tracking OCP.

Decision vector layout: states ``x(0..N)`` (3 each) followed by inputs
``u(0..N-1)`` (2 each).  Equalities are the initial-state pin followed by the
N shooting defects; inequalities are one barrier (or clearance) residual per
step and obstacle, ordered step-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kinematics import (
    ReferenceSignal,
    RobotState,
    error_state_batch,
    reference_batch,
    rk4_batch,
    rk4_batch_jacobian,
)
from .safety import Obstacle, SafetyConfig, inflated_radii, obstacle_centers
from .solver import NlpProblem


@dataclass(frozen=True)
class Weights:
    Q: tuple[float, float, float]
    R: tuple[float, float]
    P: tuple[float, float, float]

    def __post_init__(self):
        if len(self.Q) != 3 or len(self.R) != 2 or len(self.P) != 3:
            raise ValueError("Q and P need 3 diagonal entries, R needs 2")
        if min(*self.Q, *self.R, *self.P) <= 0:
            raise ValueError("weight matrices must be positive definite")

    @classmethod
    def with_terminal_factor(cls, Q, R, factor: float) -> "Weights":
        return cls(tuple(Q), tuple(R), tuple(factor * q for q in Q))

    def scaled(self, c: float) -> "Weights":
        return Weights(tuple(c * q for q in self.Q), tuple(c * r for r in self.R), tuple(c * p for p in self.P))


@dataclass(frozen=True)
class HorizonSpec:
    N: int
    Ts: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("horizon N must be an integer >= 1")
        if not self.Ts > 0:
            raise ValueError("sampling time Ts must be positive")


class MpcProblem(NlpProblem):
    """One receding-horizon OCP instance, frozen at a measured state and time."""

    def __init__(
        self,
        state,
        t: float,
        reference: ReferenceSignal,
        obstacles: Sequence[Obstacle],
        weights: Weights,
        horizon: HorizonSpec,
        safety: SafetyConfig,
        u_min,
        u_max,
        x_min=None,
        x_max=None,
        substeps: int = 1,
        hessian_model: str = "exact",
    ):
        if hessian_model not in ("exact", "gauss-newton"):
            raise ValueError(f"unknown hessian model {hessian_model!r}")
        self.hessian_model = hessian_model
        x0 = state.as_array() if isinstance(state, RobotState) else np.asarray(state, dtype=float)
        if x0.shape != (3,) or not np.all(np.isfinite(x0)):
            raise ValueError("current state must be a finite 3-vector")
        u_min = np.asarray(u_min, dtype=float)
        u_max = np.asarray(u_max, dtype=float)
        x_min = np.full(3, -np.inf) if x_min is None else np.asarray(x_min, dtype=float)
        x_max = np.full(3, np.inf) if x_max is None else np.asarray(x_max, dtype=float)
        if u_min.shape != (2,) or u_max.shape != (2,) or np.any(u_min > u_max):
            raise ValueError("input bounds must be 2-vectors with u_min <= u_max")
        if x_min.shape != (3,) or x_max.shape != (3,) or np.any(x_min > x_max):
            raise ValueError("state bounds must be 3-vectors with x_min <= x_max")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")

        N, Ts = horizon.N, horizon.Ts
        self.x_init = x0
        self.t0 = float(t)
        self.reference = reference
        self.obstacles = tuple(obstacles)
        self.weights = weights
        self.horizon = horizon
        self.safety = safety
        self.substeps = int(substeps)
        self.N, self.Ts = N, Ts
        self.M = len(self.obstacles)
        self.nx = 3 * (N + 1)

        self.times = self.t0 + Ts * np.arange(N + 1)
        self.x_ref, u_ref = reference_batch(reference, self.times)
        self.u_ref = u_ref[:N]
        self.centers = obstacle_centers(self.obstacles, self.times)
        self.radii = inflated_radii(self.obstacles, safety.robot_radius)

        n = 3 * (N + 1) + 2 * N
        lower = np.concatenate([np.tile(x_min, N + 1), np.tile(u_min, N)])
        upper = np.concatenate([np.tile(x_max, N + 1), np.tile(u_max, N)])
        super().__init__(n=n, n_eq=3 * (N + 1), n_in=self.M * N, lower=lower, upper=upper)

        # residual weights in residual order: (xe, ue) per stage, then terminal xe
        stage = np.concatenate([weights.Q, weights.R])
        self._w = np.concatenate([np.tile(stage, N), weights.P])

    # --- layout helpers ---
    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self._check(z)
        return z[: self.nx].reshape(self.N + 1, 3), z[self.nx :].reshape(self.N, 2)

    def join(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.concatenate([np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()])

    def state_index(self, k: int) -> slice:
        return slice(3 * k, 3 * k + 3)

    def input_index(self, k: int) -> slice:
        return slice(self.nx + 2 * k, self.nx + 2 * k + 2)

    def rollout(self, U: np.ndarray, x0=None) -> np.ndarray:
        """States reached by applying ``U`` from ``x0`` (default the measured state)."""
        U = np.asarray(U, dtype=float).reshape(self.N, 2)
        X = np.empty((self.N + 1, 3))
        X[0] = self.x_init if x0 is None else x0
        for k in range(self.N):
            X[k + 1] = rk4_batch(X[k : k + 1], U[k : k + 1], self.Ts, self.substeps)[0]
        return self.join(X, U)

    def initial_guess(self) -> np.ndarray:
        X = np.tile(self.x_init, (self.N + 1, 1))
        return self.join(X, np.clip(np.zeros((self.N, 2)), self.lower[self.nx : self.nx + 2], self.upper[self.nx : self.nx + 2]))

    # --- objective ---
    def residuals(self, z: np.ndarray) -> np.ndarray:
        X, U = self.split(z)
        E = error_state_batch(X, self.x_ref)
        ue = np.stack([self.u_ref[:, 0] * np.cos(E[:-1, 2]) - U[:, 0], self.u_ref[:, 1] - U[:, 1]], axis=-1)
        return np.concatenate([np.hstack([E[:-1], ue]).ravel(), E[-1]])

    def residual_jacobian(self, z: np.ndarray) -> np.ndarray:
        X, U = self.split(z)
        N = self.N
        E = error_state_batch(X, self.x_ref)
        c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
        # d(xe, ye, thetae)/d(x, y, theta) per stage, shape (N+1, 3, 3)
        dE = np.zeros((N + 1, 3, 3))
        dE[:, 0, 0], dE[:, 0, 1], dE[:, 0, 2] = -c, -s, E[:, 1]
        dE[:, 1, 0], dE[:, 1, 1], dE[:, 1, 2] = s, -c, -E[:, 0]
        dE[:, 2, 2] = -1.0
        J = np.zeros((5 * N + 3, self.n))
        for k in range(N):
            r, xs, us = 5 * k, 3 * k, self.nx + 2 * k
            J[r : r + 3, xs : xs + 3] = dE[k]
            J[r + 3, xs + 2] = self.u_ref[k, 0] * np.sin(E[k, 2])
            J[r + 3, us] = -1.0
            J[r + 4, us + 1] = -1.0
        J[5 * N :, 3 * N : 3 * N + 3] = dE[N]
        return J

    def objective(self, z: np.ndarray) -> float:
        r = self.residuals(z)
        return float(np.dot(self._w * r, r))

    def gradient(self, z: np.ndarray) -> np.ndarray:
        r = self.residuals(z)
        return 2.0 * self.residual_jacobian(z).T @ (self._w * r)

    def hessian(self, z, lam_eq, mu_in) -> np.ndarray:
        """Lagrangian curvature model.

        ``"gauss-newton"`` keeps only ``2 J'WJ`` of the cost.  ``"exact"`` adds
        the residual curvature of the cost, the RK4 defect curvature and the
        safety-constraint curvature; the result may be indefinite and is
        convexified by the solver.  The exact Lagrangian Hessian is block
        diagonal over stages ``(x_k, u_k)``.
        """
        J = self.residual_jacobian(z)
        H = 2.0 * (J.T * self._w) @ J
        if self.hessian_model == "gauss-newton":
            return H
        X, U = self.split(z)
        N, nx = self.N, self.nx
        blocks = np.zeros((N + 1, 5, 5))
        for k in range(N):
            idx = self._block_index(k)
            blocks[k] = H[np.ix_(idx, idx)]
        blocks[N, :3, :3] = H[3 * N :, 3 * N :][:3, :3]

        # cost residual curvature
        r = self.residuals(z)
        wr = 2.0 * self._w * r
        E = error_state_batch(X, self.x_ref)
        c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
        for k in range(N + 1):
            base = 5 * k
            a_xe, a_ye = wr[base], wr[base + 1]
            B = blocks[k]
            B[0, 2] += a_xe * s[k] + a_ye * c[k]
            B[1, 2] += -a_xe * c[k] + a_ye * s[k]
            B[2, 0], B[2, 1] = B[0, 2], B[1, 2]
            B[2, 2] += -a_xe * E[k, 0] - a_ye * E[k, 1]
            if k < N:
                B[2, 2] += -wr[base + 3] * self.u_ref[k, 0] * np.cos(E[k, 2])

        # defect curvature: d2/dw2 of lam' F(w) by complex step on the exact Jacobian
        lam = np.asarray(lam_eq, dtype=float)[3:].reshape(N, 3)
        if np.any(lam):
            W = np.hstack([X[:-1], U]).astype(complex)
            step = 1e-30
            for j in range(5):
                Wj = W.copy()
                Wj[:, j] += 1j * step
                _, Ax, Au = rk4_batch_jacobian(Wj[:, :3], Wj[:, 3:], self.Ts, self.substeps)
                col = np.einsum("ki,kij->kj", lam, np.concatenate([Ax, Au], axis=2)).imag / step
                blocks[:N, :, j] += col

        # safety-constraint curvature (enters with a minus sign)
        if self.M:
            mu = np.asarray(mu_in, dtype=float).reshape(N, self.M)
            if self.safety.scheme == "cbf":
                nxt = 2.0 * mu.sum(axis=1)
                cur = 2.0 * (1.0 - self.safety.gamma) * mu.sum(axis=1)
                for k in range(N):
                    blocks[k + 1, [0, 1], [0, 1]] -= nxt[k]
                    blocks[k, [0, 1], [0, 1]] += cur[k]
            else:
                d = self._offsets(z)[1:]
                dist = np.maximum(np.linalg.norm(d, axis=2), 1e-12)
                n_hat = d / dist[..., None]
                curv = (np.eye(2)[None, None] - n_hat[..., :, None] * n_hat[..., None, :]) / dist[..., None, None]
                contrib = np.einsum("km,kmij->kij", mu, curv)
                blocks[1:, :2, :2] -= contrib

        blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))
        out = np.zeros((self.n, self.n))
        for k in range(N):
            idx = self._block_index(k)
            out[np.ix_(idx, idx)] = blocks[k]
        out[3 * N : 3 * N + 3, 3 * N : 3 * N + 3] = blocks[N, :3, :3]
        return out

    def _block_index(self, k: int) -> np.ndarray:
        return np.r_[3 * k : 3 * k + 3, self.nx + 2 * k : self.nx + 2 * k + 2]

    # --- constraints ---
    def eq(self, z: np.ndarray) -> np.ndarray:
        X, U = self.split(z)
        Xn = rk4_batch(X[:-1], U, self.Ts, self.substeps)
        return np.concatenate([X[0] - self.x_init, (X[1:] - Xn).ravel()])

    def eq_jacobian(self, z: np.ndarray) -> np.ndarray:
        X, U = self.split(z)
        N = self.N
        _, Ax, Au = rk4_batch_jacobian(X[:-1], U, self.Ts, self.substeps)
        J = np.zeros((self.n_eq, self.n))
        J[0:3, 0:3] = np.eye(3)
        for k in range(N):
            r = 3 * (k + 1)
            J[r : r + 3, 3 * k : 3 * k + 3] = -Ax[k]
            J[r : r + 3, 3 * k + 3 : 3 * k + 6] = np.eye(3)
            J[r : r + 3, self.nx + 2 * k : self.nx + 2 * k + 2] = -Au[k]
        return J

    def _offsets(self, z):
        X, _ = self.split(z)
        return X[:, None, :2] - self.centers  # (N+1, M, 2)

    def ineq(self, z: np.ndarray) -> np.ndarray:
        if self.M == 0:
            return np.zeros(0)
        d = self._offsets(z)
        sq = np.einsum("kmi,kmi->km", d, d)
        if self.safety.scheme == "cbf":
            h = sq - self.radii**2
            g = h[1:] - (1.0 - self.safety.gamma) * h[:-1]
        else:
            g = np.sqrt(sq[1:]) - self.radii
        return g.ravel()

    def ineq_jacobian(self, z: np.ndarray) -> np.ndarray:
        J = np.zeros((self.n_in, self.n))
        if self.M == 0:
            return J
        d = self._offsets(z)
        N, M = self.N, self.M
        rows = np.arange(N * M).reshape(N, M)
        for k in range(N):
            nxt = slice(3 * (k + 1), 3 * (k + 1) + 2)
            if self.safety.scheme == "cbf":
                J[rows[k], nxt] = 2.0 * d[k + 1]
                J[rows[k], 3 * k : 3 * k + 2] = -2.0 * (1.0 - self.safety.gamma) * d[k]
            else:
                dist = np.maximum(np.linalg.norm(d[k + 1], axis=1), 1e-12)
                J[rows[k], nxt] = d[k + 1] / dist[:, None]
        return J

    # --- diagnostics ---
    def barrier_matrix(self, z: np.ndarray) -> np.ndarray:
        """Predicted ``h`` for every horizon step and obstacle, shape ``(N+1, M)``."""
        d = self._offsets(z)
        return np.einsum("kmi,kmi->km", d, d) - self.radii**2

    def shift(self, z: np.ndarray) -> np.ndarray:
        """Shift-and-hold warm start for the next sampling instant."""
        X, U = self.split(z)
        X = np.vstack([X[1:], X[-1:]])
        U = np.vstack([U[1:], U[-1:]])
        return self.join(X, U)


def build_nlp(
    state,
    t: float,
    reference: ReferenceSignal,
    obstacles: Sequence[Obstacle],
    weights: Weights,
    horizon: HorizonSpec,
    safety: SafetyConfig,
    u_min,
    u_max,
    x_min=None,
    x_max=None,
    substeps: int = 1,
    hessian_model: str = "exact",
) -> MpcProblem:
    return MpcProblem(state, t, reference, obstacles, weights, horizon, safety, u_min, u_max, x_min, x_max,
                      substeps, hessian_model)


def objective_gradient(problem: NlpProblem, z) -> np.ndarray:
    return problem.gradient(np.asarray(z, dtype=float))


def constraint_jacobians(problem: NlpProblem, z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    return problem.eq_jacobian(z), problem.ineq_jacobian(z)


def terminal_alpha_lower_bound(x: RobotState, x_r: RobotState, delta: float, beta: float, u_max) -> float:
    """Smallest uniform terminal weight making the terminal cost decrease.

    ``delta`` is the (negative) one-step change of the squared distance to the
    target; ``u_max`` is scalarised as the largest absolute bound component.
    """
    if not delta < 0:
        raise ValueError("delta must be negative (the step must approach the target)")
    d = x.as_array() - x_r.as_array()
    if hasattr(u_max, "as_array"):
        u_max = u_max.as_array()
    u_max_sq = float(np.max(np.abs(np.asarray(u_max, dtype=float)))) ** 2
    return float((d @ d + 2.0 * beta * u_max_sq) / abs(delta))
