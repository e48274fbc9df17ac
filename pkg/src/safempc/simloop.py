"""Receding-horizon closed loop and run summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .kinematics import (
    ReferenceSignal,
    RobotState,
    error_state_batch,
    reference_batch,
    rk4_batch,
    wrap_angle,
)
from .safety import Obstacle, SafetyConfig, barrier_values, clearance_values, inflated_radii, obstacle_centers
from .solver import CONVERGED, SolverSettings, solve
from .transcription import HorizonSpec, MpcProblem, Weights

# status of the closing record that only carries the final measured state
TERMINAL = "terminal"


@dataclass(frozen=True)
class GoalTolerance:
    position: float = 0.05
    heading: float = 0.1


@dataclass(frozen=True)
class Scenario:
    name: str
    initial: RobotState
    reference: ReferenceSignal
    obstacles: tuple[Obstacle, ...]
    weights: Weights
    horizon: HorizonSpec
    safety: SafetyConfig
    u_min: tuple[float, float]
    u_max: tuple[float, float]
    duration: float
    goal_tolerance: GoalTolerance = GoalTolerance()
    x_min: tuple[float, float, float] | None = None
    x_max: tuple[float, float, float] | None = None
    substeps: int = 1
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("u_min must not exceed u_max")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def is_stabilization(self) -> bool:
        return self.reference.kind == "fixed-point"

    def with_overrides(self, **kw) -> "Scenario":
        """Copy with controller settings replaced (``N``, ``gamma``, ``scheme``, ...)."""
        horizon, safety = self.horizon, self.safety
        if "N" in kw:
            horizon = HorizonSpec(kw.pop("N"), horizon.Ts)
        if "Ts" in kw:
            horizon = HorizonSpec(horizon.N, kw.pop("Ts"))
        if "gamma" in kw:
            safety = replace(safety, gamma=kw.pop("gamma"))
        if "scheme" in kw:
            safety = replace(safety, scheme=kw.pop("scheme"))
        if "amplitude" in kw:
            kw["reference"] = replace(self.reference, amplitude=kw.pop("amplitude"))
        return replace(self, horizon=horizon, safety=safety, **kw)

    def initial_barriers(self) -> np.ndarray:
        centers = obstacle_centers(self.obstacles, [0.0])
        radii = inflated_radii(self.obstacles, self.safety.robot_radius)
        return barrier_values(self.initial.as_array()[None, :2], centers, radii)[0]


@dataclass
class StepRecord:
    t: float
    state: np.ndarray
    u: np.ndarray
    h: np.ndarray
    error: np.ndarray
    status: str
    kkt: float
    solve_time: float
    iterations: int = 0
    # smallest safety-constraint residual over the solved horizon, and the
    # current clearance of the obstacle that owns it
    min_margin: float = math.inf
    margin_clearance: float = math.inf
    first_iterate_violation: float = math.nan


@dataclass
class TrajectoryLog:
    scenario: Scenario
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records]).reshape(-1, 3)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.records]).reshape(-1, 2)

    @property
    def barriers(self) -> np.ndarray:
        return np.array([r.h for r in self.records]).reshape(len(self.records), -1)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.records]).reshape(-1, 3)

    @property
    def statuses(self) -> list[str]:
        return [r.status for r in self.records]

    @property
    def solve_times(self) -> np.ndarray:
        """Wall time of each solve in seconds (terminal record excluded)."""
        return np.array([r.solve_time for r in self.records if r.status != TERMINAL])


@dataclass
class RunMetrics:
    reached_goal: bool
    time_to_goal: float | None
    final_position_error: float
    final_heading_error: float
    min_h: float
    min_clearance: float
    tracking_rmse: float
    max_abs_xe: float
    mean_solve_ms: float
    max_solve_ms: float
    violation_count: int
    failure_count: int
    steps: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _within_goal(state, ref, tol: GoalTolerance) -> bool:
    pos = math.hypot(state[0] - ref[0], state[1] - ref[1])
    return pos <= tol.position and abs(float(wrap_angle(state[2] - ref[2]))) <= tol.heading


def _record(scenario, radii, t, x, u, status, kkt, wall, **kw) -> StepRecord:
    xr, _ = reference_batch(scenario.reference, [t])
    centers = obstacle_centers(scenario.obstacles, [t])
    h = barrier_values(x[None, :2], centers, radii)[0]
    err = error_state_batch(x, xr[0])
    return StepRecord(t, x.copy(), np.asarray(u, dtype=float).copy(), h, err, status, kkt, wall, **kw)


def run_closed_loop(scenario: Scenario, settings: SolverSettings | None = None) -> TrajectoryLog:
    """Simulate the MPC loop: solve, apply the first input for one sample, repeat.

    Stabilisation runs stop as soon as the pose is within the goal tolerance;
    every run stops at ``scenario.duration``.  A failed solve holds the last
    applied input and is logged with the solver status.
    """
    settings = settings or SolverSettings()
    h0 = scenario.initial_barriers()
    if np.any(h0 <= 0):
        bad = int(np.flatnonzero(h0 <= 0)[0])
        raise ValueError(f"initial state violates the safe set of obstacle {bad}")

    Ts = scenario.horizon.Ts
    radii = inflated_radii(scenario.obstacles, scenario.safety.robot_radius)
    steps = int(math.floor(scenario.duration / Ts + 1e-9))
    log = TrajectoryLog(scenario)
    x = scenario.initial.as_array()
    u_prev = np.zeros(2)
    warm = None

    for k in range(steps):
        t = k * Ts
        if scenario.is_stabilization:
            xr, _ = reference_batch(scenario.reference, [t])
            if _within_goal(x, xr[0], scenario.goal_tolerance):
                break
        problem = MpcProblem(
            x, t, scenario.reference, scenario.obstacles, scenario.weights, scenario.horizon,
            scenario.safety, scenario.u_min, scenario.u_max, scenario.x_min, scenario.x_max,
            scenario.substeps,
        )
        guess = problem.initial_guess() if warm is None else warm
        res = solve(problem, guess, settings)
        margin, margin_l = math.inf, math.inf
        if res.converged:
            _, U = problem.split(res.z_opt)
            u = np.clip(U[0], scenario.u_min, scenario.u_max)
            warm = problem.shift(res.z_opt)
            if problem.n_in:
                g = problem.ineq(res.z_opt).reshape(problem.N, problem.M)
                margin = float(g.min())
                owner = int(np.argmin(g.min(axis=0)))
                margin_l = float(clearance_values(x[None, :2], problem.centers[:1], radii)[0, owner])
        else:
            u = u_prev
            warm = None
        log.records.append(
            _record(scenario, radii, t, x, u, res.status, res.kkt_residual, res.wall_time,
                    iterations=res.iterations, min_margin=margin, margin_clearance=margin_l,
                    first_iterate_violation=res.first_iterate_violation)
        )
        x = rk4_batch(x[None], u[None], Ts, scenario.substeps)[0]
        u_prev = u
    else:
        k = steps

    log.records.append(_record(scenario, radii, k * Ts, x, np.zeros(2), TERMINAL, 0.0, 0.0))
    return log


def first_activation(log: TrajectoryLog, threshold: float = 1e-3) -> tuple[float, float] | None:
    """Time and obstacle clearance of the first step whose solved plan has a
    safety constraint within ``threshold`` of binding, or ``None``."""
    for r in log.records:
        if r.status == CONVERGED and r.min_margin <= threshold:
            return r.t, r.margin_clearance
    return None


# barrier values above -VIOLATION_TOLERANCE are round-off, not contact
VIOLATION_TOLERANCE = 1e-9


def compute_metrics(log: TrajectoryLog, scenario: Scenario | None = None) -> RunMetrics:
    """Summarise a run.

    A step counts as a violation when some barrier value is below
    ``-VIOLATION_TOLERANCE``; a constraint held active by the solver sits at
    zero up to rounding and would otherwise be flagged at random.
    """
    if not log.records:
        raise ValueError("cannot summarise an empty trajectory log")
    scenario = scenario or log.scenario
    radii = inflated_radii(scenario.obstacles, scenario.safety.robot_radius)
    X = log.states
    t = log.times
    final = log.records[-1]
    xr, _ = reference_batch(scenario.reference, [final.t])
    pos_err = math.hypot(final.state[0] - xr[0, 0], final.state[1] - xr[0, 1])
    head_err = abs(float(wrap_angle(final.state[2] - xr[0, 2])))
    reached = _within_goal(final.state, xr[0], scenario.goal_tolerance)

    time_to_goal = None
    if reached:
        Xr, _ = reference_batch(scenario.reference, t)
        for r, ref in zip(log.records, Xr):
            if _within_goal(r.state, ref, scenario.goal_tolerance):
                time_to_goal = r.t
                break

    if scenario.obstacles:
        H = log.barriers
        L = clearance_values(X[:, :2], obstacle_centers(scenario.obstacles, t), radii)
        min_h, min_l = float(H.min()), float(L.min())
        violations = int(np.sum(np.any(H < -VIOLATION_TOLERANCE, axis=1)))
    else:
        min_h = min_l = math.inf
        violations = 0

    E = log.errors
    st = log.solve_times * 1e3
    return RunMetrics(
        reached_goal=bool(reached),
        time_to_goal=time_to_goal,
        final_position_error=pos_err,
        final_heading_error=head_err,
        min_h=min_h,
        min_clearance=min_l,
        tracking_rmse=float(np.sqrt(np.mean(E[:, 0] ** 2 + E[:, 1] ** 2))),
        max_abs_xe=float(np.max(np.abs(E[:, 0]))),
        mean_solve_ms=float(st.mean()) if st.size else 0.0,
        max_solve_ms=float(st.max()) if st.size else 0.0,
        violation_count=violations,
        failure_count=sum(1 for s in log.statuses if s not in (CONVERGED, TERMINAL)),
        steps=len(log.records),
    )
