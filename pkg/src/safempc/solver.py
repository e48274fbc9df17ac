"""Sequential quadratic programming for smooth NLPs.

Problems have the form::

    min f(z)  s.t.  c_eq(z) = 0,  c_in(z) >= 0,  lower <= z <= upper

Multiplier sign convention (all inequality multipliers non-negative)::

    grad f - J_eq' lam - J_in' mu - nu_lower + nu_upper = 0

Each iteration first tries a Newton step on the active set guessed from the
previous multipliers; it is taken when the Hessian is positive definite on
that face and the step confirms the guess.  Otherwise a convex QP is solved
with the Hessian convexified (penalising the working-set constraints, or
flipping negative eigenvalues).  Steps are globalised by backtracking on the
l1 exact penalty merit function, with a second-order correction against the
Maratos effect.  If the linearised inequalities are inconsistent the QP is
re-solved in elastic mode with penalised slacks.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .qp import solve_qp

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
INFEASIBLE = "infeasible_detected"
NUMERICAL_FAILURE = "numerical_failure"

log = logging.getLogger(__name__)


class NlpProblem:
    """Base class for problems handed to :func:`solve`.

    Subclasses implement ``objective``, ``gradient``, ``hessian`` and, when
    they have constraints, ``eq``/``eq_jacobian`` and ``ineq``/``ineq_jacobian``.
    ``hessian(z, lam_eq, mu_in)`` returns a symmetric model of the Lagrangian
    curvature; it need not be exact or positive definite.
    """

    def __init__(self, n: int, n_eq: int = 0, n_in: int = 0, lower=None, upper=None):
        self.n = int(n)
        self.n_eq = int(n_eq)
        self.n_in = int(n_in)
        self.lower = np.full(self.n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(self.n, np.inf) if upper is None else np.asarray(upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bound vectors must match the decision-vector length")
        if np.any(self.lower > self.upper):
            raise ValueError("inverted variable bounds")

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n,):
            raise ValueError(f"decision vector has shape {z.shape}, expected ({self.n},)")
        return z

    def objective(self, z) -> float:
        raise NotImplementedError

    def gradient(self, z) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, z, lam_eq, mu_in) -> np.ndarray:
        raise NotImplementedError

    def eq(self, z) -> np.ndarray:
        return np.zeros(0)

    def eq_jacobian(self, z) -> np.ndarray:
        return np.zeros((0, self.n))

    def ineq(self, z) -> np.ndarray:
        return np.zeros(0)

    def ineq_jacobian(self, z) -> np.ndarray:
        return np.zeros((0, self.n))


class FunctionNlp(NlpProblem):
    """An :class:`NlpProblem` assembled from plain callables."""

    def __init__(
        self,
        n: int,
        objective: Callable,
        gradient: Callable,
        hessian: Callable,
        eq: Callable | None = None,
        eq_jacobian: Callable | None = None,
        ineq: Callable | None = None,
        ineq_jacobian: Callable | None = None,
        lower=None,
        upper=None,
    ):
        z0 = np.zeros(n)
        n_eq = len(eq(z0)) if eq else 0
        n_in = len(ineq(z0)) if ineq else 0
        super().__init__(n, n_eq, n_in, lower, upper)
        self._f, self._g, self._h = objective, gradient, hessian
        self._ce, self._je, self._ci, self._ji = eq, eq_jacobian, ineq, ineq_jacobian

    def objective(self, z):
        return float(self._f(self._check(z)))

    def gradient(self, z):
        return np.asarray(self._g(self._check(z)), dtype=float)

    def hessian(self, z, lam_eq, mu_in):
        return np.atleast_2d(np.asarray(self._h(self._check(z), lam_eq, mu_in), dtype=float))

    def eq(self, z):
        return np.asarray(self._ce(z), dtype=float) if self._ce else np.zeros(0)

    def eq_jacobian(self, z):
        return np.atleast_2d(np.asarray(self._je(z), dtype=float)) if self._je else np.zeros((0, self.n))

    def ineq(self, z):
        return np.asarray(self._ci(z), dtype=float) if self._ci else np.zeros(0)

    def ineq_jacobian(self, z):
        return np.atleast_2d(np.asarray(self._ji(z), dtype=float)) if self._ji else np.zeros((0, self.n))


@dataclass
class SolverSettings:
    max_iterations: int = 50
    kkt_tolerance: float = 1e-6
    constraint_tolerance: float = 1e-8
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-8
    hessian_floor: float = 0.0
    qp_tolerance: float = 1e-11

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.kkt_tolerance <= 0 or self.constraint_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.hessian_floor < 0:
            raise ValueError("hessian_floor must be non-negative")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if not 0.0 < self.armijo < 0.5:
            raise ValueError("sufficient-decrease coefficient must lie in (0, 0.5)")


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def zeros(cls, problem: NlpProblem) -> "Multipliers":
        return cls(np.zeros(problem.n_eq), np.zeros(problem.n_in), np.zeros(problem.n), np.zeros(problem.n))


@dataclass
class SolveResult:
    z_opt: np.ndarray
    objective: float
    status: str
    kkt_residual: float
    constraint_violation: float
    iterations: int
    wall_time: float
    multipliers: Multipliers
    # (merit before, merit after, round-off allowance) for every accepted
    # step, both merits under the same penalty weight
    merit_history: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    initial_violation: float = np.nan
    first_iterate_violation: float = np.nan

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def constraint_violation(problem: NlpProblem, z, c_eq=None, c_in=None) -> float:
    """Infinity norm of equality, inequality and bound violations."""
    c_eq = problem.eq(z) if c_eq is None else c_eq
    c_in = problem.ineq(z) if c_in is None else c_in
    return max(
        np.max(np.abs(c_eq), initial=0.0),
        np.max(-c_in, initial=0.0),
        np.max(problem.lower - z, initial=0.0),
        np.max(z - problem.upper, initial=0.0),
    )


def kkt_residual(problem: NlpProblem, z, multipliers: Multipliers) -> float:
    """Infinity norm of stationarity, primal/dual feasibility and complementarity."""
    z = problem._check(z)
    m = multipliers
    if m.eq.shape != (problem.n_eq,) or m.ineq.shape != (problem.n_in,):
        raise ValueError("constraint multiplier dimensions do not match the problem")
    if m.lower.shape != (problem.n,) or m.upper.shape != (problem.n,):
        raise ValueError("bound multiplier dimensions do not match the problem")
    return _kkt(problem, z, m, problem.gradient(z), problem.eq(z), problem.eq_jacobian(z),
                problem.ineq(z), problem.ineq_jacobian(z))


def _kkt(problem, z, m, grad, c_eq, J_eq, c_in, J_in) -> float:
    stat = grad - J_eq.T @ m.eq - J_in.T @ m.ineq - m.lower + m.upper
    gap_lo = z - problem.lower
    gap_up = problem.upper - z
    # on an infinite bound the multiplier itself must vanish
    comp_lo = np.where(np.isfinite(gap_lo), m.lower * np.where(np.isfinite(gap_lo), gap_lo, 0.0), m.lower)
    comp_up = np.where(np.isfinite(gap_up), m.upper * np.where(np.isfinite(gap_up), gap_up, 0.0), m.upper)
    return max(
        np.max(np.abs(stat), initial=0.0),
        constraint_violation(problem, z, c_eq, c_in),
        np.max(-m.ineq, initial=0.0),
        np.max(-m.lower, initial=0.0),
        np.max(-m.upper, initial=0.0),
        np.max(np.abs(m.ineq * c_in), initial=0.0),
        np.max(np.abs(comp_lo), initial=0.0),
        np.max(np.abs(comp_up), initial=0.0),
    )


def _convexify(H, J_eq, J_work, floor):
    """Make the model positive definite on the null space of ``J_eq``.

    First adds ``rho * J_work' J_work`` for the estimated working set, which
    leaves the QP minimiser on the active face unchanged and keeps second-order
    information; if that is not enough, replaces the eigenvalues of the full
    model by their absolute values.  Returns ``(H_model, flipped)`` where
    ``flipped`` flags that genuine negative curvature was discarded.
    """
    n = H.shape[0]
    H = 0.5 * (H + H.T)
    if floor:
        H = H + floor * np.eye(n)
    Z = sla.null_space(J_eq) if J_eq.shape[0] else np.eye(n)
    if Z.shape[1] == 0:
        return H, False
    scale = max(1.0, float(np.max(np.abs(np.diag(H)), initial=0.0)))
    tau = 1e-8 * scale

    def lowest(M):
        return float(np.linalg.eigvalsh(Z.T @ M @ Z)[0])

    low = lowest(H)
    if low >= tau:
        return H, False
    if J_work.shape[0]:
        JtJ = J_work.T @ J_work
        rho = max(1.0, -low)
        for _ in range(4):
            if lowest(H + rho * JtJ) >= tau:
                log.debug("convexify rho=%g rows=%d", rho, J_work.shape[0])
                return H + rho * JtJ, False
            rho *= 100.0
    # the working set does not explain the negative curvature: flip it, and
    # cap the model's condition number so (near-)flat directions cannot
    # produce arbitrarily long steps
    vals, vecs = np.linalg.eigh(H)
    log.debug("convexify eig, lowest reduced %g", low)
    eig_floor = max(tau, 1e-3 * max(1.0, float(np.max(np.abs(vals)))))
    return (vecs * np.maximum(np.abs(vals), eig_floor)) @ vecs.T, True


def _working_set(problem, ev, mult, tol=1e-6):
    """Rows of constraints the next step is expected to keep active.

    Besides those with positive multipliers this includes degenerate ones
    that sit on their boundary with a (near) zero multiplier.
    """
    thr_in = 1e-8 * max(1.0, float(np.max(mult.ineq, initial=0.0)))
    rows = [ev.J_in[(mult.ineq > thr_in) | (np.abs(ev.c_in) <= tol)]]
    at_lo = np.abs(ev.z - problem.lower) <= tol
    at_up = np.abs(problem.upper - ev.z) <= tol
    bounds = np.flatnonzero((mult.lower > 1e-8) | (mult.upper > 1e-8) | at_lo | at_up)
    if bounds.size:
        rows.append(np.eye(problem.n)[bounds])
    return np.vstack(rows)


class _Eval:
    __slots__ = ("z", "f", "grad", "c_eq", "J_eq", "c_in", "J_in")

    def __init__(self, problem, z):
        self.z = z
        self.f = problem.objective(z)
        self.grad = problem.gradient(z)
        self.c_eq = problem.eq(z)
        self.J_eq = problem.eq_jacobian(z)
        self.c_in = problem.ineq(z)
        self.J_in = problem.ineq_jacobian(z)

    def finite(self) -> bool:
        return bool(
            np.isfinite(self.f)
            and np.all(np.isfinite(self.grad))
            and np.all(np.isfinite(self.c_eq))
            and np.all(np.isfinite(self.c_in))
            and np.all(np.isfinite(self.J_eq))
            and np.all(np.isfinite(self.J_in))
        )


def merit_noise(phi: float, penalty: float = 0.0, constraint_scale: float = 0.0) -> float:
    """Merit changes below this are indistinguishable from round-off.

    ``constraint_scale`` bounds the magnitude of the terms summed into the
    constraint residuals; their rounding error is amplified by the penalty.
    """
    return 10.0 * np.finfo(float).eps * (max(1.0, abs(phi)) + penalty * constraint_scale)


def _eqp_step(problem, ev, H, mult, settings, c_eq, c_in):
    """Newton step on the working set guessed from the previous multipliers.

    Solves the equality-constrained QP with the exact (possibly indefinite)
    Hessian, which only needs to be positive definite on the face of the
    working set.  Returns ``None`` unless the step keeps every working-set
    multiplier nonnegative and every other linearised constraint satisfied,
    i.e. unless it also solves the full inequality QP.
    """
    n = problem.n
    act = np.flatnonzero(mult.ineq > 0)
    lo = np.flatnonzero(mult.lower > 0)
    up = np.flatnonzero(mult.upper > 0)
    eye = np.eye(n)
    C = np.vstack([ev.J_eq, ev.J_in[act], eye[lo], -eye[up]])
    r = np.concatenate([-c_eq, -c_in[act], problem.lower[lo] - ev.z[lo], ev.z[up] - problem.upper[up]])
    Z = sla.null_space(C) if C.shape[0] else eye
    scale = max(1.0, float(np.max(np.abs(np.diag(H)), initial=0.0)))
    if Z.shape[1] and np.linalg.eigvalsh(Z.T @ H @ Z)[0] < 1e-8 * scale:
        return None
    m = C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = C.T
    K[n:, :n] = C
    try:
        sol = np.linalg.solve(K, np.concatenate([-ev.grad, r]))
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    d, lam = sol[:n], -sol[n:]
    out = Multipliers(lam[: problem.n_eq], np.zeros(problem.n_in), np.zeros(n), np.zeros(n))
    i = problem.n_eq
    out.ineq[act] = lam[i : i + act.size]
    i += act.size
    out.lower[lo] = lam[i : i + lo.size]
    out.upper[up] = lam[i + lo.size :]
    tol = settings.constraint_tolerance
    if min(np.min(out.ineq, initial=0.0), np.min(out.lower, initial=0.0), np.min(out.upper, initial=0.0)) < 0:
        return None
    inactive = np.ones(problem.n_in, dtype=bool)
    inactive[act] = False
    if np.any((c_in + ev.J_in @ d)[inactive] < -tol):
        return None
    zt = ev.z + d
    if np.any(zt < problem.lower - tol) or np.any(zt > problem.upper + tol):
        return None
    return d, out


def _refine_multipliers(problem, ev, mult: Multipliers) -> Multipliers:
    """Least-squares multipliers on the active set the QP identified.

    Near a solution the QP multipliers carry the error of the step itself;
    re-fitting them to the gradient at the current point removes it.
    """
    n = problem.n
    act = np.flatnonzero(mult.ineq > 0)
    lo = np.flatnonzero(mult.lower > 0)
    up = np.flatnonzero(mult.upper > 0)
    eye = np.eye(n)
    C = np.vstack([ev.J_eq, ev.J_in[act], eye[lo], -eye[up]])
    if C.shape[0] == 0:
        return mult
    lam = np.linalg.lstsq(C.T, ev.grad, rcond=None)[0]
    out = Multipliers(lam[: problem.n_eq], np.zeros(problem.n_in), np.zeros(n), np.zeros(n))
    i = problem.n_eq
    out.ineq[act] = lam[i : i + act.size]
    i += act.size
    out.lower[lo] = lam[i : i + lo.size]
    out.upper[up] = lam[i + lo.size :]
    return out


def _infeasibility(c_eq, c_in) -> float:
    """l1 norm of constraint violation (iterates always satisfy the bounds)."""
    return float(np.sum(np.abs(c_eq)) + np.sum(np.maximum(-c_in, 0.0)))


def _subproblem(problem, ev, H, settings, c_eq, c_in, elastic_weight=None):
    """Solve the step QP with constraint constants ``c_eq``/``c_in``.

    Returns ``(d, Multipliers)`` or ``None`` when the QP solver fails.
    """
    n = problem.n
    lo = problem.lower - ev.z
    up = problem.upper - ev.z
    fin_lo = np.flatnonzero(np.isfinite(lo))
    fin_up = np.flatnonzero(np.isfinite(up))
    m_in = problem.n_in
    eye = np.eye(n)

    if elastic_weight is None:
        G = np.vstack([ev.J_in, eye[fin_lo], -eye[fin_up]])
        h = np.concatenate([-c_in, lo[fin_lo], -up[fin_up]])
        qp = solve_qp(H, ev.grad, ev.J_eq, -c_eq, G, h, tol=settings.qp_tolerance)
        if not qp.converged:
            return None
        d, lam = qp.d, qp.lam
    else:
        # slacks t >= 0 relax the linearised inequalities at an l1 price
        Hx = np.zeros((n + m_in, n + m_in))
        Hx[:n, :n] = H
        Hx[n:, n:] = 1e-8 * np.eye(m_in)
        gx = np.concatenate([ev.grad, np.full(m_in, elastic_weight)])
        Ax = np.hstack([ev.J_eq, np.zeros((problem.n_eq, m_in))])
        ex = np.eye(n + m_in)
        G = np.vstack([np.hstack([ev.J_in, np.eye(m_in)]), ex[n:], ex[fin_lo], -ex[fin_up]])
        h = np.concatenate([-c_in, np.zeros(m_in), lo[fin_lo], -up[fin_up]])
        qp = solve_qp(Hx, gx, Ax, -c_eq, G, h, tol=settings.qp_tolerance)
        if not qp.converged:
            return None
        d = qp.d[:n]
        lam = np.concatenate([qp.lam[:m_in], qp.lam[2 * m_in :]])
    nu_lo = np.zeros(n)
    nu_up = np.zeros(n)
    nu_lo[fin_lo] = lam[m_in : m_in + fin_lo.size]
    nu_up[fin_up] = lam[m_in + fin_lo.size :]
    return d, Multipliers(qp.y, lam[:m_in], nu_lo, nu_up)


def solve(
    problem: NlpProblem,
    initial_guess,
    settings: SolverSettings | None = None,
    multipliers: Multipliers | None = None,
    record_iterates: bool = False,
) -> SolveResult:
    """Run SQP from ``initial_guess`` (projected onto the variable bounds).

    Passing the multipliers of a previous solve lets an already optimal guess
    terminate without taking a step.
    """
    settings = settings or SolverSettings()
    start = time.perf_counter()
    z = np.asarray(initial_guess, dtype=float)
    if z.shape != (problem.n,):
        raise ValueError(f"initial guess has shape {z.shape}, expected ({problem.n},)")
    if not np.all(np.isfinite(z)):
        raise ValueError("initial guess must be finite")
    z = np.clip(z, problem.lower, problem.upper)
    mult = multipliers if multipliers is not None else Multipliers.zeros(problem)

    ev = _Eval(problem, z)
    iterates = [z.copy()] if record_iterates else []
    merit_history: list = []
    first_violation = np.nan

    def finish(status, it):
        viol = constraint_violation(problem, ev.z, ev.c_eq, ev.c_in)
        kkt = _kkt(problem, ev.z, mult, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in) if ev.finite() else np.inf
        if status == CONVERGED and not (kkt <= settings.kkt_tolerance and viol <= settings.constraint_tolerance):
            status = NUMERICAL_FAILURE
        return SolveResult(ev.z, float(ev.f), status, float(kkt), float(viol), it, time.perf_counter() - start,
                           mult, merit_history, iterates, initial_violation, first_violation)

    initial_violation = constraint_violation(problem, z, ev.c_eq, ev.c_in) if ev.finite() else np.inf
    if not ev.finite():
        return finish(NUMERICAL_FAILURE, 0)
    if multipliers is not None:
        kkt = _kkt(problem, z, mult, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in)
        if kkt <= settings.kkt_tolerance and initial_violation <= settings.constraint_tolerance:
            first_violation = initial_violation
            return finish(CONVERGED, 0)

    penalty = 1.0
    stalled = 0
    for it in range(1, settings.max_iterations + 1):
        H_exact = problem.hessian(ev.z, mult.eq, mult.ineq)
        if not np.all(np.isfinite(H_exact)):
            return finish(NUMERICAL_FAILURE, it)
        H_exact = 0.5 * (H_exact + H_exact.T)
        # near a solution the active set settles and a Newton step on it
        # converges quadratically; otherwise solve a convexified QP
        sub = _eqp_step(problem, ev, H_exact, mult, settings, ev.c_eq, ev.c_in) if it > 1 else None
        eqp = sub is not None
        flipped = False
        elastic = False
        if eqp:
            H = H_exact
        else:
            try:
                H, flipped = _convexify(H_exact, ev.J_eq, _working_set(problem, ev, mult), settings.hessian_floor)
            except np.linalg.LinAlgError:
                return finish(NUMERICAL_FAILURE, it)
            sub = _subproblem(problem, ev, H, settings, ev.c_eq, ev.c_in)
            if sub is None and not flipped:
                # a large working-set penalty can leave the QP too ill-conditioned
                H, flipped = _convexify(H_exact, ev.J_eq, np.zeros((0, problem.n)), settings.hessian_floor)
                sub = _subproblem(problem, ev, H, settings, ev.c_eq, ev.c_in)
        if sub is None and problem.n_in:
            sub = _subproblem(problem, ev, H, settings, ev.c_eq, ev.c_in, elastic_weight=max(1e3, 10.0 * penalty))
            elastic = True
        if sub is None:
            return finish(NUMERICAL_FAILURE, it)
        d, mult_new = sub

        # the penalty must dominate the multipliers for d to be a descent direction
        need = max(np.max(np.abs(mult_new.eq), initial=0.0), np.max(mult_new.ineq, initial=0.0))
        if penalty < 1.1 * need:
            penalty = 2.0 * need
        theta0 = _infeasibility(ev.c_eq, ev.c_in)
        phi0 = ev.f + penalty * theta0
        noise = merit_noise(phi0, penalty, (problem.n_eq + problem.n_in) * max(1.0, np.max(np.abs(ev.z), initial=0.0)))
        lin = ev.c_in + ev.J_in @ d
        dphi = min(ev.grad @ d - penalty * (theta0 - np.sum(np.maximum(-lin, 0.0))), 0.0)

        def trial(step):
            zt = np.clip(ev.z + step, problem.lower, problem.upper)
            evt = _Eval(problem, zt)
            if not evt.finite():
                return None, np.inf
            return evt, evt.f + penalty * _infeasibility(evt.c_eq, evt.c_in)

        def sufficient(phit, alpha):
            return phit - phi0 <= settings.armijo * alpha * dphi + noise

        accepted = None
        alpha = 1.0
        evt, phit = trial(d)
        if evt is not None and sufficient(phit, 1.0):
            accepted = evt
            # along discarded negative curvature the model underestimates the
            # decrease; extend the step while the merit keeps falling
            while flipped and alpha < 16.0:
                evx, phix = trial(2.0 * alpha * d)
                if evx is None or phix >= phit:
                    break
                accepted, phit, alpha = evx, phix, 2.0 * alpha
        elif evt is not None and not elastic:
            # second-order correction: re-linearise the constraints at the trial point
            c_eq_soc, c_in_soc = evt.c_eq - ev.J_eq @ d, evt.c_in - ev.J_in @ d
            if eqp:
                soc = _eqp_step(problem, ev, H, mult, settings, c_eq_soc, c_in_soc)
            else:
                soc = _subproblem(problem, ev, H, settings, c_eq_soc, c_in_soc)
            if soc is not None:
                evs, phis = trial(soc[0])
                if evs is not None and sufficient(phis, 1.0):
                    accepted, phit, mult_new = evs, phis, soc[1]
        while accepted is None:
            alpha *= settings.backtrack
            if alpha < settings.min_step:
                break
            evt, phit = trial(alpha * d)
            if evt is not None and sufficient(phit, alpha):
                accepted = evt
        if accepted is None:
            log.debug("it %d line search failed, |d|=%.2e dphi=%.3g", it, np.max(np.abs(d)), dphi)
            # no merit decrease along d: accept if the current point is already a KKT point
            trial_mult = mult_new
            kkt = _kkt(problem, ev.z, trial_mult, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in)
            refined = _refine_multipliers(problem, ev, mult_new)
            kkt_refined = _kkt(problem, ev.z, refined, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in)
            if kkt_refined < kkt:
                trial_mult, kkt = refined, kkt_refined
            viol = constraint_violation(problem, ev.z, ev.c_eq, ev.c_in)
            if kkt <= settings.kkt_tolerance and viol <= settings.constraint_tolerance:
                mult = trial_mult
                return finish(CONVERGED, it)
            return finish(INFEASIBLE if viol > settings.constraint_tolerance else NUMERICAL_FAILURE, it)

        merit_history.append((phi0, phit, noise))
        ev = accepted
        mult = mult_new
        if record_iterates:
            iterates.append(ev.z.copy())
        viol = constraint_violation(problem, ev.z, ev.c_eq, ev.c_in)
        if it == 1:
            first_violation = viol
        kkt = _kkt(problem, ev.z, mult, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in)
        if kkt > settings.kkt_tolerance and viol <= settings.constraint_tolerance:
            refined = _refine_multipliers(problem, ev, mult)
            kkt_refined = _kkt(problem, ev.z, refined, ev.grad, ev.c_eq, ev.J_eq, ev.c_in, ev.J_in)
            if kkt_refined < kkt:
                mult, kkt = refined, kkt_refined
        log.debug("it %d f=%.6g viol=%.2e kkt=%.2e alpha=%.3g |d|=%.2e penalty=%.3g eqp=%s elastic=%s",
                  it, ev.f, viol, kkt, alpha, np.max(np.abs(d)), penalty, eqp, elastic)
        if kkt <= settings.kkt_tolerance and viol <= settings.constraint_tolerance:
            return finish(CONVERGED, it)
        if elastic and viol > settings.constraint_tolerance and alpha * np.max(np.abs(d)) < 1e-9:
            stalled += 1
            if stalled >= 3:
                return finish(INFEASIBLE, it)
        else:
            stalled = 0
    return finish(MAX_ITERATIONS, settings.max_iterations)
