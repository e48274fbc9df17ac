import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safempc.kinematics import ReferenceSignal, RobotState
from safempc.qp import solve_qp
from safempc.safety import Obstacle, SafetyConfig
from safempc.solver import (
    CONVERGED,
    FunctionNlp,
    Multipliers,
    SolverSettings,
    constraint_violation,
    kkt_residual,
    merit_noise,
    solve,
)
from safempc.transcription import HorizonSpec, MpcProblem, Weights

WEIGHTS = Weights.with_terminal_factor((5, 10, 0.7), (5, 0.1), 100)
OBSTACLES = [Obstacle((0.5, 1.5), 0.7), Obstacle((2.5, 2), 0.45), Obstacle((1, 4), 0.35),
             Obstacle((2, 3.5), 0.3), Obstacle((3, 3.5), 0.15)]


def sum_to_one():
    # min |z|^2  s.t.  z1 + z2 = 1
    return FunctionNlp(
        2,
        objective=lambda z: z @ z,
        gradient=lambda z: 2 * z,
        hessian=lambda z, l, m: 2 * np.eye(2),
        eq=lambda z: np.array([z[0] + z[1] - 1]),
        eq_jacobian=lambda z: np.array([[1.0, 1.0]]),
    )


def bounded_scalar():
    # min (z - 2)^2  s.t.  z <= 1
    return FunctionNlp(1, lambda z: (z[0] - 2) ** 2, lambda z: 2 * (z - 2), lambda z, l, m: np.array([[2.0]]),
                       upper=[1.0])


def mpc(state=(2.5, 4, -0.5), obstacles=(), N=5, scheme="cbf", gamma=0.3, **kw):
    return MpcProblem(RobotState(*state), 0.0, kw.pop("reference", ReferenceSignal.fixed(2.5, 4, -0.5)),
                      list(obstacles), WEIGHTS, HorizonSpec(N, 0.1), SafetyConfig(0.15, gamma, scheme),
                      (-0.6, -0.78), (0.6, 0.78), **kw)


# --- the three reference problems -------------------------------------------

def test_equality_qp():
    res = solve(sum_to_one(), [3.0, -4.0])
    assert res.status == CONVERGED
    np.testing.assert_allclose(res.z_opt, [0.5, 0.5], atol=1e-10)
    assert res.kkt_residual < 1e-8
    assert res.multipliers.eq == pytest.approx([1.0])


def test_bound_constrained_scalar():
    res = solve(bounded_scalar(), [-3.0])
    assert res.status == CONVERGED
    assert res.z_opt == pytest.approx([1.0], abs=1e-10)
    assert res.multipliers.upper == pytest.approx([2.0])
    assert res.multipliers.lower == pytest.approx([0.0])


def test_mpc_at_target_stays_put():
    p = mpc()
    res = solve(p, p.initial_guess())
    assert res.status == CONVERGED
    _, U = p.split(res.z_opt)
    assert np.max(np.abs(U)) < 1e-8
    assert res.objective < 1e-10


def test_nonlinear_inequality_problem():
    # min (x-2)^2 + (y-1)^2  s.t.  x^2 + y^2 <= 1: optimum is the projection
    # of (2, 1) onto the unit disk, multiplier |(2,1)| - 1
    target = np.array([2.0, 1.0])
    p = FunctionNlp(
        2,
        objective=lambda z: (z - target) @ (z - target),
        gradient=lambda z: 2 * (z - target),
        hessian=lambda z, l, m: 2 * np.eye(2) + 2 * m[0] * np.eye(2),
        ineq=lambda z: np.array([1 - z @ z]),
        ineq_jacobian=lambda z: -2 * z[None, :],
    )
    res = solve(p, [0.0, 0.0])
    assert res.status == CONVERGED
    np.testing.assert_allclose(res.z_opt, target / np.linalg.norm(target), atol=1e-8)
    assert res.multipliers.ineq[0] == pytest.approx(np.linalg.norm(target) - 1, abs=1e-8)


def test_nonconvex_objective_on_circle():
    # min -x  s.t.  x^2 + y^2 = 1 from a point where the Lagrangian Hessian is indefinite
    p = FunctionNlp(
        2,
        objective=lambda z: -z[0] + 0.5 * z[1] ** 2 * 0,
        gradient=lambda z: np.array([-1.0, 0.0]),
        hessian=lambda z, l, m: -2 * l[0] * np.eye(2),
        eq=lambda z: np.array([z @ z - 1]),
        eq_jacobian=lambda z: 2 * z[None, :],
    )
    res = solve(p, [-0.3, 0.9])
    assert res.status == CONVERGED
    np.testing.assert_allclose(res.z_opt, [1.0, 0.0], atol=1e-8)


# --- KKT residual ----------------------------------------------------------

def test_kkt_at_analytic_optimum():
    p = sum_to_one()
    m = Multipliers(np.array([1.0]), np.zeros(0), np.zeros(2), np.zeros(2))
    assert kkt_residual(p, np.array([0.5, 0.5]), m) < 1e-12


def test_kkt_unconstrained_minimiser():
    p = FunctionNlp(2, lambda z: (z - 1) @ (z - 1), lambda z: 2 * (z - 1), lambda z, l, m: 2 * np.eye(2))
    assert kkt_residual(p, np.ones(2), Multipliers.zeros(p)) == 0.0


def test_kkt_grows_off_optimum():
    p = sum_to_one()
    m = Multipliers(np.array([1.0]), np.zeros(0), np.zeros(2), np.zeros(2))
    assert kkt_residual(p, np.array([0.501, 0.5]), m) > kkt_residual(p, np.array([0.5, 0.5]), m)


def test_kkt_dimension_mismatch():
    with pytest.raises(ValueError):
        kkt_residual(sum_to_one(), np.zeros(2), Multipliers(np.zeros(2), np.zeros(0), np.zeros(2), np.zeros(2)))
    with pytest.raises(ValueError):
        kkt_residual(sum_to_one(), np.zeros(3), Multipliers.zeros(sum_to_one()))


def test_kkt_penalises_negative_inequality_multiplier():
    p = bounded_scalar()
    m = Multipliers(np.zeros(0), np.zeros(0), np.zeros(1), np.array([-1.0]))
    assert kkt_residual(p, np.array([1.0]), m) >= 1.0


# --- MPC problems ------------------------------------------------------------

def obstacle_problem(gamma=0.3, scheme="cbf", N=10):
    return mpc(state=(0.0, 0.0, 0.0), obstacles=OBSTACLES, N=N, scheme=scheme, gamma=gamma)


@pytest.mark.parametrize("scheme", ["cbf", "bt"])
@pytest.mark.parametrize("N", [5, 10])
def test_mpc_with_obstacles_converges_to_kkt_point(scheme, N):
    p = obstacle_problem(scheme=scheme, N=N)
    res = solve(p, p.initial_guess())
    assert res.status == CONVERGED
    assert res.kkt_residual <= 1e-6
    assert res.constraint_violation <= 1e-8
    assert kkt_residual(p, res.z_opt, res.multipliers) == pytest.approx(res.kkt_residual, rel=1e-6, abs=1e-12)
    assert np.all(res.multipliers.ineq >= -1e-6)
    # complementarity
    assert np.max(np.abs(res.multipliers.ineq * p.ineq(res.z_opt))) <= 1e-6
    assert np.all(res.z_opt >= p.lower) and np.all(res.z_opt <= p.upper)


def test_warm_start_from_solution_is_immediate():
    p = obstacle_problem()
    res = solve(p, p.initial_guess())
    again = solve(p, res.z_opt, multipliers=res.multipliers)
    assert again.status == CONVERGED
    assert again.iterations <= 2
    np.testing.assert_allclose(again.z_opt, res.z_opt, atol=1e-8)


def test_warm_start_without_multipliers_is_quick():
    p = obstacle_problem()
    res = solve(p, p.initial_guess())
    again = solve(p, res.z_opt)
    assert again.status == CONVERGED
    assert again.iterations <= 2


def test_determinism():
    p = obstacle_problem(N=10)
    a = solve(p, p.initial_guess(), record_iterates=True)
    b = solve(p, p.initial_guess(), record_iterates=True)
    assert a.iterations == b.iterations
    for x, y in zip(a.iterates, b.iterates):
        assert np.array_equal(x, y)
    assert np.array_equal(a.z_opt, b.z_opt)


@pytest.mark.parametrize("gamma", [0.1, 0.3, 0.9])
def test_merit_non_increasing(gamma):
    p = obstacle_problem(gamma=gamma)
    res = solve(p, p.initial_guess())
    assert res.merit_history
    for before, after, noise in res.merit_history:
        assert after <= before + noise


def test_gauss_newton_model_also_converges():
    p = mpc(state=(0.0, 0.0, 0.0), obstacles=OBSTACLES, N=5, hessian_model="gauss-newton")
    res = solve(p, p.initial_guess())
    assert res.status == CONVERGED


def test_inputs_respect_bounds_from_infeasible_guess():
    p = obstacle_problem(N=5)
    guess = p.initial_guess()
    guess[p.nx:] = 5.0
    res = solve(p, guess)
    assert np.all(res.z_opt >= p.lower) and np.all(res.z_opt <= p.upper)


def test_infeasible_problem_is_reported():
    # z >= 1 and z <= -1 cannot both hold
    p = FunctionNlp(1, lambda z: z[0] ** 2, lambda z: 2 * z, lambda z, l, m: np.array([[2.0]]),
                    ineq=lambda z: np.array([z[0] - 1, -1 - z[0]]),
                    ineq_jacobian=lambda z: np.array([[1.0], [-1.0]]))
    res = solve(p, [0.0], SolverSettings(max_iterations=30))
    assert res.status != CONVERGED
    assert res.constraint_violation > 0.5


def test_non_finite_evaluation_is_numerical_failure():
    p = FunctionNlp(1, lambda z: np.log(z[0]), lambda z: 1 / z, lambda z, l, m: -1 / z[None] ** 2)
    res = solve(p, [-1.0])
    assert res.status == "numerical_failure"


def test_rejects_bad_guess():
    p = sum_to_one()
    with pytest.raises(ValueError):
        solve(p, [1.0])
    with pytest.raises(ValueError):
        solve(p, [np.nan, 0.0])


@pytest.mark.parametrize("kw", [dict(max_iterations=0), dict(kkt_tolerance=0), dict(backtrack=1.0), dict(armijo=0.7)])
def test_settings_validation(kw):
    with pytest.raises(ValueError):
        SolverSettings(**kw)


def test_constraint_violation_counts_bounds():
    p = bounded_scalar()
    assert constraint_violation(p, np.array([3.0])) == pytest.approx(2.0)


def test_merit_noise_grows_with_penalty():
    assert merit_noise(1.0) < merit_noise(1.0, penalty=1e4, constraint_scale=50)


# --- QP subproblem solver ------------------------------------------------------

@given(st.integers(0, 10_000))
def test_qp_matches_kkt_conditions(seed):
    rng = np.random.default_rng(seed)
    n, me, mi = 6, 2, 5
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    g = rng.normal(size=n)
    A = rng.normal(size=(me, n))
    b = rng.normal(size=me)
    G = rng.normal(size=(mi, n))
    x_feas = np.linalg.lstsq(A, b, rcond=None)[0]
    h = G @ x_feas - rng.uniform(0, 1, mi)  # x_feas is strictly feasible
    res = solve_qp(H, g, A, b, G, h)
    assert res.converged
    d, y, lam = res.d, res.y, res.lam
    np.testing.assert_allclose(H @ d + g - A.T @ y - G.T @ lam, 0, atol=1e-7)
    np.testing.assert_allclose(A @ d, b, atol=1e-8)
    assert np.all(G @ d - h >= -1e-8)
    assert np.all(lam >= 0)
    assert np.max(np.abs(lam * (G @ d - h))) < 1e-7


def test_qp_against_closed_form_projection():
    # min 0.5|d - c|^2  s.t.  d >= 0  ->  d = max(c, 0)
    c = np.array([1.0, -2.0, 0.5, -0.1])
    res = solve_qp(np.eye(4), -c, np.zeros((0, 4)), np.zeros(0), np.eye(4), np.zeros(4))
    np.testing.assert_allclose(res.d, np.maximum(c, 0), atol=1e-10)
    np.testing.assert_allclose(res.lam, np.maximum(-c, 0), atol=1e-10)
