import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safempc.safety import (
    Obstacle,
    SafetyConfig,
    barrier_h,
    barrier_values,
    bt_residual,
    cbf_residual,
    clearance_l,
    clearance_values,
    obstacle_center,
    obstacle_centers,
)

coord = st.floats(-20, 20, allow_nan=False)
radius = st.floats(0.05, 2.0)
gamma = st.floats(0.01, 0.99)


def test_static_obstacle_center():
    o = Obstacle((0.5, 1.5), 0.7)
    for t in (0.0, 3.0, 1e4):
        np.testing.assert_array_equal(obstacle_center(o, t), [0.5, 1.5])


def test_moving_obstacle_initial_and_axis_motion():
    np.testing.assert_array_equal(obstacle_center(Obstacle((-8, 10), 0.3, 0.63, -0.78), 0.0), [-8, 10])
    np.testing.assert_allclose(obstacle_center(Obstacle((0, 0), 0.3, 1.0, 0.0), 2.0), [2, 0])


@given(coord, coord, st.floats(0, 2), st.floats(-math.pi, math.pi), st.floats(0, 50))
def test_obstacle_moves_at_its_speed(x, y, v, heading, t):
    o = Obstacle((x, y), 0.3, v, heading)
    assert np.linalg.norm(obstacle_center(o, t) - np.array([x, y])) == pytest.approx(v * t, abs=1e-9)


def test_batched_centers_match_scalar():
    obs = [Obstacle((1, 2), 0.3, 0.5, 1.0), Obstacle((-1, 0), 0.2)]
    C = obstacle_centers(obs, [0.0, 0.7, 2.0])
    assert C.shape == (3, 2, 2)
    for k, t in enumerate([0.0, 0.7, 2.0]):
        for i, o in enumerate(obs):
            np.testing.assert_allclose(C[k, i], obstacle_center(o, t))
    assert obstacle_centers([], [0.0, 1.0]).shape == (2, 0, 2)


def test_obstacle_validation():
    with pytest.raises(ValueError):
        Obstacle((0, 0), 0.0)
    with pytest.raises(ValueError):
        Obstacle((0, 0), 0.3, speed=-1.0)


def test_barrier_examples():
    o = Obstacle((0, 0), 0.5)
    assert barrier_h((3, 4), o, 0.0, 0.15) == pytest.approx(25 - 0.4225)
    assert barrier_h((0.65, 0), o, 0.0, 0.15) == pytest.approx(0.0, abs=1e-15)
    assert barrier_h((0, 0), o, 0.0, 0.15) == pytest.approx(-(0.65**2))


def test_clearance_examples():
    o = Obstacle((0, 0), 0.5)
    assert clearance_l((3, 4), o, 0.0, 0.15) == pytest.approx(4.35)
    assert clearance_l((0, 0.65), o, 0.0, 0.15) == pytest.approx(0.0, abs=1e-15)


@given(coord, coord, coord, coord, radius, radius)
def test_barrier_clearance_identity_and_sign(x, y, cx, cy, r_ob, r_robot):
    o = Obstacle((cx, cy), r_ob)
    h = barrier_h((x, y), o, 0.0, r_robot)
    l = clearance_l((x, y), o, 0.0, r_robot)
    rs = r_ob + r_robot
    assert h == pytest.approx((l + rs) ** 2 - rs**2, rel=1e-9, abs=1e-9)
    if abs(l) > 1e-9:
        assert (h >= 0) == (l >= 0)


@given(coord, coord, coord, coord, coord, coord, radius)
def test_barrier_translation_invariant(x, y, cx, cy, dx, dy, r):
    a = barrier_h((x, y), Obstacle((cx, cy), r), 0.0, 0.15)
    b = barrier_h((x + dx, y + dy), Obstacle((cx + dx, cy + dy), r), 0.0, 0.15)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-6)


def test_cbf_residual_examples():
    assert cbf_residual(0.8, 1.0, 0.3) == pytest.approx(0.1)
    assert cbf_residual(0.6, 1.0, 0.3) == pytest.approx(-0.1)


@given(st.floats(1e-6, 100), gamma)
def test_stationary_robot_satisfies_cbf(h, g):
    assert cbf_residual(h, h, g) == pytest.approx(g * h)
    assert cbf_residual(h, h, g) > 0


@pytest.mark.parametrize("g", [0.0, 1.0, -0.2, 1.5])
def test_cbf_residual_rejects_gamma(g):
    with pytest.raises(ValueError):
        cbf_residual(1.0, 1.0, g)
    with pytest.raises(ValueError):
        SafetyConfig(0.15, g, "cbf")


def test_safety_config_validation():
    with pytest.raises(ValueError):
        SafetyConfig(0.0)
    with pytest.raises(ValueError):
        SafetyConfig(0.15, 0.3, "potential")


def test_bt_residual_cases():
    o = Obstacle((0, 0), 0.5)
    assert bt_residual((3, 4), o, 0.0, 0.15) == pytest.approx(4.35)
    assert bt_residual((1, 0), o, 0.0, 0.15) > 0
    assert bt_residual((0.3, 0), o, 0.0, 0.15) < 0
    # moving obstacle: the residual uses the centre at t_next
    m = Obstacle((0, 0), 0.5, 1.0, 0.0)
    assert bt_residual((3, 0), m, 2.0, 0.15) == pytest.approx(1 - 0.65)


@given(st.floats(1e-3, 50), gamma, st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_cbf_decay_bound(h0, g, slack):
    # any sequence meeting the residual condition stays above (1-g)^k h0
    h = h0
    for k, s in enumerate(slack, start=1):
        h_next = (1 - g) * h + s
        assert cbf_residual(h_next, h, g) >= -1e-12
        h = h_next
        assert h >= (1 - g) ** k * h0 * (1 - 1e-12)


def test_batched_values_match_scalar(rng):
    obs = [Obstacle((1, 2), 0.3, 0.5, 1.0), Obstacle((-1, 0), 0.2)]
    times = np.array([0.0, 0.4, 1.1])
    P = rng.normal(size=(3, 2))
    C = obstacle_centers(obs, times)
    radii = np.array([o.radius + 0.15 for o in obs])
    H = barrier_values(P, C, radii)
    L = clearance_values(P, C, radii)
    for k, t in enumerate(times):
        for i, o in enumerate(obs):
            assert H[k, i] == pytest.approx(barrier_h(P[k], o, t, 0.15))
            assert L[k, i] == pytest.approx(clearance_l(P[k], o, t, 0.15))
