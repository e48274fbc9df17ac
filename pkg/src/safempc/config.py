"""YAML scenario files.

Layout (units in brackets)::

    name: p5_1_stabilization
    description: free text
    robot:
      initial: [x, y, theta]          # [m, m, rad]
      radius: 0.15                    # [m]
    reference:
      kind: fixed-point               # or "circular"
      target: [x, y, theta]           # fixed-point only
      amplitude: 2.5                  # circular only [m]
      angular_rate: 0.03              # circular only [rad/s]
      phase: 0.0                      # circular only [rad]
    obstacles:                        # may be empty
      - center: [x, y]                # position at t = 0 [m]
        radius: 0.7                   # [m]
        speed: 0.0                    # [m/s], optional
        heading: 0.0                  # direction of travel [rad], optional
    controller:
      N: 5
      Ts: 0.1                         # [s]
      gamma: 0.3
      scheme: cbf                     # or "bt"
      Q: [5, 10, 0.7]
      R: [5, 0.1]
      P: [500, 1000, 70]              # or P_factor: 100 (P = factor * Q)
      u_min: [-0.6, -0.78]            # [m/s, rad/s]
      u_max: [0.6, 0.78]
      x_min: [x, y, theta]            # optional state bounds
      x_max: [x, y, theta]
      substeps: 1                     # RK4 sub-steps per sample
    run:
      duration: 60                    # [s]
      goal_tolerance: {position: 0.05, heading: 0.1}   # [m, rad]

Every validation failure raises :class:`ScenarioError` naming the offending
field, e.g. ``obstacles[2].radius``.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import yaml

from .kinematics import ReferenceSignal, RobotState
from .safety import Obstacle, SafetyConfig
from .simloop import GoalTolerance, Scenario
from .transcription import HorizonSpec, Weights

_MISSING = object()


class ScenarioError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _get(node: dict, key: str, path: str, default=_MISSING):
    if not isinstance(node, dict):
        raise ScenarioError(path, "expected a mapping")
    if key not in node:
        if default is _MISSING:
            raise ScenarioError(_join(path, key), "missing required field")
        return default
    return node[key]


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(path, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ScenarioError(path, "must be finite")
    return float(value)


def _vector(value, length: int, path: str) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or len(value) != length:
        raise ScenarioError(path, f"expected a list of {length} numbers")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _field(node, key, path, convert, *args, default=_MISSING):
    value = _get(node, key, path, default)
    if value is default and default is not _MISSING:
        return default
    return convert(value, *args, _join(path, key))


def _build(path: str, factory, *args, **kw):
    """Run a constructor, re-raising its validation errors against ``path``."""
    try:
        return factory(*args, **kw)
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(path, str(exc)) from None


def scenario_from_dict(data) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "expected a mapping")

    robot = _get(data, "robot", "")
    initial = _build("robot.initial", RobotState, *_field(robot, "initial", "robot", _vector, 3))
    robot_radius = _field(robot, "radius", "robot", _number)

    ref = _get(data, "reference", "")
    kind = _get(ref, "kind", "reference")
    if kind == "fixed-point":
        target = _field(ref, "target", "reference", _vector, 3)
        reference = _build("reference", ReferenceSignal.fixed, *target)
    elif kind == "circular":
        reference = _build(
            "reference",
            ReferenceSignal.circle,
            _field(ref, "amplitude", "reference", _number),
            _field(ref, "angular_rate", "reference", _number),
            _field(ref, "phase", "reference", _number, default=0.0),
        )
    else:
        raise ScenarioError("reference.kind", f"expected 'fixed-point' or 'circular', got {kind!r}")

    raw_obstacles = _get(data, "obstacles", "", default=[]) or []
    if not isinstance(raw_obstacles, list):
        raise ScenarioError("obstacles", "expected a list")
    obstacles = []
    for i, node in enumerate(raw_obstacles):
        p = f"obstacles[{i}]"
        center = _field(node, "center", p, _vector, 2)
        radius = _field(node, "radius", p, _number)
        if radius <= 0:
            raise ScenarioError(f"{p}.radius", "must be positive")
        speed = _field(node, "speed", p, _number, default=0.0)
        if speed < 0:
            raise ScenarioError(f"{p}.speed", "must be non-negative")
        heading = _field(node, "heading", p, _number, default=0.0)
        obstacles.append(Obstacle(center, radius, speed, heading))

    ctl = _get(data, "controller", "")
    N = _get(ctl, "N", "controller")
    if isinstance(N, bool) or not isinstance(N, int) or N < 1:
        raise ScenarioError("controller.N", f"expected an integer >= 1, got {N!r}")
    Ts = _field(ctl, "Ts", "controller", _number)
    horizon = _build("controller.Ts", HorizonSpec, N, Ts)
    gamma = _field(ctl, "gamma", "controller", _number, default=0.3)
    scheme = _get(ctl, "scheme", "controller", default="cbf")
    if scheme not in ("cbf", "bt"):
        raise ScenarioError("controller.scheme", f"expected 'cbf' or 'bt', got {scheme!r}")
    safety = _build("controller.gamma", SafetyConfig, robot_radius, gamma, scheme)

    Q = _field(ctl, "Q", "controller", _vector, 3)
    R = _field(ctl, "R", "controller", _vector, 2)
    if "P" in ctl and "P_factor" in ctl:
        raise ScenarioError("controller.P", "give either P or P_factor, not both")
    if "P_factor" in ctl:
        weights = _build("controller", Weights.with_terminal_factor, Q, R, _field(ctl, "P_factor", "controller", _number))
    else:
        weights = _build("controller", Weights, Q, R, _field(ctl, "P", "controller", _vector, 3))
    u_min = _field(ctl, "u_min", "controller", _vector, 2)
    u_max = _field(ctl, "u_max", "controller", _vector, 2)
    if any(lo > hi for lo, hi in zip(u_min, u_max)):
        raise ScenarioError("controller.u_min", "must not exceed u_max")
    x_min = _field(ctl, "x_min", "controller", _vector, 3, default=None)
    x_max = _field(ctl, "x_max", "controller", _vector, 3, default=None)
    substeps = _get(ctl, "substeps", "controller", default=1)
    if isinstance(substeps, bool) or not isinstance(substeps, int) or substeps < 1:
        raise ScenarioError("controller.substeps", f"expected an integer >= 1, got {substeps!r}")

    run = _get(data, "run", "")
    duration = _field(run, "duration", "run", _number)
    if duration <= 0:
        raise ScenarioError("run.duration", "must be positive")
    tol_node = _get(run, "goal_tolerance", "run", default={}) or {}
    tol = GoalTolerance(
        _field(tol_node, "position", "run.goal_tolerance", _number, default=GoalTolerance.position),
        _field(tol_node, "heading", "run.goal_tolerance", _number, default=GoalTolerance.heading),
    )

    name = str(_get(data, "name", "", default="scenario"))
    description = str(_get(data, "description", "", default=""))
    scenario = _build(
        "<root>", Scenario, name, initial, reference, tuple(obstacles), weights, horizon, safety,
        u_min, u_max, duration, tol, x_min, x_max, substeps, description,
    )
    h0 = scenario.initial_barriers()
    for i, h in enumerate(h0):
        if h <= 0:
            raise ScenarioError(f"obstacles[{i}]", "robot starts inside this obstacle's unsafe set")
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    """Plain-data form of a scenario; ``scenario_from_dict`` inverts it exactly."""
    ref = s.reference
    if ref.kind == "fixed-point":
        t = ref.target
        reference = {"kind": ref.kind, "target": [t.x, t.y, t.theta]}
    else:
        reference = {"kind": ref.kind, "amplitude": ref.amplitude, "angular_rate": ref.angular_rate, "phase": ref.phase}
    controller = {
        "N": s.horizon.N,
        "Ts": s.horizon.Ts,
        "gamma": s.safety.gamma,
        "scheme": s.safety.scheme,
        "Q": list(s.weights.Q),
        "R": list(s.weights.R),
        "P": list(s.weights.P),
        "u_min": list(s.u_min),
        "u_max": list(s.u_max),
        "substeps": s.substeps,
    }
    if s.x_min is not None:
        controller["x_min"] = list(s.x_min)
    if s.x_max is not None:
        controller["x_max"] = list(s.x_max)
    return {
        "name": s.name,
        "description": s.description,
        "robot": {"initial": [s.initial.x, s.initial.y, s.initial.theta], "radius": s.safety.robot_radius},
        "reference": reference,
        "obstacles": [
            {"center": list(o.center0), "radius": o.radius, "speed": o.speed, "heading": o.heading}
            for o in s.obstacles
        ],
        "controller": controller,
        "run": {
            "duration": s.duration,
            "goal_tolerance": {"position": s.goal_tolerance.position, "heading": s.goal_tolerance.heading},
        },
    }


def load_scenario(path) -> Scenario:
    """Parse a scenario file, or a bundled scenario by name (``p5_1_stabilization``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.name in bundled_scenarios():
        return load_bundled(p.name)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return loads_scenario(text)


def loads_scenario(text: str) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError("<file>", f"invalid YAML: {exc}") from None
    return scenario_from_dict(data)


def dumps_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s))


def bundled_scenarios() -> list[str]:
    root = resources.files("safempc") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_bundled(name: str) -> Scenario:
    root = resources.files("safempc") / "scenarios"
    f = root / f"{name}.yaml"
    if not f.is_file():
        raise ScenarioError("<file>", f"no bundled scenario {name!r}; have {bundled_scenarios()}")
    return loads_scenario(f.read_text())
