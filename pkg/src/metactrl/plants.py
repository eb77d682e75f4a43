"""Parametric ground-truth plants: Van der Pol, ball-on-plate with Stribeck friction, first-order lag.

Continuous dynamics are discretised with classical RK4 holding the input
constant over each sample. Trajectory rows follow the ``x_{t+1} = f(x_t, u_{t+1})``
convention: row ``k`` holds the input applied during ``(t_{k-1}, t_k]`` and the
output it produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from metactrl.dataio import Trajectory

GRAVITY = 9.81
PLATE_HALF_WIDTH = 0.15


class SimulationError(FloatingPointError):
    pass


class InvalidParamsError(ValueError):
    pass


# ------------------------------------------------------------------ parameters

@dataclass(frozen=True)
class VdpParams:
    theta: float

    def to_vector(self) -> np.ndarray:
        return np.array([self.theta])


@dataclass(frozen=True)
class FrictionParams:
    """Stribeck friction constants and ball mass (SI units)."""

    F_C: float
    F_S: float
    F_v: float
    v_S: float
    delta_S: float
    m: float = 0.03

    def __post_init__(self):
        if not self.m > 0:
            raise InvalidParamsError("mass must be positive")
        if not (self.v_S > 0 and self.delta_S > 0):
            raise InvalidParamsError("v_S and delta_S must be positive")
        if not self.F_S >= self.F_C >= 0:
            raise InvalidParamsError("need F_S >= F_C >= 0")
        if self.F_v < 0:
            raise InvalidParamsError("F_v must be non-negative")

    def to_vector(self) -> np.ndarray:
        return np.array([self.F_C, self.F_S, self.F_v, self.v_S, self.delta_S, self.m])


@dataclass(frozen=True)
class LagParams:
    """First-order lag ``tau * x' = -x + gain * u``."""

    gain: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidParamsError("tau must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array([self.gain, self.tau])


# ------------------------------------------------------------------- dynamics

def stribeck_force(v, p: FrictionParams) -> np.ndarray:
    """Stribeck curve, signed along ``sgn(v)`` componentwise, with ``sgn(0) = 0``.

    The returned force points along the velocity; plants subtract it.
    """
    v = np.asarray(v, dtype=np.float64)
    speed = np.linalg.norm(v)
    level = p.F_C + (p.F_S - p.F_C) * np.exp(-((speed / p.v_S) ** p.delta_S))
    return level * np.sign(v) + p.F_v * v


def vdp_derivative(x, u, p: VdpParams) -> np.ndarray:
    x1, x2 = x
    u0 = float(np.ravel(u)[0])
    return np.array([x2, p.theta * x2 * (1.0 - x1 * x1) - x1 + u0])


def ballplate_derivative(x, u, p: FrictionParams) -> np.ndarray:
    """State ``[x, xdot, y, ydot]``, input plate angles ``[alpha, beta]``."""
    _, vx, _, vy = x
    alpha, beta = u
    fx, fy = stribeck_force(np.array([vx, vy]), p)
    ax = (5.0 / 7.0) * GRAVITY * np.sin(beta) * np.cos(alpha) - fx / p.m
    ay = -(5.0 / 7.0) * GRAVITY * np.sin(alpha) - fy / p.m
    return np.array([vx, ax, vy, ay])


def lag_derivative(x, u, p: LagParams) -> np.ndarray:
    return np.array([(-x[0] + p.gain * float(np.ravel(u)[0])) / p.tau])


def rk4_step(deriv_fn: Callable, x, u, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with ``u`` held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = deriv_fn(x, u)
    k2 = deriv_fn(x + 0.5 * dt * k1, u)
    k3 = deriv_fn(x + 0.5 * dt * k2, u)
    k4 = deriv_fn(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"non-finite state after RK4 step from {x}")
    return out


# --------------------------------------------------------------------- plants

@dataclass(frozen=True)
class Plant:
    """A plant family: dynamics, output map, input box and sampling time."""

    name: str
    n_state: int
    n_input: int
    n_output: int
    dt: float
    u_low: np.ndarray
    u_high: np.ndarray
    guard: float = 1e3

    def derivative(self, x, u, params) -> np.ndarray:
        raise NotImplementedError

    def output(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).copy()

    def clip_input(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=np.float64).reshape(self.n_input), self.u_low, self.u_high)

    def step(self, x, u, params) -> np.ndarray:
        return rk4_step(lambda s, a: self.derivative(s, a, params), x, u, self.dt)

    @property
    def u_max(self) -> np.ndarray:
        return np.maximum(np.abs(self.u_low), np.abs(self.u_high))


@dataclass(frozen=True)
class VanDerPol(Plant):
    name: str = "vdp"
    n_state: int = 2
    n_input: int = 1
    n_output: int = 2
    dt: float = 0.05
    u_low: np.ndarray = field(default_factory=lambda: np.array([-5.0]))
    u_high: np.ndarray = field(default_factory=lambda: np.array([5.0]))
    guard: float = 1e2

    def derivative(self, x, u, params: VdpParams):
        return vdp_derivative(x, u, params)


@dataclass(frozen=True)
class BallPlate(Plant):
    """Ball on a tilting square plate with inelastic walls and stiction."""

    name: str = "ballplate"
    n_state: int = 4
    n_input: int = 2
    n_output: int = 2
    dt: float = 0.02
    u_low: np.ndarray = field(default_factory=lambda: np.array([-0.3, -0.3]))
    u_high: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.3]))
    guard: float = 1e2
    half_width: float = PLATE_HALF_WIDTH

    def derivative(self, x, u, params: FrictionParams):
        return ballplate_derivative(x, u, params)

    def output(self, x):
        return np.array([x[0], x[2]])

    def step(self, x, u, params: FrictionParams):
        x = np.asarray(x, dtype=np.float64)
        new = rk4_step(lambda s, a: self.derivative(s, a, params), x, u, self.dt)
        alpha, beta = np.asarray(u, dtype=np.float64)
        drive = (5.0 / 7.0) * GRAVITY * np.array([np.sin(beta) * np.cos(alpha), -np.sin(alpha)])
        for axis, (pi, vi) in enumerate(((0, 1), (2, 3))):
            # friction reversing the velocity within one step means the ball stuck
            if x[vi] != 0.0 and new[vi] * x[vi] < 0.0 and abs(drive[axis]) * params.m <= params.F_S:
                new[vi] = 0.0
            if new[pi] > self.half_width:
                new[pi], new[vi] = self.half_width, min(new[vi], 0.0)
            elif new[pi] < -self.half_width:
                new[pi], new[vi] = -self.half_width, max(new[vi], 0.0)
        return new


@dataclass(frozen=True)
class FirstOrderLag(Plant):
    name: str = "lag"
    n_state: int = 1
    n_input: int = 1
    n_output: int = 1
    dt: float = 0.1
    u_low: np.ndarray = field(default_factory=lambda: np.array([-2.0]))
    u_high: np.ndarray = field(default_factory=lambda: np.array([2.0]))

    def derivative(self, x, u, params: LagParams):
        return lag_derivative(x, u, params)


PLANTS: dict[str, type[Plant]] = {"vdp": VanDerPol, "ballplate": BallPlate, "lag": FirstOrderLag}


def make_plant(name: str, **overrides) -> Plant:
    try:
        cls = PLANTS[name]
    except KeyError:
        raise ValueError(f"unknown plant family {name!r}; choose from {sorted(PLANTS)}") from None
    for key in ("u_low", "u_high"):
        if key in overrides:
            overrides[key] = np.asarray(overrides[key], dtype=np.float64)
    return cls(**overrides)


# ------------------------------------------------------------------- sampling

DEFAULT_BALLPLATE_DIST = {
    "family": "ballplate",
    # per-unit-mass ranges (m/s^2 level) multiplied by m when sampled
    "F_C": [0.05, 0.3],
    "F_S_excess": [0.0, 0.3],
    "F_v": [0.0, 0.5],
    "v_S": [0.01, 0.1],
    "delta_S": [1.0, 2.0],
    "m": 0.03,
    "scale_by_mass": True,
}


def sample_params(dist_spec: dict, rng: np.random.Generator):
    """Draw one parameter record from a distribution spec.

    ``{"family": "vdp", "mean": mu, "std": s}`` draws ``theta ~ N(mu, s^2)``;
    ball-plate specs hold ``[low, high]`` uniform ranges; lag specs hold
    ``gain`` and ``tau`` ranges.
    """
    family = dist_spec.get("family")
    if family == "vdp":
        mu, sd = float(dist_spec.get("mean", 0.0)), float(dist_spec.get("std", 1.0))
        if sd < 0:
            raise InvalidParamsError("std must be non-negative")
        return VdpParams(mu if sd == 0 else float(rng.normal(mu, sd)))
    if family == "ballplate":
        spec = {**DEFAULT_BALLPLATE_DIST, **dist_spec}
        m = float(spec["m"])
        scale = m if spec.get("scale_by_mass", True) else 1.0
        u = lambda key: float(rng.uniform(*spec[key]))
        F_C = max(u("F_C"), 0.0) * scale
        F_S = F_C + max(u("F_S_excess"), 0.0) * scale
        F_v = max(u("F_v"), 0.0) * scale
        v_S = max(u("v_S"), 1e-6)
        delta_S = max(u("delta_S"), 1e-6)
        return FrictionParams(F_C, F_S, F_v, v_S, delta_S, m)
    if family == "lag":
        g = dist_spec.get("gain", [0.5, 1.5])
        tau = dist_spec.get("tau", [0.5, 1.5])
        return LagParams(float(rng.uniform(*g)), max(float(rng.uniform(*tau)), 1e-3))
    raise ValueError(f"unknown family {family!r}")


def params_from_dict(family: str, d: dict):
    if family == "vdp":
        return VdpParams(float(d["theta"]))
    if family == "ballplate":
        return FrictionParams(**{k: float(v) for k, v in d.items()})
    if family == "lag":
        return LagParams(float(d["gain"]), float(d["tau"]))
    raise ValueError(f"unknown family {family!r}")


# ----------------------------------------------------------------- simulation

class History(NamedTuple):
    """What a controller sees at step ``k``: rows ``0..k-1`` plus the current output."""

    k: int
    inputs: np.ndarray  # (k, p) inputs applied so far
    outputs: np.ndarray  # (k, m) outputs so far; outputs[-1] is the current one
    reference: np.ndarray | None  # (k, m) references so far; reference[-1] is current target
    next_reference: np.ndarray | None  # reference for the output the next input produces


def simulate(
    plant: Plant,
    params,
    controller_fn: Callable[[History], np.ndarray | tuple[np.ndarray, str]],
    reference: Callable[[float], np.ndarray] | np.ndarray | None = None,
    steps: int = 100,
    dt: float | None = None,
    x0=None,
    u_init=None,
) -> Trajectory:
    """Closed-loop run producing ``steps`` rows.

    Row 0 holds ``u_init`` (zeros by default) and the initial output. The
    controller may return ``(u, tag)`` to record input provenance. Inputs are
    clipped to the plant box. If the state norm exceeds ``plant.guard`` the
    trajectory is truncated and flagged ``diverged``.
    """
    if dt is not None and abs(dt - plant.dt) > 1e-15:
        plant = replace(plant, dt=dt)
    x = np.zeros(plant.n_state) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    u_prev = np.zeros(plant.n_input) if u_init is None else plant.clip_input(u_init)

    def ref_at(k):
        if reference is None:
            return None
        if callable(reference):
            return np.asarray(reference(k * plant.dt), dtype=np.float64).reshape(plant.n_output)
        return np.asarray(reference[min(k, len(reference) - 1)], dtype=np.float64).reshape(plant.n_output)

    U = np.zeros((steps, plant.n_input))
    Y = np.zeros((steps, plant.n_output))
    R = None if reference is None else np.zeros((steps, plant.n_output))
    tags: list[str] = []
    if steps == 0:
        return Trajectory(U, Y, plant.dt, plant.name, references=R, tags=())
    U[0], Y[0] = u_prev, plant.output(x)
    if R is not None:
        R[0] = ref_at(0)
    tags.append("init")
    diverged = False
    n = 1
    for k in range(1, steps):
        hist = History(k, U[:k], Y[:k], None if R is None else R[:k], ref_at(k))
        out = controller_fn(hist)
        tag = "policy"
        if isinstance(out, tuple):
            out, tag = out
        u = plant.clip_input(out)
        try:
            x = plant.step(x, u, params)
        except SimulationError:
            diverged = True
            break
        if np.linalg.norm(x) > plant.guard:
            diverged = True
            break
        U[k], Y[k] = u, plant.output(x)
        if R is not None:
            R[k] = ref_at(k)
        tags.append(tag)
        n = k + 1
    return Trajectory(U[:n], Y[:n], plant.dt, plant.name, diverged=diverged,
                      references=None if R is None else R[:n], tags=tuple(tags))
