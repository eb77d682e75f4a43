"""Reference signals for closed-loop episodes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Circle:
    radius: float = 1.0
    period: float = 20.0

    def __call__(self, t: float) -> np.ndarray:
        w = 2.0 * np.pi * t / self.period
        return np.array([self.radius * np.cos(w), -self.radius * np.sin(w)])


@dataclass(frozen=True)
class Square:
    """Piecewise-constant corners of a centred square, held ``dwell`` seconds each."""

    side: float = 0.1
    dwell: float = 10.0

    @property
    def corners(self) -> np.ndarray:
        a = 0.5 * self.side
        return np.array([[a, a], [-a, a], [-a, -a], [a, -a]])

    def corner_index(self, t: float) -> int:
        return int(np.floor(t / self.dwell + 1e-9)) % 4

    def __call__(self, t: float) -> np.ndarray:
        return self.corners[self.corner_index(t)].copy()


@dataclass(frozen=True)
class Constant:
    value: tuple = (0.0,)

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.value, dtype=np.float64)


def make_reference(spec: dict):
    kind = spec.get("kind", "circle")
    if kind == "circle":
        return Circle(float(spec.get("radius", 1.0)), float(spec.get("period", 20.0)))
    if kind == "square":
        return Square(float(spec.get("side", 0.1)), float(spec.get("dwell", 10.0)))
    if kind == "constant":
        return Constant(tuple(float(v) for v in np.atleast_1d(spec.get("value", 0.0))))
    raise ValueError(f"unknown reference kind {kind!r}")
