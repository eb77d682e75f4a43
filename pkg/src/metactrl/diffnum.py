"""Flat-vector differentiation core.

All trainable weights live in one float64 vector (a "param vector"); a
:class:`ParamLayout` maps contiguous segments of that vector to named arrays.
Gradients and Hessian-vector products are exact (JAX reverse mode and
forward-over-reverse); finite differences only appear in :func:`check_grad_fd`.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402


class NonFiniteLossError(FloatingPointError):
    """Loss or gradient evaluated to NaN/Inf."""

    def __init__(self, message: str, value: float | None = None, psi: np.ndarray | None = None):
        super().__init__(message)
        self.value = value
        self.psi = psi


class ShapeMismatchError(ValueError):
    pass


def as_param_vector(x: Any) -> np.ndarray:
    """Coerce to a 1-D float64 array and reject non-finite entries."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError(f"param vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteLossError("param vector contains non-finite entries", psi=v)
    return v


@dataclass(frozen=True)
class ParamLayout:
    """Ordered name -> shape map over a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, Sequence[int]]]) -> "ParamLayout":
        return cls(tuple((name, tuple(int(s) for s in shape)) for name, shape in shapes))

    @functools.cached_property
    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape)) if shape else 1
            out[name] = (start, start + n)
            start += n
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) if s else 1 for _, s in self.entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def shape(self, name: str) -> tuple[int, ...]:
        return dict(self.entries)[name]

    def unflatten(self, psi):
        """Split a flat vector into named arrays. Works on numpy and traced JAX arrays."""
        if psi.shape != (self.size,):
            raise ShapeMismatchError(f"expected vector of length {self.size}, got {psi.shape}")
        return {name: psi[a:b].reshape(self.shape(name)) for name, (a, b) in self.offsets.items()}

    def flatten(self, parts: Mapping[str, Any]) -> np.ndarray:
        chunks = []
        for name, shape in self.entries:
            arr = np.asarray(parts[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: expected {shape}, got {arr.shape}")
            chunks.append(arr.ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def to_json(self) -> list:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_json(cls, data) -> "ParamLayout":
        return cls.from_shapes([(n, s) for n, s in data])


# --------------------------------------------------------------------------- MLP

def mlp_layout(prefix: str, sizes: Sequence[int]) -> list[tuple[str, tuple[int, int] | tuple[int]]]:
    """Layout entries for a dense network with layer widths ``sizes``."""
    out = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append((f"{prefix}W{i}", (b, a)))
        out.append((f"{prefix}b{i}", (b,)))
    return out


def mlp_init(prefix: str, sizes: Sequence[int], rng: np.random.Generator, gain: float = 1.0) -> dict:
    """Uniform fan-in initialisation, zero biases."""
    parts = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = gain / np.sqrt(a)
        parts[f"{prefix}W{i}"] = rng.uniform(-lim, lim, size=(b, a))
        parts[f"{prefix}b{i}"] = np.zeros(b)
    return parts


def mlp_apply(parts: Mapping[str, Any], prefix: str, n_layers: int, x, activation=jnp.tanh):
    """Forward pass; ``x`` has features on the last axis. Output layer is linear."""
    h = x
    for i in range(n_layers):
        h = h @ parts[f"{prefix}W{i}"].T + parts[f"{prefix}b{i}"]
        if i < n_layers - 1:
            h = activation(h)
    return h


# ---------------------------------------------------------------- loss wrappers

@functools.lru_cache(maxsize=None)
def _compiled(fun: Callable):
    value = jax.jit(fun)
    value_and_grad = jax.jit(jax.value_and_grad(fun))

    def _hvp(psi, v, *args):
        g = lambda p: jax.grad(fun)(p, *args)
        return jax.jvp(g, (psi,), (v,))[1]

    return value, value_and_grad, jax.jit(_hvp)


@dataclass(frozen=True, eq=False)
class ScalarLossFn:
    """A scalar loss ``fun(psi, *args)`` bound to fixed data ``args``.

    ``fun`` must be a module-level (hashable, stable) function so compiled
    kernels are shared between every binding of the same loss. ``smoothness``
    and ``hessian_bound`` optionally declare the L and H constants.
    """

    fun: Callable
    args: tuple = ()
    smoothness: float | None = None
    hessian_bound: float | None = None
    meta: dict = field(default_factory=dict)

    def __call__(self, psi) -> float:
        value, _, _ = _compiled(self.fun)
        out = float(value(jnp.asarray(psi, dtype=jnp.float64), *self.args))
        if not np.isfinite(out):
            raise NonFiniteLossError(f"loss evaluated to {out}", value=out, psi=np.asarray(psi))
        return out

    def value_and_grad(self, psi) -> tuple[float, np.ndarray]:
        _, vg, _ = _compiled(self.fun)
        val, g = vg(jnp.asarray(psi, dtype=jnp.float64), *self.args)
        val = float(val)
        g = np.asarray(g)
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite loss/gradient (loss={val})", value=val, psi=np.asarray(psi))
        return val, g

    def hvp(self, psi, v) -> np.ndarray:
        _, _, hv = _compiled(self.fun)
        out = np.asarray(hv(jnp.asarray(psi, dtype=jnp.float64), jnp.asarray(v, dtype=jnp.float64), *self.args))
        if not np.all(np.isfinite(out)):
            raise NonFiniteLossError("non-finite Hessian-vector product", psi=np.asarray(psi))
        return out


def _wrap(f) -> ScalarLossFn:
    if isinstance(f, ScalarLossFn):
        return f
    if callable(f):
        return ScalarLossFn(f)
    raise TypeError(f"expected a ScalarLossFn or callable, got {type(f)!r}")


def grad(f, psi) -> np.ndarray:
    """Exact gradient of ``f`` at ``psi``."""
    psi = as_param_vector(psi)
    return _wrap(f).value_and_grad(psi)[1]


def hvp(f, psi, v) -> np.ndarray:
    """Hessian of ``f`` at ``psi`` applied to ``v``; the Hessian is never formed."""
    psi = as_param_vector(psi)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != psi.shape:
        raise ShapeMismatchError(f"hvp direction has shape {v.shape}, params have {psi.shape}")
    return _wrap(f).hvp(psi, v)


def sum_losses(fns: Sequence[ScalarLossFn]) -> ScalarLossFn:
    """Pointwise sum of losses as a single ScalarLossFn."""
    fns = tuple(_wrap(f) for f in fns)
    return ScalarLossFn(_summed(tuple(f.fun for f in fns)), tuple(f.args for f in fns))


@functools.lru_cache(maxsize=None)
def _summed(funs: tuple[Callable, ...]) -> Callable:
    def total(psi, *arg_groups):
        return sum(fun(psi, *args) for fun, args in zip(funs, arg_groups))

    return total


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def fd_grad(f: Callable[[np.ndarray], float], psi: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a plain ``ndarray -> float`` callable."""
    psi = np.asarray(psi, dtype=np.float64)
    out = np.empty_like(psi)
    for i in range(psi.size):
        e = np.zeros_like(psi)
        e[i] = eps
        out[i] = (f(psi + e) - f(psi - e)) / (2 * eps)
    return out


def check_grad_fd(f, psi, tol: float, eps: float = 1e-5, grad_fn: Callable | None = None) -> GradCheckReport:
    """Compare an analytic gradient against central differences coordinate-wise.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, scale)``
    with ``scale = 1e-3 * max(1, ||n||_inf)`` so coordinates whose true
    derivative is ~0 do not blow up the ratio.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    psi = as_param_vector(psi)
    loss = _wrap(f)
    analytic = np.asarray(grad_fn(psi) if grad_fn is not None else grad(loss, psi))
    numeric = fd_grad(loss, psi, eps)
    scale = 1e-3 * max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 1.0)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    return GradCheckReport(analytic, numeric, np.abs(analytic - numeric) / denom, tol)
