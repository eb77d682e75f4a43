"""Q-network controller over a finite action grid.

Q(e, u) is an MLP of the stacked tracking error e = y_stack - ref_stack and the
candidate input u. The policy is the grid argmin; the target network is tracked
by Polyak averaging and held constant inside the Bellman loss.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from metactrl.dataio import Transition, stack_transitions
from metactrl.diffnum import ParamLayout, ScalarLossFn, ShapeMismatchError, as_param_vector, mlp_apply, mlp_init, mlp_layout


def uniform_grid(u_low, u_high, points_per_axis: int) -> np.ndarray:
    """Cartesian grid over the input box, ``points_per_axis`` per input, first input slowest."""
    lo, hi = np.atleast_1d(np.asarray(u_low, float)), np.atleast_1d(np.asarray(u_high, float))
    axes = [np.linspace(a, b, points_per_axis) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


@dataclass(frozen=True)
class QNetConfig:
    n_outputs: int
    n_inputs: int
    stack_len: int = 1
    hidden: tuple[int, ...] = (128, 128, 128)
    # fixed feature scaling
    e_scale: float = 1.0
    u_scale: float = 1.0
    # >0: feed [newest error, (newest - previous) / diff_scale, ...] instead of the raw stack
    diff_scale: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.stack_len < 1:
            raise ValueError("stack_len must be >= 1")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.stack_len * self.n_outputs + self.n_inputs, *self.hidden, 1)

    @functools.cached_property
    def layout(self) -> ParamLayout:
        return ParamLayout.from_shapes(mlp_layout("q_", self.sizes))


@dataclass(frozen=True, eq=False)
class DqnConfig:
    net: QNetConfig
    action_grid: np.ndarray
    u_low: np.ndarray
    u_high: np.ndarray
    discount: float = 0.9
    polyak_beta: float = 0.9
    Qw: np.ndarray | float = 1.0
    Rw: np.ndarray | float = 0.0
    eps_start: float = 0.3
    eps_end: float = 0.02
    eps_adapt: float = 0.05
    sigma: np.ndarray | None = None  # per-input std of exploration noise; default u_max / 2
    reduction: str = "sum"  # "sum" is the plain Bellman loss; "mean" divides by the batch size

    def __post_init__(self):
        grid = np.asarray(self.action_grid, dtype=np.float64).reshape(-1, self.net.n_inputs)
        lo = np.broadcast_to(np.asarray(self.u_low, float), (self.net.n_inputs,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_high, float), (self.net.n_inputs,)).copy()
        if grid.shape[0] == 0:
            raise ValueError("action grid is empty")
        if np.any(grid < lo - 1e-12) or np.any(grid > hi + 1e-12):
            raise ValueError("action grid leaves the input box")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.5 <= self.polyak_beta < 1.0:
            raise ValueError("polyak_beta must lie in [0.5, 1)")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        m, p = self.net.n_outputs, self.net.n_inputs
        object.__setattr__(self, "action_grid", grid)
        object.__setattr__(self, "u_low", lo)
        object.__setattr__(self, "u_high", hi)
        object.__setattr__(self, "Qw", _as_weight(self.Qw, m))
        object.__setattr__(self, "Rw", _as_weight(self.Rw, p))
        sig = 0.5 * np.maximum(np.abs(lo), np.abs(hi)) if self.sigma is None else self.sigma
        object.__setattr__(self, "sigma", np.broadcast_to(np.asarray(sig, float), (p,)).copy())

    def epsilon_at(self, iteration: int, total: int) -> float:
        """Linear decay from eps_start to eps_end over ``total`` iterations."""
        if total <= 1:
            return self.eps_end
        frac = min(max(iteration / (total - 1), 0.0), 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def _as_weight(w, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 0:
        return w * np.eye(n)
    if w.ndim == 1:
        return np.diag(w)
    if w.shape != (n, n):
        raise ShapeMismatchError(f"weight must be {n}x{n}")
    return w


def init_params(net: QNetConfig, rng: np.random.Generator) -> np.ndarray:
    return net.layout.flatten(mlp_init("q_", net.sizes, rng))


# ---------------------------------------------------------------- kernels

def _features(net: QNetConfig, err):
    if net.diff_scale <= 0 or net.stack_len == 1:
        return err / net.e_scale
    m = net.n_outputs
    blocks = [err[..., j * m:(j + 1) * m] for j in range(net.stack_len)]
    newest = blocks[-1]
    diffs = [(blocks[j + 1] - blocks[j]) / net.diff_scale for j in range(net.stack_len - 1)]
    return jnp.concatenate([newest / net.e_scale] + diffs[::-1], axis=-1)


def _q(net: QNetConfig, parts, err, u):
    x = jnp.concatenate([_features(net, err), u / net.u_scale], axis=-1)
    return mlp_apply(parts, "q_", len(net.sizes) - 1, x)[..., 0]


def _q_grid(net: QNetConfig, parts, err, grid):
    """(N, G) Q-values for every row of ``err`` and every grid action."""
    N, G = err.shape[0], grid.shape[0]
    e = jnp.repeat(err[:, None, :], G, axis=1)
    u = jnp.broadcast_to(grid[None, :, :], (N, G, grid.shape[1]))
    return _q(net, parts, e, u)


@functools.lru_cache(maxsize=None)
def _jitted(net: QNetConfig):
    layout = net.layout

    @jax.jit
    def q_pairs(psi, err, u):
        return _q(net, layout.unflatten(psi), err, u)

    @jax.jit
    def q_grid(psi, err, grid):
        return _q_grid(net, layout.unflatten(psi), err, grid)

    return q_pairs, q_grid


@functools.lru_cache(maxsize=None)
def loss_kernel(net: QNetConfig, mean: bool = False):
    """``f(psi, err, u, targets)`` -> 1/2 sum (targets - Q)^2; targets enter as constants."""
    layout = net.layout

    def loss(psi, err, u, targets):
        r = targets - _q(net, layout.unflatten(psi), err, u)
        tot = 0.5 * jnp.sum(r ** 2)
        return tot / r.shape[0] if mean else tot

    loss.__name__ = loss.__qualname__ = f"loss_dqn[{net}|{mean}]"
    return loss


# ------------------------------------------------------------------- ops

def stage_cost(y, ybar, u, u_prev, Qw=1.0, Rw=0.0) -> float:
    """(y - ybar)' Q (y - ybar) + du' R du."""
    e = np.atleast_1d(np.asarray(y, float) - np.asarray(ybar, float))
    du = np.atleast_1d(np.asarray(u, float) - np.asarray(u_prev, float))
    Qm, Rm = _as_weight(Qw, e.size), _as_weight(Rw, du.size)
    return float(e @ Qm @ e + du @ Rm @ du)


def batch_stage_cost(y, ybar, u, u_prev, Qw: np.ndarray, Rw: np.ndarray) -> np.ndarray:
    e = np.asarray(y) - np.asarray(ybar)
    du = np.asarray(u) - np.asarray(u_prev)
    return np.einsum("ni,ij,nj->n", e, Qw, e) + np.einsum("ni,ij,nj->n", du, Rw, du)


def q_values(params, err_stack, config: DqnConfig) -> np.ndarray:
    """Q at one error stack for every grid action."""
    _, q_grid = _jitted(config.net)
    err = np.asarray(err_stack, float).reshape(1, -1)
    return np.asarray(q_grid(as_param_vector(params), err, config.action_grid))[0]


def greedy_action(params, err_stack, config: DqnConfig) -> np.ndarray:
    """Grid member with the smallest Q; ``np.argmin`` keeps the lowest index on ties."""
    if config.action_grid.shape[0] == 1:
        return config.action_grid[0].copy()
    return config.action_grid[int(np.argmin(q_values(params, err_stack, config)))].copy()


def explore_action(config: DqnConfig, rng: np.random.Generator, project: bool = True) -> np.ndarray:
    u = rng.normal(0.0, config.sigma)
    return np.clip(u, config.u_low, config.u_high) if project else u


def epsilon_greedy(params, err_stack, config: DqnConfig, rng: np.random.Generator, eps: float):
    """Returns (u, tag) with tag ``"explore"`` for the random branch and ``"policy"`` otherwise."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    # draw the coin every call so the stream does not depend on the branch taken
    if rng.random() < eps:
        return explore_action(config, rng), "explore"
    return greedy_action(params, err_stack, config), "policy"


def _last_block(stack: np.ndarray, m: int) -> np.ndarray:
    return stack[..., -m:]


def transition_arrays(transitions: Sequence[Transition] | dict, config: DqnConfig) -> dict:
    arr = transitions if isinstance(transitions, dict) else stack_transitions(transitions)
    m = config.net.n_outputs
    err = arr["y"] - arr["ref"]
    err_next = arr["y_next"] - arr["ref_next"]
    cost = batch_stage_cost(_last_block(arr["y_next"], m), _last_block(arr["ref_next"], m),
                            arr["u"], arr["u_prev"], config.Qw, config.Rw)
    return {"err": err, "u": arr["u"], "err_next": err_next, "cost": cost}


def bellman_targets(target_params, arrays: dict, config: DqnConfig) -> np.ndarray:
    """c + discount * min over the grid of the target network at the next error stack."""
    if config.discount == 0.0:
        return np.asarray(arrays["cost"], float).copy()
    _, q_grid = _jitted(config.net)
    q_next = np.asarray(q_grid(as_param_vector(target_params), arrays["err_next"], config.action_grid))
    return arrays["cost"] + config.discount * q_next.min(axis=1)


def bellman_target(target_params, transition: Transition, config: DqnConfig) -> float:
    return float(bellman_targets(target_params, transition_arrays([transition], config), config)[0])


def make_loss(target_params, transitions, config: DqnConfig) -> ScalarLossFn:
    """Bellman loss bound to a batch, with targets frozen at ``target_params``."""
    if not isinstance(transitions, dict) and len(transitions) == 0:
        raise ValueError("loss_dqn needs at least one transition")
    arrays = transitions if isinstance(transitions, dict) and "err" in transitions else transition_arrays(transitions, config)
    if arrays["err"].shape[0] == 0:
        raise ValueError("loss_dqn needs at least one transition")
    targets = bellman_targets(target_params, arrays, config)
    return ScalarLossFn(loss_kernel(config.net, config.reduction == "mean"),
                        (jnp.asarray(arrays["err"]), jnp.asarray(arrays["u"]), jnp.asarray(targets)))


def loss_dqn(params, target_params, transitions, config: DqnConfig) -> float:
    return make_loss(target_params, transitions, config)(as_param_vector(params))


def polyak_update(target_params, params, beta: float) -> np.ndarray:
    """beta * target + (1 - beta) * params."""
    if not 0.5 <= beta < 1.0:
        raise ValueError("beta must lie in [0.5, 1)")
    t, p = as_param_vector(target_params), as_param_vector(params)
    if t.shape != p.shape:
        raise ShapeMismatchError(f"target {t.shape} and online {p.shape} parameters differ in length")
    return beta * t + (1.0 - beta) * p
