"""Neural state-space model: history encoder plus linear latent dynamics.

    z_t     = f_enc(u_{t-H+1..t}, y_{t-H+1..t})
    z_{k+1} = A_z z_k + B_z u_{k+1}
    y_hat_k = C_z z_k
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from metactrl.dataio import Window, stack_windows
from metactrl.diffnum import ParamLayout, ScalarLossFn, ShapeMismatchError, mlp_apply, mlp_init, mlp_layout


@dataclass(frozen=True)
class NssmConfig:
    n_inputs: int
    n_outputs: int
    H: int = 8
    n_z: int = 8
    T: int = 16
    hidden: tuple[int, ...] = (64, 64)
    # fixed (non-trainable) scaling of encoder features
    u_scale: float = 1.0
    y_scale: float = 1.0

    def __post_init__(self):
        if self.H < 1 or self.T < 1 or self.n_z < 1:
            raise ValueError("H, T and n_z must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def encoder_sizes(self) -> tuple[int, ...]:
        return (self.H * (self.n_inputs + self.n_outputs), *self.hidden, self.n_z)

    @functools.cached_property
    def layout(self) -> ParamLayout:
        return ParamLayout.from_shapes(
            mlp_layout("enc_", self.encoder_sizes)
            + [("A_z", (self.n_z, self.n_z)), ("B_z", (self.n_z, self.n_inputs)), ("C_z", (self.n_outputs, self.n_z))]
        )

    @property
    def rule_of_thumb_ok(self) -> bool:
        """Latent size no larger than the output history it is encoded from."""
        return self.n_z <= self.n_outputs * self.H


@dataclass(frozen=True, eq=False)
class NssmParams:
    config: NssmConfig
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (self.config.layout.size,):
            raise ShapeMismatchError(f"expected {self.config.layout.size} weights, got {v.shape}")
        object.__setattr__(self, "vector", v)

    @property
    def parts(self) -> dict:
        return self.config.layout.unflatten(self.vector)

    def with_vector(self, v) -> "NssmParams":
        return NssmParams(self.config, v)


def init_params(config: NssmConfig, rng: np.random.Generator, b_scale: float = 0.1) -> NssmParams:
    """Fan-in uniform encoder; A_z = 0.9 I; small random B_z, C_z."""
    parts = mlp_init("enc_", config.encoder_sizes, rng)
    parts["A_z"] = 0.9 * np.eye(config.n_z)
    parts["B_z"] = rng.uniform(-b_scale, b_scale, size=(config.n_z, config.n_inputs))
    parts["C_z"] = rng.uniform(-b_scale, b_scale, size=(config.n_outputs, config.n_z))
    return NssmParams(config, config.layout.flatten(parts))


# ---------------------------------------------------------------- pure kernels

def _features(cfg: NssmConfig, past_u, past_y):
    # interleave per time step: [u_k/u_scale, y_k/y_scale] for k oldest..newest
    f = jnp.concatenate([past_u / cfg.u_scale, past_y / cfg.y_scale], axis=-1)
    return f.reshape(f.shape[:-2] + (-1,))


def _encode(cfg: NssmConfig, parts, past_u, past_y):
    return mlp_apply(parts, "enc_", len(cfg.encoder_sizes) - 1, _features(cfg, past_u, past_y))


def _rollout_from(parts, z0, future_u):
    """Predicted outputs for inputs ``future_u`` (..., T, p) starting from latent ``z0`` (..., n_z)."""
    A, B, C = parts["A_z"], parts["B_z"], parts["C_z"]

    def step(z, u):
        z = z @ A.T + u @ B.T
        return z, z @ C.T

    # scan over time: move T to the front
    _, yhat = jax.lax.scan(step, z0, jnp.moveaxis(future_u, -2, 0))
    return jnp.moveaxis(yhat, 0, -2)


@functools.lru_cache(maxsize=None)
def loss_kernel(cfg: NssmConfig):
    """``f(psi, past_u, past_y, future_u, future_y)`` -> mean over windows of (1/T)||Y - Y_hat||^2."""
    layout = cfg.layout

    def loss(psi, past_u, past_y, future_u, future_y):
        parts = layout.unflatten(psi)
        z = _encode(cfg, parts, past_u, past_y)
        yhat = _rollout_from(parts, z, future_u)
        per_window = jnp.sum((future_y - yhat) ** 2, axis=(-2, -1)) / future_y.shape[-2]
        return jnp.mean(per_window)

    loss.__name__ = loss.__qualname__ = f"loss_ssm[{cfg}]"
    return loss


@functools.lru_cache(maxsize=None)
def _jitted(cfg: NssmConfig):
    layout = cfg.layout

    @jax.jit
    def enc(psi, past_u, past_y):
        return _encode(cfg, layout.unflatten(psi), past_u, past_y)

    @jax.jit
    def roll(psi, past_u, past_y, future_u):
        parts = layout.unflatten(psi)
        return _rollout_from(parts, _encode(cfg, parts, past_u, past_y), future_u)

    return enc, roll


# ------------------------------------------------------------------ public ops

def _check_past(cfg: NssmConfig, past_u, past_y):
    past_u = np.asarray(past_u, dtype=np.float64).reshape(-1, cfg.n_inputs)
    past_y = np.asarray(past_y, dtype=np.float64).reshape(-1, cfg.n_outputs)
    if past_u.shape[0] != cfg.H or past_y.shape[0] != cfg.H:
        raise ShapeMismatchError(f"encoder needs exactly H={cfg.H} past pairs, got {past_u.shape[0]}/{past_y.shape[0]}")
    return past_u, past_y


def encode(params: NssmParams, past_u, past_y) -> np.ndarray:
    """Latent state from the last H (input, output) pairs, oldest first."""
    cfg = params.config
    past_u, past_y = _check_past(cfg, past_u, past_y)
    enc, _ = _jitted(cfg)
    return np.asarray(enc(params.vector, past_u, past_y))


def predict_rollout(params: NssmParams, past_u, past_y, future_inputs) -> np.ndarray:
    """Predicted outputs y_hat_{t+1..t+T} for the given future inputs."""
    cfg = params.config
    past_u, past_y = _check_past(cfg, past_u, past_y)
    fu = np.asarray(future_inputs, dtype=np.float64).reshape(-1, cfg.n_inputs)
    _, roll = _jitted(cfg)
    return np.asarray(roll(params.vector, past_u, past_y, fu))


def rollout_from_latent(params: NssmParams, z0, future_inputs) -> np.ndarray:
    parts = params.parts
    fu = np.asarray(future_inputs, dtype=np.float64).reshape(-1, params.config.n_inputs)
    z = np.asarray(z0, dtype=np.float64)
    out = []
    for u in fu:
        z = parts["A_z"] @ z + parts["B_z"] @ u
        out.append(parts["C_z"] @ z)
    return np.array(out)


def window_arrays(windows: Sequence[Window]) -> tuple[np.ndarray, ...]:
    s = stack_windows(windows)
    return s["past_u"], s["past_y"], s["future_u"], s["future_y"]


def make_loss(config: NssmConfig, windows: Sequence[Window]) -> ScalarLossFn:
    """Bind the identification loss to a window set."""
    if len(windows) == 0:
        raise ValueError("loss_ssm needs at least one window")
    arrays = window_arrays(windows)
    if arrays[0].shape[1] != config.H or arrays[2].shape[1] != config.T:
        raise ShapeMismatchError("window H/T do not match the model configuration")
    return ScalarLossFn(loss_kernel(config), tuple(jnp.asarray(a) for a in arrays))


def loss_ssm(params: NssmParams, windows: Sequence[Window]) -> float:
    return make_loss(params.config, windows)(params.vector)


def compact_model(params: NssmParams) -> tuple[np.ndarray, np.ndarray]:
    """Stacked system s = [z; y_hat]: A = [[A_z, 0], [C_z A_z, 0]], B = [B_z; C_z B_z]."""
    p = params.parts
    A_z, B_z, C_z = (np.asarray(p[k]) for k in ("A_z", "B_z", "C_z"))
    n_z, m = A_z.shape[0], C_z.shape[0]
    A = np.zeros((n_z + m, n_z + m))
    A[:n_z, :n_z] = A_z
    A[n_z:, :n_z] = C_z @ A_z
    B = np.vstack([B_z, C_z @ B_z])
    return A, B


def latent_matrices(params: NssmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = params.parts
    return tuple(np.asarray(p[k]) for k in ("A_z", "B_z", "C_z"))
