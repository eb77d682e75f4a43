"""Base-learners plugging the NSSM+MPC and DQN controllers into the meta engine."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import jax.numpy as jnp
import numpy as np

from metactrl import dqn, nssm
from metactrl.dataio import SourceDataset, Trajectory, partition
from metactrl.diffnum import ScalarLossFn
from metactrl.meta import TaskBatch
from metactrl.mpc import MpcConfig, MpcController
from metactrl.plants import History, Plant, simulate

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- sampling

def window_index(trajs: Sequence[Trajectory], H: int, T: int) -> np.ndarray:
    """All (trajectory, start) pairs that fit a full window."""
    rows = [(i, s) for i, tr in enumerate(trajs) for s in range(max(0, len(tr) - H - T + 1))]
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def gather_windows(trajs: Sequence[Trajectory], index: np.ndarray, H: int, T: int) -> tuple[np.ndarray, ...]:
    pu, py, fu, fy = [], [], [], []
    for i, s in index:
        tr = trajs[int(i)]
        pu.append(tr.inputs[s:s + H]); py.append(tr.outputs[s:s + H])
        fu.append(tr.inputs[s + H:s + H + T]); fy.append(tr.outputs[s + H:s + H + T])
    return tuple(np.stack(a) for a in (pu, py, fu, fy))


def sample_rows(n_avail: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct rows when possible, otherwise every row topped up with repeats."""
    if n_avail == 0:
        raise ValueError("no samples available")
    if n_avail >= n:
        return np.sort(rng.choice(n_avail, size=n, replace=False))
    extra = rng.choice(n_avail, size=n - n_avail, replace=True)
    return np.concatenate([np.arange(n_avail), extra])


def split_rows(rows: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    tr, te = partition(list(rows), ratio, rng)
    return np.array(tr), np.array(te)


def excitation_input(plant: Plant, rng: np.random.Generator, u_prev, step_frac: float = 0.1) -> np.ndarray:
    """Random-walk step clipped to the input box."""
    return plant.clip_input(np.asarray(u_prev) + rng.normal(0.0, step_frac * plant.u_max))


def traj_transitions(traj: Trajectory, stack_len: int) -> dict:
    """Vectorised counterpart of ``dataio.to_transitions`` for a whole trajectory."""
    Y, U = traj.outputs, traj.inputs
    R = traj.references if traj.references is not None else np.zeros_like(Y)
    L, m = Y.shape
    n = L - stack_len
    if n <= 0:
        return {k: np.zeros((0, stack_len * m if k != "u" and k != "u_prev" else U.shape[1]))
                for k in ("y", "u", "y_next", "u_prev", "ref", "ref_next")}
    idx = np.arange(stack_len - 1, L - 1)

    def stack(A, offset):
        return np.concatenate([A[idx - stack_len + 1 + j + offset] for j in range(stack_len)], axis=1)

    return {"y": stack(Y, 0), "y_next": stack(Y, 1), "ref": stack(R, 0), "ref_next": stack(R, 1),
            "u": U[idx + 1], "u_prev": U[idx]}


def concat_transitions(parts: Sequence[dict]) -> dict:
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


# ------------------------------------------------------------- NSSM + MPC

@dataclass
class NssmMpcLearner:
    """Identification loss on windows; ε-greedy MPC rollouts for fresh data."""

    config: nssm.NssmConfig
    mpc_config: MpcConfig
    plant: Plant
    task_params: dict
    reference: Callable[[float], np.ndarray] | None = None
    windows_per_task: int = 64
    split: float = 0.5
    collect_steps: int = 200
    eps: float = 0.1
    explore_frac: float = 0.1

    def init_params(self, rng):
        return nssm.init_params(self.config, rng).vector

    def windows(self, trajs: Sequence[Trajectory], rng, n: int | None = None) -> tuple[np.ndarray, ...]:
        cfg = self.config
        index = window_index(trajs, cfg.H, cfg.T)
        rows = sample_rows(len(index), n or self.windows_per_task, rng)
        return gather_windows(trajs, index[rows], cfg.H, cfg.T)

    def loss_on(self, trajs: Sequence[Trajectory], rng=None, n: int | None = None) -> ScalarLossFn:
        """Loss over every window (``n=None`` and no rng) or a sample of ``n`` windows."""
        cfg = self.config
        if rng is None:
            index = window_index(trajs, cfg.H, cfg.T)
            arrays = gather_windows(trajs, index, cfg.H, cfg.T)
        else:
            arrays = self.windows(trajs, rng, n)
        return ScalarLossFn(nssm.loss_kernel(cfg), tuple(jnp.asarray(a) for a in arrays))

    def task_batch(self, dataset: SourceDataset, task_id: str, omega, rng) -> TaskBatch:
        cfg = self.config
        trajs = dataset.all_trajectories(task_id)
        index = window_index(trajs, cfg.H, cfg.T)
        rows = sample_rows(len(index), self.windows_per_task, rng)
        tr, te = split_rows(rows, self.split, rng)
        mk = lambda r: ScalarLossFn(nssm.loss_kernel(cfg),
                                    tuple(jnp.asarray(a) for a in gather_windows(trajs, index[r], cfg.H, cfg.T)))
        return TaskBatch(task_id, mk(tr), mk(te))

    def post_inner(self, batch, omega_b):
        return batch

    def controller(self, omega, rng: np.random.Generator | None = None, eps: float = 0.0):
        """Closed-loop policy: excitation until H pairs exist, then (ε-greedy) MPC."""
        params = nssm.NssmParams(self.config, omega)
        ctrl = MpcController(params, self.mpc_config)
        H, N = self.config.H, self.mpc_config.N
        plant, ref_fn = self.plant, self.reference

        def policy(hist: History):
            k = hist.k
            u_prev = hist.inputs[-1]
            if k < H:
                if rng is None:
                    return np.zeros(plant.n_input), "init"
                return excitation_input(plant, rng, u_prev, self.explore_frac), "explore"
            if rng is not None and eps > 0 and rng.random() < eps:
                u = rng.normal(0.0, 0.5 * plant.u_max)
                ctrl.u_prev = plant.clip_input(u)
                return ctrl.u_prev, "explore"
            # reference rows for outputs at times k-1 .. k-1+N
            ref = np.stack([ref_fn((k - 1 + j) * plant.dt) for j in range(N + 1)])
            return ctrl.step(hist.inputs[-H:], hist.outputs[-H:], ref, u_prev), "policy"

        return policy

    def collect(self, dataset, task_id, omega_b, rng, iteration) -> Trajectory | None:
        if self.reference is None:
            return None
        pol = self.controller(omega_b, rng, self.eps)
        return simulate(self.plant, self.task_params[task_id], pol, self.reference, steps=self.collect_steps)


# ------------------------------------------------------------------- DQN

@dataclass
class DqnLearner:
    """Bellman loss on sampled transitions with per-task Polyak target networks."""

    config: dqn.DqnConfig
    plant: Plant
    task_params: dict
    reference: Callable[[float], np.ndarray] | None = None
    transitions_per_task: int = 128
    split: float = 0.5
    collect_steps: int = 200
    total_iters: int = 100
    x0_sampler: Callable[[np.random.Generator], np.ndarray] | None = None
    reference_sampler: Callable[[np.random.Generator], Callable] | None = None
    targets: dict = field(default_factory=dict)

    def init_params(self, rng):
        return dqn.init_params(self.config.net, rng)

    def transitions(self, trajs: Sequence[Trajectory]) -> dict:
        return concat_transitions([traj_transitions(t, self.config.net.stack_len) for t in trajs])

    def task_batch(self, dataset: SourceDataset, task_id: str, omega, rng) -> TaskBatch:
        if task_id not in self.targets:
            self.targets[task_id] = np.asarray(omega, dtype=np.float64).copy()
        arr = dqn.transition_arrays(self.transitions(dataset.all_trajectories(task_id)), self.config)
        rows = sample_rows(len(arr["u"]), self.transitions_per_task, rng)
        tr, te = split_rows(rows, self.split, rng)
        batch = TaskBatch(task_id, None, None, ({k: v[tr] for k, v in arr.items()}, {k: v[te] for k, v in arr.items()}))
        return self._bind(batch)

    def _bind(self, batch: TaskBatch) -> TaskBatch:
        target = self.targets[batch.task_id]
        tr, te = batch.data
        batch.train = dqn.make_loss(target, tr, self.config)
        batch.test = dqn.make_loss(target, te, self.config)
        return batch

    def post_inner(self, batch, omega_b):
        self.targets[batch.task_id] = dqn.polyak_update(self.targets[batch.task_id], omega_b, self.config.polyak_beta)
        return self._bind(batch)

    def controller(self, omega, rng: np.random.Generator | None = None, eps: float = 0.0, reference=None):
        s, m = self.config.net.stack_len, self.config.net.n_outputs
        ref_fn, plant, cfg = reference or self.reference, self.plant, self.config

        def policy(hist: History):
            k = hist.k
            if k < s:
                return np.zeros(plant.n_input), "init"
            ys = hist.outputs[-s:].ravel()
            # the Q-network sees errors w.r.t. the references of the same rows
            refs = np.concatenate([ref_fn((k - s + j) * plant.dt) for j in range(s)]) if ref_fn else np.zeros(s * m)
            err = ys - refs
            if rng is None or eps == 0.0:
                return dqn.greedy_action(omega, err, cfg), "policy"
            return dqn.epsilon_greedy(omega, err, cfg, rng, eps)

        return policy

    def collect(self, dataset, task_id, omega_b, rng, iteration) -> Trajectory | None:
        eps = self.config.epsilon_at(iteration, self.total_iters)
        x0 = self.x0_sampler(rng) if self.x0_sampler is not None else None
        if self.reference_sampler is not None:
            ref = self.reference_sampler(rng)
        else:
            ref = self.reference if self.reference is not None else (lambda t: np.zeros(self.plant.n_output))
        return simulate(self.plant, self.task_params[task_id], self.controller(omega_b, rng, eps, ref), ref,
                        steps=self.collect_steps, x0=x0)
