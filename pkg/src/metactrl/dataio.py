"""Trajectories, windowing, transitions, partitioning and on-disk datasets.

On-disk layout::

    <dir>/manifest.json
    <dir>/task_<k>/traj_<i>.csv      # columns: t, u0..u{p-1}, y0..y{m-1}

Floats are written with 17 significant digits so a save/load round trip is
bit-exact.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DatasetError(Exception):
    pass


class MalformedDatasetError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class DtMismatchError(DatasetError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Time-aligned records: ``inputs[k]`` is the input that produced ``outputs[k]``."""

    inputs: np.ndarray  # (L, p)
    outputs: np.ndarray  # (L, m)
    dt: float
    plant_tag: str = ""
    diverged: bool = False
    references: np.ndarray | None = None  # (L, m) if the run tracked a reference
    tags: tuple[str, ...] | None = None  # input provenance per row

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.outputs, dtype=np.float64)
        u = u.reshape(-1, 1) if u.ndim == 1 else u.reshape(u.shape[0], -1)
        y = y.reshape(-1, 1) if y.ndim == 1 else y.reshape(y.shape[0], -1)
        if u.shape[0] != y.shape[0]:
            raise ValueError(f"inputs ({u.shape[0]}) and outputs ({y.shape[0]}) differ in length")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.outputs.shape[1]

    def segment(self, start: int, stop: int) -> "Trajectory":
        return replace(
            self,
            inputs=self.inputs[start:stop],
            outputs=self.outputs[start:stop],
            references=None if self.references is None else self.references[start:stop],
            tags=None if self.tags is None else self.tags[start:stop],
        )


# -------------------------------------------------------------------- windows

@dataclass(frozen=True)
class Window:
    """Index range ``[start, start+H+T)`` into ``traj``; past = first H rows."""

    traj: Trajectory
    start: int
    H: int
    T: int

    @property
    def past_inputs(self):
        return self.traj.inputs[self.start:self.start + self.H]

    @property
    def past_outputs(self):
        return self.traj.outputs[self.start:self.start + self.H]

    @property
    def future_inputs(self):
        return self.traj.inputs[self.start + self.H:self.start + self.H + self.T]

    @property
    def future_outputs(self):
        return self.traj.outputs[self.start + self.H:self.start + self.H + self.T]


class WindowList(list):
    """List of windows carrying a ``too_short`` warning flag."""

    too_short: bool = False


def make_windows(traj: Trajectory, H: int, T: int) -> WindowList:
    """All stride-1 windows of length H+T. Short trajectories give an empty, flagged list."""
    if H < 1 or T < 1:
        raise ValueError("H and T must be >= 1")
    out = WindowList()
    n = len(traj) - H - T + 1
    if n <= 0:
        out.too_short = True
        log.warning("trajectory of length %d too short for H=%d, T=%d", len(traj), H, T)
        return out
    out.extend(Window(traj, s, H, T) for s in range(n))
    return out


def stack_windows(windows: Sequence[Window]) -> dict[str, np.ndarray]:
    """Dense arrays (n, H, p) etc. for vectorised loss evaluation."""
    if not windows:
        raise ValueError("no windows to stack")
    return {
        "past_u": np.stack([w.past_inputs for w in windows]),
        "past_y": np.stack([w.past_outputs for w in windows]),
        "future_u": np.stack([w.future_inputs for w in windows]),
        "future_y": np.stack([w.future_outputs for w in windows]),
    }


# ---------------------------------------------------------------- transitions

@dataclass(frozen=True)
class Transition:
    """(y, u, y') with optional reference and previous input for the stage cost.

    ``y`` and ``y_next`` are stacked output histories when ``stack_len > 1``
    (oldest first), ``ref``/``ref_next`` are stacked the same way.
    """

    y: np.ndarray
    u: np.ndarray
    y_next: np.ndarray
    u_prev: np.ndarray
    ref: np.ndarray | None = None
    ref_next: np.ndarray | None = None


def to_transitions(traj: Trajectory, stack_len: int = 1) -> list[Transition]:
    """Consecutive tuples; ``y`` at row k stacks outputs k-stack_len+1..k."""
    if stack_len < 1:
        raise ValueError("stack_len must be >= 1")
    L = len(traj)
    if L < stack_len + 1:
        raise ValueError(f"trajectory of length {L} too short for stack_len={stack_len}")
    Y, U = traj.outputs, traj.inputs
    R = traj.references
    out = []
    for k in range(stack_len - 1, L - 1):
        sl, sl_next = slice(k - stack_len + 1, k + 1), slice(k - stack_len + 2, k + 2)
        out.append(Transition(
            y=Y[sl].ravel(),
            u=U[k + 1],
            y_next=Y[sl_next].ravel(),
            u_prev=U[k],
            ref=None if R is None else R[sl].ravel(),
            ref_next=None if R is None else R[sl_next].ravel(),
        ))
    return out


def stack_transitions(transitions: Sequence[Transition], n_outputs: int | None = None) -> dict[str, np.ndarray]:
    if not transitions:
        raise ValueError("no transitions to stack")
    out = {
        "y": np.stack([t.y for t in transitions]),
        "u": np.stack([t.u for t in transitions]),
        "y_next": np.stack([t.y_next for t in transitions]),
        "u_prev": np.stack([t.u_prev for t in transitions]),
    }
    if transitions[0].ref is not None:
        out["ref"] = np.stack([t.ref for t in transitions])
        out["ref_next"] = np.stack([t.ref_next for t in transitions])
    else:
        out["ref"] = np.zeros_like(out["y"])
        out["ref_next"] = np.zeros_like(out["y_next"])
    return out


# ------------------------------------------------------------------ partition

def partition(items: Sequence, ratio: float = 0.5, rng: np.random.Generator | None = None):
    """Random disjoint split; the training side gets ``ceil(ratio * n)``."""
    if not 0.0 < ratio < 1.0:
        raise PartitionError("ratio must lie in (0, 1)")
    n = len(items)
    n_tr = math.ceil(ratio * n)
    if n_tr < 1 or n - n_tr < 1:
        raise PartitionError(f"cannot split {n} samples with ratio {ratio} into two non-empty sets")
    order = np.arange(n) if rng is None else rng.permutation(n)
    tr = [items[i] for i in sorted(order[:n_tr])]
    te = [items[i] for i in sorted(order[n_tr:])]
    return tr, te


# -------------------------------------------------------------------- dataset

@dataclass
class SourceDataset:
    """Per-task trajectory collections; a target dataset is one with a single task."""

    tasks: dict[str, list[Trajectory]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def task_ids(self) -> list[str]:
        return list(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def snapshot(self) -> "SourceDataset":
        return SourceDataset({k: list(v) for k, v in self.tasks.items()}, dict(self.meta))

    def all_trajectories(self, task_id: str) -> list[Trajectory]:
        return self.tasks[task_id]


def append_trajectory(ds: SourceDataset, task_id: str, traj: Trajectory, cap: int | None = None) -> SourceDataset:
    """Return a new dataset with ``traj`` appended to ``task_id``.

    The input dataset is left untouched. With ``cap`` the task keeps its first
    trajectory (the original excitation record) plus the ``cap`` most recent
    appended ones.
    """
    existing = ds.tasks.get(task_id, [])
    if existing and not math.isclose(existing[0].dt, traj.dt, rel_tol=0, abs_tol=1e-12):
        raise DtMismatchError(f"task {task_id}: dt {traj.dt} != {existing[0].dt}")
    new_list = list(existing) + [traj]
    if cap is not None and len(new_list) > cap + 1:
        new_list = new_list[:1] + new_list[-cap:]
    tasks = dict(ds.tasks)
    tasks[task_id] = new_list
    return SourceDataset(tasks, dict(ds.meta))


def _fmt(x: float) -> str:
    return repr(float(x)) if np.isfinite(x) else str(float(x))


def _write_csv(path: Path, traj: Trajectory) -> None:
    p, m = traj.n_inputs, traj.n_outputs
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u{i}" for i in range(p)] + [f"y{i}" for i in range(m)])
        for k in range(len(traj)):
            w.writerow([k] + [_fmt(v) for v in traj.inputs[k]] + [_fmt(v) for v in traj.outputs[k]])


def _read_csv(path: Path, p: int, m: int, expected_rows: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MalformedDatasetError(f"cannot read {path}: {exc}") from exc
    if not rows or len(rows[0]) != 1 + p + m:
        raise MalformedDatasetError(f"{path}: bad header")
    body = rows[1:]
    if len(body) != expected_rows:
        raise MalformedDatasetError(f"{path}: expected {expected_rows} rows, found {len(body)}")
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), 1 + p + m)
    except ValueError as exc:
        raise MalformedDatasetError(f"{path}: {exc}") from exc
    return arr[:, 1:1 + p], arr[:, 1 + p:]


def save_dataset(ds: SourceDataset, path: str | os.PathLike) -> Path:
    """Write the dataset directory atomically (temp dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp_ds_", dir=path.parent))
    try:
        manifest = {"version": FORMAT_VERSION, "meta": ds.meta, "tasks": []}
        for k, (task_id, trajs) in enumerate(ds.tasks.items()):
            tdir = tmp / f"task_{k}"
            tdir.mkdir()
            entries = []
            for i, tr in enumerate(trajs):
                _write_csv(tdir / f"traj_{i}.csv", tr)
                entries.append({
                    "file": f"task_{k}/traj_{i}.csv",
                    "length": len(tr),
                    "n_inputs": tr.n_inputs,
                    "n_outputs": tr.n_outputs,
                    "dt": tr.dt,
                    "plant_tag": tr.plant_tag,
                    "diverged": tr.diverged,
                })
            manifest["tasks"].append({"id": task_id, "trajectories": entries})
        with open(tmp / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_dataset(path: str | os.PathLike) -> SourceDataset:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise MalformedDatasetError(f"no manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedDatasetError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "version" not in manifest or "tasks" not in manifest:
        raise MalformedDatasetError("manifest missing required keys")
    if manifest["version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset version {manifest['version']}, expected {FORMAT_VERSION}")
    tasks: dict[str, list[Trajectory]] = {}
    try:
        for task in manifest["tasks"]:
            trajs = []
            for e in task["trajectories"]:
                u, y = _read_csv(path / e["file"], e["n_inputs"], e["n_outputs"], e["length"])
                trajs.append(Trajectory(u, y, float(e["dt"]), e.get("plant_tag", ""), bool(e.get("diverged", False))))
            tasks[str(task["id"])] = trajs
    except (KeyError, TypeError) as exc:
        raise MalformedDatasetError(f"manifest entry malformed: {exc!r}") from exc
    return SourceDataset(tasks, dict(manifest.get("meta", {})))


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | os.PathLike, layout_json: list, vector: np.ndarray, meta: dict | None = None) -> Path:
    """Shape map + flat weights: ``<path>/checkpoint.json`` and ``<path>/weights.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp_ckpt_", dir=path.parent))
    try:
        with open(tmp / "checkpoint.json", "w") as fh:
            json.dump({"version": FORMAT_VERSION, "layout": layout_json, "size": int(vector.size),
                       "meta": meta or {}}, fh, indent=2, sort_keys=True)
        with open(tmp / "weights.csv", "w") as fh:
            fh.write("index,value\n")
            for i, v in enumerate(np.asarray(vector, dtype=np.float64)):
                fh.write(f"{i},{_fmt(v)}\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[list, np.ndarray, dict]:
    path = Path(path)
    try:
        with open(path / "checkpoint.json") as fh:
            head = json.load(fh)
        with open(path / "weights.csv") as fh:
            rows = list(csv.reader(fh))[1:]
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedDatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if head.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {head.get('version')}")
    if len(rows) != head["size"]:
        raise MalformedDatasetError(f"checkpoint expects {head['size']} weights, found {len(rows)}")
    vec = np.array([float(r[1]) for r in rows], dtype=np.float64)
    return head["layout"], vec, head.get("meta", {})
