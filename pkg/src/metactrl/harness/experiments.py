"""Experiment pipelines: source generation, meta-training, adaptation sweeps,
baseline comparison and the sim-to-sim ball-plate run."""
from __future__ import annotations

import csv
import dataclasses
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metactrl import dqn, meta, nssm
from metactrl.dataio import SourceDataset, Trajectory, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from metactrl.harness import config as C
from metactrl.harness.references import Square, make_reference
from metactrl.learners import DqnLearner, NssmMpcLearner, sample_rows, traj_transitions
from metactrl.plants import History, make_plant, params_from_dict, sample_params, simulate

log = logging.getLogger(__name__)

_STREAMS = {"sources": 1, "target": 2, "init": 3, "imaml": 4, "maml": 5, "adapt": 6, "episode": 7,
            "supervised": 8, "scratch": 9, "online": 10}


class DivergenceError(RuntimeError):
    """A simulation or optimisation run became unusable."""


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named generator derived from the experiment seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAMS[name],)))


def plant_of(cfg: dict):
    return make_plant(cfg["plant"]["family"], **cfg["plant"].get("overrides", {}))


def _dist(cfg: dict) -> dict:
    return {"family": cfg["plant"]["family"], **cfg["plant"].get("dist", {})}


def _params_dict(p) -> dict:
    return {k: float(v) for k, v in dataclasses.asdict(p).items()}


# ---------------------------------------------------------------- sources

def excite(plant, params, steps: int, rng: np.random.Generator, ar: float = 0.9, step_frac: float = 0.1,
           x0_range: float = 1.0) -> Trajectory:
    """Zero-mean random-walk excitation: u+ = ar * u + N(0, (step_frac u_max)^2), clipped to the box."""
    sd = step_frac * plant.u_max

    def policy(h: History):
        return plant.clip_input(ar * h.inputs[-1] + rng.normal(0.0, sd)), "explore"

    x0 = _initial_state(plant, rng, x0_range)
    return simulate(plant, params, policy, None, steps=steps, x0=x0)


def _initial_state(plant, rng, x0_range):
    if plant.name == "ballplate":
        pos = rng.uniform(-x0_range, x0_range, 2) * plant.half_width
        return np.array([pos[0], 0.0, pos[1], 0.0])
    return rng.uniform(-x0_range, x0_range, plant.n_state)


def generate_sources(cfg: dict) -> tuple[SourceDataset, dict]:
    """``n_tasks`` plants drawn from the family distribution, one excitation trajectory each."""
    rng = stream(cfg["seed"], "sources")
    plant = plant_of(cfg)
    s = cfg["sources"]
    tasks, params = {}, {}
    for b in range(s["n_tasks"]):
        for attempt in range(s["max_retries"] + 1):
            p = sample_params(_dist(cfg), rng)
            tr = excite(plant, p, s["length"], rng, s["ar"], s["step_frac"], s["x0_range"])
            if not tr.diverged:
                break
            log.warning("source %d attempt %d diverged (params %s); resampling", b, attempt, p)
        else:
            raise DivergenceError(f"source task {b} diverged after {s['max_retries']} retries")
        tasks[str(b)], params[str(b)] = [tr], p
    meta_info = {"family": cfg["plant"]["family"], "params": {k: _params_dict(v) for k, v in params.items()}}
    return SourceDataset(tasks, meta_info), params


def target_params(cfg: dict):
    given = cfg["target"].get("params")
    if given:
        return params_from_dict(cfg["plant"]["family"], given)
    return sample_params(_dist(cfg), stream(cfg["seed"], "target"))


def generate_target(cfg: dict) -> tuple[Trajectory, object]:
    rng = stream(cfg["seed"], "target")
    plant = plant_of(cfg)
    p = target_params(cfg)
    s = cfg["sources"]
    for _ in range(s["max_retries"] + 1):
        tr = excite(plant, p, cfg["target"]["length"], rng, s["ar"], s["step_frac"], s["x0_range"])
        if not tr.diverged:
            return tr, p
    raise DivergenceError("target excitation diverged")


def task_params_of(ds: SourceDataset) -> dict:
    fam = ds.meta["family"]
    return {k: params_from_dict(fam, v) for k, v in ds.meta["params"].items()}


# --------------------------------------------------------------- learners

def make_learner(cfg: dict, task_params: dict, total_iters: int | None = None):
    plant = plant_of(cfg)
    opts = dict(cfg["learner_opts"])
    ref = make_reference(cfg["reference"])
    if cfg["learner"] == "nssm-mpc":
        return NssmMpcLearner(C.nssm_config(cfg), C.mpc_config(cfg, plant), plant, task_params, ref, **opts)
    dcfg = C.dqn_config(cfg, plant)
    learner = DqnLearner(dcfg, plant, task_params, ref, total_iters=total_iters or C.meta_config(cfg).K_train, **opts)
    if plant.name == "ballplate":
        # collection rollouts hold a random square corner from a random start
        corners = Square(**{k: v for k, v in cfg["reference"].items() if k in ("side", "dwell")}).corners
        x0_range = cfg["sources"]["x0_range"]
        learner.reference_sampler = lambda rng: (lambda t, c=corners[rng.integers(4)]: c.copy())
        learner.x0_sampler = lambda rng: _initial_state(plant, rng, x0_range)
    return learner


# --------------------------------------------------------------- training

def train_variant(cfg: dict, variant: str, ds: SourceDataset, task_params: dict,
                  log_path: Path | None = None) -> tuple[np.ndarray, meta.MetaState | None]:
    """Meta-train ``imaml`` / ``maml``; ``supervised`` returns a fresh random initialisation."""
    learner = make_learner(cfg, task_params)
    if variant == "supervised":
        return np.asarray(learner.init_params(stream(cfg["adapt"]["supervised_init_seed"], "supervised"))), None
    mc = C.meta_config(cfg, algorithm=variant)
    omega0 = learner.init_params(stream(cfg["seed"], "init"))
    state = meta.meta_train(ds, learner, mc, stream(cfg["seed"], variant), omega0=omega0, log_path=log_path)
    return state.omega, state


def _layout(cfg: dict):
    if cfg["learner"] == "nssm-mpc":
        return C.nssm_config(cfg).layout
    return C.dqn_config(cfg).net.layout


def run_metatrain(cfg: dict, out: Path, variant: str = "imaml", ds: SourceDataset | None = None) -> Path:
    out = Path(out)
    if ds is None:
        src = out / "sources"
        if (src / "manifest.json").exists():
            ds = load_dataset(src)
        else:
            ds, _ = generate_sources(cfg)
            save_dataset(ds, src)
    omega, state = train_variant(cfg, variant, ds, task_params_of(ds), out / f"training_log_{variant}.csv")
    info = {"variant": variant, "learner": cfg["learner"], "seed": cfg["seed"],
            "iterations": 0 if state is None else state.iteration,
            "converged": False if state is None else state.converged}
    return save_checkpoint(out / "checkpoints" / variant, _layout(cfg).to_json(), omega, info)


def load_omega(path: Path) -> np.ndarray:
    return load_checkpoint(path)[1]


# ------------------------------------------------------------- evaluation

@dataclass
class EpisodeResult:
    variant: str
    steps: int
    traj: Trajectory
    warmup: int
    Qw: np.ndarray
    Rw: np.ndarray

    @property
    def mse(self) -> float:
        return tracking_mse(self.traj, self.warmup)

    @property
    def mean_cost(self) -> float:
        return mean_stage_cost(self.traj, self.Qw, self.Rw)


@dataclass
class MetricsReport:
    episodes: list[EpisodeResult] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"variant": e.variant, "steps": e.steps, "mse": e.mse, "mean_cost": e.mean_cost,
                 "diverged": int(e.traj.diverged), "rows": len(e.traj)} for e in self.episodes]

    def get(self, variant: str, steps: int) -> EpisodeResult:
        for e in self.episodes:
            if e.variant == variant and e.steps == steps:
                return e
        raise KeyError((variant, steps))


def tracking_mse(traj: Trajectory, warmup: int = 0) -> float:
    """Mean squared output error after the warm-up rows; a diverged episode scores infinity."""
    if traj.diverged:
        return float("inf")
    e = traj.outputs[warmup:] - traj.references[warmup:]
    return float(np.mean(e ** 2)) if e.size else float("nan")


def mean_stage_cost(traj: Trajectory, Qw, Rw) -> float:
    if traj.diverged:
        return float("inf")
    if len(traj) < 2:
        return float("nan")
    c = dqn.batch_stage_cost(traj.outputs[1:], traj.references[1:], traj.inputs[1:], traj.inputs[:-1],
                             np.atleast_2d(Qw), np.atleast_2d(Rw))
    return float(np.mean(c))


def _episode_x0(cfg, plant):
    x0 = cfg["episode"].get("x0")
    if x0 is not None:
        return np.asarray(x0, dtype=np.float64)
    ref = make_reference(cfg["reference"])(0.0)
    if plant.name == "vdp":
        return ref.copy()
    return None


def _weights(cfg):
    p, m = C.io_dims(cfg)
    if cfg["learner"] == "nssm-mpc":
        return C._weight(cfg["mpc"].get("Qw", 1.0), m), C._weight(cfg["mpc"].get("Rw", 0.01), p)
    d = C.dqn_config(cfg)
    return d.Qw, d.Rw


def closed_loop(cfg: dict, omega, params, steps: int | None = None) -> Trajectory:
    """Greedy closed-loop episode of the configured learner on ``params``."""
    plant = plant_of(cfg)
    learner = make_learner(cfg, {})
    ref = make_reference(cfg["reference"])
    return simulate(plant, params, learner.controller(np.asarray(omega)), ref,
                    steps=steps or cfg["episode"]["steps"], x0=_episode_x0(cfg, plant))


def target_loss(cfg: dict, target: list[Trajectory]):
    learner = make_learner(cfg, {})
    if cfg["learner"] == "nssm-mpc":
        return learner.loss_on(target)
    arr = dqn.transition_arrays(learner.transitions(target), learner.config)
    return dqn.make_loss(learner.init_params(stream(cfg["seed"], "init")), arr, learner.config)


def adapt_reg(cfg: dict, variant: str) -> float:
    return float(C.meta_config(cfg).reg_strength) if variant == "imaml" else 0.0


def run_adapt_sweep(cfg: dict, omega, variant: str, target: list[Trajectory], params,
                    steps_list=None) -> MetricsReport:
    """Adapt incrementally through the sorted step counts; one closed-loop episode per count."""
    steps_list = sorted(set(cfg["adapt"]["steps"] if steps_list is None else steps_list))
    mc = C.meta_config(cfg)
    loss = target_loss(cfg, target)
    reg = adapt_reg(cfg, variant)
    omega = np.asarray(omega, dtype=np.float64)
    L_hat = meta.estimate_smoothness(loss, omega, mc.power_iters)
    beta = 1.0 / (L_hat + reg)
    Qw, Rw = _weights(cfg)
    warm = C.nssm_config(cfg).H if cfg["learner"] == "nssm-mpc" else C.dqn_config(cfg).net.stack_len
    report = MetricsReport()
    psi, done = omega.copy(), 0
    for k in steps_list:
        psi = meta.meta_adapt(omega, loss, mc, steps=k - done, reg=reg, beta_in=beta, psi0=psi)
        done = k
        traj = closed_loop(cfg, psi, params)
        report.episodes.append(EpisodeResult(variant, k, traj, warm, Qw, Rw))
        log.info("%s after %d steps: mse %.4g", variant, k, report.episodes[-1].mse)
    return report


def run_compare(cfg: dict, out: Path | None = None) -> MetricsReport:
    ds, tparams = generate_sources(cfg)
    target, p_target = generate_target(cfg)
    report = MetricsReport()
    for variant in cfg["adapt"]["variants"]:
        log_path = None if out is None else Path(out) / f"training_log_{variant}.csv"
        omega, _ = train_variant(cfg, variant, ds, tparams, log_path)
        report.episodes += run_adapt_sweep(cfg, omega, variant, [target], p_target).episodes
    report.extra["target_params"] = _params_dict(p_target)
    if out is not None:
        emit_plotdata(report, out)
    return report


# ---------------------------------------------------------------- sim2sim

def intermezzo_active(t: float, period: float, duration: float) -> bool:
    """Override windows ``[j*period, j*period + duration)`` for ``j >= 1``."""
    if period <= 0 or duration <= 0 or t < period - 1e-12:
        return False
    return (t + 1e-12) % period < duration


def online_episode(cfg: dict, omega, anchor, reg: float, params, rng: np.random.Generator,
                   variant: str) -> tuple[Trajectory, dict]:
    """One long episode on the target with periodic online DQN adaptation and input intermezzos."""
    s2 = cfg["sim2sim"]
    plant = plant_of(cfg)
    learner = make_learner(cfg, {})
    dcfg = learner.config
    mc = C.meta_config(cfg)
    ref = make_reference(cfg["reference"])
    steps = int(round(s2["duration"] / plant.dt))
    im = s2["intermezzo"]
    s = dcfg.net.stack_len
    state = {"psi": np.asarray(omega, dtype=np.float64).copy(), "target": np.asarray(omega, dtype=np.float64).copy(),
             "held": None, "rounds": 0}
    anchor = np.asarray(anchor, dtype=np.float64)

    def adapt(hist: History):
        tr = Trajectory(hist.inputs, hist.outputs, plant.dt, plant.name, references=hist.reference)
        arr = dqn.transition_arrays(traj_transitions(tr, s), dcfg)
        rows = sample_rows(len(arr["u"]), s2["batch"], rng)
        loss = dqn.make_loss(state["target"], {k: v[rows] for k, v in arr.items()}, dcfg)
        state["psi"] = meta.meta_adapt(anchor, loss, mc, steps=s2["adapt_steps"], reg=reg, psi0=state["psi"])
        state["target"] = dqn.polyak_update(state["target"], state["psi"], dcfg.polyak_beta)
        state["rounds"] += 1

    def policy(hist: History):
        k = hist.k
        t = k * plant.dt
        if k >= s2["min_data"] and k % s2["adapt_every"] == 0:
            adapt(hist)
        if im["enabled"] and intermezzo_active(t, im["period"], im["duration"]):
            if state["held"] is None:
                state["held"] = dqn.explore_action(dcfg, rng)
            return state["held"], "intermezzo"
        state["held"] = None
        if k < s:
            return np.zeros(plant.n_input), "init"
        err = hist.outputs[-s:].ravel() - hist.reference[-s:].ravel()
        return dqn.epsilon_greedy(state["psi"], err, dcfg, rng, dcfg.eps_adapt)

    x0 = s2.get("x0")
    x0 = np.asarray(x0, dtype=np.float64) if x0 is not None else None
    traj = simulate(plant, params, policy, ref, steps=steps, x0=x0)
    return traj, {"rounds": state["rounds"], "final": state["psi"]}


def run_sim2sim(cfg: dict, out: Path | None = None) -> MetricsReport:
    """Pretrained (meta-trained, proximal adaptation) vs scratch DQN on a held-out plant."""
    ds, tparams = generate_sources(cfg)
    omega, _ = train_variant(cfg, "imaml", ds, tparams,
                             None if out is None else Path(out) / "training_log_imaml.csv")
    tp = cfg["sim2sim"].get("target_params")
    p_target = params_from_dict(cfg["plant"]["family"], tp) if tp else target_params(cfg)
    learner = make_learner(cfg, {})
    scratch = learner.init_params(stream(cfg["seed"], "scratch"))
    Qw, Rw = learner.config.Qw, learner.config.Rw
    report = MetricsReport()
    for variant, init, reg in (("pretrained", omega, adapt_reg(cfg, "imaml")), ("scratch", scratch, 0.0)):
        traj, info = online_episode(cfg, init, init, reg, p_target, stream(cfg["seed"], "online"), variant)
        report.episodes.append(EpisodeResult(variant, info["rounds"], traj, learner.config.net.stack_len, Qw, Rw))
    pre, scr = report.episodes[0].mean_cost, report.episodes[1].mean_cost
    report.extra.update({"target_params": _params_dict(p_target), "cost_reduction": 1.0 - pre / scr,
                         "intermezzo": bool(cfg["sim2sim"]["intermezzo"]["enabled"])})
    if out is not None:
        emit_plotdata(report, out)
    return report


# -------------------------------------------------------------- plot data

def _atomic_write(path: Path, rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_", suffix=".csv")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f(x) -> str:
    return repr(float(x))


SUMMARY_HEADER = ["variant", "steps", "mse", "mean_cost", "diverged", "rows"]


def emit_plotdata(report: MetricsReport, out) -> list[Path]:
    """``tracking_<variant>_<steps>.csv`` per episode plus ``summary.csv``."""
    out = Path(out)
    written = []
    for e in report.episodes:
        tr = e.traj
        m, p = tr.n_outputs, tr.n_inputs
        header = ["t"] + [f"ref{i}" for i in range(m)] + [f"y{i}" for i in range(m)] + [f"u{i}" for i in range(p)] + ["tag"]
        rows = [header]
        for k in range(len(tr)):
            tag = tr.tags[k] if k < len(tr.tags) else ""
            rows.append([_f(k * tr.dt)] + [_f(v) for v in tr.references[k]] + [_f(v) for v in tr.outputs[k]]
                        + [_f(v) for v in tr.inputs[k]] + [tag])
        path = out / f"tracking_{e.variant}_{e.steps}.csv"
        _atomic_write(path, rows)
        written.append(path)
    summary = [SUMMARY_HEADER] + [[r["variant"], r["steps"], _f(r["mse"]), _f(r["mean_cost"]), r["diverged"], r["rows"]]
                                  for r in report.rows()]
    path = out / "summary.csv"
    _atomic_write(path, summary)
    written.append(path)
    return written


def read_tracking(path) -> Trajectory:
    """Rebuild an episode from its tracking CSV (metrics are recomputable from it)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for h in header if h.startswith("ref"))
    p = sum(1 for h in header if h.startswith("u"))
    a = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), 1 + 2 * m + p)
    dt = a[1, 0] - a[0, 0] if len(a) > 1 else 1.0
    return Trajectory(a[:, 1 + 2 * m:], a[:, 1 + m:1 + 2 * m], float(dt), references=a[:, 1:1 + m],
                      tags=tuple(r[-1] for r in body))
