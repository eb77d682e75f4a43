"""``metactrl`` command line.

    metactrl gen       --config cfg.json --out DIR     source + target datasets
    metactrl metatrain --config cfg.json --out DIR [--variant imaml|maml]
    metactrl adapt     --config cfg.json --out DIR [--variant imaml] [--steps 0 10 100]
    metactrl control   --config cfg.json --out DIR [--variant imaml] [--steps 100]
    metactrl compare   --config cfg.json --out DIR
    metactrl sim2sim   --config cfg.json --out DIR

Exit codes: 0 success, 1 configuration error, 2 divergence at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from metactrl.dataio import DatasetError, SourceDataset, load_dataset, save_dataset
from metactrl.diffnum import NonFiniteLossError
from metactrl.harness import experiments as X
from metactrl.harness.config import ConfigError, load_config
from metactrl.mpc import MpcSolverError
from metactrl.plants import SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _datasets(cfg, out: Path):
    src, tgt = out / "sources", out / "target"
    if (src / "manifest.json").exists():
        ds = load_dataset(src)
    else:
        ds, _ = X.generate_sources(cfg)
        save_dataset(ds, src)
    if (tgt / "manifest.json").exists():
        tds = load_dataset(tgt)
    else:
        traj, p = X.generate_target(cfg)
        tds = SourceDataset({"target": [traj]}, {"family": cfg["plant"]["family"], "params": {"target": X._params_dict(p)}})
        save_dataset(tds, tgt)
    return ds, tds


def _omega(cfg, out: Path, variant: str, ds):
    ck = out / "checkpoints" / variant
    if not (ck / "checkpoint.json").exists():
        X.run_metatrain(cfg, out, variant, ds)
    return X.load_omega(ck)


def cmd_gen(cfg, out, args):
    ds, tds = _datasets(cfg, out)
    print(f"wrote {len(ds)} source tasks and a target set under {out}")


def cmd_metatrain(cfg, out, args):
    ds, _ = _datasets(cfg, out)
    path = X.run_metatrain(cfg, out, args.variant, ds)
    print(f"checkpoint: {path}")


def _target(tds):
    traj = tds.tasks["target"]
    return traj, X.task_params_of(tds)["target"]


def cmd_adapt(cfg, out, args):
    ds, tds = _datasets(cfg, out)
    omega = _omega(cfg, out, args.variant, ds)
    trajs, p = _target(tds)
    report = X.run_adapt_sweep(cfg, omega, args.variant, trajs, p, args.steps)
    X.emit_plotdata(report, out)
    _print(report)


def cmd_control(cfg, out, args):
    ds, tds = _datasets(cfg, out)
    omega = _omega(cfg, out, args.variant, ds)
    trajs, p = _target(tds)
    report = X.run_adapt_sweep(cfg, omega, args.variant, trajs, p, [args.steps[0] if args.steps else 0])
    X.emit_plotdata(report, out)
    _print(report)


def cmd_compare(cfg, out, args):
    _print(X.run_compare(cfg, out))


def cmd_sim2sim(cfg, out, args):
    report = X.run_sim2sim(cfg, out)
    _print(report)
    print(json.dumps({k: v for k, v in report.extra.items()}, sort_keys=True))


def _print(report):
    for r in report.rows():
        print(f"{r['variant']:>12s} steps={r['steps']:<6d} mse={r['mse']:.6g} mean_cost={r['mean_cost']:.6g}"
              f"{' DIVERGED' if r['diverged'] else ''}")


COMMANDS = {"gen": cmd_gen, "metatrain": cmd_metatrain, "adapt": cmd_adapt, "control": cmd_control,
            "compare": cmd_compare, "sim2sim": cmd_sim2sim}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metactrl", description="Meta-learned controllers: experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--out", required=True, help="artifact directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("metatrain", "adapt", "control"):
            sp.add_argument("--variant", default="imaml", choices=["imaml", "maml", "supervised"])
        if name in ("adapt", "control"):
            sp.add_argument("--steps", type=int, nargs="+", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.DivergenceError, SimulationError, NonFiniteLossError, MpcSolverError, ArithmeticError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
