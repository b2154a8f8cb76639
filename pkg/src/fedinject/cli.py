"""Command-line entry point: ``fedinject {gen-data,run,matrix,zero-shot,verify}``.

Exit codes: 0 success, 1 an invariant or training failure, 2 bad input
(configuration, flags, corrupted files). Errors are printed to stderr as one
JSON line.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import subprocess
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from . import __version__
from .config import ALGOS, SCOPES, VARIANTS, ExperimentConfig, parse_config
from .datagen import Dataset, build_dataset, dump_dataset
from .errors import CapabilityError, ContractError, InputError, ParseError, RoundError
from .evaluation import run_benchmark_matrix, run_zero_shot
from .federation import load_checkpoint, run_experiment, save_checkpoint
from .metrics import rows_to_csv
from .wire import atomic_write_bytes

log = logging.getLogger("fedinject")

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    seed: int
    config: Dict
    artifacts: Dict[str, str] = field(default_factory=dict)
    build: str = ""
    timings: Dict[str, float] = field(default_factory=dict)

    def write(self, path: str) -> None:
        text = json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"
        atomic_write_bytes(path, text.encode("utf-8"))


def build_id() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            dirty = subprocess.run(["git", "status", "--porcelain"], cwd=here,
                                   capture_output=True, text=True, timeout=5).stdout.strip()
            return f"{__version__}+g{rev.stdout.strip()}{'.dirty' if dirty else ''}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@contextmanager
def _phase(manifest: RunManifest, name: str):
    t0 = time.perf_counter()
    yield
    manifest.timings[name] = round(time.perf_counter() - t0, 4)


# ----------------------------------------------------------------- arguments

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedinject",
                                 description="Federated knowledge-injection simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--config", help="YAML config file (sections federation, model, data, eval)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default="runs", help="output directory (default: runs)")
        p.add_argument("--clients", type=int)
        if training:
            p.add_argument("--rounds", type=int)
            p.add_argument("--algo", choices=ALGOS)
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--threads", type=int)

    p = sub.add_parser("gen-data", help="generate and dump the synthetic dataset")
    common(p, training=False)

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--task", help="training task for single scope")
    p.add_argument("--checkpoint", help="resume from a global checkpoint file")

    p = sub.add_parser("matrix", help="run the 16-label benchmark matrix")
    common(p)

    p = sub.add_parser("zero-shot", help="train the injected models and score validation tasks")
    common(p)

    p = sub.add_parser("verify", help="gradient and invariant self-checks")
    p.add_argument("--seeds", type=int, default=20)
    return ap


def _resolve(args) -> ExperimentConfig:
    over = {"seed": args.seed, "clients": args.clients}
    for name in ("rounds", "algo", "lam", "threads", "scope", "variant", "task"):
        if hasattr(args, name):
            over[name] = getattr(args, name)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg = parse_config(args.config, over)
    for w in caught:
        log.warning("%s", w.message)
    return cfg


def _dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    return build_dataset(cfg.seed, d.n_per_task, cfg.federation.num_clients, d.margin,
                         d.n_validation, d.tasks)


def _start(args, cfg: ExperimentConfig) -> RunManifest:
    os.makedirs(args.out_dir, exist_ok=True)
    m = RunManifest(args.command, cfg.seed, cfg.to_dict(), build=build_id())
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return m


def _write_text(path: str, text: str) -> str:
    return atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    man = _start(args, cfg)
    with _phase(man, "generate"):
        ds = _dataset(cfg)
    with _phase(man, "write"):
        paths = dump_dataset(ds, os.path.join(args.out_dir, "data"))
    man.artifacts = {os.path.basename(p): p for p in paths}
    man.write(os.path.join(args.out_dir, "manifest.json"))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _resolve(args)
    ckpt = None
    if args.checkpoint is not None:
        if not os.path.isfile(args.checkpoint):
            raise InputError(f"checkpoint not found: {args.checkpoint}")
        ckpt = load_checkpoint(args.checkpoint)
    man = _start(args, cfg)
    if ckpt is not None:
        man.artifacts["input_checkpoint"] = args.checkpoint
    with _phase(man, "generate"):
        ds = _dataset(cfg)
    with _phase(man, "train"):
        res = run_experiment(cfg, ds, checkpoint=ckpt)
    out = args.out_dir
    man.artifacts["metrics"] = _write_text(os.path.join(out, "metrics.csv"), rows_to_csv(res.rows))
    man.artifacts["checkpoint"] = save_checkpoint(os.path.join(out, "global.fmki"), res.state)
    man.write(os.path.join(out, "manifest.json"))
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _resolve(args)
    man = _start(args, cfg)
    with _phase(man, "generate"):
        ds = _dataset(cfg)
    with _phase(man, "matrix"):
        mx = run_benchmark_matrix(ds, cfg)
    man.artifacts["matrix"] = _write_text(os.path.join(args.out_dir, "matrix.csv"),
                                          rows_to_csv(mx.rows))
    if cfg.eval.zero_shot:
        with _phase(man, "zero_shot"):
            zs = run_zero_shot(ds, mx, cfg)
        man.artifacts["zero_shot"] = _write_text(os.path.join(args.out_dir, "zero_shot.csv"),
                                                 rows_to_csv(zs))
    man.write(os.path.join(args.out_dir, "manifest.json"))
    return EXIT_OK


def cmd_zero_shot(args) -> int:
    cfg = _resolve(args)
    man = _start(args, cfg)
    with _phase(man, "generate"):
        ds = _dataset(cfg)
    with _phase(man, "inject"):
        mx = run_benchmark_matrix(ds, cfg, variants=("llm_finetune",))
    with _phase(man, "zero_shot"):
        zs = run_zero_shot(ds, mx, cfg)
    man.artifacts["zero_shot"] = _write_text(os.path.join(args.out_dir, "zero_shot.csv"),
                                             rows_to_csv(zs))
    man.write(os.path.join(args.out_dir, "manifest.json"))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all(args.seeds, log=print)
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


COMMANDS = {"gen-data": cmd_gen_data, "run": cmd_run, "matrix": cmd_matrix,
            "zero-shot": cmd_zero_shot, "verify": cmd_verify}


def _fail(code: int, exc: BaseException) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc), "exit": code}
    print(json.dumps(msg, ensure_ascii=False), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:   # argparse already printed usage
        return EXIT_INPUT if e.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (InputError, ParseError, KeyError) as e:
        return _fail(EXIT_INPUT, e)
    except (ContractError, CapabilityError, RoundError, FloatingPointError) as e:
        return _fail(EXIT_INVARIANT, e)


if __name__ == "__main__":
    sys.exit(main())
