"""Command-line entry point: ``slicealign <subcommand> [options]``.

Subcommands: synth, pretrain, finetune, evaluate, sweep. Every run that
takes ``--out`` writes ``config.yaml`` (the frozen config snapshot) before
doing any work. Failures exit with status 2 and print one JSON error record
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config
from .evaluation import ResultTable, make_folds, run_protocol
from .model import save_checkpoint
from .training import finetune, pretrain
from .volume_data import PHANTOM_NUM_CLASSES, load_dataset, load_manifest, make_phantom_dataset, write_dataset

log = logging.getLogger("slicealign")

SWEEP_KEYS = {"lambda": "loss.lambda", "omega": "loss.omega"}


def _parse_M(text: str):
    return "all" if text == "all" else int(text)


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", type=Path, help="experiment config (YAML)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. loss.lambda=0 (repeatable)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="experiment seed (overrides config)")
    if data:
        p.add_argument("--data", type=Path, required=True, help="dataset manifest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicealign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--V", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p)

    p = sub.add_parser("finetune", help="supervised fine-tuning on labeled subjects")
    _common(p)
    p.add_argument("--init", type=Path, help="pre-training checkpoint (omit to train from scratch)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--subjects", nargs="+", help="labeled subject ids")
    g.add_argument("--M", type=int, help="number of randomly chosen labeled subjects")

    p = sub.add_parser("evaluate", help="k-fold limited-label protocol")
    _common(p)
    p.add_argument("--method", dest="methods", action="append", default=[], metavar="NAME=CHECKPOINT",
                   help="named encoder checkpoint; 'random' trains from scratch (repeatable)")
    p.add_argument("--M", dest="Ms", type=_parse_M, nargs="+", help="labeled-subject budgets (or 'all')")
    p.add_argument("--k", type=int, help="number of folds")

    p = sub.add_parser("sweep", help="pre-train + evaluate over a lambda or omega grid")
    _common(p)
    p.add_argument("--param", choices=sorted(SWEEP_KEYS), required=True)
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 0,1,5,40,80")
    p.add_argument("--M", dest="Ms", type=_parse_M, nargs="+")
    p.add_argument("--k", type=int)
    return parser


def _config(args, manifest=None) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if manifest is not None and cfg.model.num_classes != manifest.num_classes:
        cfg = apply_overrides(cfg, [f"model.num_classes={manifest.num_classes}"])
    return cfg


def _start(args):
    manifest = load_manifest(args.data)
    cfg = _config(args, manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, args.out / "config.yaml")
    return cfg, manifest


def _write_table(table: ResultTable, out: Path) -> None:
    (out / "results.csv").write_text(table.to_csv())
    (out / "results.json").write_text(table.to_json() + "\n")
    print(table.format())


def cmd_synth(args) -> int:
    if args.subjects < 2:
        raise ValueError(f"--subjects must be >= 2 (pairing samples two subjects per batch), got {args.subjects}")
    volumes = make_phantom_dataset(args.subjects, args.V, args.size, args.size, args.seed)
    manifest = write_dataset(volumes, args.out, PHANTOM_NUM_CLASSES)
    print(manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg, manifest = _start(args)
    result = pretrain(load_dataset(manifest), cfg, out_dir=args.out)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"checkpoint": str(result.checkpoint), "steps": result.state.step, "last": last}))
    return 0


def cmd_finetune(args) -> int:
    cfg, manifest = _start(args)
    if args.init is not None and not args.init.with_suffix(".pt").exists():
        raise FileNotFoundError(f"checkpoint not found: {args.init}")
    dataset = load_dataset(manifest)
    if args.subjects:
        ids = args.subjects
    else:
        rng = np.random.default_rng(cfg.seed)
        ids = sorted(rng.choice(manifest.subject_ids, size=args.M, replace=False).tolist())
    res = finetune(dataset, ids, cfg, init=args.init)
    path = save_checkpoint(
        args.out / "checkpoints" / "finetune.pt",
        {"model": res.model.state_dict()},
        {"kind": "finetune", "labeled": ids, "init": str(args.init) if args.init else None, "config": cfg.to_dict()},
    )
    (args.out / "logs").mkdir(exist_ok=True)
    with open(args.out / "logs" / "finetune.jsonl", "w") as fh:
        for rec in res.log:
            fh.write(json.dumps(rec) + "\n")
    print(json.dumps({"checkpoint": str(path), "labeled": ids}))
    return 0


def _methods(specs: Sequence[str]) -> dict:
    methods = {}
    for spec in specs or ["random"]:
        if spec == "random":
            methods["random"] = None
            continue
        if "=" not in spec:
            raise ValueError(f"--method expects NAME=CHECKPOINT or 'random', got {spec!r}")
        name, path = spec.split("=", 1)
        if not Path(path).with_suffix(".pt").exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        methods[name] = path
    return methods


def cmd_evaluate(args) -> int:
    cfg, manifest = _start(args)
    Ms = args.Ms or list(cfg.eval.Ms)
    k = args.k or cfg.eval.k
    for M in Ms:  # fail on impossible budgets before any training
        make_folds(manifest.subject_ids, k, M, cfg.eval.seed)
    methods = _methods(args.methods)
    table = run_protocol(load_dataset(manifest), methods, Ms, k, cfg.eval.seed, cfg)
    _write_table(table, args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg, manifest = _start(args)
    key = SWEEP_KEYS[args.param]
    try:
        values = [json.loads(v) for v in args.values.split(",")]
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid grid {args.values!r}: {exc}") from exc
    grid = []
    for v in values:  # validate the whole grid before training anything
        try:
            grid.append((v, apply_overrides(cfg, [f"{key}={v}"])))
        except ConfigError as exc:
            raise ConfigError(f"invalid grid value {args.param}={v}: {exc}") from exc
    Ms = args.Ms or list(cfg.eval.Ms)
    k = args.k or cfg.eval.k
    for M in Ms:
        make_folds(manifest.subject_ids, k, M, cfg.eval.seed)
    dataset = load_dataset(manifest)
    table = ResultTable()
    for v, run_cfg in grid:
        run_dir = args.out / f"{args.param}={v}"
        dump_config(run_cfg, run_dir / "config.yaml")
        result = pretrain(dataset, run_cfg, out_dir=run_dir)
        sub = run_protocol(dataset, {f"{args.param}={v}": result.checkpoint}, Ms, k, cfg.eval.seed, run_cfg)
        table.rows.extend(sub.rows)
    _write_table(table, args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
