"""Command-line entry point: generate, train, eval, selftest, bench.

Settings come from an optional YAML file with two sections, ``generator``
(synthetic data options) and ``training`` (model and optimizer options);
command-line flags override the file. Every command echoes its effective
configuration and its hash.

Exit codes: 0 success, 1 validation or invariant failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import bench, selftest
from .numcore import config_hash
from .pointcloud import EventBatch, ingest
from .synthgen import SPLITS, TASKS, GenConfig, generate, write_splits
from .training import TrainingConfig, evaluate, restore, train

# command-line flag -> config field
GEN_FLAGS = {"modality_missing": "modality_missing_rate", "label_missing": "label_missing_rate",
             "task": "task"}
TRAIN_FLAGS = {"rank": "rank", "heads": "heads", "delta": "delta", "lambda_a": "lambda_a",
               "lambda_r": "lambda_r", "epochs": "epochs", "branch": "branch"}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config_file(path: str | None) -> dict:
    if path is None:
        return {"generator": {}, "training": {}}
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    unknown = set(raw) - {"generator", "training"}
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}; use 'generator' and 'training'")
    return {"generator": dict(raw.get("generator") or {}), "training": dict(raw.get("training") or {})}


def effective_config(args: argparse.Namespace) -> dict:
    """File settings with flag overrides applied."""
    cfg = load_config_file(args.config)
    gen, tr = cfg["generator"], cfg["training"]
    if getattr(args, "seed", None) is not None:
        gen["seed"] = tr["seed"] = args.seed
    if getattr(args, "cases", None) is not None:
        total = GenConfig.with_total(args.cases)
        gen.update(train_cases=total.train_cases, val_cases=total.val_cases, test_cases=total.test_cases)
    for flag, key in GEN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            gen[key] = getattr(args, flag)
    for flag, key in TRAIN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            tr[key] = getattr(args, flag)
    known = set(GenConfig.__dataclass_fields__)
    if set(gen) - known:
        raise ValueError(f"unknown generator options: {sorted(set(gen) - known)}")
    gcfg = GenConfig(**gen)
    tcfg = TrainingConfig.from_dict(tr)
    return {"generator": gcfg.to_dict(), "training": tcfg.to_dict()}


def echo_config(cfg: dict) -> str:
    digest = config_hash(cfg)
    print(yaml.safe_dump(cfg, sort_keys=True).rstrip())
    print(f"config_hash: {digest}")
    return digest


def load_splits(data: Path, splits) -> dict[str, EventBatch]:
    manifest_path = data / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"{data}: no manifest.json (create the directory with 'clinpoint generate')")
    manifest = json.loads(manifest_path.read_text())
    gen = manifest["generator"]
    return {s: ingest(data / manifest["files"][s], gen["num_modalities"], gen["horizon"]) for s in splits}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    digest = echo_config({"generator": cfg["generator"]})
    paths = write_splits(GenConfig(**cfg["generator"]), args.out)
    manifest = Path(args.out) / "manifest.json"
    data = json.loads(manifest.read_text())
    data["config_hash"] = digest
    manifest.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")
    for split, path in paths.items():
        print(f"wrote {split}: {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    if args.data is not None:
        data = load_splits(Path(args.data), ("train", "val"))
        cfg["generator"] = json.loads((Path(args.data) / "manifest.json").read_text())["generator"]
    else:
        data = generate(GenConfig(**cfg["generator"]))
    digest = echo_config(cfg)
    tcfg = TrainingConfig.from_dict(cfg["training"])
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(json.dumps({**cfg, "config_hash": digest}, sort_keys=True, indent=1) + "\n")
    result = train(data["train"], data["val"], tcfg, out_dir=out, resume=args.resume,
                   on_epoch=lambda rec: print(json.dumps(rec, sort_keys=True), flush=True))
    print(f"best val AUROC {result.best_auroc:.4f} at epoch {result.best_epoch}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, _, tcfg, manifest = restore(args.checkpoint)
    batch = load_splits(Path(args.data), (args.split,))[args.split]
    branch = args.branch or tcfg.branch
    scores = evaluate(model, batch, branch, tcfg.eval_batch_size)
    report = {"checkpoint": str(args.checkpoint), "config_hash": manifest["config_hash"],
              "epoch": manifest["epoch"], "split": args.split, "branch": branch, **scores}
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    print(f"config_hash: {config_hash({'quick': args.quick, 'fault': args.fault, 'checks': args.check})}")
    results = selftest.run(args.check, fault=args.fault, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<15} {r.seconds:7.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(args: argparse.Namespace) -> int:
    print(f"config_hash: {config_hash({'pairs': args.pairs, 'seed': args.seed})}")
    summary = bench.summarize(bench.sweep(pairs=args.pairs, seed=args.seed))
    print(bench.format_table(summary))
    ok = summary.passed()
    print("complexity checks " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with 'generator' and 'training' sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--cases", type=int, help="total cases, split 70/15/15")
    p.add_argument("--modality-missing", type=_probability)
    p.add_argument("--label-missing", type=_probability)
    p.add_argument("--task", choices=TASKS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinpoint", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/val/test files and a manifest")
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write checkpoints and a metric log")
    _data_flags(p)
    p.add_argument("--data", help="dataset directory from 'generate'; otherwise data is generated in memory")
    p.add_argument("--rank", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--lambda-a", type=float)
    p.add_argument("--lambda-r", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--branch", choices=("entropy", "global"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--branch", choices=("entropy", "global"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run invariant checks; nonzero exit on any failure")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--fault", choices=selftest.FAULTS, help="inject a known fault")
    p.add_argument("--check", action="append", choices=tuple(selftest.CHECKS))
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("bench", help="operation counts of the low-rank and full-tensor logits")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
