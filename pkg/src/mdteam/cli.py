"""Command-line entry point: ``mdt``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import yaml

from .core import MDTError
from .harness.runner import (
    CROSS_COLUMNS,
    CURVE_COLUMNS,
    RunConfig,
    cross_dataset,
    cross_rows,
    evaluate,
    self_evolution,
    write_csv,
)
from .knowledge import KbKind, KnowledgeStores, SchemaVersionMismatch, read_entries

logger = logging.getLogger("mdteam")


def _output_dir(config: RunConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    return config.output_dir or Path("runs") / config.dataset_name


def cmd_run(args) -> int:
    config = RunConfig.from_file(args.config, mode=args.mode, seed=args.seed, limit=args.limit)
    if args.sequential:
        config.sequential = True
    config.output_dir = _output_dir(config, args.out)
    output = evaluate(config)
    m = output.metrics
    print(f"accuracy={m.accuracy:.4f} f1={m.f1:.4f} scored={m.n_scored}/{m.n_cases} -> {config.output_dir}")
    return 0


def cmd_cross(args) -> int:
    config_a = RunConfig.from_file(args.config)
    if args.config_b:
        config_b = RunConfig.from_file(args.config_b)
    else:
        with open(args.config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        cross = raw.get("cross") or {}
        if "b" not in cross:
            raise MDTError("cross needs --config-b or a 'cross: {b: ...}' section in the config")
        base = Path(args.config).parent
        config_b = RunConfig.from_dict({**{k: v for k, v in raw.items() if k != "cross"}, **cross["b"]}, base_dir=base)
        if "a" in cross:
            config_a = RunConfig.from_dict({**{k: v for k, v in raw.items() if k != "cross"}, **cross["a"]}, base_dir=base)
    matrix = cross_dataset(config_a, config_b, Path(args.kb_a), Path(args.kb_b))
    out_dir = Path(args.out) if args.out else (config_a.output_dir or Path("runs")) / "cross"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = cross_rows(matrix)
    (out_dir / "cross.json").write_text(
        json.dumps({ds: {src: m.to_dict() for src, m in row.items()} for ds, row in matrix.items()}, indent=2) + "\n",
        encoding="utf-8",
    )
    write_csv(out_dir / "cross.csv", rows, CROSS_COLUMNS)
    for r in rows:
        print(f"{r['dataset']:>10} {r['kb_source']:>14} accuracy={r['accuracy']:.4f} f1={r['f1']:.4f}")
    return 0


def cmd_curve(args) -> int:
    config = RunConfig.from_file(args.config, eval_path=args.eval)
    rows = self_evolution(config, args.checkpoint_every or config.checkpoint_every)
    out = Path(args.out) if args.out else _output_dir(config, None) / "evolution.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows, CURVE_COLUMNS)
    for r in rows:
        print(f"train={r['train_cases']:>5} kb={r['correct_kb']}+{r['chain_kb']} accuracy={r['accuracy']:.4f}")
    return 0


def cmd_kb_export(args) -> int:
    """Bundle both stores of a directory into one JSONL file."""
    stores = KnowledgeStores.open_dir(args.kb, read_only=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for kb in (stores.correct, stores.chain):
            for entry in kb.entries:
                fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
    print(f"exported {len(stores.correct)} correct and {len(stores.chain)} chain entries to {out}")
    return 0


def cmd_kb_import(args) -> int:
    """Split a bundle back into a store directory. Existing files are replaced only with --force."""
    entries = read_entries(args.infile)
    target = Path(args.kb)
    files = [target / KnowledgeStores.CORRECT_FILE, target / KnowledgeStores.CHAIN_FILE]
    if any(f.exists() and f.stat().st_size for f in files) and not args.force:
        raise MDTError(f"{target} already holds knowledge; pass --force to replace it")
    target.mkdir(parents=True, exist_ok=True)
    tmp = target / ".import"
    tmp.mkdir(exist_ok=True)
    try:
        for kind, path in zip((KbKind.CORRECT, KbKind.CHAIN), files):
            with (tmp / path.name).open("w", encoding="utf-8") as fh:
                for entry in entries:
                    if entry.kind is kind:
                        fh.write(json.dumps(entry.to_dict(), ensure_ascii=False) + "\n")
        # Validate before replacing anything.
        KnowledgeStores.open_dir(tmp, read_only=True)
        for path in files:
            shutil.move(str(tmp / path.name), path)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    sizes = KnowledgeStores.open_dir(target, read_only=True).sizes()
    print(f"imported {sizes['correct']} correct and {sizes['chain']} chain entries into {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdt", description="Multi-specialist consultation runs over QA datasets.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate a dataset")
    run.add_argument("--config", required=True)
    run.add_argument("--mode", choices=["Train", "Test", "Vanilla"])
    run.add_argument("--seed", type=int)
    run.add_argument("--limit", type=int)
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--sequential", action="store_true", help="run cases one by one in dataset order")
    run.set_defaults(func=cmd_run)

    cross = sub.add_parser("cross", help="cross-dataset transfer matrix")
    cross.add_argument("--config", required=True, help="config of dataset A (may hold a 'cross' section)")
    cross.add_argument("--config-b", help="config of dataset B")
    cross.add_argument("--kb-a", required=True)
    cross.add_argument("--kb-b", required=True)
    cross.add_argument("--out")
    cross.set_defaults(func=cmd_cross)

    curve = sub.add_parser("curve", help="accuracy as the stores grow")
    curve.add_argument("--config", required=True)
    curve.add_argument("--checkpoint-every", type=int)
    curve.add_argument("--eval", help="evaluation dataset (overrides eval_path)")
    curve.add_argument("--out", help="CSV path")
    curve.set_defaults(func=cmd_curve)

    kb = sub.add_parser("kb", help="knowledge store utilities")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    export = kb_sub.add_parser("export")
    export.add_argument("--kb", required=True, help="store directory")
    export.add_argument("--out", required=True, help="bundle file")
    export.set_defaults(func=cmd_kb_export)
    imp = kb_sub.add_parser("import")
    imp.add_argument("--in", dest="infile", required=True, help="bundle file")
    imp.add_argument("--kb", required=True, help="store directory")
    imp.add_argument("--force", action="store_true")
    imp.set_defaults(func=cmd_kb_import)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MDTError, FileNotFoundError, SchemaVersionMismatch) as exc:
        print(f"mdt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
