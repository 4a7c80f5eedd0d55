"""Command-line entry point: prepare, run, sweep-mask, eval, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import synthetic
from .autograd import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .evaluation import evaluate_split
from .kg import DataError, add_inverse_triples, build_filter_index, load_graph
from .pipeline import load_prepared, run_pipeline, sweep_mask_rates, write_json
from .text import build_vocab

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_COLUMNS = ("rate", "MR", "MRR", "hits1", "hits3", "hits10")
REPORT_COLUMNS = ("stage", "grade", "parameter_count", "mask_rate", "MR", "MRR", "hits1", "hits3", "hits10")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set or ())


def cmd_prepare(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg["data.prepared"])
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} already holds prepared data; pass --force to overwrite")
    if args.synthetic:
        paths = synthetic.bundled_paths()
    else:
        missing = [k for k in ("data.train", "data.valid", "data.test") if not cfg[k]]
        if missing:
            raise ConfigError(f"missing dataset paths: {', '.join(missing)} (or use --synthetic)")
        paths = {s: cfg[f"data.{s}"] for s in ("train", "valid", "test")}
        paths["descriptions"] = cfg["data.descriptions"] or None
    base = load_graph(paths["train"], paths["valid"], paths["test"], paths["descriptions"])
    graph = add_inverse_triples(base)
    max_size = cfg["vocab.max_size"] or None
    vocab = build_vocab(graph, cfg["vocab.min_freq"], max_size)
    index = build_filter_index(graph)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "graph.json", graph.to_json())
    vocab.save(out / "vocab.txt")
    stats = {
        **base.stats(),
        "augmented_counts": graph.counts(),
        "vocab_size": len(vocab),
        "filter_keys": len(index),
    }
    write_json(out / "stats.json", stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    reports = run_pipeline(cfg, args.out, args.prepared)
    for r in reports:
        print(f"{r['stage']}: grade {r['grade']} params {r['parameter_count']} MRR {r['MRR']:.4f}")
    return EXIT_OK


def _csv_table(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_sweep_mask(args) -> int:
    cfg = _config(args)
    rates = cfg["sweep.rates"]
    if args.rates is not None:
        try:
            rates = [float(r) for r in args.rates.split(",") if r.strip()]
        except ValueError as exc:
            raise ConfigError(f"--rates: {exc}") from exc
    bad = [r for r in rates if not 0.0 <= r <= 1.0]
    if bad or not rates:
        raise ConfigError(f"mask rates must lie in [0, 1], got {rates}")
    out = Path(args.out or cfg["run.output"])
    rows = sweep_mask_rates(cfg, rates, out, args.prepared, args.baseline)
    table = _csv_table(rows, SWEEP_COLUMNS)
    (out / "sweep_mask.csv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    graph, vocab = load_prepared(args.prepared or cfg["data.prepared"])
    split = args.split or cfg["eval.split"]
    filtered = cfg["eval.filtered"] and not args.raw
    metrics = evaluate_split(ckpt.model, graph, vocab, split, filtered, cfg["eval.batch_size"])
    record = {
        "checkpoint": Path(args.checkpoint).name,
        "split": split,
        "filtered": filtered,
        "meta": ckpt.meta,
        **metrics.to_dict(),
    }
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".{split}.eval.json")
    write_json(out, record)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _metric_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.metrics.json")))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"{p}: no such metrics file or directory")
    if not files:
        raise DataError("no metrics JSON files found")
    return files


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return "" if value is None else str(value)


def render_report(records, fmt: str = "markdown") -> str:
    """Grade-vs-metric comparison table, deepest grade first."""
    rows = sorted(records, key=lambda r: (-r.get("grade", 0), r.get("stage", "") != "baseline",
                                          r.get("stage", "")))
    if fmt == "csv":
        return _csv_table(rows, REPORT_COLUMNS)
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r.get(c)) for c in REPORT_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    records = []
    for path in _metric_files(args.paths):
        try:
            records.append(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
    text = render_report(records, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmdkg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("prepare", help="load a dataset, add inverse triples, build the vocabulary")
    common(p)
    p.add_argument("--out", help="output directory (default: data.prepared)")
    p.add_argument("--synthetic", action="store_true", help="use the bundled synthetic graph")
    p.add_argument("--force", action="store_true", help="overwrite existing prepared data")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="baseline, then the distillation schedule")
    common(p)
    p.add_argument("--out", help="run directory (default: run.output)")
    p.add_argument("--prepared", help="prepared data directory (default: data.prepared)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-mask", help="pre-distillation at several mask rates")
    common(p)
    p.add_argument("--rates", help="comma-separated mask rates (default: sweep.rates)")
    p.add_argument("--baseline", help="trained baseline checkpoint; trained afresh when omitted")
    p.add_argument("--out", help="output directory (default: run.output)")
    p.add_argument("--prepared", help="prepared data directory")
    p.set_defaults(func=cmd_sweep_mask)

    p = sub.add_parser("eval", help="rank a split with a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("valid", "test"))
    p.add_argument("--raw", action="store_true", help="unfiltered ranking")
    p.add_argument("--prepared", help="prepared data directory")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate metrics JSON files")
    p.add_argument("paths", nargs="+", help="metrics files or run directories")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
