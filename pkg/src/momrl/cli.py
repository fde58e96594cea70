"""Command-line driver: momrl {run, sweep, validate, report}.

Exit status is 0 when every verdict passes, 1 when some verdict fails or a
pipeline errors, and 2 for invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .experiments import (KINDS, CapExceeded, ExperimentManifest, ManifestError, load_records,
                          run, summarize, summary_table, sweep)


def _parse_value(text: str):
    value = yaml.safe_load(text)
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def parse_grid(items: list[str]) -> dict[str, list]:
    """``key=v1,v2,...`` or ``key=a..b`` (integers a through b - 1)."""
    grid: dict[str, list] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"grid entry {item!r} is not key=values")
        if ".." in raw:
            lo, hi = raw.split("..", 1)
            grid[key] = list(range(int(lo), int(hi)))
        else:
            grid[key] = [_parse_value(v) for v in raw.split(",") if v != ""]
    return grid


def _load(path: str, seed: int | None) -> ExperimentManifest:
    manifest = ExperimentManifest.load(path)
    if seed is not None:
        data = manifest.to_dict()
        data["seed"] = seed
        manifest = ExperimentManifest.from_dict(data)
    return manifest


def _print_record(record) -> None:
    print(f"{record.manifest['kind']} seed={record.manifest['seed']}: {record.status}")
    if record.error:
        print(f"  error: {record.error}")
    for name, v in record.verdicts.items():
        mark = "PASS" if v["pass"] else "FAIL"
        print(f"  [{mark}] {name}: {v['value']} (threshold {v['threshold']})")
    if "table" in record.metrics:
        print(record.metrics["table"])


def cmd_run(args) -> int:
    manifest = _load(args.manifest, args.seed)
    record = run(manifest, args.out)
    if args.json:
        print(record.to_json())
    else:
        _print_record(record)
    return 0 if record.passed else 1


def cmd_sweep(args) -> int:
    template = _load(args.manifest, None)
    grid = parse_grid(args.grid or [])
    if args.grid_file:
        grid.update(yaml.safe_load(Path(args.grid_file).read_text()) or {})
    result = sweep(template, grid, args.workers, args.out)
    print(result.table())
    return 0 if result.passed else 1


def cmd_validate(args) -> int:
    status = 0
    for path in args.manifests:
        try:
            m = ExperimentManifest.load(path)
        except ManifestError as exc:
            status = 2
            print(f"{path}: invalid")
            for field_name, problem in exc.problems.items():
                print(f"  {field_name}: {problem}")
            continue
        print(f"{path}: ok ({m.kind}, seed {m.seed})")
    return status


def cmd_report(args) -> int:
    records = load_records(args.path)
    rows = summarize(records, args.by)
    print(summary_table(rows))
    return 0 if all(r.passed for r in records) else 1


def cmd_template(args) -> int:
    kind = KINDS[args.kind]
    m = ExperimentManifest(args.kind, args.seed, dict(kind.params), dict(kind.thresholds))
    sys.stdout.write(m.dumps())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one manifest")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int, help="override the manifest seed")
    p.add_argument("--out", help="directory for the result record")
    p.add_argument("--json", action="store_true", help="print the record as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a manifest over a parameter grid")
    p.add_argument("manifest")
    p.add_argument("--grid", action="append", metavar="KEY=VALUES",
                   help="e.g. n=50000,200000 or seed=0..20; repeatable")
    p.add_argument("--grid-file", help="YAML mapping of key to value list")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="directory for records.jsonl and summary.txt")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check manifests without running them")
    p.add_argument("manifests", nargs="+")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="summarise stored records")
    p.add_argument("path", help="records.jsonl, a record file, or a directory")
    p.add_argument("--by", action="append", help="group by parameter (repeatable)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("template", help="print a manifest with default parameters")
    p.add_argument("kind", choices=sorted(KINDS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_template)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"invalid manifest: {exc}", file=sys.stderr)
        return 2
    except (CapExceeded, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
