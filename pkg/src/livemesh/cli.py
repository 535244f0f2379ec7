"""Command-line scenario runner.

Subcommands: run one scenario, sweep a parameter axis across derived
seeds, validate a config, and emit CDF-ready plot data from finished
runs. Exit codes: 0 success, 2 config validation failure, 3 runtime
invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, config_to_dict, dump_config, load_config
from .netsim import InvariantViolation
from .runner import run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _load(path: str) -> ScenarioConfig:
    try:
        return load_config(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        report = run_scenario(cfg, out_dir=args.out)
    except InvariantViolation as err:
        print(f"invariant violation: {err}", file=sys.stderr)
        return EXIT_INVARIANT
    summary = {
        "name": cfg.name,
        "seed": cfg.seed,
        "aggregates": report.aggregates,
        "doat": report.doat_stats,
        "trust": report.trust_stats,
        "paths": report.paths,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _axis(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError(f"axis {spec!r} must look like section.field=v1,v2")
    key, _, values = spec.partition("=")
    return key.strip(), [v.strip() for v in values.split(",") if v.strip()]


def _apply_override(cfg: ScenarioConfig, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"{dotted}: unknown section {part!r}")
        target = getattr(target, part)
    field = parts[-1]
    if not hasattr(target, field):
        raise ConfigError(f"{dotted}: unknown field")
    current = getattr(target, field)
    if isinstance(current, bool):
        value: object = raw.lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    else:
        value = raw
    setattr(target, field, value)


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        base = _load(args.config)
        axes = [_axis(spec) for spec in args.axis]
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    points: list[list[tuple[str, str]]] = [[]]
    for key, values in axes:
        points = [combo + [(key, v)] for combo in points for v in values]

    out_root = Path(args.out)
    rows = []
    failures = 0
    for idx, combo in enumerate(points):
        cfg = copy.deepcopy(base)
        label_parts = []
        try:
            for key, value in combo:
                _apply_override(cfg, key, value)
                label_parts.append(f"{key.split('.')[-1]}={value}")
        except (ConfigError, ValueError) as err:
            print(f"point {idx}: config error: {err}", file=sys.stderr)
            failures += 1
            continue
        cfg.seed = base.seed + idx
        label = ",".join(label_parts) if label_parts else f"point{idx}"
        point_dir = out_root / f"point{idx:03d}"
        try:
            report = run_scenario(cfg, out_dir=point_dir)
        except InvariantViolation as err:
            print(f"point {idx} ({label}): invariant violation: {err}", file=sys.stderr)
            failures += 1
            continue
        rows.append((label, cfg.seed, report.aggregates))
    header = f"{'point':40s} {'seed':>6s} {'started':>8s} {'mean_lag_ms':>12s} {'continuity':>10s}"
    print(header)
    for label, seed, agg in rows:
        lag = agg.get("mean_lag_ms")
        cont = agg.get("mean_continuity")
        print(
            f"{label:40s} {seed:6d} {agg.get('started', 0):8d} "
            f"{lag if lag is None else round(lag, 1)!s:>12s} "
            f"{cont if cont is None else round(cont, 4)!s:>10s}"
        )
    summary_path = out_root / "sweep.json"
    out_root.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(
        json.dumps(
            [{"point": label, "seed": seed, "aggregates": agg} for label, seed, agg in rows],
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )
    return EXIT_OK if failures == 0 else EXIT_INVARIANT


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    print(dump_config(cfg), end="")
    return EXIT_OK


METRIC_COLUMNS = {
    "startup_ms": 4,
    "mean_lag_ms": 6,
    "p95_lag_ms": 7,
    "continuity": 8,
    "chunks_uploaded": 9,
    "chunks_downloaded": 10,
}


def cmd_plotdata(args: argparse.Namespace) -> int:
    if args.metric not in METRIC_COLUMNS:
        print(
            f"unknown metric {args.metric!r}; available: "
            + ", ".join(sorted(METRIC_COLUMNS)),
            file=sys.stderr,
        )
        return EXIT_CONFIG
    col = METRIC_COLUMNS[args.metric]
    groups = []
    for run_dir in args.run_dirs:
        csv_path = Path(run_dir) / "metrics.csv"
        if not csv_path.exists():
            print(f"missing metrics.csv under {run_dir}", file=sys.stderr)
            return EXIT_CONFIG
        values = []
        for line in csv_path.read_text(encoding="utf-8").splitlines()[1:]:
            parts = line.split(",")
            if parts[1] != "consumer":
                continue
            cell = parts[col]
            if cell:
                values.append(float(cell))
        values.sort()
        groups.append((run_dir, values))
    # labeled column groups: value and cumulative fraction per run
    print("\t".join(f"{name}:{args.metric}\t{name}:cdf" for name, _ in groups))
    depth = max((len(v) for _, v in groups), default=0)
    for i in range(depth):
        cells = []
        for _, values in groups:
            if i < len(values):
                cells.append(f"{values[i]:.3f}")
                cells.append(f"{(i + 1) / len(values):.4f}")
            else:
                cells.extend(["", ""])
        print("\t".join(cells))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="livemesh",
        description="peer-to-peer live streaming simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument(
        "--axis", action="append", default=[],
        help="section.field=v1,v2 (repeatable)",
    )
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_val = sub.add_parser("validate", help="validate a config and print it")
    p_val.add_argument("config")
    p_val.set_defaults(fn=cmd_validate)

    p_plot = sub.add_parser("plotdata", help="emit CDF-ready columns")
    p_plot.add_argument("run_dirs", nargs="+")
    p_plot.add_argument("--metric", required=True)
    p_plot.set_defaults(fn=cmd_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
