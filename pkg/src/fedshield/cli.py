"""Command-line harness: ``fedshield run`` writes rounds.csv and summary.json."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .attacks import ATTACKS, VALIDATOR_ATTACKS
from .config import DEFENSES, PRESETS, ConfigError, SimConfig, get_preset, load_config, preset_id
from .data import DataError
from .simulation import RoundReport, SimulationResult, run_simulation

log = logging.getLogger("fedshield")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging(env=None) -> int:
    """Set the package log level from ``FEDSHIELD_LOG`` (default ``error``)."""
    env = os.environ if env is None else env
    name = env.get("FEDSHIELD_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        print(f"fedshield: ignoring unknown FEDSHIELD_LOG={name!r}", file=sys.stderr)
        level = logging.ERROR
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("fedshield").setLevel(level)
    return level


def version_string() -> str:
    return f"v{__version__}"


def format_value(v) -> str:
    """Locale-free CSV cell. ``repr`` round-trips floats exactly."""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_rounds_csv(path: Path, reports: Sequence[RoundReport]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RoundReport.CSV_FIELDS)
        for r in reports:
            row = r.csv_row()
            w.writerow([format_value(row[k]) for k in RoundReport.CSV_FIELDS])


def read_rounds_csv(path) -> List[dict]:
    with open(path, newline="", encoding="ascii") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def summary_rounds(result: SimulationResult) -> List[int]:
    """Rounds the summary averages over: attack-active ones, or all without an attack."""
    rows = result.active_reports() or result.reports
    return [r.round for r in rows]


def _nanmean(values) -> float:
    vals = [float(v) for v in values if not math.isnan(float(v))]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def summarize(rows: Sequence[dict], rounds: Sequence[int]) -> dict:
    """Per-metric mean over ``rounds``; NaN cells are skipped."""
    keep = set(rounds)
    sel = [r for r in rows if int(r["round"]) in keep]
    return {k: _nanmean(r[k] for r in sel) for k in RoundReport.CSV_FIELDS if k != "round"}


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_outputs(out: Path, result: SimulationResult, preset: Optional[str] = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "rounds.csv"
    write_rounds_csv(csv_path, result.reports)
    rows = read_rounds_csv(csv_path)   # summarise exactly what was written
    rounds = summary_rounds(result)
    final = {k: v for k, v in rows[-1].items() if k != "round"} if rows else {}
    summary = {
        "version": version_string(),
        "preset": preset_id(preset) if preset else None,
        "summary_rounds": rounds,
        "mean": summarize(rows, rounds),
        "final": final,
        "malicious_clients": sorted(int(i) for i in result.malicious_ids),
        "config": result.config.to_dict(),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_json_safe(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedshield", description="Federated poisoning-defense simulator.")
    p.add_argument("--list-presets", action="store_true", help="print the preset catalog and exit")
    sub = p.add_subparsers(dest="command")
    run = sub.add_parser("run", help="run one simulation")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="TOML configuration file")
    src.add_argument("--preset", metavar="NAME", help="named scenario preset")
    run.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    run.add_argument("--out", metavar="DIR", default="results", help="output directory (default: results)")
    run.add_argument("--defense", choices=DEFENSES)
    run.add_argument("--attack", choices=ATTACKS)
    run.add_argument("--validator-attack", choices=VALIDATOR_ATTACKS)
    run.add_argument("--list-presets", action="store_true", help=argparse.SUPPRESS)
    return p


def resolve_config(args) -> SimConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = get_preset(args.preset)
    else:
        cfg = SimConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.defense:
        cfg = replace(cfg, defense=args.defense)
    attack = {}
    if args.attack:
        attack["kind"] = args.attack
    if args.validator_attack:
        attack["validator_attack"] = args.validator_attack
    if attack:
        try:
            cfg = replace(cfg, attack=replace(cfg.attack, **attack))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def list_presets(stream=None) -> None:
    stream = stream or sys.stdout
    for name in sorted(PRESETS):
        cfg = get_preset(name)
        print(f"{preset_id(name)}\tattack={cfg.attack.kind}\tvalidator_attack={cfg.attack.validator_attack}"
              f"\tdistribution={cfg.data.distribution}", file=stream)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "list_presets", False):
        list_presets()
        return 0
    if args.command != "run":
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        result = run_simulation(cfg)
        write_outputs(Path(args.out), result, preset=args.preset)
    except (ConfigError, DataError, OSError, FloatingPointError) as exc:
        print(f"fedshield: error: {exc}", file=sys.stderr)
        return 1
    log.info("wrote %s", Path(args.out) / "rounds.csv")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
