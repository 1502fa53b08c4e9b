"""Command-line entry points.

Outputs go under ``--out`` or, failing that, ``$PLASTIDOOR_OUT`` (default
``./plastidoor_out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks, diagnosis, harness, theoremlab
from .interventions import COMBINATIONS
from .neuralcore import load_checkpoint
from .pathology import PathologySeries, PathologySnapshot
from .scenario import parse_scenarios, task_defaults


def _parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"override {text!r} is not KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_overrides(path: str, overrides) -> list:
    """Load scenarios from ``path`` after applying dotted KEY=VALUE overrides to each entry."""
    raw = json.loads(Path(path).read_text())
    entries = raw["scenarios"] if isinstance(raw, dict) and "scenarios" in raw else (
        raw if isinstance(raw, list) else [raw])
    for keys, value in overrides or []:
        for entry in entries:
            node = entry
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
    return parse_scenarios(raw)


def _out(args) -> Path:
    out = Path(args.out) if args.out else harness.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    scenarios = _apply_overrides(args.config, args.set)
    if args.scenario:
        scenarios = [s for s in scenarios if s.scenario_id == args.scenario]
        if not scenarios:
            print(f"no scenario named {args.scenario!r}", file=sys.stderr)
            return 2
    sc = scenarios[0]
    seed = sc.seeds[0] if args.seed is None else args.seed
    out = _out(args)
    rec, rows = harness.run_scenario(sc, seed, out / "checkpoints")
    (out / "logs").mkdir(exist_ok=True)
    harness.write_step_log(out / "logs" / f"{rec.run_id}.csv", rows)
    harness.write_records(out / f"{rec.run_id}-record.csv", [rec])
    print(f"{rec.run_id}: status={rec.status} asr={rec.final_asr} btp={rec.final_btp}")
    return 0 if rec.ok else 1


def cmd_suite(args) -> int:
    scenarios = _apply_overrides(args.config, args.set)
    out = _out(args)
    records = harness.run_suite(scenarios, args.parallelism, out)
    failed = [r for r in records if not r.ok]
    print(f"{len(records)} runs, {len(failed)} not ok; records in {out / 'records.csv'}")
    for r in failed:
        print(f"  {r.run_id}: {r.status}")
    return 0


def cmd_eval(args) -> int:
    nets, meta = load_checkpoint(args.checkpoint)
    actor = nets["actor"][0]
    env = args.env or meta.get("env")
    if env is None:
        print("checkpoint does not record its env; pass --env", file=sys.stderr)
        return 2
    cfg = attacks.EvalConfig(**task_defaults(env)["eval"])
    if args.episodes:
        cfg.episodes = args.episodes
    rng = np.random.Generator(np.random.Philox(args.seed))
    btp = attacks.evaluate_btp(actor, env, cfg, rng)
    result = {"checkpoint": str(args.checkpoint), "env": env, "btp": btp}
    if args.task:
        result["asr"] = attacks.evaluate_asr(actor, env, attacks.get_task(args.task), cfg, rng)
    print(json.dumps(result))
    return 0


def _series_from_log(path) -> PathologySeries:
    s = PathologySeries()
    for row in harness.read_step_log(path):
        s.append(PathologySnapshot(int(row["step"]), float(row["weight_magnitude"]),
                                   float(row["effective_rank_ratio"]), float(row["sharpness"])))
    return s


def cmd_diagnose(args) -> int:
    out = _out(args)
    if args.records:
        rows, vectors = harness.export_rank_data(harness.read_records(args.records), out / "ranks.csv")
        for k, v in vectors.items():
            print(f"v({k}) = " + ", ".join(f"{c:.2f}" for c in v.components))
    else:
        vectors = {k: v for k, v in diagnosis.load_reference_vectors(args.vectors).items() if v.complete}
    for name in args.combination or []:
        if name.lower() not in COMBINATIONS:
            raise ValueError(f"unknown combination {name!r}; choose from {sorted(COMBINATIONS)}")
        members = COMBINATIONS[name.lower()]
        try:
            pd = diagnosis.pathological_diagnosis(vectors[m] for m in members)
            print(f"PD({name}) = {pd:.4f}")
        except KeyError as exc:
            print(f"PD({name}) unavailable: no complete vector for {exc}")
    for log_path in args.log or []:
        rep = diagnosis.detect_sharpness_anomaly(_series_from_log(log_path), args.window, args.threshold)
        print(f"{log_path}: {len(rep)} anomalies at steps {list(rep.steps)}")
    return 0


def cmd_theorem(args) -> int:
    text = theoremlab.verification_table(args.instances, args.seed)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    fails = sum(line.endswith(",0") for line in text.splitlines()[1:])
    print(f"{args.instances - fails}/{args.instances} instances pass", file=sys.stderr)
    return 0 if fails == 0 else 1


def cmd_report(args) -> int:
    records = harness.read_records(args.records)
    table = harness.aggregate_report(records, args.group_by.split(","))
    text = harness.report_text(table)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plastidoor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="scenario JSON file")
        sp.add_argument("--set", action="append", type=_parse_override, metavar="KEY=VALUE",
                        help="override a scenario field, dotted for nesting (ppo.total_steps=20000)")
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="run one scenario for one seed")
    with_config(sp)
    sp.add_argument("--scenario", help="scenario id when the file holds several")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("suite", help="run every scenario and seed in a file")
    with_config(sp)
    sp.add_argument("--parallelism", type=int, default=1)
    sp.set_defaults(func=cmd_suite)

    sp = sub.add_parser("eval", help="ASR and BTP of a saved checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--env")
    sp.add_argument("--task")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("diagnose", help="rank tables, PD and sharpness anomaly scans")
    sp.add_argument("--records", help="records.csv from a suite; ranks are recomputed from it")
    sp.add_argument("--vectors", help="reference vector JSON (default: packaged copy)")
    sp.add_argument("--combination", action="append", help="combination name, e.g. swiss_cheese")
    sp.add_argument("--log", action="append", help="step log CSV to scan for sharpness anomalies")
    sp.add_argument("--window", type=int, default=11)
    sp.add_argument("--threshold", type=float, default=6.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("theorem", help="SAM influence verification table as CSV")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_theorem)

    sp = sub.add_parser("report", help="mean ±std tables from a records CSV")
    sp.add_argument("records")
    sp.add_argument("--group-by", default="intervention")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
