"""Suite execution, CSV logs and aggregate tables.

Each (scenario, seed) pair runs in isolation with its own generator
streams, so results do not depend on scheduling. Workers only compute;
the parent process writes every file.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diagnosis import CHARACTERISTICS, DIRECTIONS, PathologicalVector, rank_interventions
from .interventions import SETTINGS
from .scenario import ScenarioConfig
from .training import CSV_COLUMNS, RunLog, run_id_for, train

log = logging.getLogger(__name__)

RECORD_COLUMNS = (
    "run_id", "scenario_id", "seed", "env", "task_id", "attack", "intervention", "threat_model", "status",
    "final_asr", "final_btp", "range_weight_magnitude", "range_effective_rank_ratio", "range_sharpness",
    "mean_weight_magnitude", "mean_effective_rank_ratio", "mean_sharpness",
)
POISON_PHASES = ("train", "finetune")


def output_dir(default="plastidoor_out") -> Path:
    return Path(os.environ.get("PLASTIDOOR_OUT", default))


@dataclass
class RunRecord:
    run_id: str
    scenario_id: str
    seed: int
    env: str
    task_id: str
    attack: str
    intervention: str
    threat_model: str
    final_asr: float | None
    final_btp: float | None
    ranges: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)     # over snapshots taken while poisoning was on
    wall_time: float = 0.0
    status: str = "ok"

    def __post_init__(self):
        for name in ("final_asr", "final_btp"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def record_from_log(sc: ScenarioConfig, run: RunLog, wall_time: float) -> RunRecord:
    poisoned = PathologySeriesView(run)
    return RunRecord(
        run.run_id, sc.scenario_id, run.seed, sc.env, sc.task or "none", sc.attack or "none",
        sc.intervention, sc.threat_model, run.final_asr, run.final_btp,
        ranges=run.series.ranges(), means=poisoned.means(), wall_time=wall_time, status=run.status,
    )


class PathologySeriesView:
    """Snapshots recorded during the poisoned phase (all of them for clean runs)."""

    def __init__(self, run: RunLog):
        rows = [i for i, r in enumerate(run.rows) if r["phase"] in POISON_PHASES]
        if not rows:
            rows = list(range(len(run.rows)))
        self.snaps = [run.series.snapshots[i] for i in rows]

    def means(self) -> dict:
        if not self.snaps:
            return {}
        return {k: float(np.mean([getattr(s, k) for s in self.snaps])) for k in CHARACTERISTICS}


def _execute(job):
    sc, seed, ckpt_dir = job
    t0 = time.perf_counter()
    try:
        run = train(sc, seed, ckpt_dir)
    except Exception as exc:   # record the failure instead of losing the run
        log.exception("run %s failed", run_id_for(sc, seed))
        rec = RunRecord(run_id_for(sc, seed), sc.scenario_id, seed, sc.env, sc.task or "none",
                        sc.attack or "none", sc.intervention, sc.threat_model, None, None,
                        wall_time=time.perf_counter() - t0, status=f"error: {type(exc).__name__}: {exc}")
        return rec, []
    return record_from_log(sc, run, time.perf_counter() - t0), run.rows


def run_scenario(sc: ScenarioConfig, seed: int | None = None, checkpoint_dir=None) -> tuple[RunRecord, list[dict]]:
    return _execute((sc, sc.seeds[0] if seed is None else seed, checkpoint_dir))


def run_suite(scenarios: Sequence[ScenarioConfig], parallelism: int = 1, out_dir=None) -> list[RunRecord]:
    """Run every (scenario, seed) pair; records come back in submission order.

    With ``out_dir`` the step logs, records and wall times are written there
    and each run also leaves its checkpoints under ``checkpoints/``.
    """
    ckpt = str(Path(out_dir) / "checkpoints") if out_dir is not None else None
    jobs = [(sc, seed, ckpt) for sc in scenarios for seed in sc.seeds]
    if not jobs:
        return []
    if parallelism <= 1:
        results = [_execute(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_execute, jobs))
    if out_dir is not None:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        for rec, rows in results:
            write_step_log(out / "logs" / f"{rec.run_id}.csv", rows)
        write_records(out / "records.csv", [r for r, _ in results])
        write_timing(out / "timing.csv", [r for r, _ in results])
    return [r for r, _ in results]


# -- CSV ----------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def step_log_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_step_log(path, rows: Iterable[dict]) -> None:
    Path(path).write_text(step_log_text(rows))


def _record_row(r: RunRecord) -> list:
    return ([r.run_id, r.scenario_id, r.seed, r.env, r.task_id, r.attack, r.intervention, r.threat_model,
             r.status, r.final_asr, r.final_btp]
            + [r.ranges.get(k) for k in CHARACTERISTICS] + [r.means.get(k) for k in CHARACTERISTICS])


def records_text(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([_cell(v) for v in _record_row(r)])
    return buf.getvalue()


def write_records(path, records: Iterable[RunRecord]) -> None:
    Path(path).write_text(records_text(records))


def write_timing(path, records: Iterable[RunRecord]) -> None:
    """Wall times live in their own file so the record CSV stays reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("run_id", "wall_time"))
    for r in records:
        w.writerow((r.run_id, f"{r.wall_time:.3f}"))
    Path(path).write_text(buf.getvalue())


def read_records(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            num = lambda s: float(s) if s != "" else None  # noqa: E731
            out.append(RunRecord(
                row["run_id"], row["scenario_id"], int(row["seed"]), row["env"], row["task_id"], row["attack"],
                row["intervention"], row["threat_model"], num(row["final_asr"]), num(row["final_btp"]),
                ranges={k: num(row[f"range_{k}"]) for k in CHARACTERISTICS},
                means={k: num(row[f"mean_{k}"]) for k in CHARACTERISTICS if row[f"mean_{k}"] != ""},
                status=row["status"],
            ))
    return out


def read_step_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- aggregation --------------------------------------------------------------

def fmt_mean_std(values: Sequence[float]) -> str:
    v = np.asarray(values, dtype=float)
    return f"{v.mean():.3f} ±{v.std():.3f}"


def aggregate_report(records: Sequence[RunRecord], group_by: Sequence[str] = ("intervention",)) -> list[dict]:
    """Mean and population std of final ASR and BTP per group, in first-seen group order."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in group_by), []).append(r)
    table = []
    for key, recs in groups.items():
        row = dict(zip(group_by, key))
        row["runs"] = len(recs)
        row["failed"] = sum(not r.ok for r in recs)
        for metric, attr in (("ASR", "final_asr"), ("BTP", "final_btp")):
            vals = [getattr(r, attr) for r in recs if r.ok and getattr(r, attr) is not None]
            row[metric] = fmt_mean_std(vals) if vals else "n/a"
        table.append(row)
    return table


def report_text(table: Sequence[dict]) -> str:
    if not table:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(table)
    return buf.getvalue()


SCENARIO_KEYS = ("env", "task_id", "attack", "threat_model")


def export_rank_data(records: Sequence[RunRecord], path=None) -> tuple[list[dict], dict[str, PathologicalVector]]:
    """Rank the eight settings within every attack scenario, then average the ranks.

    A scenario's characteristic value for a setting is the seed-average of
    each run's mean over its poisoned-phase snapshots. Scenarios missing a
    setting are skipped. Returns the per-scenario rank rows and the
    pathological vector of each setting; with ``path`` the rows go to that
    CSV and the vectors to a ``*_vectors.csv`` next to it.
    """
    by_scenario: dict[tuple, dict[str, list[RunRecord]]] = {}
    for r in records:
        if r.ok and r.means:
            by_scenario.setdefault(tuple(getattr(r, k) for k in SCENARIO_KEYS), {}).setdefault(
                r.intervention.lower(), []).append(r)
    rows = []
    for key, per in by_scenario.items():
        missing = [s for s in SETTINGS if s not in per]
        if missing:
            log.warning("scenario %s lacks settings %s; excluded from ranking", key, missing)
            continue
        for ch in CHARACTERISTICS:
            vals = [float(np.mean([r.means[ch] for r in per[s]])) for s in SETTINGS]
            ranks = rank_interventions(vals, DIRECTIONS[ch])
            for s, v, rk in zip(SETTINGS, vals, ranks):
                rows.append({**dict(zip(SCENARIO_KEYS, key)), "characteristic": ch, "intervention": s,
                             "value": v, "rank": float(rk)})
    vectors = {}
    if rows:
        for s in SETTINGS:
            comps = tuple(float(np.mean([r["rank"] for r in rows if r["intervention"] == s and
                                         r["characteristic"] == ch])) for ch in CHARACTERISTICS)
            vectors[s] = PathologicalVector(s, comps)
    if path is not None:
        path = Path(path)
        cols = list(SCENARIO_KEYS) + ["characteristic", "intervention", "value", "rank"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
        path.write_text(buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("intervention",) + CHARACTERISTICS)
        for s, v in vectors.items():
            w.writerow((s,) + tuple(f"{c:.4f}" for c in v.components))
        path.with_name(path.stem + "_vectors.csv").write_text(buf.getvalue())
    return rows, vectors


def records_as_dicts(records: Iterable[RunRecord]) -> list[dict]:
    return [asdict(r) for r in records]
