import numpy as np
import pytest

from plastidoor.harness import (
    RunRecord, aggregate_report, export_rank_data, fmt_mean_std, read_records, records_text, run_suite,
    step_log_text,
)
from plastidoor.interventions import SETTINGS

from conftest import tiny


def _rec(intervention="none", asr=0.5, btp=0.9, seed=0, means=None, task="task0", status="ok"):
    return RunRecord(f"{intervention}-{task}-{seed}", "s", seed, "cartpole", task, "trojdrl", intervention, "scratch",
                     asr, btp, means=means or {}, status=status)


def test_empty_suite():
    assert run_suite([]) == []


def test_one_scenario_three_seeds(tmp_path):
    recs = run_suite([tiny(seeds=[0, 1, 2])], out_dir=tmp_path)
    assert [r.seed for r in recs] == [0, 1, 2]
    assert len(list((tmp_path / "logs").glob("*.csv"))) == 3
    assert (tmp_path / "timing.csv").exists()
    assert len(read_records(tmp_path / "records.csv")) == 3


def test_parallelism_does_not_change_results(tmp_path):
    scs = [tiny(seeds=[0, 1]), tiny(scenario_id="tiny-troj", task="task0", attack="trojdrl", seeds=[0])]
    a = run_suite(scs, 1, tmp_path / "a")
    b = run_suite(scs, 2, tmp_path / "b")
    assert records_text(a) == records_text(b)
    for f in (tmp_path / "a" / "logs").iterdir():
        assert f.read_text() == (tmp_path / "b" / "logs" / f.name).read_text()


def test_failures_are_recorded():
    sc = tiny(threat_model="post", convergence_btp=1.01)
    (rec,) = run_suite([sc])
    assert rec.status.startswith("failed")


def test_record_validation():
    with pytest.raises(ValueError):
        _rec(asr=1.2)


def test_step_log_header_order():
    assert step_log_text([]).strip() == ("run_id,seed,step,phase,asr,btp,weight_magnitude,effective_rank_ratio,"
                                         "sharpness,poisoned_count,intervention,attack,task_id,threat_model")


def test_mean_std_format():
    assert fmt_mean_std([0.6, 0.8]) == "0.700 ±0.100"
    assert fmt_mean_std([0.3]) == "0.300 ±0.000"


def test_aggregate_groups():
    recs = [_rec("none", 0.6, seed=0), _rec("none", 0.8, seed=1), _rec("sam", 0.9, seed=0), _rec("sam", 0.9, seed=1)]
    table = aggregate_report(recs, ["intervention"])
    assert len(table) == 2
    assert table[0]["ASR"] == "0.700 ±0.100" and table[1]["ASR"] == "0.900 ±0.000"
    with pytest.raises(ValueError):
        aggregate_report([])


def test_aggregate_skips_failed_runs():
    table = aggregate_report([_rec(asr=0.4), _rec(asr=None, btp=None, status="diverged: x", seed=1)])
    assert table[0]["ASR"] == "0.400 ±0.000" and table[0]["failed"] == 1


def _synthetic(best="wc", tasks=("task0", "task1")):
    recs = []
    for t in tasks:
        for i, s in enumerate(SETTINGS):
            good = s == best
            means = {"weight_magnitude": 0.1 if good else 1.0 + i, "effective_rank_ratio": 0.99 if good else 0.5 - 0.01 * i,
                     "sharpness": 0.0 if good else 10.0 + i}
            recs.append(_rec(s, task=t, means=means))
    return recs


def test_rank_export_best_everywhere(tmp_path):
    rows, vectors = export_rank_data(_synthetic(), tmp_path / "ranks.csv")
    assert vectors["wc"].components == (1.0, 1.0, 1.0)
    assert all(1.0 <= c <= 8.0 for v in vectors.values() for c in v.components)
    assert len(rows) == 2 * 3 * 8
    assert (tmp_path / "ranks_vectors.csv").read_text().startswith("intervention,")


def test_rank_export_skips_incomplete_scenarios():
    recs = _synthetic(tasks=("task0",)) + [_rec("none", task="task2", means={"weight_magnitude": 1.0,
                                                                             "effective_rank_ratio": 0.5,
                                                                             "sharpness": 1.0})]
    rows, _ = export_rank_data(recs)
    assert {r["task_id"] for r in rows} == {"task0"}
