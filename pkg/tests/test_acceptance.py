"""Acceptance suite: one test per criterion.

The CartPole training criteria (5-9) share fifteen runs made once per
module: clean, TrojDRL scratch with and without SAM, and TrojDRL post-training
with and without SAM, each on seeds 0-2. On one CPU this takes about fifteen
minutes. Each test prints the measured values so the log shows the margin.
"""

import time

import numpy as np
import pytest

from plastidoor import theoremlab
from plastidoor.diagnosis import load_reference_vectors, pathological_diagnosis
from plastidoor.harness import run_suite
from plastidoor.interventions import (
    InterventionStack, attach_spectral_norm, layer_norm_forward, redo_reset, refresh_spectral, sam_step,
    shrink_perturb,
)
from plastidoor.neuralcore import Adam, AdamState, FlatParams, PolicyNet, adam_step, backward, forward
from plastidoor.pathology import sharpness
from plastidoor.scenario import ScenarioConfig
from plastidoor.training import train

from conftest import tiny
from oracles import dominant_eigenvalue, gradient_check, quadratic

SEEDS = (0, 1, 2)
BASE = {"env": "cartpole", "log_interval": 1, "eval_interval": 10}
RUNS = {
    "clean": {},
    "troj_none": {"task": "task0", "attack": "trojdrl"},
    "troj_sam": {"task": "task0", "attack": "trojdrl", "intervention": "sam"},
    "post_none": {"task": "task0", "attack": "trojdrl", "threat_model": "post", "ppo": {"total_steps": 200_000}},
    "post_sam": {"task": "task0", "attack": "trojdrl", "threat_model": "post", "intervention": "sam",
                 "ppo": {"total_steps": 200_000}},
}


def report(n, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


@pytest.fixture(scope="module")
def runs():
    out = {}
    for name, extra in RUNS.items():
        sc = ScenarioConfig.from_dict({**BASE, "scenario_id": name, **extra})
        out[name] = [train(sc, seed) for seed in SEEDS]
    return out


def _poisoned(log):
    return log.phase_series("finetune" if log.pretrain_steps else "train").values("sharpness")


def test_criterion_01_pd_of_reference_vectors():
    v = load_reference_vectors()
    pd = pathological_diagnosis([v["wd"], v["ln"]])
    ok = abs(pd - 0.52) <= 0.005
    report(1, ok, f"PD = {pd:.4f}")
    assert ok


def test_criterion_02_theorem_instances():
    rng = np.random.Generator(np.random.Philox(2024))
    t0 = time.perf_counter()
    worst, min_factor = 0.0, np.inf
    for inst in theoremlab.random_instances(1000, rng):
        a, n = theoremlab.sam_influence_analytic(inst), theoremlab.sam_influence_numeric(inst)
        worst = max(worst, abs(n - a) / abs(a))
        min_factor = min(min_factor, theoremlab.amplification_factor(inst))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and min_factor > 1.0 and elapsed < 5.0
    report(2, ok, f"worst rel err {worst:.2e}, min factor {min_factor:.6f}, {elapsed:.2f} s")
    assert ok


def _gapped_hessian(n, rng):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    top = rng.uniform(1.0, 100.0) * rng.choice([-1.0, 1.0])
    rest = rng.uniform(-0.5, 0.5, n - 1) * abs(top)
    return (q * np.concatenate([[top], rest])) @ q.T


def test_criterion_03_sharpness_on_quadratics():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst, negatives = 0.0, 0
    for n in range(2, 51):
        for _ in range(3):
            h = _gapped_hessian(n, rng)
            h = 0.5 * (h + h.T)
            want = dominant_eigenvalue(h)
            negatives += want < 0
            got = sharpness(FlatParams(rng.standard_normal(n)), quadratic(h), 50, rng)
            worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed < 10.0
    report(3, ok, f"worst abs err {worst:.2e} over 147 Hessians ({negatives} negative), {elapsed:.2f} s")
    assert ok


def test_criterion_04_gradient_check_random_nets():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        head = rng.choice(["discrete", "continuous", "value"])
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(rng.integers(1, 3))]
        sizes.append(1 if head == "value" else int(rng.integers(1, 4)))
        net = PolicyNet(sizes, str(head), rng, layer_norm=bool(rng.integers(2)))
        net.theta += 0.1 * rng.standard_normal(net.theta.size)
        if rng.integers(2):
            attach_spectral_norm(net.layers[0], rng)
        worst = max(worst, gradient_check(net, rng.standard_normal((4, sizes[0])), rng, forward, backward))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 30.0
    report(4, ok, f"worst error / tolerance {worst:.3f}, {elapsed:.2f} s")
    assert ok


def test_criterion_05_clean_baseline(runs):
    clean = [log.final_btp for log in runs["clean"]]
    pre = [log.pretrain_steps for log in runs["post_none"]]
    ok = all(b >= 0.95 for b in clean) and all(0 < p <= 200_000 for p in pre)
    report(5, ok, f"BTP after 1e5 steps {clean}; steps to BTP>=0.95 in pre-training {pre}")
    assert ok


def test_criterion_06_trojdrl_scratch_injection(runs):
    pairs = [(log.final_asr, log.final_btp) for log in runs["troj_none"]]
    hits = sum(a >= 0.5 and b >= 0.9 for a, b in pairs)
    report(6, hits >= 2, f"(ASR, BTP) per seed {pairs}")
    assert hits >= 2


def test_criterion_07_sharpness_range_signature(runs):
    ratios = []
    for bd, cl in zip(runs["troj_none"], runs["clean"]):
        s_bd, s_cl = _poisoned(bd), _poisoned(cl)
        ratios.append(float(np.ptp(s_bd) / np.ptp(s_cl)))
    hits = sum(r >= 2.0 for r in ratios)
    report(7, hits >= 2, "backdoored/clean range ratio per seed " + ", ".join(f"{r:.2f}" for r in ratios))
    assert hits >= 2


def test_criterion_08_sam_flattens(runs):
    none = [float(_poisoned(l).mean()) for l in runs["troj_none"]]
    sam = [float(_poisoned(l).mean()) for l in runs["troj_sam"]]
    post_none = [float(_poisoned(l).mean()) for l in runs["post_none"]]
    post_sam = [float(_poisoned(l).mean()) for l in runs["post_sam"]]
    ok = all(s < n for s, n in zip(sam, none))
    report(8, ok, f"scratch mean sharpness None {np.round(none, 1).tolist()} SAM {np.round(sam, 1).tolist()}; "
                  f"post-training None {np.round(post_none, 1).tolist()} SAM {np.round(post_sam, 1).tolist()}")
    assert ok


def test_criterion_09_sam_post_training_asr(runs):
    pairs = [(s.final_asr, n.final_asr) for s, n in zip(runs["post_sam"], runs["post_none"])]
    hits = sum(s >= n for s, n in pairs)
    report(9, hits >= 2, f"(ASR SAM, ASR None) per seed {pairs}")
    assert hits >= 2


def test_criterion_10_intervention_invariants(monkeypatch):
    # weight clipping bound after every optimizer step of a real run
    original = InterventionStack.optimizer_step
    checked = []

    def checked_step(self, net, *a, **kw):
        loss = original(self, net, *a, **kw)
        checked.append(max(float(np.abs(w).max()) for w in net.weights()))
        return loss

    monkeypatch.setattr(InterventionStack, "optimizer_step", checked_step)
    log = train(tiny(intervention="wc", ppo={"total_steps": 2560}), 0)
    assert log.status == "ok" and checked and max(checked) <= 0.3
    monkeypatch.undo()

    rng = np.random.default_rng(10)
    for _ in range(20):
        net = PolicyNet([int(rng.integers(2, 8)), int(rng.integers(2, 8))], "discrete", rng)
        layer = net.layers[0]
        layer.weight[:] = rng.standard_normal(layer.weight.shape)
        s = np.linalg.svd(layer.weight, compute_uv=False)
        if len(s) > 1 and s[0] - s[1] < 1e-2 * s[0]:
            continue
        attach_spectral_norm(layer, rng)
        refresh_spectral(layer, 2000)
        assert abs(layer.sigma() - s[0]) <= 1e-6

    for _ in range(50):
        h = rng.normal(0, 10, int(rng.integers(2, 32)))
        y = layer_norm_forward(h, 1.0, 0.0)
        assert abs(y.mean()) < 1e-6 and abs(y.var() - 1.0) < 1e-3

    def batch_loss(net):
        s, y = np.ones((8, 3)) * np.arange(8)[:, None] / 8, np.arange(8) % 2
        tr = forward(net, s)
        p = np.exp(tr.post[-1] - tr.post[-1].max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        d = p.copy()
        d[np.arange(8), y] -= 1
        return float(-np.log(p[np.arange(8), y]).mean()), backward(net, tr, d / 8)

    a = PolicyNet([3, 8, 8, 2], "discrete", np.random.default_rng(0))
    b = a.copy()
    opt, state = Adam(a.n_params, 1e-3), AdamState.fresh(b.n_params)
    for _ in range(5):
        sam_step(a, batch_loss, 0.0, opt)
        adam_step(b.theta, batch_loss(b)[1], state, 1e-3)
    assert np.array_equal(a.theta, b.theta)

    before = a.theta.copy()
    shrink_perturb(a, 1.0, 0.0, rng)
    assert np.array_equal(a.theta, before)

    state = AdamState.fresh(a.n_params)
    state.m[:] = state.v[:] = 1.0
    assert redo_reset(a, [np.r_[0.0, np.ones(7)], np.ones(8)], 0.1, rng, state) == 1
    first, nxt = a.layers[0], a.layers[1]
    assert not nxt.weight[:, 0].any()
    for idx in (first.row_indices(0), nxt.col_indices(0), [first.b_start]):
        assert not state.m[idx].any() and not state.v[idx].any()
    report(10, True, f"weight clip held over {len(checked)} steps; SN, LN, SAM(0), S&P(1,0) and ReDo checks hold")


def test_criterion_11_determinism(tmp_path):
    scenarios = [tiny(scenario_id="det_clean"), tiny(scenario_id="det_troj", task="task0", attack="trojdrl",
                                                    intervention="swiss_cheese", threat_model="post",
                                                    eval={"episodes": 2, "probes": 10},
                                                    convergence_btp=0.0)]
    texts = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_suite(scenarios, out_dir=out)
        texts.append({p.relative_to(out).as_posix(): p.read_bytes()
                      for p in sorted(out.rglob("*.csv")) if p.name != "timing.csv"})
    same = texts[0] == texts[1]
    report(11, same, f"{len(texts[0])} CSV files compared byte for byte")
    assert same and len(texts[0]) == 3
