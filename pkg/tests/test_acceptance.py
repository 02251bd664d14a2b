"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or
``python tests/test_acceptance.py``.
"""
import math
import sys
import time

import numpy as np
import pytest

from scsdpo import gradcheck
from scsdpo.advantage import grpo_total_magnitude, magnitude_closed_form, sdpo_token_advantage
from scsdpo.diagnostics import flat_advantage_profile, flatness_ratio
from scsdpo.dist_core import kl_divergence, normalize, project_onto, truncate_top_k
from scsdpo.learnability import exact_kl_normalized, verify_expansion
from scsdpo.policy import init_params
from scsdpo.trainer import TaskConfig, TrainConfig, init_state, metrics_to_csv, run_training, train_step
from scsdpo.weighting import normalize_batch, raw_weight

SEEDS = range(10)
FINAL_WINDOW = 40


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, budget):
        within = elapsed < budget
        status = "PASS" if ok and within else "FAIL"
        with capsys.disabled():
            print(f"\n[acceptance {n}] {status}  {detail}  ({elapsed:.2f}s, budget {budget:g}s)")
        assert ok, detail
        assert within, f"criterion {n} took {elapsed:.2f}s, budget {budget}s"

    return emit


def test_criterion_1_magnitude_identity(report):
    t0 = time.perf_counter()
    worst = 0.0
    for G in range(2, 17):
        for k in range(G + 1):
            mag = grpo_total_magnitude([1] * k + [0] * (G - k))
            closed = 2 * G * math.sqrt((k / G) * (1 - k / G))
            worst = max(worst, abs(mag - closed), abs(magnitude_closed_form(G, k) - closed))
    report(1, worst <= 1e-9, f"magnitude identity, max abs err {worst:.2e}", time.perf_counter() - t0, 1)


def test_criterion_2_normalization_contract(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_mean, worst_ratio, zero_ok = 0.0, 0.0, True
    for i in range(10_000):
        M = int(rng.integers(1, 65))
        if i % 10 == 0:
            raw = np.zeros(M)
        elif i % 10 == 1:
            raw = np.zeros(M)
            raw[rng.integers(M)] = rng.uniform(1e-6, 1.0)
        else:
            raw = raw_weight(rng.integers(0, 9, size=M) / 8, float(rng.choice([0.25, 0.5, 1.0, 2.0])))
        wv = normalize_batch(raw)
        zero_ok &= bool(np.all(wv.normalized[raw == 0] == 0))
        a = wv.active_set
        if a.size == 0:
            zero_ok &= not np.any(wv.normalized)
            continue
        worst_mean = max(worst_mean, abs(wv.normalized[a].mean() - 1.0))
        ratio = (wv.normalized[a] / wv.normalized[a[0]]) / (raw[a] / raw[a[0]])
        worst_ratio = max(worst_ratio, float(np.max(np.abs(ratio - 1.0))))
    ok = worst_mean <= 1e-12 and worst_ratio <= 1e-12 and zero_ok
    detail = f"unit mean err {worst_mean:.1e}, ratio err {worst_ratio:.1e} over 10000 batches"
    report(2, ok, detail, time.perf_counter() - t0, 1)


def test_criterion_3_learnability_expansion(report):
    t0 = time.perf_counter()
    grid = [round(0.1 * i, 1) for i in range(1, 10)]
    scaled = [exact_kl_normalized(p, 100) * 2 * 100**2 for p in grid]
    slopes = {p: verify_expansion(p, (10, 20, 40, 80)).slope for p in grid}
    ok = all(0.95 <= s <= 1.05 for s in scaled)
    ok &= all(s <= -2.9 for p, s in slopes.items() if p != 0.5)
    ok &= abs(slopes[0.5] + 4) <= 0.1
    off = max(s for p, s in slopes.items() if p != 0.5)
    detail = f"2b^2 KL in [{min(scaled):.4f}, {max(scaled):.4f}], slope <= {off:.3f} off-centre, {slopes[0.5]:.3f} at 0.5"
    report(3, ok, detail, time.perf_counter() - t0, 1)


def test_criterion_4_gradient_oracle(report):
    t0 = time.perf_counter()
    results = gradcheck.run_all(seed=0, n_instances=5)
    n_inst = sum(len(r.details) for r in results if "/" in r.name and not r.name.startswith("stopgrad"))
    worst = max(r.max_rel_err for r in results)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and n_inst >= 20
    detail = f"{n_inst} distillation instances, max rel err {worst:.2e}, failed: {failed or 'none'}"
    report(4, ok, detail, time.perf_counter() - t0, 10)


def test_criterion_5_advantage_expectation(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        V = int(rng.integers(2, 20))
        # top-K buckets plus tail; K = V is the untruncated case
        s = truncate_top_k(normalize(rng.dirichlet(np.ones(V))), int(rng.integers(1, V + 1)))
        t = project_onto(normalize(rng.dirichlet(np.ones(V))), s)
        adv = sdpo_token_advantage(s, t).per_token
        worst = max(worst, abs(float(np.dot(s.outcomes(), adv)) + kl_divergence(s, t)))
    report(5, worst <= 1e-9, f"max |E_s[A] + KL| {worst:.2e} over 1000 pairs", time.perf_counter() - t0, 1)


def test_criterion_6_degenerate_batch(report):
    t0 = time.perf_counter()
    ok = True
    for difficulty in ("constant 20", "constant -20"):
        config = TrainConfig(steps=1, batch_size=8, task=TaskConfig(num_questions=8, difficulty=difficulty))
        task = config.task.build()
        state = init_state(task, config)
        new, m = train_step(state, task, config)
        degenerate = m.bin_counts[0] + m.bin_counts[-1] == 8
        ok &= degenerate and np.array_equal(new.params.W, state.params.W)
        ok &= np.array_equal(new.params.ema_W, state.params.ema_W) and m.grad_norm == 0.0
    report(6, bool(ok), "all-degenerate batches leave W and ema_W bitwise unchanged", time.perf_counter() - t0, 1)


def test_criterion_7_flat_advantage(report):
    t0 = time.perf_counter()
    task = TaskConfig().build()
    bins = flat_advantage_profile(init_params(task, feedback_gain=3.0), task)
    ratio = flatness_ratio(bins, "adv_jsd", min_questions=5)
    used = [b.pass_rate for b in bins if b.n_questions >= 5]
    detail = f"adv_jsd max/min = {ratio:.3f} over bins {used}"
    report(7, len(used) >= 2 and ratio < 2, detail, time.perf_counter() - t0, 60)


@pytest.fixture(scope="module")
def sweep():
    """10 seeds of sdpo, sc_sdpo(0.5), sc_sdpo(1) on the default task."""
    variants = {
        "sdpo": TrainConfig(method="sdpo"),
        "sc_0.5": TrainConfig(method="sc_sdpo", alpha=0.5),
        "sc_1": TrainConfig(method="sc_sdpo", alpha=1.0),
    }
    t0 = time.perf_counter()
    out = {}
    for name, base in variants.items():
        for seed in SEEDS:
            history, _ = run_training(TrainConfig.from_dict({**base.to_dict(), "seed": seed}))
            out[name, seed] = history
    return variants, out, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_8_directional_training(sweep, report):
    _, runs, elapsed = sweep

    def final(name):
        return float(np.mean([np.mean([m.mean_pass_rate for m in runs[name, s][-FINAL_WINDOW:]]) for s in SEEDS]))

    def med_grad(name):
        return float(np.mean([np.median([m.grad_norm for m in runs[name, s]]) for s in SEEDS]))

    f_sdpo, f_05, f_1 = final("sdpo"), final("sc_0.5"), final("sc_1")
    g_sdpo, g_05, g_1 = med_grad("sdpo"), med_grad("sc_0.5"), med_grad("sc_1")
    a = f_05 >= f_sdpo - 0.01
    b = f_05 >= f_1
    c = 0.5 <= g_05 / g_sdpo <= 2.0 and g_1 < g_sdpo
    detail = (
        f"final pass rate sdpo {f_sdpo:.4f}, sc0.5 {f_05:.4f}, sc1 {f_1:.4f}; "
        f"median grad norm sdpo {g_sdpo:.2e}, sc0.5 {g_05:.2e} (ratio {g_05 / g_sdpo:.2f}), sc1 {g_1:.2e}; "
        f"(a) {a} (b) {b} (c) {c}"
    )
    report(8, a and b and c, detail, elapsed, 1800)


@pytest.mark.slow
def test_criterion_9_determinism(sweep, report):
    variants, runs, _ = sweep
    t0 = time.perf_counter()
    same = True
    for name, base in variants.items():
        for seed in (SEEDS[0], SEEDS[-1]):
            again, _ = run_training(TrainConfig.from_dict({**base.to_dict(), "seed": seed}))
            same &= metrics_to_csv(again).encode() == metrics_to_csv(runs[name, seed]).encode()
    report(9, same, "repeated runs give byte-identical metrics CSVs", time.perf_counter() - t0, 1800)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
