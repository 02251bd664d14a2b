from dataclasses import replace

import numpy as np
import pytest

from scsdpo import kernels
from scsdpo.dist_core import ParameterError
from scsdpo.env import generate_task, make_group
from scsdpo.policy import init_params
from scsdpo.trainer import (
    METHODS,
    AdamState,
    TaskConfig,
    TrainConfig,
    TrainingAbort,
    TrainState,
    adamw_step,
    clip_grad,
    compute_loss,
    distillation_loss,
    grpo_loss,
    init_state,
    metrics_to_csv,
    run_training,
    sample_batch,
    sc_sdpo_loss,
    sdpo_loss,
    train_step,
)


def crafted(ks, G=8, seed=0, step=-1, bias="uniform -1 3"):
    """One group per entry of ``ks`` with exactly k correct rollouts."""
    task = generate_task(seed, num_questions=len(ks), difficulty_spec=bias)
    rng = np.random.default_rng(seed)
    groups = []
    for q, k in zip(task.questions, ks):
        rows = rng.integers(0, task.vocab_size, size=(G, task.seq_len))
        rows[:, 0] = (q.answer[0] + 1 + rng.integers(0, task.vocab_size - 1, size=G)) % task.vocab_size
        rows[:k] = q.answer
        groups.append(make_group(q, rows, step))
    return task, groups


def setup(ks, **cfg):
    task, groups = crafted(ks)
    params = init_params(task, init_scale=0.3, seed=1)
    params = replace(params, ema_W=params.W + np.random.default_rng(5).normal(scale=0.2, size=params.W.shape))
    config = TrainConfig(batch_size=len(ks), task=TaskConfig(num_questions=len(ks)), **cfg)
    return task, groups, params, config


@pytest.mark.parametrize("div", ["kl", "jsd"])
def test_degenerate_batch_zero(div):
    task, groups, params, config = setup([0, 8, 8, 0], divergence=div)
    res = sc_sdpo_loss(groups, params, task, config)
    assert res.loss == 0.0 and not res.grad.any()


def test_singleton_active_set():
    task, groups, params, config = setup([4, 8])
    res = sc_sdpo_loss(groups, params, task, config)
    assert res.group_weights.tolist() == [1.0, 0.0]
    alone = sdpo_loss(groups[:1], params, task, replace(config, batch_size=1))
    # global cell mean: the inactive question's cells still count in the denominator
    assert res.loss == pytest.approx(alone.loss / 2, rel=1e-12)
    np.testing.assert_allclose(res.grad, alone.grad / 2, rtol=1e-12, atol=1e-15)


def test_student_equals_teacher_zero_loss():
    task, groups, params, config = setup([3, 5, 1])
    params = replace(params, ema_W=params.W.copy(), feedback_gain=0.0)
    for f in (sc_sdpo_loss, sdpo_loss):
        res = f(groups, params, task, config)
        assert abs(res.loss) < 1e-15 and np.abs(res.grad).max() < 1e-15


def test_sc_equals_sdpo_when_weights_equal():
    task, groups, params, config = setup([4, 4, 4])
    a = sc_sdpo_loss(groups, params, task, config)
    b = sdpo_loss(groups, params, task, config)
    assert a.loss == pytest.approx(b.loss, rel=1e-12)
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12, atol=1e-16)
    opt = AdamState(np.zeros_like(params.W), np.zeros_like(params.W))
    Wa, _ = adamw_step(params.W, clip_grad(a.grad, 1.0)[0], opt, config)
    Wb, _ = adamw_step(params.W, clip_grad(b.grad, 1.0)[0], opt, config)
    assert np.max(np.abs(Wa - Wb)) <= 1e-12


def test_duplicated_groups_same_mean():
    task, groups, params, config = setup([2, 6])
    a = sdpo_loss(groups, params, task, config)
    b = sdpo_loss(groups + groups, params, task, config)
    assert b.loss == pytest.approx(a.loss, rel=1e-12)
    np.testing.assert_allclose(b.grad, a.grad, rtol=1e-12, atol=1e-16)


def test_weight_placement_equivalence():
    task, groups, params, config = setup([1, 4, 6, 8])
    w = np.array([0.3, 1.7, 1.0, 0.0])
    weighted = distillation_loss(groups, params, task, config, w)
    total = sum(g.tokens.size for g in groups)
    expected = 0.0
    for j, g in enumerate(groups):
        per_q = distillation_loss([g], params, task, config, [1.0])
        expected += w[j] * per_q.loss * g.tokens.size / total
    assert weighted.loss == pytest.approx(expected, rel=1e-12)


def test_exclude_zero_pass():
    task, groups, params, config = setup([0, 3, 5])
    res = sdpo_loss(groups, params, task, replace(config, exclude_zero_pass=True))
    ref = sdpo_loss(groups[1:], params, task, config)
    assert res.loss == pytest.approx(ref.loss, rel=1e-12)
    assert res.n_cells == ref.n_cells


def test_grpo_degenerate_and_sign():
    task, groups, params, config = setup([0, 8], method="grpo")
    assert not grpo_loss(groups, params, task, config).grad.any()
    task, groups, params, config = setup([4], method="grpo")
    res = grpo_loss(groups, params, task, config)
    # a small step against the gradient raises the correct rollouts' likelihood
    W = params.W - 1e-3 * res.grad
    assert grpo_loss(groups, params, task, config, W=W).loss < res.loss


def test_on_policy_guard():
    task, groups, params, config = setup([2, 4])
    stamped = [replace(g, step=3) for g in groups]
    sc_sdpo_loss(stamped, params, task, config, step=3)
    with pytest.raises(ParameterError):
        sc_sdpo_loss(stamped, params, task, config, step=4)
    state = TrainState(params, AdamState(np.zeros_like(params.W), np.zeros_like(params.W)), step=4)
    with pytest.raises(ParameterError):
        compute_loss(stamped, state, task, config)


def test_batches_are_fresh_each_step():
    config = TrainConfig(steps=3, task=TaskConfig(num_questions=40))
    task = config.task.build()
    state = init_state(task, config)
    for s in range(3):
        groups = sample_batch(state, task, config)
        assert all(g.step == s for g in groups)
        state, _ = train_step(state, task, config)


def test_step_metrics_contracts():
    config = TrainConfig(steps=5, grad_clip_norm=1e-3)
    history, _ = run_training(config)
    for m in history:
        assert sum(m.bin_counts) == config.batch_size
        assert 0 <= m.frac_mid_narrow <= m.frac_mid_wide <= 1
        assert 0 <= m.grad_norm <= config.grad_clip_norm + 1e-9
        assert m.grad_norm_raw >= m.grad_norm
    assert any(m.grad_norm_raw > config.grad_clip_norm for m in history)


def test_mastered_batch_leaves_params_unchanged():
    config = TrainConfig(steps=1, batch_size=8, task=TaskConfig(num_questions=8, difficulty="constant 20"))
    task = config.task.build()
    state = init_state(task, config)
    state = replace(state, params=init_params(task, init_scale=0.1, seed=3))
    new, m = train_step(state, task, config)
    assert m.bin_counts[-1] == 8 and m.grad_norm == 0.0
    assert np.array_equal(new.params.W, state.params.W)
    assert np.array_equal(new.params.ema_W, state.params.ema_W)
    assert np.array_equal(new.opt.m, state.opt.m) and new.opt.t == state.opt.t


def test_determinism():
    config = TrainConfig(steps=15, seed=4)
    a = metrics_to_csv(run_training(config)[0])
    b = metrics_to_csv(run_training(config)[0])
    assert a == b
    assert a != metrics_to_csv(run_training(replace(config, seed=5))[0])


def test_paced_table_is_frozen():
    config = TrainConfig(method="sdpo_paced", steps=3)
    task = config.task.build()
    state = init_state(task, config)
    table = dict(state.frozen_table)
    assert np.mean([v for v in table.values() if v > 0]) == pytest.approx(1.0)
    for _ in range(3):
        state, _ = train_step(state, task, config)
    assert dict(state.frozen_table) == table


def test_abort_on_non_finite(monkeypatch):
    def broken(zs, zt, k, div):
        return np.full(zs.shape[0], np.nan), np.zeros_like(zs)

    monkeypatch.setattr(kernels, "distill_cells", broken)
    config = TrainConfig(steps=2)
    with pytest.raises(TrainingAbort) as e:
        run_training(config)
    assert e.value.dump["step"] == 0 and len(e.value.dump["question_ids"]) == config.batch_size


def test_config_roundtrip_and_validation():
    c = TrainConfig(method="sdpo_hard_filter", hard_filter_bounds=(0.1, 0.9))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"task": {"nope": 1}})
    for bad in (dict(method="ppo"), dict(alpha=0), dict(ema_rate=0), dict(top_k=0), dict(divergence="tv")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.mark.slow
def test_every_method_learns():
    for method in METHODS:
        first, last = [], []
        for seed in range(5):
            history, _ = run_training(TrainConfig(method=method, seed=seed))
            p = np.array([m.mean_pass_rate for m in history])
            first.append(p[:20].mean())
            last.append(p[-20:].mean())
        assert np.mean(last) >= np.mean(first), method


@pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")
def test_backends_train_alike():
    config = TrainConfig(steps=10)
    before = kernels.backend()
    try:
        kernels.use_backend("python")
        h_py, s_py = run_training(config)
        kernels.use_backend("compiled")
        h_c, s_c = run_training(config)
    finally:
        kernels.use_backend(before)
    assert [m.bin_counts for m in h_py] == [m.bin_counts for m in h_c]
    np.testing.assert_allclose(s_c.params.W, s_py.params.W, rtol=1e-9, atol=1e-12)
