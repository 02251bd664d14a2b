"""Finite-difference checks of the analytic loss gradients.

The oracle evaluates the loss through ``dist_core`` one cell at a time, a path
that shares nothing with the kernels except the softmax of the logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dist_core import jsd, kl_divergence, normalize, project_onto, truncate_top_k
from .env import Task, generate_task, make_group
from .policy import CellBatch, PolicyParams, build_cells, cell_student_logits, cell_teacher_logits
from .trainer import TaskConfig, TrainConfig, distillation_loss, grpo_loss
from .weighting import batch_weights

FD_STEP = 1e-5
TOLERANCE = 1e-5


@dataclass
class Instance:
    task: Task
    params: PolicyParams
    groups: list
    weights: np.ndarray
    config: TrainConfig

    def cells(self) -> CellBatch:
        # the batch is fixed; only W moves during finite differences
        if getattr(self, "_cells", None) is None:
            self._cells = build_cells(self.task, self.groups)
        return self._cells

    def teacher_logits(self) -> np.ndarray:
        if getattr(self, "_zt", None) is None or self._zt_params is not self.params:
            self._zt, self._zt_params = cell_teacher_logits(self.params, self.cells()), self.params
        return self._zt


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    details: list = field(default_factory=list)


def random_instance(
    rng: np.random.Generator,
    divergence: str,
    weighted: bool,
    top_k: int = 3,
    num_questions: int = 2,
    group_size: int = 3,
    vocab_size: int = 8,
    context_dim: int = 4,
    seq_len: int = 2,
) -> Instance:
    task = generate_task(int(rng.integers(2**31)), num_questions, vocab_size, seq_len, context_dim)
    D = context_dim + seq_len + vocab_size
    W = rng.normal(scale=0.7, size=(vocab_size, D))
    ema_W = W + rng.normal(scale=0.3, size=W.shape)
    params = PolicyParams(W=W, ema_W=ema_W, feedback_gain=float(rng.uniform(0.5, 4.0)), ema_rate=0.05)
    groups = []
    for j, q in enumerate(task.questions):
        toks = rng.integers(0, vocab_size, size=(group_size, seq_len))
        # plant the answer in some rollouts; the first group always has mixed outcomes
        n_correct = int(rng.integers(1, group_size)) if j == 0 else int(rng.integers(0, group_size + 1))
        toks[:n_correct] = q.answer
        toks[n_correct:, 0] = (q.answer[0] + 1 + np.arange(group_size - n_correct)) % vocab_size
        groups.append(make_group(q, toks))
    p_hat = np.array([g.pass_rate.p_hat for g in groups])
    weights = batch_weights(p_hat, 0.5).normalized if weighted else np.ones(len(groups))
    config = TrainConfig(
        method="sc_sdpo" if weighted else "sdpo",
        divergence=divergence,
        top_k=top_k,
        group_size=group_size,
        batch_size=num_questions,
        task=TaskConfig(num_questions=num_questions, vocab_size=vocab_size, seq_len=seq_len, context_dim=context_dim),
    )
    return Instance(task, params, groups, weights, config)


def reference_distill_loss(inst: Instance, W: np.ndarray, ema_W: np.ndarray | None = None) -> float:
    """Weighted cell-mean divergence, cell by cell through dist_core."""
    cells = inst.cells()
    zs = cell_student_logits(W, cells)
    if ema_W is None:
        zt = inst.teacher_logits()
    else:
        zt = cell_teacher_logits(replace(inst.params, ema_W=ema_W), cells)
    div = kl_divergence if inst.config.divergence == "kl" else jsd
    k = min(inst.config.top_k, inst.task.vocab_size)
    total = 0.0
    for i in range(cells.size):
        s = normalize(np.exp(zs[i] - zs[i].max()))
        t = normalize(np.exp(zt[i] - zt[i].max()))
        ts = truncate_top_k(s, k)
        total += inst.weights[cells.group_index[i]] * div(ts, project_onto(t, ts))
    return total / cells.size


def central_differences(f: Callable[[np.ndarray], float], W: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        e = np.zeros_like(W)
        e[idx] = h
        grad[idx] = (f(W + e) - f(W - e)) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


def analytic_grad(inst: Instance, W: np.ndarray | None = None) -> np.ndarray:
    return distillation_loss(inst.groups, inst.params, inst.task, inst.config, inst.weights, W=W).grad


def check_distillation(
    seed: int = 0,
    n_instances: int = 5,
    corrupt: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[CheckResult]:
    """FD check for {kl, jsd} x {weighted, unweighted}; ``corrupt`` is a negative-control hook."""
    results = []
    for div in ("kl", "jsd"):
        for weighted in (False, True):
            rng = np.random.default_rng([seed, int(weighted), len(div)])
            errs = []
            for _ in range(n_instances):
                inst = random_instance(rng, div, weighted)
                g = analytic_grad(inst)
                if corrupt is not None:
                    g = corrupt(g)
                fd = central_differences(lambda W: reference_distill_loss(inst, W), inst.params.W)
                errs.append(rel_err(g, fd))
            name = f"{div}/{'weighted' if weighted else 'unweighted'}"
            results.append(CheckResult(name, max(errs), max(errs) < TOLERANCE, errs))
    return results


def check_grpo(seed: int = 0, n_instances: int = 3) -> CheckResult:
    errs = []
    rng = np.random.default_rng([seed, 7])
    for method in ("grpo", "grpo_no_norm"):
        for _ in range(n_instances):
            inst = random_instance(rng, "jsd", False)
            inst.config = replace(inst.config, method=method)
            g = grpo_loss(inst.groups, inst.params, inst.task, inst.config).grad
            fd = central_differences(
                lambda W: grpo_loss(inst.groups, inst.params, inst.task, inst.config, W=W).loss, inst.params.W
            )
            errs.append(rel_err(g, fd))
    return CheckResult("grpo", max(errs), max(errs) < TOLERANCE, errs)


def check_stop_gradient(seed: int = 0, n_instances: int = 2) -> list[CheckResult]:
    """The teacher branch is detached.

    restore: perturbing the teacher (ema_W and feedback gain) changes the loss,
        and after restoring it the gradient is bitwise identical.
    tied: with ema_W == W, the analytic gradient matches differences that move
        only the student and clearly differs from differences that also move
        the teacher.
    """
    rng = np.random.default_rng([seed, 11])
    restore_ok, tied_errs, tied_gaps = True, [], []
    for _ in range(n_instances):
        inst = random_instance(rng, "jsd", True)
        g0 = analytic_grad(inst)
        loss0 = distillation_loss(inst.groups, inst.params, inst.task, inst.config, inst.weights).loss
        original = inst.params
        inst.params = replace(original, ema_W=original.ema_W + rng.normal(scale=0.5, size=original.W.shape), feedback_gain=original.feedback_gain + 1.0)
        loss1 = distillation_loss(inst.groups, inst.params, inst.task, inst.config, inst.weights).loss
        inst.params = original
        g1 = analytic_grad(inst)
        restore_ok &= loss1 != loss0 and np.array_equal(g0, g1)

        inst.params = replace(original, ema_W=original.W.copy())
        g = analytic_grad(inst)
        frozen = central_differences(lambda W: reference_distill_loss(inst, W), inst.params.W)
        tied = central_differences(lambda W: reference_distill_loss(inst, W, ema_W=W), inst.params.W)
        tied_errs.append(rel_err(g, frozen))
        tied_gaps.append(rel_err(g, tied))
    return [
        CheckResult("stopgrad/restore", 0.0, bool(restore_ok)),
        CheckResult(
            "stopgrad/tied-teacher",
            max(tied_errs),
            max(tied_errs) < TOLERANCE and min(tied_gaps) > 1e-3,
            tied_gaps,
        ),
    ]


def run_all(seed: int = 0, n_instances: int = 5, corrupt=None) -> list[CheckResult]:
    return check_distillation(seed, n_instances, corrupt) + [check_grpo(seed)] + check_stop_gradient(seed)
