"""On-policy training loop for GRPO, SDPO and the pass-rate weighted variants.

One step: pick M questions, sample G rollouts each from the current policy,
turn the pass rates into per-question weights, compute the method's loss and
its analytic gradient, clip, take one AdamW step and move the EMA teacher.

Loss reduction follows the weighted-token convention: every (question,
rollout, position) cell is multiplied by its question weight and the result is
averaged over all cells of the batch.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .advantage import grpo_advantages
from .dist_core import ParameterError
from .env import RolloutGroup, Task, generate_task
from .policy import (
    PolicyParams,
    build_cells,
    cell_student_logits,
    cell_teacher_logits,
    ema_update,
    init_params,
    sample_rollouts,
)
from .weighting import FrozenWeightTable, batch_weights, frozen_weight_table, hard_filter_weight

log = logging.getLogger(__name__)

METHODS = ("grpo", "grpo_no_norm", "sdpo", "sdpo_paced", "sdpo_hard_filter", "sc_sdpo")
DISTILL_METHODS = ("sdpo", "sdpo_paced", "sdpo_hard_filter", "sc_sdpo")
PACED_ALPHA = 1.0
NUM_BINS = 9

# stream tags for np.random.SeedSequence([seed, tag, ...])
_ROLLOUT, _BATCH, _OFFLINE = 0, 1, 2


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient; ``dump`` describes the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TaskConfig:
    num_questions: int = 64
    vocab_size: int = 8
    seq_len: int = 2
    context_dim: int = 32
    difficulty: str = "uniform -1 3"
    seed: int = 0

    def build(self) -> Task:
        return generate_task(
            self.seed, self.num_questions, self.vocab_size, self.seq_len, self.context_dim, self.difficulty
        )


@dataclass(frozen=True)
class TrainConfig:
    method: str = "sc_sdpo"
    alpha: float = 0.5
    divergence: str = "jsd"
    top_k: int = 100
    group_size: int = 8
    batch_size: int = 32
    steps: int = 200
    # large-model runs use ~1e-5; the toy linear policy needs a much larger step
    learning_rate: float = 5e-2
    grad_clip_norm: float = 1.0
    ema_rate: float = 0.05
    hard_filter_bounds: tuple[float, float] = (0.2, 0.8)
    exclude_zero_pass: bool = False
    seed: int = 0
    feedback_gain: float = 3.0
    weight_decay: float = 0.01
    warmup_steps: int = 10
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    temperature: float = 1.0
    # diagnostics and evaluation sample colder than training
    eval_temperature: float = 0.6
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")
        kernels.divergence_code(self.divergence)
        if not self.alpha > 0:
            raise ParameterError("alpha must be > 0")
        if not 0 < self.ema_rate <= 1:
            raise ParameterError("ema_rate must lie in (0, 1]")
        if self.top_k < 1:
            raise ParameterError("top_k must be >= 1")
        if self.group_size < 2:
            raise ParameterError("group_size must be >= 2")
        if self.batch_size < 1 or self.steps < 0:
            raise ParameterError("batch_size must be >= 1 and steps >= 0")
        if self.batch_size > self.task.num_questions:
            raise ParameterError("batch_size exceeds the number of questions")
        lo, hi = self.hard_filter_bounds
        if not 0 <= lo <= hi <= 1:
            raise ParameterError("hard_filter_bounds must satisfy 0 <= lo <= hi <= 1")
        if not (self.learning_rate > 0 and self.grad_clip_norm > 0 and self.temperature > 0 and self.eval_temperature > 0):
            raise ParameterError("learning_rate, grad_clip_norm and temperatures must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """Build from a JSON-style dict; unknown keys raise ``KeyError``."""
        data = dict(data)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise KeyError(sorted(unknown)[0])
        task = data.pop("task", {}) or {}
        task_names = {f.name for f in fields(TaskConfig)}
        bad_task = set(task) - task_names
        if bad_task:
            raise KeyError(sorted(bad_task)[0])
        for key in ("hard_filter_bounds", "adam_betas"):
            if key in data:
                data[key] = tuple(float(x) for x in data[key])
        return cls(task=TaskConfig(**task), **data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hard_filter_bounds"] = list(self.hard_filter_bounds)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_pass_rate: float
    bin_counts: tuple[int, ...]
    frac_mid_wide: float
    frac_mid_narrow: float
    grad_norm: float
    grad_norm_raw: float
    loss: float
    mean_weight: float
    active_questions: int

    def row(self) -> list:
        return [
            self.step,
            self.mean_pass_rate,
            *self.bin_counts,
            self.frac_mid_wide,
            self.frac_mid_narrow,
            self.grad_norm,
            self.grad_norm_raw,
            self.loss,
            self.mean_weight,
            self.active_questions,
        ]


METRICS_HEADER = (
    ["step", "mean_pass_rate"]
    + [f"bin_{i}" for i in range(NUM_BINS)]
    + ["frac_mid_wide", "frac_mid_narrow", "grad_norm", "grad_norm_raw", "loss", "mean_weight", "active_questions"]
)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def metrics_to_csv(metrics: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m in metrics:
        writer.writerow([_fmt(x) for x in m.row()])
    return buf.getvalue()


def write_metrics_csv(path, metrics: Sequence[StepMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_to_csv(metrics))


@dataclass(frozen=True, eq=False)
class LossResult:
    loss: float
    grad: np.ndarray
    group_weights: np.ndarray
    n_cells: int


@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass(frozen=True, eq=False)
class TrainState:
    params: PolicyParams
    opt: AdamState
    step: int = 0
    frozen_table: FrozenWeightTable | None = None


# --- weights -----------------------------------------------------------------


def group_pass_rates(groups: Sequence[RolloutGroup]) -> np.ndarray:
    return np.array([g.pass_rate.p_hat for g in groups], dtype=np.float64)


def method_weights(
    groups: Sequence[RolloutGroup], config: TrainConfig, frozen_table: FrozenWeightTable | None = None
) -> np.ndarray:
    """Per-question loss multipliers for the distillation methods."""
    p = group_pass_rates(groups)
    if config.method == "sc_sdpo":
        return batch_weights(p, config.alpha).normalized
    if config.method == "sdpo_hard_filter":
        lo, hi = config.hard_filter_bounds
        return np.array([hard_filter_weight(x, lo, hi) for x in p])
    if config.method == "sdpo_paced":
        if frozen_table is None:
            raise ParameterError("sdpo_paced needs a frozen weight table")
        return np.array([frozen_table[g.question_id] for g in groups])
    return np.ones(len(groups))


# --- losses ------------------------------------------------------------------


def _check_on_policy(groups: Sequence[RolloutGroup], step: int | None) -> None:
    if step is None:
        return
    stale = [g.question_id for g in groups if g.step != step]
    if stale:
        raise ParameterError(f"groups for questions {stale} were not sampled at step {step}")


def distillation_loss(
    groups: Sequence[RolloutGroup],
    params: PolicyParams,
    task: Task,
    config: TrainConfig,
    group_weights: Sequence[float],
    W: np.ndarray | None = None,
) -> LossResult:
    """Weighted mean over cells of D(student || stop-grad teacher) on top-K buckets.

    ``W`` overrides the student weights (the teacher always uses ``params``),
    which is what finite-difference checks perturb.
    """
    W = params.W if W is None else W
    weights = np.asarray(group_weights, dtype=np.float64)
    keep = np.ones(len(groups), dtype=bool)
    if config.exclude_zero_pass:
        keep = group_pass_rates(groups) > 0
    kept = [g for g, k in zip(groups, keep) if k]
    cells = build_cells(task, kept)
    if cells.size == 0:
        return LossResult(0.0, np.zeros_like(W), weights, 0)
    cell_w = weights[keep][cells.group_index]
    div, dz = kernels.distill_cells(
        cell_student_logits(W, cells),
        cell_teacher_logits(params, cells),
        config.top_k,
        kernels.divergence_code(config.divergence),
    )
    n = cells.size
    loss = float(np.dot(cell_w, div) / n)
    grad = (dz * (cell_w / n)[:, None]).T @ cells.phi
    return LossResult(loss, grad, weights, n)


def sc_sdpo_loss(groups, params, task, config, step: int | None = None) -> LossResult:
    _check_on_policy(groups, step)
    w = batch_weights(group_pass_rates(groups), config.alpha).normalized
    if not np.any(w):
        log.info("empty active set: zero loss and zero gradient")
    return distillation_loss(groups, params, task, config, w)


def sdpo_loss(groups, params, task, config, step: int | None = None) -> LossResult:
    _check_on_policy(groups, step)
    return distillation_loss(groups, params, task, config, np.ones(len(groups)))


def grpo_loss(groups, params, task, config, step: int | None = None, W: np.ndarray | None = None) -> LossResult:
    """-mean over cells of A_i log pi(y_t); centered-only advantages for grpo_no_norm."""
    _check_on_policy(groups, step)
    W = params.W if W is None else W
    normalize = config.method != "grpo_no_norm"
    adv = [grpo_advantages(g.rewards, normalize_std=normalize).values for g in groups]
    cells = build_cells(task, groups)
    if cells.size == 0:
        return LossResult(0.0, np.zeros_like(W), np.ones(len(groups)), 0)
    cell_adv = np.array([adv[j][i] for j, i in zip(cells.group_index, cells.rollout_index)])
    per_cell, dz = kernels.policy_gradient_cells(cell_student_logits(W, cells), cells.sampled_tokens, cell_adv)
    n = cells.size
    return LossResult(float(per_cell.sum() / n), (dz / n).T @ cells.phi, np.ones(len(groups)), n)


def compute_loss(groups, state: TrainState, task: Task, config: TrainConfig) -> LossResult:
    _check_on_policy(groups, state.step)
    if config.method in ("grpo", "grpo_no_norm"):
        return grpo_loss(groups, state.params, task, config)
    weights = method_weights(groups, config, state.frozen_table)
    return distillation_loss(groups, state.params, task, config, weights)


# --- optimizer ---------------------------------------------------------------


def clip_grad(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def adamw_step(W: np.ndarray, grad: np.ndarray, opt: AdamState, config: TrainConfig) -> tuple[np.ndarray, AdamState]:
    """AdamW with bias correction, decoupled weight decay and linear warmup."""
    b1, b2 = config.adam_betas
    t = opt.t + 1
    m = b1 * opt.m + (1.0 - b1) * grad
    v = b2 * opt.v + (1.0 - b2) * grad * grad
    lr = config.learning_rate * min(1.0, t / config.warmup_steps) if config.warmup_steps > 0 else config.learning_rate
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    W_new = W - lr * (m_hat / (np.sqrt(v_hat) + config.adam_eps) + config.weight_decay * W)
    return W_new, AdamState(m, v, t)


# --- loop --------------------------------------------------------------------


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def select_questions(config: TrainConfig, step: int) -> np.ndarray:
    return _rng(config.seed, _BATCH, step).choice(config.task.num_questions, config.batch_size, replace=False)


def sample_batch(state: TrainState, task: Task, config: TrainConfig) -> list[RolloutGroup]:
    return [
        sample_rollouts(
            state.params,
            task,
            task[int(q)],
            config.group_size,
            _rng(config.seed, _ROLLOUT, state.step, int(q)),
            temperature=config.temperature,
            step=state.step,
        )
        for q in select_questions(config, state.step)
    ]


def offline_pass_rates(params: PolicyParams, task: Task, config: TrainConfig) -> dict[int, float]:
    """One rollout group per question from ``params``, before training."""
    out = {}
    for q in task.questions:
        g = sample_rollouts(params, task, q, config.group_size, _rng(config.seed, _OFFLINE, q.id), config.temperature)
        out[q.id] = g.pass_rate.p_hat
    return out


def init_state(task: Task, config: TrainConfig) -> TrainState:
    params = init_params(task, feedback_gain=config.feedback_gain, ema_rate=config.ema_rate)
    opt = AdamState(np.zeros_like(params.W), np.zeros_like(params.W))
    table = None
    if config.method == "sdpo_paced":
        table = frozen_weight_table(offline_pass_rates(params, task, config), PACED_ALPHA)
    return TrainState(params=params, opt=opt, step=0, frozen_table=table)


def batch_metrics(step: int, groups, result: LossResult, grad_norm: float, raw_norm: float, group_size: int):
    p = group_pass_rates(groups)
    bins = np.rint(p * (NUM_BINS - 1)).astype(int)
    counts = np.bincount(bins, minlength=NUM_BINS)
    M = len(groups)
    return StepMetrics(
        step=step,
        mean_pass_rate=float(p.mean()),
        bin_counts=tuple(int(c) for c in counts),
        frac_mid_wide=float(counts[1:8].sum() / M),
        frac_mid_narrow=float(counts[2:7].sum() / M),
        grad_norm=grad_norm,
        grad_norm_raw=raw_norm,
        loss=result.loss,
        mean_weight=float(np.mean(result.group_weights)),
        active_questions=int(np.count_nonzero(result.group_weights)),
    )


def train_step(state: TrainState, task: Task, config: TrainConfig) -> tuple[TrainState, StepMetrics]:
    groups = sample_batch(state, task, config)
    result = compute_loss(groups, state, task, config)
    if not (math.isfinite(result.loss) and np.all(np.isfinite(result.grad))):
        raise TrainingAbort(
            f"non-finite loss/gradient at step {state.step}",
            {
                "step": state.step,
                "loss": result.loss,
                "question_ids": [g.question_id for g in groups],
                "pass_rates": group_pass_rates(groups).tolist(),
                "tokens": [g.tokens.tolist() for g in groups],
                "group_weights": result.group_weights.tolist(),
            },
        )
    grad, raw_norm = clip_grad(result.grad, config.grad_clip_norm)
    clipped_norm = float(np.linalg.norm(grad))
    params, opt = state.params, state.opt
    if np.any(grad):
        W, opt = adamw_step(params.W, grad, opt, config)
        params = ema_update(replace(params, W=W))
    # an all-zero gradient (degenerate batch) leaves every parameter untouched
    metrics = batch_metrics(state.step, groups, result, clipped_norm, raw_norm, config.group_size)
    return replace(state, params=params, opt=opt, step=state.step + 1), metrics


def run_training(
    config: TrainConfig,
    task: Task | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
) -> tuple[list[StepMetrics], TrainState]:
    task = config.task.build() if task is None else task
    state = init_state(task, config)
    history = []
    for _ in range(config.steps):
        state, metrics = train_step(state, task, config)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
    return history, state
