"""Linear-softmax autoregressive policy with a feedback-conditioned teacher branch.

Logits at position t are ``W @ phi(x, t, y_<t) + bias * onehot(answer_t)``.
phi concatenates the question context, a one-hot of the position and a one-hot
of the previous token (all zeros at t = 0). The teacher evaluates the same
map with the EMA weights and adds ``feedback_gain`` to the feedback token.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .dist_core import ParameterError
from .env import Feedback, Question, RolloutGroup, Task, make_group
from .kernels import softmax_rows

DEFAULT_FEEDBACK_GAIN = 3.0
DEFAULT_EMA_RATE = 0.05


@dataclass(frozen=True, eq=False)
class PolicyParams:
    W: np.ndarray
    ema_W: np.ndarray
    feedback_gain: float = DEFAULT_FEEDBACK_GAIN
    ema_rate: float = DEFAULT_EMA_RATE

    def __post_init__(self):
        if self.W.shape != self.ema_W.shape:
            raise ParameterError("W and ema_W must share a shape")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.ema_W))):
            raise ParameterError("policy parameters must be finite")
        if self.feedback_gain < 0:
            raise ParameterError("feedback_gain must be >= 0")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ParameterError("ema_rate must lie in (0, 1]; 1 makes the teacher the live policy")

    @property
    def vocab_size(self) -> int:
        return self.W.shape[0]


def feature_dim(task: Task) -> int:
    return task.context_dim + task.seq_len + task.vocab_size


def init_params(
    task: Task,
    feedback_gain: float = DEFAULT_FEEDBACK_GAIN,
    ema_rate: float = DEFAULT_EMA_RATE,
    init_scale: float = 0.0,
    seed: int = 0,
) -> PolicyParams:
    shape = (task.vocab_size, feature_dim(task))
    if init_scale > 0:
        W = init_scale * np.random.default_rng(seed).standard_normal(shape)
    else:
        W = np.zeros(shape)
    return PolicyParams(W=W, ema_W=W.copy(), feedback_gain=float(feedback_gain), ema_rate=float(ema_rate))


def features(task: Task, contexts: np.ndarray, positions: np.ndarray, prev_tokens: np.ndarray) -> np.ndarray:
    """Batched feature map; ``prev_tokens`` is -1 where there is no previous token."""
    contexts = np.atleast_2d(contexts)
    positions = np.asarray(positions, dtype=np.int64)
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    n, d, L = contexts.shape[0], task.context_dim, task.seq_len
    phi = np.zeros((n, feature_dim(task)))
    phi[:, :d] = contexts
    rows = np.arange(n)
    phi[rows, d + positions] = 1.0
    has_prev = prev_tokens >= 0
    phi[rows[has_prev], d + L + prev_tokens[has_prev]] = 1.0
    return phi


def feature_vector(task: Task, question: Question, t: int, prefix: Sequence[int]) -> np.ndarray:
    if not 0 <= t < task.seq_len or len(prefix) != t:
        raise ParameterError(f"need 0 <= t < {task.seq_len} and len(prefix) == t")
    prev = prefix[-1] if t > 0 else -1
    return features(task, question.context[None, :], np.array([t]), np.array([prev]))[0]


def student_logits(params: PolicyParams, task: Task, question: Question, t: int, prefix: Sequence[int]) -> np.ndarray:
    z = params.W @ feature_vector(task, question, t, prefix)
    z[question.answer[t]] += question.difficulty_bias
    return z


def teacher_logits(
    params: PolicyParams, task: Task, question: Question, t: int, prefix: Sequence[int], feedback: Feedback
) -> np.ndarray:
    if feedback.question_id != question.id or tuple(feedback.answer_tokens) != tuple(question.answer):
        raise ParameterError("feedback does not belong to this question")
    z = params.ema_W @ feature_vector(task, question, t, prefix)
    z[question.answer[t]] += question.difficulty_bias
    z[feedback.answer_tokens[t]] += params.feedback_gain
    return z


def sample_rollouts(
    params: PolicyParams,
    task: Task,
    question: Question,
    group_size: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    step: int = -1,
) -> RolloutGroup:
    """Sample ``group_size`` sequences token by token from the student."""
    if group_size < 1:
        raise ParameterError("group_size must be >= 1")
    L = task.seq_len
    tokens = np.zeros((group_size, L), dtype=np.int64)
    contexts = np.broadcast_to(question.context, (group_size, task.context_dim))
    prev = np.full(group_size, -1, dtype=np.int64)
    for t in range(L):
        z = features(task, contexts, np.full(group_size, t), prev) @ params.W.T
        z[:, question.answer[t]] += question.difficulty_bias
        probs = softmax_rows(z / temperature)
        # inverse-CDF draw, one uniform per rollout
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(group_size) * cdf[:, -1]
        tokens[:, t] = np.minimum((cdf < u[:, None]).sum(axis=1), task.vocab_size - 1)
        prev = tokens[:, t]
    return make_group(question, tokens, step=step)


def sequence_log_prob(params: PolicyParams, task: Task, question: Question, tokens: Sequence[int]) -> float:
    total = 0.0
    for t in range(task.seq_len):
        z = student_logits(params, task, question, t, list(tokens[:t]))
        zmax = z.max()
        total += z[tokens[t]] - zmax - np.log(np.exp(z - zmax).sum())
    return float(total)


def ema_update(params: PolicyParams) -> PolicyParams:
    rho = params.ema_rate
    return replace(params, ema_W=(1.0 - rho) * params.ema_W + rho * params.W)


@dataclass(frozen=True, eq=False)
class CellBatch:
    """Flattened (question, rollout, position) cells of a batch of groups."""

    phi: np.ndarray
    answer_tokens: np.ndarray
    biases: np.ndarray
    sampled_tokens: np.ndarray
    group_index: np.ndarray
    rollout_index: np.ndarray

    @property
    def size(self) -> int:
        return self.phi.shape[0]


def build_cells(task: Task, groups: Sequence[RolloutGroup]) -> CellBatch:
    L = task.seq_len
    ctx, pos, prev, ans, bias, tok, gidx, ridx = [], [], [], [], [], [], [], []
    for j, group in enumerate(groups):
        q = task[group.question_id]
        toks = group.tokens
        n_roll = toks.shape[0]
        for t in range(L):
            ctx.append(np.broadcast_to(q.context, (n_roll, task.context_dim)))
            pos.append(np.full(n_roll, t))
            prev.append(toks[:, t - 1] if t > 0 else np.full(n_roll, -1))
            ans.append(np.full(n_roll, q.answer[t]))
            bias.append(np.full(n_roll, q.difficulty_bias))
            tok.append(toks[:, t])
            gidx.append(np.full(n_roll, j))
            ridx.append(np.arange(n_roll))
    if not ctx:
        empty = np.zeros(0, dtype=np.int64)
        return CellBatch(np.zeros((0, feature_dim(task))), empty, np.zeros(0), empty, empty, empty)
    cat = np.concatenate
    return CellBatch(
        phi=features(task, cat(ctx), cat(pos), cat(prev)),
        answer_tokens=cat(ans).astype(np.int64),
        biases=cat(bias).astype(np.float64),
        sampled_tokens=cat(tok).astype(np.int64),
        group_index=cat(gidx).astype(np.int64),
        rollout_index=cat(ridx).astype(np.int64),
    )


def cell_student_logits(W: np.ndarray, cells: CellBatch) -> np.ndarray:
    z = cells.phi @ W.T
    z[np.arange(cells.size), cells.answer_tokens] += cells.biases
    return z


def cell_teacher_logits(params: PolicyParams, cells: CellBatch) -> np.ndarray:
    # feedback token is the answer token at the same position
    z = cells.phi @ params.ema_W.T
    z[np.arange(cells.size), cells.answer_tokens] += cells.biases + params.feedback_gain
    return z


def save_checkpoint(path: str | os.PathLike, params: PolicyParams, step: int) -> None:
    payload = {
        "step": int(step),
        "feedback_gain": params.feedback_gain,
        "ema_rate": params.ema_rate,
        "W": params.W.tolist(),
        "ema_W": params.ema_W.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[PolicyParams, int]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    params = PolicyParams(
        W=np.asarray(d["W"], dtype=np.float64),
        ema_W=np.asarray(d["ema_W"], dtype=np.float64),
        feedback_gain=float(d["feedback_gain"]),
        ema_rate=float(d["ema_rate"]),
    )
    return params, int(d["step"])
