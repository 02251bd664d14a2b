"""Group-relative (GRPO) and per-token self-distillation advantages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dist_core import LOG_FLOOR, ParameterError, TruncatedDist


@dataclass(frozen=True, eq=False)
class GroupAdvantages:
    values: np.ndarray
    pass_rate: float
    degenerate: bool


@dataclass(frozen=True, eq=False)
class TokenAdvantage:
    """One advantage per outcome bucket: K named tokens then the tail."""

    per_token: np.ndarray


def _binary_rewards(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1:
        raise ParameterError("rewards must be 1-d")
    if r.size < 2:
        raise ParameterError(f"group size must be >= 2, got {r.size}")
    if not np.all((r == 0) | (r == 1)):
        raise ParameterError("rewards must be binary")
    return r


def grpo_advantages(rewards: Sequence[float], normalize_std: bool = True) -> GroupAdvantages:
    """(r_i - mean) / population std. All-equal groups give zeros.

    With ``normalize_std=False`` the advantages are the centered rewards only
    (the no-normalization GRPO baseline).
    """
    r = _binary_rewards(rewards)
    mean = r.mean()
    centered = r - mean
    std = float(np.sqrt(np.mean(centered**2)))
    if std == 0.0:
        return GroupAdvantages(np.zeros_like(r), float(mean), True)
    values = centered / std if normalize_std else centered
    return GroupAdvantages(values, float(mean), False)


def grpo_total_magnitude(rewards: Sequence[float]) -> float:
    return float(np.abs(grpo_advantages(rewards).values).sum())


def magnitude_closed_form(group_size: int, successes: int) -> float:
    p = successes / group_size
    return 2.0 * group_size * float(np.sqrt(p * (1.0 - p)))


def _shared(student: TruncatedDist, teacher: TruncatedDist) -> tuple[np.ndarray, np.ndarray]:
    if not np.array_equal(student.indices, teacher.indices):
        raise ParameterError("student and teacher must share the same index set")
    return student.outcomes(), teacher.outcomes()


def sdpo_token_advantage(student: TruncatedDist, teacher: TruncatedDist) -> TokenAdvantage:
    """log(teacher / student) per bucket, both sides floored before the log."""
    s, t = _shared(student, teacher)
    return TokenAdvantage(np.log(np.maximum(t, LOG_FLOOR)) - np.log(np.maximum(s, LOG_FLOOR)))


def jsd_token_advantage(student: TruncatedDist, teacher: TruncatedDist) -> TokenAdvantage:
    """0.5 * log(student / M) with M the mixture; 0 where both sides are 0."""
    s, t = _shared(student, teacher)
    m = 0.5 * (s + t)
    adv = 0.5 * (np.log(np.maximum(s, LOG_FLOOR)) - np.log(np.maximum(m, LOG_FLOOR)))
    adv[(s == 0) & (t == 0)] = 0.0
    return TokenAdvantage(adv)
