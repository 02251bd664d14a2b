"""Question-level weights from on-policy pass rates.

raw weight      w_j  = [p_j (1 - p_j)] ** alpha
normalized      w̄_j = w_j / mean(w over active set), 0 outside it
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .dist_core import ParameterError


class ConfigurationError(KeyError):
    pass


@dataclass(frozen=True)
class PassRateEstimate:
    k: int
    g: int
    p_hat: float


@dataclass(frozen=True, eq=False)
class WeightVector:
    raw: np.ndarray
    normalized: np.ndarray
    active_set: np.ndarray
    alpha: float | None = None


def pass_rate(rewards: Sequence[float]) -> PassRateEstimate:
    r = np.asarray(rewards)
    if r.size == 0:
        raise ParameterError("empty rollout group")
    k = int(np.count_nonzero(r == 1))
    return PassRateEstimate(k=k, g=int(r.size), p_hat=k / r.size)


def raw_weight(p_hat, alpha: float):
    """Bernoulli variance of the pass rate raised to ``alpha``; vectorizes over p_hat."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be > 0, got {alpha!r}")
    p = np.asarray(p_hat, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ParameterError("p_hat must lie in [0, 1]")
    w = (p * (1.0 - p)) ** alpha
    return float(w) if w.ndim == 0 else w


def normalize_batch(raw: Sequence[float], alpha: float | None = None) -> WeightVector:
    w = np.asarray(raw, dtype=np.float64)
    if np.any(w < 0):
        raise ParameterError("raw weights must be non-negative")
    active = np.flatnonzero(w > 0)
    normalized = np.zeros_like(w)
    if active.size:
        normalized[active] = w[active] / w[active].mean()
    return WeightVector(raw=w, normalized=normalized, active_set=active, alpha=alpha)


def batch_weights(p_hats: Sequence[float], alpha: float) -> WeightVector:
    return normalize_batch(np.atleast_1d(raw_weight(np.asarray(p_hats, dtype=np.float64), alpha)), alpha)


def hard_filter_weight(p_hat: float, lo: float = 0.2, hi: float = 0.8) -> float:
    if not 0 <= lo <= hi <= 1:
        raise ParameterError("need 0 <= lo <= hi <= 1")
    return 1.0 if lo <= p_hat <= hi else 0.0


class FrozenWeightTable(Mapping):
    """Pass-rate weights computed once and normalized over the whole table."""

    def __init__(self, weights: Mapping[int, float]):
        self._weights = MappingProxyType({int(q): float(w) for q, w in weights.items()})

    def __getitem__(self, question_id):
        try:
            return self._weights[int(question_id)]
        except KeyError:
            raise ConfigurationError(f"question {question_id} missing from frozen weight table") from None

    def __iter__(self):
        return iter(self._weights)

    def __len__(self):
        return len(self._weights)

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({str(q): w for q, w in sorted(self._weights.items())}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "FrozenWeightTable":
        with open(path, encoding="utf-8") as fh:
            return cls({int(q): w for q, w in json.load(fh).items()})


def frozen_weight_table(initial_pass_rates: Mapping[int, float], alpha: float = 1.0) -> FrozenWeightTable:
    ids = sorted(initial_pass_rates)
    raw = np.atleast_1d(raw_weight(np.array([initial_pass_rates[q] for q in ids], dtype=np.float64), alpha))
    normed = normalize_batch(raw).normalized
    return FrozenWeightTable(dict(zip(ids, normed.tolist())))
