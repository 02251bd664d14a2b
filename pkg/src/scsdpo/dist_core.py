"""Probability vectors, divergences and top-K + tail truncation.

A truncated distribution keeps K named token ids and lumps the rest of the
vocabulary into one tail bucket. Divergences treat the tail as an ordinary
outcome, so KL/JSD on a truncated pair is a divergence over K + 1 outcomes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

SUM_TOL = 1e-9
LOG_FLOOR = 1e-12


class InvalidDistributionError(ValueError):
    pass


class SupportMismatchError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbVector:
    mass: np.ndarray

    def __post_init__(self):
        mass = np.array(self.mass, dtype=np.float64)
        mass.setflags(write=False)
        if mass.ndim != 1 or mass.size == 0:
            raise InvalidDistributionError("mass must be a non-empty 1-d array")
        if not np.all(np.isfinite(mass)) or np.any(mass < 0):
            raise InvalidDistributionError("mass entries must be finite and >= 0")
        if abs(mass.sum() - 1.0) > SUM_TOL:
            raise InvalidDistributionError(f"mass sums to {mass.sum()!r}, not 1")
        object.__setattr__(self, "mass", mass)

    def __len__(self):
        return self.mass.size

    def outcomes(self) -> np.ndarray:
        return self.mass


@dataclass(frozen=True, eq=False)
class TruncatedDist:
    indices: np.ndarray
    bucket_mass: np.ndarray
    tail_mass: float

    def __post_init__(self):
        indices = np.array(self.indices, dtype=np.int64)
        buckets = np.array(self.bucket_mass, dtype=np.float64)
        indices.setflags(write=False)
        buckets.setflags(write=False)
        tail = float(self.tail_mass)
        if indices.ndim != 1 or indices.shape != buckets.shape:
            raise InvalidDistributionError("indices and bucket_mass must be matching 1-d arrays")
        if np.unique(indices).size != indices.size:
            raise InvalidDistributionError("indices must be distinct")
        if np.any(buckets < 0) or tail < 0:
            raise InvalidDistributionError("bucket and tail masses must be >= 0")
        if abs(buckets.sum() + tail - 1.0) > SUM_TOL:
            raise InvalidDistributionError("buckets + tail must sum to 1")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "bucket_mass", buckets)
        object.__setattr__(self, "tail_mass", tail)

    @property
    def k(self) -> int:
        return self.indices.size

    def outcomes(self) -> np.ndarray:
        """Bucket masses followed by the tail mass (K + 1 outcomes)."""
        return np.append(self.bucket_mass, self.tail_mass)


Dist = Union[ProbVector, TruncatedDist]


def normalize(raw: Sequence[float]) -> ProbVector:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDistributionError("expected a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidDistributionError("entries must be finite and non-negative")
    total = arr.sum()
    if total <= 0:
        raise InvalidDistributionError("at least one entry must be positive")
    return ProbVector(arr / total)


def _paired_outcomes(p: Dist, q: Dist) -> tuple[np.ndarray, np.ndarray]:
    if type(p) is not type(q):
        raise ParameterError("p and q must both be ProbVector or both TruncatedDist")
    if isinstance(p, TruncatedDist) and not np.array_equal(p.indices, q.indices):
        raise ParameterError("truncated distributions must share the same index set")
    a, b = p.outcomes(), q.outcomes()
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _kl_terms(a: np.ndarray, b: np.ndarray) -> float:
    # 0 * log(0 / q) = 0
    nz = a > 0
    return float(np.sum(a[nz] * (np.log(a[nz]) - np.log(b[nz]))))


def kl_divergence(p: Dist, q: Dist) -> float:
    """KL(p || q) = sum_y p(y) log(p(y) / q(y))."""
    a, b = _paired_outcomes(p, q)
    if np.any((a > 0) & (b <= 0)):
        raise SupportMismatchError("q has zero mass where p has positive mass")
    return max(_kl_terms(a, b), 0.0)


def jsd(p: Dist, q: Dist) -> float:
    """Jensen-Shannon divergence with natural log, bounded by ln 2."""
    a, b = _paired_outcomes(p, q)
    m = 0.5 * (a + b)
    value = 0.5 * _kl_terms(a, m) + 0.5 * _kl_terms(b, m)
    return min(max(value, 0.0), float(np.log(2.0)))


def top_k_indices(mass: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -mass: equal masses keep ascending token id order
    return np.argsort(-np.asarray(mass), kind="stable")[:k]


def truncate_top_k(p: ProbVector, k: int) -> TruncatedDist:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= len(p):
        raise ParameterError(f"k must be an integer in [1, {len(p)}], got {k!r}")
    idx = top_k_indices(p.mass, int(k))
    return _gather(p.mass, idx)


def project_onto(p: ProbVector, template: TruncatedDist) -> TruncatedDist:
    """Gather p on the template's index set; everything else goes to the tail."""
    if template.indices.size and (template.indices.min() < 0 or template.indices.max() >= len(p)):
        raise ParameterError("template indices out of range for p")
    return _gather(p.mass, template.indices)


def _gather(mass: np.ndarray, idx: np.ndarray) -> TruncatedDist:
    outside = np.ones(mass.size, dtype=bool)
    outside[idx] = False
    return TruncatedDist(indices=idx, bucket_mass=mass[idx], tail_mass=float(mass[outside].sum()))
