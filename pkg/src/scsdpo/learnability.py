"""Two-point CGF learnability bounds for raw and standardized Bernoulli rewards.

For a zero-mean reward Z and KL temperature beta, the KL from the initial
policy to the tilted optimum is the CGF K_Z(1/beta) = log E[exp(Z / beta)].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

PRECISION_FLOOR = 1e-15
DEFAULT_BETAS = (10.0, 20.0, 40.0, 80.0)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class BernoulliReward:
    p: float
    beta: float

    def __post_init__(self):
        _check(self.p, self.beta)


def _check(p: float, beta: float | None = None) -> None:
    if not 0.0 < p < 1.0:
        raise DomainError(f"p must lie strictly inside (0, 1), got {p!r}")
    if beta is not None and not beta > 0:
        raise DomainError(f"beta must be > 0, got {beta!r}")


def _two_point_cgf(p: float, a: float, b: float) -> float:
    """log(p e^a + (1-p) e^b)."""
    if max(abs(a), abs(b)) < 1.0:
        # log1p/expm1 keeps relative precision when the CGF is tiny
        return math.log1p(p * math.expm1(a) + (1.0 - p) * math.expm1(b))
    return float(logsumexp([a, b], b=[p, 1.0 - p]))


def standardized_support(p: float) -> tuple[float, float]:
    """Values of (r - p) / sqrt(p(1-p)) on success and on failure."""
    _check(p)
    return math.sqrt((1.0 - p) / p), -math.sqrt(p / (1.0 - p))


def exact_kl_normalized(p: float, beta: float) -> float:
    _check(p, beta)
    v_s, v_f = standardized_support(p)
    return max(_two_point_cgf(p, v_s / beta, v_f / beta), 0.0)


def exact_kl_raw(p: float, beta: float) -> float:
    _check(p, beta)
    return max(_two_point_cgf(p, (1.0 - p) / beta, -p / beta), 0.0)


def leading_term_normalized(beta: float) -> float:
    if not beta > 0:
        raise DomainError(f"beta must be > 0, got {beta!r}")
    return 1.0 / (2.0 * beta**2)


def leading_term_raw(p: float, beta: float) -> float:
    _check(p, beta)
    return p * (1.0 - p) / (2.0 * beta**2)


@dataclass
class ExpansionReport:
    p: float
    betas: list[float]
    residuals: list[float]
    used: list[bool] = field(default_factory=list)
    slope: float = float("nan")


def verify_expansion(p: float, betas: Sequence[float] = DEFAULT_BETAS) -> ExpansionReport:
    """Fit log|KL - 1/(2 beta^2)| against log beta.

    The slope is about -3 when the third cumulant is nonzero and -4 at p = 0.5.
    Residuals below the precision floor are dropped from the fit.
    """
    betas = [float(b) for b in betas]
    if len(betas) < 4:
        raise DomainError("need at least 4 beta values")
    if min(betas) < 10:
        raise DomainError("beta grid must be >= 10")
    residuals = [exact_kl_normalized(p, b) - leading_term_normalized(b) for b in betas]
    used = [abs(r) >= PRECISION_FLOOR for r in residuals]
    report = ExpansionReport(p=p, betas=betas, residuals=residuals, used=used)
    xs = np.log([b for b, u in zip(betas, used) if u])
    ys = np.log([abs(r) for r, u in zip(residuals, used) if u])
    if xs.size >= 2:
        report.slope = float(np.polyfit(xs, ys, 1)[0])
    return report


def third_cumulant_standardized(p: float) -> float:
    _check(p)
    return (1.0 - 2.0 * p) / math.sqrt(p * (1.0 - p))


def fourth_cumulant_standardized(p: float) -> float:
    _check(p)
    return (1.0 - 6.0 * p * (1.0 - p)) / (p * (1.0 - p))


def series_kl_normalized(p: float, beta: float) -> float:
    """Cumulant series truncated after the fourth term."""
    t = 1.0 / beta
    return t**2 / 2 + third_cumulant_standardized(p) * t**3 / 6 + fourth_cumulant_standardized(p) * t**4 / 24
