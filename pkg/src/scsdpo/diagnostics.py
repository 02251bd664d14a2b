"""Plot-ready tables: learnability bounds and the
per-token divergence/advantage profile against pass rate."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .advantage import jsd_token_advantage, sdpo_token_advantage
from .dist_core import jsd, kl_divergence, normalize, project_onto, truncate_top_k
from .env import Task, render_feedback
from .learnability import (
    exact_kl_normalized,
    exact_kl_raw,
    leading_term_normalized,
    verify_expansion,
)
from .policy import PolicyParams, sample_rollouts, student_logits, teacher_logits
from .kernels import softmax_rows

BOUNDS_HEADER = ["p", "beta", "kl_raw", "kl_normalized", "leading_term", "residual"]
SLOPE_HEADER = ["p", "residual_slope"]
FLAT_METRICS = ("kl", "jsd", "adv_kl", "adv_jsd")
FLAT_HEADER = ["pass_rate", "n_questions", "n_rollouts"] + [f"{m}_{s}" for m in FLAT_METRICS for s in ("mean", "std")]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def bounds_rows(p_grid: Sequence[float], beta_grid: Sequence[float]) -> list[list[float]]:
    rows = []
    for p in p_grid:
        for beta in beta_grid:
            kl_n = exact_kl_normalized(p, beta)
            lead = leading_term_normalized(beta)
            rows.append([float(p), float(beta), exact_kl_raw(p, beta), kl_n, lead, kl_n - lead])
    return rows


def residual_slopes(p_grid: Sequence[float], fit_betas: Sequence[float]) -> list[list[float]]:
    return [[float(p), verify_expansion(p, fit_betas).slope] for p in p_grid]


def bounds_csv(p_grid, beta_grid) -> str:
    return _csv(BOUNDS_HEADER, bounds_rows(p_grid, beta_grid))


def slopes_csv(p_grid, fit_betas) -> str:
    return _csv(SLOPE_HEADER, residual_slopes(p_grid, fit_betas))


@dataclass(frozen=True)
class FlatBin:
    pass_rate: float
    n_questions: int
    n_rollouts: int
    means: dict
    stds: dict

    def row(self) -> list:
        vals = [self.pass_rate, self.n_questions, self.n_rollouts]
        for m in FLAT_METRICS:
            vals += [self.means[m], self.stds[m]]
        return vals


def rollout_token_metrics(params: PolicyParams, task: Task, question, tokens, top_k: int) -> dict:
    """Per-token KL, JSD and advantage magnitudes at the sampled tokens,
    averaged over the response positions of one rollout."""
    fb = render_feedback(question)
    acc = {m: 0.0 for m in FLAT_METRICS}
    k = min(top_k, task.vocab_size)
    for t in range(task.seq_len):
        prefix = list(tokens[:t])
        s = normalize(softmax_rows(student_logits(params, task, question, t, prefix)[None, :])[0])
        q = normalize(softmax_rows(teacher_logits(params, task, question, t, prefix, fb)[None, :])[0])
        ts = truncate_top_k(s, k)
        tt = project_onto(q, ts)
        hits = np.flatnonzero(ts.indices == tokens[t])
        bucket = int(hits[0]) if hits.size else ts.k  # tail bucket
        acc["kl"] += kl_divergence(ts, tt)
        acc["jsd"] += jsd(ts, tt)
        acc["adv_kl"] += abs(sdpo_token_advantage(ts, tt).per_token[bucket])
        acc["adv_jsd"] += abs(jsd_token_advantage(ts, tt).per_token[bucket])
    return {m: v / task.seq_len for m, v in acc.items()}


def flat_advantage_profile(
    params: PolicyParams,
    task: Task,
    n_rollouts: int = 16,
    top_k: int = 100,
    temperature: float = 0.6,
    seed: int = 0,
) -> list[FlatBin]:
    """Bin questions by pass rate over ``n_rollouts`` samples (pass rate 0 excluded)."""
    per_bin: dict[int, list[dict]] = {}
    questions_in_bin: dict[int, int] = {}
    for q in task.questions:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, q.id]))
        group = sample_rollouts(params, task, q, n_rollouts, rng, temperature=temperature)
        k = group.pass_rate.k
        if k == 0:
            continue
        questions_in_bin[k] = questions_in_bin.get(k, 0) + 1
        for r in group.rollouts:
            per_bin.setdefault(k, []).append(rollout_token_metrics(params, task, q, r.tokens, top_k))
    bins = []
    for k in sorted(per_bin):
        rows = per_bin[k]
        means = {m: float(np.mean([r[m] for r in rows])) for m in FLAT_METRICS}
        stds = {m: float(np.std([r[m] for r in rows])) for m in FLAT_METRICS}
        bins.append(FlatBin(k / n_rollouts, questions_in_bin[k], len(rows), means, stds))
    return bins


def flat_advantage_csv(bins: Sequence[FlatBin]) -> str:
    return _csv(FLAT_HEADER, [b.row() for b in bins])


def flatness_ratio(bins: Sequence[FlatBin], metric: str = "adv_jsd", min_questions: int = 5) -> float:
    """max / min of the per-bin mean over bins holding at least ``min_questions``."""
    vals = [b.means[metric] for b in bins if b.n_questions >= min_questions]
    if len(vals) < 2:
        return float("nan")
    if min(vals) == 0:
        return float("nan") if max(vals) == 0 else float("inf")
    return max(vals) / min(vals)
