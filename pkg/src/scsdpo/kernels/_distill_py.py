"""Pure numpy implementation of the per-token distillation kernels.

Every function works on a batch of N cells (one cell = one rollout position)
with logits of shape (N, V).
"""
from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12
KL, JSD = 0, 1


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _xlogy_ratio(a, b):
    # a * log(a / b) with floors, 0 where a == 0
    out = a * (np.log(np.maximum(a, LOG_FLOOR)) - np.log(np.maximum(b, LOG_FLOOR)))
    return np.where(a > 0, out, 0.0)


def distill_cells(student_logits, teacher_logits, top_k: int, divergence: int):
    """Truncated divergence per cell and its gradient w.r.t. the student logits.

    The top-K set is chosen from the student (ties to the lower token id);
    the teacher is gathered on the same set and both get a tail bucket.
    Returns ``(div, grad)`` with shapes (N,) and (N, V).
    """
    zs = np.ascontiguousarray(student_logits, dtype=np.float64)
    zt = np.ascontiguousarray(teacher_logits, dtype=np.float64)
    n, v = zs.shape
    k = min(int(top_k), v)
    s = softmax_rows(zs)
    t = softmax_rows(zt)
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    in_top = np.zeros((n, v), dtype=bool)
    np.put_along_axis(in_top, order, True, axis=1)
    s_tail = np.where(in_top, 0.0, s).sum(axis=1)
    t_tail = np.where(in_top, 0.0, t).sum(axis=1)
    # per-vocab bucket masses: own bucket in the top set, the tail otherwise
    sb = np.where(in_top, s, s_tail[:, None])
    tb = np.where(in_top, t, t_tail[:, None])
    if divergence == KL:
        top_terms = np.where(in_top, _xlogy_ratio(s, t), 0.0).sum(axis=1)
        div = top_terms + _xlogy_ratio(s_tail, t_tail)
        a = np.log(np.maximum(sb, LOG_FLOOR)) - np.log(np.maximum(tb, LOG_FLOOR))
    elif divergence == JSD:
        m = 0.5 * (s + t)
        m_tail = 0.5 * (s_tail + t_tail)
        cell = 0.5 * _xlogy_ratio(s, m) + 0.5 * _xlogy_ratio(t, m)
        top_terms = np.where(in_top, cell, 0.0).sum(axis=1)
        div = top_terms + 0.5 * _xlogy_ratio(s_tail, m_tail) + 0.5 * _xlogy_ratio(t_tail, m_tail)
        a = 0.5 * (np.log(np.maximum(sb, LOG_FLOOR)) - np.log(np.maximum(0.5 * (sb + tb), LOG_FLOOR)))
    else:
        raise ValueError(f"unknown divergence code {divergence!r}")
    grad = s * (a - (s * a).sum(axis=1, keepdims=True))
    return div, grad


def policy_gradient_cells(logits, tokens, advantages):
    """-A * log pi(token) per cell and its gradient w.r.t. the logits."""
    z = np.ascontiguousarray(logits, dtype=np.float64)
    tok = np.asarray(tokens, dtype=np.int64)
    adv = np.asarray(advantages, dtype=np.float64)
    s = softmax_rows(z)
    rows = np.arange(z.shape[0])
    zmax = z.max(axis=1)
    logp = z[rows, tok] - zmax - np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    grad = s * adv[:, None]
    grad[rows, tok] -= adv
    return -adv * logp, grad
