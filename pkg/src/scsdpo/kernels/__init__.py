"""Hot per-token kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is selected at import. ``use_backend`` switches explicitly (tests and
the benchmark compare the two).
"""
from __future__ import annotations

from . import _distill_py

try:
    from . import _distill as _compiled
except ImportError:  # extension not built
    _compiled = None

KL, JSD = 0, 1
DIVERGENCES = {"kl": KL, "jsd": JSD}

_impl = _compiled if _compiled is not None else _distill_py


def compiled_available() -> bool:
    return _compiled is not None


def backend() -> str:
    return "compiled" if _impl is _compiled else "python"


def use_backend(name: str) -> None:
    global _impl
    if name == "python":
        _impl = _distill_py
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


def divergence_code(name: str) -> int:
    try:
        return DIVERGENCES[name]
    except KeyError:
        raise ValueError(f"divergence must be one of {sorted(DIVERGENCES)}, got {name!r}") from None


def distill_cells(student_logits, teacher_logits, top_k: int, divergence: int):
    return _impl.distill_cells(student_logits, teacher_logits, top_k, divergence)


def policy_gradient_cells(logits, tokens, advantages):
    return _impl.policy_gradient_cells(logits, tokens, advantages)


softmax_rows = _distill_py.softmax_rows
