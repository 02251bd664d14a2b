"""Synthetic exact-match task with per-question difficulty.

Each question has a random context vector, a random answer of L tokens over a
vocabulary of V, and a difficulty bias that the policy adds to the logit of the
correct token (larger bias = easier question).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dist_core import ParameterError
from .weighting import PassRateEstimate, pass_rate

DEFAULT_DIFFICULTY = "uniform -1 3"


@dataclass(frozen=True, eq=False)
class Question:
    id: int
    context: np.ndarray
    answer: tuple[int, ...]
    difficulty_bias: float


@dataclass(frozen=True)
class Rollout:
    question_id: int
    tokens: tuple[int, ...]
    reward: int


@dataclass(frozen=True, eq=False)
class RolloutGroup:
    question_id: int
    rollouts: tuple[Rollout, ...]
    pass_rate: PassRateEstimate
    step: int = -1

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([r.tokens for r in self.rollouts], dtype=np.int64)


@dataclass(frozen=True)
class Feedback:
    question_id: int
    answer_tokens: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class Task:
    questions: tuple[Question, ...]
    vocab_size: int
    seq_len: int
    context_dim: int
    seed: int = 0
    difficulty_spec: str = DEFAULT_DIFFICULTY

    def __len__(self):
        return len(self.questions)

    def __getitem__(self, qid: int) -> Question:
        return self.questions[qid]

    def to_json(self, path: str | os.PathLike) -> None:
        payload = {
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "context_dim": self.context_dim,
            "seed": self.seed,
            "difficulty_spec": self.difficulty_spec,
            "questions": [
                {
                    "id": q.id,
                    "context": q.context.tolist(),
                    "answer": list(q.answer),
                    "difficulty_bias": q.difficulty_bias,
                }
                for q in self.questions
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "Task":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        questions = tuple(
            Question(
                id=int(q["id"]),
                context=np.asarray(q["context"], dtype=np.float64),
                answer=tuple(int(a) for a in q["answer"]),
                difficulty_bias=float(q["difficulty_bias"]),
            )
            for q in d["questions"]
        )
        return cls(
            questions=questions,
            vocab_size=int(d["vocab_size"]),
            seq_len=int(d["seq_len"]),
            context_dim=int(d["context_dim"]),
            seed=int(d.get("seed", 0)),
            difficulty_spec=d.get("difficulty_spec", DEFAULT_DIFFICULTY),
        )


def parse_difficulty(spec: str) -> tuple[str, tuple[float, ...]]:
    """``"uniform LO HI"`` or ``"constant B"``."""
    parts = str(spec).split()
    try:
        kind, args = parts[0], tuple(float(x) for x in parts[1:])
    except (IndexError, ValueError):
        raise ParameterError(f"bad difficulty spec {spec!r}") from None
    if (kind, len(args)) not in {("uniform", 2), ("constant", 1)}:
        raise ParameterError(f"bad difficulty spec {spec!r}")
    if kind == "uniform" and args[0] > args[1]:
        raise ParameterError(f"uniform bounds out of order in {spec!r}")
    return kind, args


def generate_task(
    seed: int,
    num_questions: int = 64,
    vocab_size: int = 8,
    seq_len: int = 2,
    context_dim: int = 32,
    difficulty_spec: str = DEFAULT_DIFFICULTY,
) -> Task:
    if vocab_size < 2 or seq_len < 1 or num_questions < 1 or context_dim < 1:
        raise ParameterError("need vocab_size >= 2, seq_len >= 1, num_questions >= 1, context_dim >= 1")
    kind, args = parse_difficulty(difficulty_spec)
    rng = np.random.default_rng(seed)
    contexts = rng.standard_normal((num_questions, context_dim))
    # unit-norm contexts: spherical and scale-free
    contexts /= np.linalg.norm(contexts, axis=1, keepdims=True)
    answers = rng.integers(0, vocab_size, size=(num_questions, seq_len))
    if kind == "uniform":
        biases = rng.uniform(args[0], args[1], size=num_questions)
    else:
        biases = np.full(num_questions, args[0])
    questions = tuple(
        Question(id=j, context=contexts[j], answer=tuple(int(a) for a in answers[j]), difficulty_bias=float(biases[j]))
        for j in range(num_questions)
    )
    return Task(questions, vocab_size, seq_len, context_dim, seed=seed, difficulty_spec=difficulty_spec)


def evaluate(question: Question, tokens: Sequence[int]) -> int:
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) != len(question.answer):
        raise ParameterError(f"expected {len(question.answer)} tokens, got {len(tokens)}")
    return int(tokens == question.answer)


def render_feedback(question: Question) -> Feedback:
    return Feedback(question_id=question.id, answer_tokens=question.answer)


def make_group(question: Question, token_rows: np.ndarray, step: int = -1) -> RolloutGroup:
    rollouts = tuple(
        Rollout(question.id, tuple(int(t) for t in row), evaluate(question, row)) for row in token_rows
    )
    return RolloutGroup(question.id, rollouts, pass_rate([r.reward for r in rollouts]), step)
