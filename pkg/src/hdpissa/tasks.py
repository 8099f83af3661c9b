"""Seeded teacher-student tasks with a controllable-rank target update.

The student starts at ``W_base``; the teacher is ``W_base + delta`` where
``delta`` has exact rank ``target_rank`` and top singular value 1. ``W_base``
has a 1/k singular spectrum so its principal components are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import orthonormal_columns
from .rng import Rng

KINDS = ("linear", "mlp")


def _random_orthonormal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    return orthonormal_columns(rng.normal((rows, cols)))


def decaying_matrix(rng: Rng, m: int, n: int) -> np.ndarray:
    d = min(m, n)
    u = _random_orthonormal(rng.derive("u"), m, d)
    v = _random_orthonormal(rng.derive("v"), n, d)
    s = 1.0 / np.arange(1, d + 1)
    return (u * s) @ v.T


def low_rank_matrix(rng: Rng, m: int, n: int, rank: int) -> np.ndarray:
    """Random rank-``rank`` matrix with spectrum drawn from [0.5, 1], top value 1."""
    if rank == 0:
        return np.zeros((m, n))
    u = _random_orthonormal(rng.derive("u"), m, rank)
    v = _random_orthonormal(rng.derive("v"), n, rank)
    s = np.sort(rng.derive("s").uniform((rank,), 0.5, 1.0))[::-1]
    s = s / s[0]
    return (u * s) @ v.T


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "linear"
    input_dim: int = 64
    output_dim: int = 64
    target_rank: int = 32
    noise_std: float = 0.0
    seed: int = 0
    hidden_dim: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_dim < 1:
            raise InvalidInputError("task dimensions must be positive")
        if self.noise_std < 0:
            raise InvalidInputError(f"noise_std must be >= 0, got {self.noise_std}")
        lim = min(d for pair in self.layer_dims for d in pair)
        if not 0 <= self.target_rank <= lim:
            raise InvalidInputError(f"target_rank {self.target_rank} outside [0, {lim}]")
        rng = Rng(self.seed).derive("task")
        base, teacher = [], []
        for k, (m, n) in enumerate(self.layer_dims):
            w0 = decaying_matrix(rng.derive("base", k), m, n)
            delta = low_rank_matrix(rng.derive("delta", k), m, n, self.target_rank)
            base.append(w0)
            teacher.append(w0 + delta)
        object.__setattr__(self, "_base", tuple(base))
        object.__setattr__(self, "_teacher", tuple(teacher))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        if self.kind == "linear":
            return [(self.input_dim, self.output_dim)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.output_dim)]

    @property
    def activation(self) -> str:
        return "none" if self.kind == "linear" else "tanh"

    @property
    def loss(self) -> str:
        return "mse" if self.kind == "linear" else "xent"

    def base_weights(self) -> list[np.ndarray]:
        return [w.copy() for w in self._base]

    def teacher_weights(self) -> list[np.ndarray]:
        return [w.copy() for w in self._teacher]

    def target_delta(self, layer: int = 0) -> np.ndarray:
        return self._teacher[layer] - self._base[layer]

    def _targets(self, x: np.ndarray, rng: Rng) -> np.ndarray:
        if self.kind == "linear":
            t = x @ self._teacher[0]
            if self.noise_std > 0:
                t = t + self.noise_std * rng.derive("noise").normal(t.shape)
            return t
        logits = np.tanh(x @ self._teacher[0]) @ self._teacher[1]
        if self.noise_std > 0:
            logits = logits + self.noise_std * rng.derive("noise").normal(logits.shape)
        return np.eye(self.output_dim)[np.argmax(logits, axis=1)]

    def next_batch(self, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return next_batch(self, step, batch_size)

    def eval_batch(self, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Held-out batch drawn from a stream disjoint from training steps."""
        rng = Rng(self.seed).derive("eval")
        x = rng.derive("x").normal((batch_size, self.input_dim))
        return x, self._targets(x, rng)


def gen_linear_task(input_dim: int, output_dim: int, target_rank: int, noise_std: float = 0.0, seed: int = 0) -> SyntheticTask:
    return SyntheticTask("linear", input_dim, output_dim, target_rank, noise_std, seed)


def gen_mlp_task(input_dim: int, hidden_dim: int, classes: int, target_rank: int, noise_std: float = 0.0, seed: int = 0) -> SyntheticTask:
    return SyntheticTask("mlp", input_dim, classes, target_rank, noise_std, seed, hidden_dim)


def next_batch(task: SyntheticTask, step: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Batch ``step`` of the task's stream; a pure function of (seed, step, batch_size)."""
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    rng = Rng(task.seed).derive("batch", step)
    x = rng.derive("x").normal((batch_size, task.input_dim))
    return x, task._targets(x, rng)
