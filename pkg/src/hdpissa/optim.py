"""AdamW that returns deltas instead of applying them, and the direct weight update."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .adapters import AdapterPair
from .errors import InvalidInputError


@dataclass(frozen=True)
class AdamWState:
    m1: np.ndarray
    m2: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamWState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adamw_delta(grad, state: AdamWState, param=None, lr: float | None = None) -> tuple[np.ndarray, AdamWState]:
    """One AdamW step as an additive delta; the parameter itself is not touched.

    ``lr`` overrides ``state.lr`` (used by schedules). Decoupled weight decay
    needs ``param`` whenever ``state.weight_decay`` is nonzero.
    """
    grad = np.asarray(grad)
    if grad.shape != state.m1.shape:
        raise InvalidInputError(f"gradient shape {grad.shape} != optimizer state shape {state.m1.shape}")
    lr = state.lr if lr is None else lr
    dt = grad.dtype.type
    b1, b2 = dt(state.beta1), dt(state.beta2)
    t = state.t + 1
    m1 = b1 * state.m1 + (1 - b1) * grad
    m2 = b2 * state.m2 + (1 - b2) * (grad * grad)
    m1_hat = m1 / dt(1 - state.beta1**t)
    m2_hat = m2 / dt(1 - state.beta2**t)
    step = m1_hat / (np.sqrt(m2_hat) + dt(state.eps))
    if state.weight_decay:
        if param is None:
            raise InvalidInputError("weight decay requires the current parameter value")
        step = step + dt(state.weight_decay) * np.asarray(param)
    delta = -dt(lr) * step
    return delta, replace(state, m1=m1, m2=m2, t=t)


def lr_at(step: int, total: int, base_lr: float, schedule: str = "constant", warmup_ratio: float = 0.0) -> float:
    """Learning rate for 0-based ``step`` under linear warmup then constant/cosine."""
    warmup = int(math.ceil(warmup_ratio * total))
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        span = max(total - warmup, 1)
        progress = (step - warmup) / span
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise InvalidInputError(f"unknown schedule {schedule!r}")


def delta_update(pair: AdapterPair, da, db) -> np.ndarray:
    """Weight-space change ``da@b + a@db + da@db`` of one adapter step."""
    da, db = np.asarray(da), np.asarray(db)
    if da.shape != pair.a.shape or db.shape != pair.b.shape:
        raise InvalidInputError(
            f"delta shapes {da.shape}, {db.shape} do not match adapter {pair.a.shape}, {pair.b.shape}"
        )
    return da @ pair.b + pair.a @ db + da @ db


def aggregate(deltas) -> np.ndarray:
    """Device average, summed in index order."""
    deltas = list(deltas)
    if not deltas:
        raise InvalidInputError("cannot aggregate an empty list of updates")
    shape = deltas[0].shape
    total = np.zeros_like(deltas[0])
    for du in deltas:
        if du.shape != shape:
            raise InvalidInputError(f"update shapes differ: {du.shape} vs {shape}")
        total = total + du
    return total / total.dtype.type(len(deltas))
