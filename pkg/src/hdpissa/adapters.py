"""LoRA, PiSSA and HD-PiSSA adapter construction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import SvdResult, as_matrix, svd, truncate
from .rng import Rng


@dataclass(frozen=True)
class AdapterPair:
    """One device's low-rank factors ``a`` (m x r) and ``b`` (r x n).

    ``component_lo:component_hi`` is the slice of singular components the
    pair was built from; for random (LoRA) pairs it is nominal.
    """

    a: np.ndarray
    b: np.ndarray
    device_index: int = 0
    devices: int = 1

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[1] != self.b.shape[0]:
            raise InvalidInputError(f"adapter shapes {self.a.shape} and {self.b.shape} do not chain")

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def component_lo(self) -> int:
        return self.device_index * self.rank

    @property
    def component_hi(self) -> int:
        return (self.device_index + 1) * self.rank

    def product(self) -> np.ndarray:
        return self.a @ self.b

    def replace(self, a=None, b=None) -> "AdapterPair":
        return AdapterPair(
            self.a if a is None else a,
            self.b if b is None else b,
            self.device_index,
            self.devices,
        )

    def astype(self, dtype) -> "AdapterPair":
        return self.replace(self.a.astype(dtype), self.b.astype(dtype))


def _check_rank(w: np.ndarray, rank: int, devices: int = 1):
    if devices < 1:
        raise InvalidInputError(f"devices must be >= 1, got {devices}")
    if rank < 1 or rank * devices > min(w.shape):
        raise InvalidInputError(
            f"rank {rank} x devices {devices} must lie in [1, {min(w.shape)}] for a {w.shape} weight"
        )


def init_lora(w, rank: int, seed: int, device_index: int = 0, devices: int = 1) -> AdapterPair:
    """Uniform fan-in ``a`` in [-sqrt(6/m), sqrt(6/m)], zero ``b``."""
    w = as_matrix(w, "w")
    _check_rank(w, rank)
    m, n = w.shape
    bound = math.sqrt(6.0 / m)
    a = Rng(seed).derive("lora", device_index).uniform((m, rank), -bound, bound)
    return AdapterPair(a, np.zeros((rank, n)), device_index, devices)


def init_pissa(w, rank: int, factors: SvdResult | None = None) -> tuple[AdapterPair, np.ndarray]:
    """Top-``rank`` principal adapter plus the residual weight ``w - a @ b``."""
    w = as_matrix(w, "w")
    _check_rank(w, rank)
    factors = svd(w) if factors is None else factors
    a, b = truncate(factors, 0, rank)
    return AdapterPair(a, b), w - a @ b


def init_hd_pissa(w, rank: int, devices: int, factors: SvdResult | None = None) -> list[AdapterPair]:
    """Partition the top ``rank * devices`` components into one pair per device."""
    w = as_matrix(w, "w")
    _check_rank(w, rank, devices)
    factors = svd(w) if factors is None else factors
    pairs = []
    for i in range(devices):
        a, b = truncate(factors, i * rank, (i + 1) * rank)
        pairs.append(AdapterPair(a, b, i, devices))
    return pairs
