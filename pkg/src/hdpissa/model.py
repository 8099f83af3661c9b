"""Adapter-augmented linear stacks with hand-written backpropagation.

Conventions: inputs are batch-rows x features, a layer maps ``X -> X @ W_eff``
with ``W`` of shape (in, out), and losses are means over batch rows.

Forward modes:

* ``PLAIN``    -- ``X @ W``; the adapter (if any) is ignored.
* ``RESIDUAL`` -- ``X @ (W + A @ B)`` where ``W`` holds the residual weight.
* ``MUTED``    -- ``X @ (W + gamma * A @ B)``; adapter gradients are
  multiplied by ``1/gamma`` on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .adapters import AdapterPair
from .errors import InvalidInputError

DEFAULT_GAMMA = 1e-16


class Mode(str, Enum):
    PLAIN = "plain"
    RESIDUAL = "residual"
    MUTED = "muted"


ACTIVATIONS = ("tanh", "relu", "none")
LOSSES = ("mse", "xent")


@dataclass(frozen=True)
class AdapterLinearLayer:
    w: np.ndarray
    adapter: AdapterPair | None = None
    gamma: float = DEFAULT_GAMMA
    mode: Mode = Mode.PLAIN

    def __post_init__(self):
        if self.mode is not Mode.PLAIN and self.adapter is None:
            raise InvalidInputError(f"{self.mode.value} mode needs an adapter")
        if self.mode is Mode.MUTED and not self.gamma > 0:
            raise InvalidInputError(f"muted mode requires gamma > 0, got {self.gamma}")
        if self.adapter is not None:
            if self.adapter.a.shape[0] != self.w.shape[0] or self.adapter.b.shape[1] != self.w.shape[1]:
                raise InvalidInputError(
                    f"adapter {self.adapter.a.shape}x{self.adapter.b.shape} does not fit weight {self.w.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def effective_weight(self) -> np.ndarray:
        if self.mode is Mode.PLAIN:
            return self.w
        prod = self.adapter.a @ self.adapter.b
        if self.mode is Mode.RESIDUAL:
            return self.w + prod
        return self.w + self._gamma() * prod

    def _gamma(self):
        # keep the scalar in the weight dtype so reduced precision stays reduced
        return self.w.dtype.type(self.gamma)

    def with_(self, **changes) -> "AdapterLinearLayer":
        return replace(self, **changes)


@dataclass(frozen=True)
class Network:
    layers: tuple[AdapterLinearLayer, ...]
    activation: str = "tanh"
    loss: str = "mse"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InvalidInputError("network needs at least one layer")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise InvalidInputError(f"layer {k} output does not match layer {k + 1} input")

    def with_layer(self, k: int, layer: AdapterLinearLayer) -> "Network":
        layers = list(self.layers)
        layers[k] = layer
        return replace(self, layers=tuple(layers))


@dataclass(frozen=True)
class LayerGradients:
    g_w: np.ndarray
    g_a: np.ndarray | None = None
    g_b: np.ndarray | None = None


@dataclass
class Tape:
    """Cached forward intermediates: per-layer inputs, pre-activations, weights."""

    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    output: np.ndarray | None = None
    network: Network | None = None


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0)
    return z


def _activate_grad(kind: str, z: np.ndarray, dh: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return dh * (1 - t * t)
    if kind == "relu":
        return dh * (z > 0)
    return dh


def forward(net: Network, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != net.layers[0].in_dim:
        raise InvalidInputError(f"input shape {x.shape} does not match first layer input {net.layers[0].in_dim}")
    tape = Tape(network=net)
    h = x
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        w_eff = layer.effective_weight()
        z = h @ w_eff
        tape.inputs.append(h)
        tape.preacts.append(z)
        tape.weights.append(w_eff)
        h = z if k == last else _activate(net.activation, z)
    tape.output = h
    return h, tape


def _log_softmax(y: np.ndarray) -> np.ndarray:
    shifted = y - y.max(axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def loss_and_grad(kind: str, y: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    rows = y.shape[0]
    if kind == "mse":
        diff = y - targets
        return float(np.sum(diff * diff)) / (2 * rows), diff / y.dtype.type(rows)
    logp = _log_softmax(y)
    loss = -float(np.sum(targets * logp)) / rows
    return loss, (np.exp(logp) - targets) / y.dtype.type(rows)


def backward(net: Network, tape: Tape, targets) -> tuple[float, list[LayerGradients]]:
    """Loss and per-layer gradients; muted adapter gradients come back rescaled by 1/gamma."""
    if tape.network is not net or tape.output is None:
        raise InvalidInputError("tape was not produced by forward() on this network")
    targets = np.asarray(targets)
    if targets.shape != tape.output.shape:
        raise InvalidInputError(f"targets shape {targets.shape} != output shape {tape.output.shape}")
    loss, dz = loss_and_grad(net.loss, tape.output, targets)
    grads: list[LayerGradients] = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        g_w = tape.inputs[k].T @ dz
        g_a = g_b = None
        if layer.adapter is not None and layer.mode is not Mode.PLAIN:
            a, b = layer.adapter.a, layer.adapter.b
            if layer.mode is Mode.MUTED:
                gamma = layer._gamma()
                # gradient reaching the product gamma * (A @ B), then undo the mute
                g_prod = gamma * g_w
                g_a = (g_prod @ b.T) * (1 / gamma)
                g_b = (a.T @ g_prod) * (1 / gamma)
            else:
                g_a = g_w @ b.T
                g_b = a.T @ g_w
        grads[k] = LayerGradients(g_w, g_a, g_b)
        if k > 0:
            dh = dz @ tape.weights[k].T
            dz = _activate_grad(net.activation, tape.preacts[k - 1], dh)
    return loss, grads


def loss_only(net: Network, x, targets) -> float:
    y, _ = forward(net, x)
    targets = np.asarray(targets)
    if targets.shape != y.shape:
        raise InvalidInputError(f"targets shape {targets.shape} != output shape {y.shape}")
    return loss_and_grad(net.loss, y, targets)[0]
