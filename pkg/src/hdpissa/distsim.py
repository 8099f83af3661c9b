"""Single-process simulation of K data-parallel devices.

Per-device work (forward, backward, and for the direct-weight-update
methods the local AdamW step) is side-effect free. All shared state is
mutated afterwards, at the barrier, in device-index order, so results do
not depend on whether devices run in a thread pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import model
from .adapters import AdapterPair, init_hd_pissa, init_lora, init_pissa
from .errors import InvalidInputError, NumericalError
from .linalg import dtype_for
from .model import AdapterLinearLayer, Mode, Network
from .optim import AdamWState, adamw_delta, aggregate, delta_update, lr_at
from .tasks import SyntheticTask


class Method(str, Enum):
    FFT = "FFT"
    LORA_DP = "LoRA-DP"
    PISSA_DP = "PiSSA-DP"
    HD_PISSA = "HD-PiSSA"
    LORA_DWU = "LoRA-DWU"
    TOPRANK_DWU = "TopRank-DWU"

    @classmethod
    def _missing_(cls, value):
        names = ", ".join(m.value for m in cls)
        raise InvalidInputError(f"unknown method {value!r}; expected one of {names}")

    @property
    def is_dwu(self) -> bool:
        return self in (Method.HD_PISSA, Method.LORA_DWU, Method.TOPRANK_DWU)

    @property
    def is_shared_adapter(self) -> bool:
        return self in (Method.LORA_DP, Method.PISSA_DP)

    @property
    def uses_svd_partition(self) -> bool:
        return self in (Method.PISSA_DP, Method.HD_PISSA, Method.TOPRANK_DWU)


@dataclass(frozen=True)
class TrainerConfig:
    method: Method = Method.HD_PISSA
    devices: int = 4
    rank: int = 2
    gamma: float = model.DEFAULT_GAMMA
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"
    warmup_ratio: float = 0.0
    steps: int = 200
    global_batch: int = 64
    seed: int = 0
    precision: str = "64"
    adapter_mask: tuple[bool, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.adapter_mask is not None:
            object.__setattr__(self, "adapter_mask", tuple(bool(b) for b in self.adapter_mask))
        if self.devices < 1:
            raise InvalidInputError(f"devices must be >= 1, got {self.devices}")
        if self.rank < 1:
            raise InvalidInputError(f"rank must be >= 1, got {self.rank}")
        if self.steps < 0:
            raise InvalidInputError(f"steps must be >= 0, got {self.steps}")
        if self.global_batch < 1 or self.global_batch % self.devices:
            raise InvalidInputError(
                f"global_batch {self.global_batch} must be a positive multiple of devices {self.devices}"
            )
        if self.method.is_dwu and not self.gamma > 0:
            raise InvalidInputError(f"gamma must be > 0, got {self.gamma}")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise InvalidInputError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.workers < 1:
            raise InvalidInputError(f"workers must be >= 1, got {self.workers}")
        dtype_for(self.precision)

    def hyper(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)

    def mask_for(self, n_layers: int) -> tuple[bool, ...]:
        if self.adapter_mask is None:
            return (True,) * n_layers
        if len(self.adapter_mask) != n_layers:
            raise InvalidInputError(f"adapter_mask has {len(self.adapter_mask)} entries for {n_layers} layers")
        return self.adapter_mask


@dataclass
class DeviceState:
    """Adapters and optimizer moments owned by one device, keyed by layer index."""

    adapters: dict[int, AdapterPair] = field(default_factory=dict)
    opt_a: dict[int, AdamWState] = field(default_factory=dict)
    opt_b: dict[int, AdamWState] = field(default_factory=dict)


@dataclass
class SimState:
    """Everything that evolves during training.

    ``weights`` holds the shared base weights: ``W`` for FFT and the
    direct-update methods, ``W_res`` for PiSSA-DP (and ``W`` for LoRA-DP).
    For the shared-adapter methods every device aliases ``devices[0]``.
    """

    weights: list[np.ndarray]
    devices: list[DeviceState]
    opt_w: dict[int, AdamWState] = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainResult:
    method: Method
    config: TrainerConfig
    task: SyntheticTask | None
    loss_curve: list[float]
    lr_curve: list[float]
    w_init: list[np.ndarray]
    w_final: list[np.ndarray]
    adapter_init: list[list[AdapterPair]]
    adapter_final: list[list[AdapterPair]]
    eval_loss_init: float = float("nan")
    eval_loss_final: float = float("nan")
    wall_steps: int = 0


def shard_batch(batch, devices: int, step: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Contiguous row blocks: device i gets rows [i*B/K, (i+1)*B/K)."""
    x, t = batch
    rows = x.shape[0]
    if devices < 1 or rows % devices or t.shape[0] != rows:
        raise InvalidInputError(f"cannot split {rows} rows evenly across {devices} devices")
    size = rows // devices
    return [(x[i * size:(i + 1) * size], t[i * size:(i + 1) * size]) for i in range(devices)]


def init_state(config: TrainerConfig, base_weights: list[np.ndarray]) -> SimState:
    """Build adapters, residual weights and optimizer states for ``config.method``."""
    method, K, r = config.method, config.devices, config.rank
    dtype = dtype_for(config.precision)
    mask = config.mask_for(len(base_weights))
    hyper = config.hyper()
    weights = [np.array(w, dtype=np.float64) for w in base_weights]
    if method.uses_svd_partition:
        for k, w in enumerate(weights):
            if mask[k]:
                need = r * (K if method is Method.HD_PISSA else 1)
                if need > min(w.shape):
                    raise InvalidInputError(f"layer {k}: rank budget {need} exceeds min dimension {min(w.shape)}")

    per_device: list[dict[int, AdapterPair]] = [dict() for _ in range(K)]
    for k, w in enumerate(weights):
        if not mask[k] or method is Method.FFT:
            continue
        if method is Method.LORA_DP:
            pair = init_lora(w, r, config.seed ^ (k << 20))
            for d in per_device:
                d[k] = pair
        elif method is Method.PISSA_DP:
            pair, w_res = init_pissa(w, r)
            weights[k] = w_res
            for d in per_device:
                d[k] = pair
        elif method is Method.HD_PISSA:
            for i, pair in enumerate(init_hd_pissa(w, r, K)):
                per_device[i][k] = pair
        elif method is Method.LORA_DWU:
            for i in range(K):
                per_device[i][k] = init_lora(w, r, config.seed ^ (k << 20), device_index=i, devices=K)
        elif method is Method.TOPRANK_DWU:
            pair, _ = init_pissa(w, r)
            for i in range(K):
                per_device[i][k] = replace(pair, devices=K)

    weights = [w.astype(dtype) for w in weights]

    def make_device(adapters: dict[int, AdapterPair]) -> DeviceState:
        adapters = {k: p.astype(dtype) for k, p in adapters.items()}
        return DeviceState(
            adapters,
            {k: AdamWState.zeros_like(p.a, **hyper) for k, p in adapters.items()},
            {k: AdamWState.zeros_like(p.b, **hyper) for k, p in adapters.items()},
        )

    if method.is_shared_adapter:
        shared = make_device(per_device[0])
        devices = [shared] * K
    else:
        devices = [make_device(a) for a in per_device]
    opt_w = {}
    if method is Method.FFT:
        opt_w = {k: AdamWState.zeros_like(w, **hyper) for k, w in enumerate(weights)}
    return SimState(weights, devices, opt_w)


def device_network(state: SimState, device: int, config: TrainerConfig, task: SyntheticTask) -> Network:
    """The replica device ``device`` runs its forward/backward pass on."""
    method = config.method
    dev = state.devices[device]
    layers = []
    for k, w in enumerate(state.weights):
        pair = dev.adapters.get(k)
        if pair is None or method is Method.FFT:
            layers.append(AdapterLinearLayer(w))
        elif method.is_dwu:
            layers.append(AdapterLinearLayer(w, pair, config.gamma, Mode.MUTED))
        else:
            layers.append(AdapterLinearLayer(w, pair, mode=Mode.RESIDUAL))
    return Network(tuple(layers), task.activation, task.loss)


def eval_network(state: SimState, config: TrainerConfig, task: SyntheticTask) -> Network:
    """The deployed model: merged adapters for the shared-adapter methods, plain W otherwise."""
    layers = []
    for k, w in enumerate(state.weights):
        w64 = w.astype(np.float64)
        pair = state.devices[0].adapters.get(k) if state.devices else None
        if config.method.is_shared_adapter and pair is not None:
            w64 = w64 + pair.a.astype(np.float64) @ pair.b.astype(np.float64)
        layers.append(AdapterLinearLayer(w64))
    return Network(tuple(layers), task.activation, task.loss)


def _check_finite(loss: float, grads, device: int):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} on device {device}")
    for k, g in enumerate(grads):
        for name in ("g_w", "g_a", "g_b"):
            arr = getattr(g, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite {name} in layer {k} on device {device}")


def _device_work(state: SimState, i: int, shard, config: TrainerConfig, task: SyntheticTask, lr: float):
    """Forward/backward on one shard; DWU methods also take their local optimizer step."""
    net = device_network(state, i, config, task)
    y, tape = model.forward(net, shard[0])
    loss, grads = model.backward(net, tape, shard[1])
    _check_finite(loss, grads, i)
    if not config.method.is_dwu:
        return loss, grads, None
    dev = state.devices[i]
    updates, opt_a, opt_b = {}, {}, {}
    for k, pair in dev.adapters.items():
        da, opt_a[k] = adamw_delta(grads[k].g_a, dev.opt_a[k], pair.a, lr)
        db, opt_b[k] = adamw_delta(grads[k].g_b, dev.opt_b[k], pair.b, lr)
        updates[k] = delta_update(pair, da, db)
    return loss, grads, (updates, opt_a, opt_b)


def train_step(state: SimState, batch, config: TrainerConfig, task: SyntheticTask, pool=None) -> tuple[SimState, float]:
    """One synchronous data-parallel step; returns the new state and the mean shard loss."""
    K = config.devices
    dtype = dtype_for(config.precision)
    shards = [(x.astype(dtype), t.astype(dtype)) for x, t in shard_batch(batch, K, state.step)]
    lr = lr_at(state.step, config.steps, config.lr, config.schedule, config.warmup_ratio)

    def work(i):
        return _device_work(state, i, shards[i], config, task, lr)

    results = list(pool.map(work, range(K))) if pool is not None else [work(i) for i in range(K)]

    # barrier: everything below runs in device-index order
    losses = [r[0] for r in results]
    step_loss = float(np.sum(np.array(losses, dtype=np.float64))) / K
    weights = list(state.weights)
    method = config.method

    if method is Method.FFT:
        opt_w = dict(state.opt_w)
        for k in range(len(weights)):
            g = aggregate([r[1][k].g_w for r in results])
            delta, opt_w[k] = adamw_delta(g, opt_w[k], weights[k], lr)
            weights[k] = weights[k] + delta
        return SimState(weights, state.devices, opt_w, state.step + 1), step_loss

    if method.is_shared_adapter:
        dev = state.devices[0]
        adapters, opt_a, opt_b = dict(dev.adapters), dict(dev.opt_a), dict(dev.opt_b)
        for k, pair in dev.adapters.items():
            g_a = aggregate([r[1][k].g_a for r in results])
            g_b = aggregate([r[1][k].g_b for r in results])
            da, opt_a[k] = adamw_delta(g_a, opt_a[k], pair.a, lr)
            db, opt_b[k] = adamw_delta(g_b, opt_b[k], pair.b, lr)
            adapters[k] = pair.replace(pair.a + da, pair.b + db)
        shared = DeviceState(adapters, opt_a, opt_b)
        return SimState(weights, [shared] * K, state.opt_w, state.step + 1), step_loss

    devices = []
    for i, r in enumerate(results):
        _, opt_a, opt_b = r[2]
        devices.append(DeviceState(state.devices[i].adapters, opt_a, opt_b))
    for k in state.devices[0].adapters:
        weights[k] = weights[k] + aggregate([r[2][0][k] for r in results])
    return SimState(weights, devices, state.opt_w, state.step + 1), step_loss


def _snapshot_adapters(state: SimState, n_layers: int, method: Method) -> list[list[AdapterPair]]:
    out = []
    devs = state.devices[:1] if method.is_shared_adapter else state.devices
    for k in range(n_layers):
        pairs = [d.adapters[k].astype(np.float64) for d in devs if k in d.adapters]
        out.append(pairs)
    return out


def evaluate(state: SimState, config: TrainerConfig, task: SyntheticTask, batch_size: int = 256) -> float:
    x, t = task.eval_batch(batch_size)
    return model.loss_only(eval_network(state, config, task), x, t)


def train(config: TrainerConfig, task: SyntheticTask) -> TrainResult:
    """Run ``config.steps`` synchronous steps on ``task``'s batch stream."""
    state = init_state(config, task.base_weights())
    n = len(state.weights)
    w_init = [w.astype(np.float64) for w in state.weights]
    adapter_init = _snapshot_adapters(state, n, config.method)
    eval_init = evaluate(state, config, task)
    losses, lrs = [], []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for step in range(config.steps):
            batch = task.next_batch(step, config.global_batch)
            lrs.append(lr_at(step, config.steps, config.lr, config.schedule, config.warmup_ratio))
            state, loss = train_step(state, batch, config, task, pool)
            losses.append(loss)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(
        method=config.method,
        config=config,
        task=task,
        loss_curve=losses,
        lr_curve=lrs,
        w_init=w_init,
        w_final=[w.astype(np.float64) for w in state.weights],
        adapter_init=adapter_init,
        adapter_final=_snapshot_adapters(state, n, config.method),
        eval_loss_init=eval_init,
        eval_loss_final=evaluate(state, config, task),
        wall_steps=config.steps,
    )


def muting_gap(state: SimState, config: TrainerConfig, task: SyntheticTask, batch) -> float:
    """Largest relative gap between rescaled muted gradients and residual-form gradients.

    For each device the residual counterpart replaces ``W`` with
    ``W - A_i B_i`` and runs the unmuted forward, which has the same
    effective weight the muted pass approximates.
    """
    if not config.method.is_dwu:
        raise InvalidInputError(f"{config.method.value} does not use the muted forward pass")
    dtype = dtype_for(config.precision)
    worst = 0.0
    for i, (x, t) in enumerate(shard_batch(batch, config.devices)):
        x, t = x.astype(dtype), t.astype(dtype)
        muted = device_network(state, i, config, task)
        layers = []
        for layer in muted.layers:
            if layer.mode is Mode.MUTED:
                layer = layer.with_(w=layer.w - layer.adapter.a @ layer.adapter.b, mode=Mode.RESIDUAL)
            layers.append(layer)
        residual = replace(muted, layers=tuple(layers))
        _, gm = model.backward(muted, model.forward(muted, x)[1], t)
        _, gr = model.backward(residual, model.forward(residual, x)[1], t)
        for a, b in zip(gm, gr):
            if a.g_a is None:
                continue
            worst = max(worst, relative_error(a.g_a, b.g_a), relative_error(a.g_b, b.g_b))
    return worst


def relative_error(actual, reference) -> float:
    """max|actual - reference| / max|reference| (absolute when the reference is zero)."""
    actual = np.asarray(actual, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    diff = float(np.max(np.abs(actual - reference)))
    scale = float(np.max(np.abs(reference)))
    return diff / scale if scale > 0 else diff
