"""Flat ``key = value`` run configuration files.

One assignment per line, ``#`` starts a comment, unknown keys are an
error. ``seed`` seeds adapter initialization; ``task_seed`` seeds the
synthetic task and defaults to ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .distsim import Method, TrainerConfig
from .errors import InvalidInputError
from .tasks import SyntheticTask


class ConfigError(InvalidInputError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool_list(text: str) -> tuple[bool, ...]:
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if item in ("1", "true", "yes"):
            out.append(True)
        elif item in ("0", "false", "no"):
            out.append(False)
        else:
            raise ValueError(f"not a boolean: {item!r}")
    return tuple(out)


def _precision(text: str) -> str:
    text = text.strip().lower().removeprefix("float").removeprefix("fp")
    if text not in ("64", "32"):
        raise ValueError("expected 64 or 32")
    return text


TRAINER_KEYS = {
    "method": lambda s: Method(s.strip()),
    "devices": int,
    "rank": int,
    "gamma": float,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "weight_decay": float,
    "schedule": str.strip,
    "warmup_ratio": float,
    "steps": int,
    "global_batch": int,
    "seed": int,
    "precision": _precision,
    "adapter_mask": _bool_list,
    "workers": int,
}
TASK_KEYS = {
    "kind": str.strip,
    "input_dim": int,
    "output_dim": int,
    "hidden_dim": int,
    "target_rank": int,
    "noise_std": float,
    "task_seed": int,
}
OTHER_KEYS = {"out_dir": str.strip}
ALL_KEYS = {**TRAINER_KEYS, **TASK_KEYS, **OTHER_KEYS}


@dataclass(frozen=True)
class RunConfig:
    trainer: TrainerConfig
    task: SyntheticTask
    out_dir: str = "out"

    def with_seed(self, seed: int) -> "RunConfig":
        return parse_config(self.dump(), overrides={"seed": str(seed)})

    def dump(self) -> str:
        lines = []
        for f in fields(TrainerConfig):
            v = getattr(self.trainer, f.name)
            if f.name == "adapter_mask":
                if v is None:
                    continue
                v = ",".join("1" if b else "0" for b in v)
            elif isinstance(v, Method):
                v = v.value
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        t = self.task
        for key, val in (
            ("kind", t.kind), ("input_dim", t.input_dim), ("output_dim", t.output_dim),
            ("hidden_dim", t.hidden_dim), ("target_rank", t.target_rank),
            ("noise_std", repr(float(t.noise_std))), ("task_seed", t.seed),
        ):
            lines.append(f"{key} = {val}")
        lines.append(f"out_dir = {self.out_dir}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(key, "unknown key")
        raw[key] = value
    raw.update(overrides or {})

    values = {}
    for key, value in raw.items():
        try:
            values[key] = ALL_KEYS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, f"invalid value {value!r} ({exc})") from None

    trainer_kw = {k: v for k, v in values.items() if k in TRAINER_KEYS}
    task_kw = {k: v for k, v in values.items() if k in TASK_KEYS}
    task_kw["seed"] = task_kw.pop("task_seed", trainer_kw.get("seed", 0))
    try:
        trainer = TrainerConfig(**trainer_kw)
    except InvalidInputError as exc:
        raise ConfigError(_guess_key(str(exc), trainer_kw), str(exc)) from None
    try:
        task = SyntheticTask(**task_kw)
    except InvalidInputError as exc:
        raise ConfigError(_guess_key(str(exc), task_kw), str(exc)) from None
    mask = trainer.mask_for(len(task.layer_dims)) if trainer.adapter_mask is not None else None
    if trainer.method.uses_svd_partition:
        budget = trainer.rank * (trainer.devices if trainer.method is Method.HD_PISSA else 1)
        for k, dims in enumerate(task.layer_dims):
            if (mask is None or mask[k]) and budget > min(dims):
                raise ConfigError("rank", f"rank budget {budget} exceeds layer {k} dimensions {dims}")
    elif trainer.method is not Method.FFT and trainer.rank > min(min(d) for d in task.layer_dims):
        raise ConfigError("rank", f"rank {trainer.rank} exceeds the smallest layer dimension")
    return RunConfig(trainer, task, values.get("out_dir", "out"))


def _guess_key(message: str, candidates: dict) -> str:
    for key in sorted(candidates, key=len, reverse=True):
        if key in message:
            return key
    return "config"


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)
