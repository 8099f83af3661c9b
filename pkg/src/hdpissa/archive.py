"""Binary snapshot archives.

Layout: magic ``b"HDPS1"`` followed by records until EOF. Each record is
``u32 name_len | name (utf-8) | u32 rows | u32 cols | rows*cols f64``,
all little-endian, values row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adapters import AdapterPair
from .distsim import Method, TrainResult
from .errors import InvalidInputError

MAGIC = b"HDPS1"
METHODS = list(Method)
TASK_KINDS = ("linear", "mlp")


def encode(records: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    for name, mat in records.items():
        mat = np.asarray(mat, dtype="<f8")
        if mat.ndim != 2:
            raise InvalidInputError(f"record {name!r} is not a matrix")
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)))
        out.append(key)
        out.append(struct.pack("<II", *mat.shape))
        out.append(np.ascontiguousarray(mat).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise InvalidInputError("not an HDPS1 archive (bad magic)")
    records = {}
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<II", blob, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(blob):
                raise InvalidInputError(f"record {name!r} is truncated")
            records[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise InvalidInputError(f"truncated archive: {exc}") from None
    return records


def result_records(result: TrainResult) -> dict[str, np.ndarray]:
    cfg, task = result.config, result.task
    recs = {
        "meta.method": np.array([[METHODS.index(result.method), cfg.devices, cfg.rank]], dtype=float),
        "meta.task": np.array([[
            TASK_KINDS.index(task.kind), task.input_dim, task.output_dim, task.hidden_dim,
            task.target_rank, task.noise_std, task.seed,
        ]], dtype=float),
    }
    for k, (w0, w1) in enumerate(zip(result.w_init, result.w_final)):
        recs[f"layer{k}.w_init"] = w0
        recs[f"layer{k}.w_final"] = w1
        for i, (p0, p1) in enumerate(zip(result.adapter_init[k], result.adapter_final[k])):
            recs[f"layer{k}.dev{i}.a_init"] = p0.a
            recs[f"layer{k}.dev{i}.b_init"] = p0.b
            recs[f"layer{k}.dev{i}.a_final"] = p1.a
            recs[f"layer{k}.dev{i}.b_final"] = p1.b
    return recs


def write_result(path, result: TrainResult) -> None:
    Path(path).write_bytes(encode(result_records(result)))


class Snapshot:
    """Decoded archive with the accessors the analysis commands need."""

    def __init__(self, records: dict[str, np.ndarray]):
        if "meta.method" not in records or "meta.task" not in records:
            raise InvalidInputError("archive lacks meta records")
        self.records = records
        code, devices, rank = records["meta.method"][0]
        self.method = METHODS[int(code)]
        self.devices = int(devices)
        self.rank = int(rank)
        self.task_key = tuple(records["meta.task"][0].tolist())

    @classmethod
    def load(cls, path) -> "Snapshot":
        return cls(decode(Path(path).read_bytes()))

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.records if k.endswith(".w_init"))

    def _pairs(self, layer: int, when: str) -> list[AdapterPair]:
        pairs = []
        i = 0
        while f"layer{layer}.dev{i}.a_{when}" in self.records:
            pairs.append(AdapterPair(
                self.records[f"layer{layer}.dev{i}.a_{when}"],
                self.records[f"layer{layer}.dev{i}.b_{when}"],
                i, self.devices,
            ))
            i += 1
        return pairs

    def to_result(self) -> TrainResult:
        """Rebuild enough of a TrainResult for delta computation."""
        n = self.n_layers
        return TrainResult(
            method=self.method, config=None, task=None, loss_curve=[], lr_curve=[],
            w_init=[self.records[f"layer{k}.w_init"] for k in range(n)],
            w_final=[self.records[f"layer{k}.w_final"] for k in range(n)],
            adapter_init=[self._pairs(k, "init") for k in range(n)],
            adapter_final=[self._pairs(k, "final") for k in range(n)],
        )
