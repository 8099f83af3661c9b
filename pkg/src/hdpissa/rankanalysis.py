"""Weight-update extraction and singular-value spectra."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .distsim import Method, TrainResult
from .errors import InvalidInputError
from .linalg import as_matrix, svd

DEFAULT_TAU = 1e-6
SPECTRUM_COLUMNS = ("layer", "method", "index", "sigma", "sigma_over_sigma1")
COMPARE_COLUMNS = (
    "layer", "index", "method", "sigma", "hd_sigma", "ratio",
    "beyond_r", "beyond_2r", "beyond_2kr", "numerically_zero",
)


@dataclass(frozen=True)
class RankSpectrum:
    singular_values: np.ndarray
    tau: float = DEFAULT_TAU
    layer_label: str = ""

    @property
    def sigma1(self) -> float:
        return float(self.singular_values[0]) if len(self.singular_values) else 0.0

    @property
    def effective_rank(self) -> int:
        """Count of singular values strictly above ``tau * sigma_1``."""
        s1 = self.sigma1
        if s1 == 0.0:
            return 0
        return int(np.sum(self.singular_values > self.tau * s1))

    def sigma_at(self, index: int) -> float:
        """1-based lookup, matching how ranks are usually counted."""
        return float(self.singular_values[index - 1])


def compute_delta(result: TrainResult, layer: int = 0, method: Method | None = None) -> np.ndarray:
    """Total weight change produced by training, per method."""
    method = result.method if method is None else Method(method)
    if method is not result.method:
        raise InvalidInputError(f"result was produced by {result.method.value}, not {method.value}")
    if not (0 <= layer < len(result.w_init)) or not result.w_final:
        raise InvalidInputError(f"no snapshot for layer {layer}")
    if method.is_shared_adapter:
        if not result.adapter_final[layer]:
            raise InvalidInputError(f"layer {layer} carries no adapter")
        final = result.adapter_final[layer][0].product()
        if method is Method.LORA_DP:
            # b starts at zero, so the initial product vanishes
            return final
        return final - result.adapter_init[layer][0].product()
    return result.w_final[layer] - result.w_init[layer]


def spectrum(delta, tau: float = DEFAULT_TAU, label: str = "") -> RankSpectrum:
    delta = as_matrix(delta, "delta").astype(np.float64)
    if not np.all(np.isfinite(delta)):
        raise InvalidInputError("delta contains non-finite entries")
    return RankSpectrum(svd(delta).s, tau, label)


def compare_spectra(spectra: dict, rank: int, devices: int, reference: Method = Method.HD_PISSA) -> list[dict]:
    """Per-index rows comparing every baseline spectrum with the reference method's.

    ``ratio`` is reference sigma / baseline sigma (inf when the baseline
    value is exactly zero). Flags mark indices (1-based) past r, 2r and 2Kr.
    """
    spectra = {Method(k): v for k, v in spectra.items()}
    ref = spectra.get(reference)
    rows = []
    for method, spec in spectra.items():
        s = spec.singular_values
        for idx in range(1, len(s) + 1):
            sigma = float(s[idx - 1])
            hd = float(ref.singular_values[idx - 1]) if ref is not None and idx <= len(ref.singular_values) else float("nan")
            if sigma > 0:
                ratio = hd / sigma
            else:
                ratio = float("inf") if hd > 0 else 1.0
            rows.append(dict(
                layer=spec.layer_label,
                index=idx,
                method=method.value,
                sigma=sigma,
                hd_sigma=hd,
                ratio=ratio,
                beyond_r=idx > rank,
                beyond_2r=idx > 2 * rank,
                beyond_2kr=idx > 2 * devices * rank,
                numerically_zero=sigma <= spec.tau * spec.sigma1,
            ))
    return rows


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def spectrum_rows(spec: RankSpectrum, method: Method) -> list[dict]:
    s1 = spec.sigma1
    return [
        dict(
            layer=spec.layer_label,
            method=Method(method).value,
            index=i + 1,
            sigma=float(s),
            sigma_over_sigma1=float(s) / s1 if s1 > 0 else 0.0,
        )
        for i, s in enumerate(spec.singular_values)
    ]


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row[c]) for c in columns])
    return buf.getvalue()
