"""Dense matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D numpy arrays of float64. A float32 array is used
only by the reduced-precision training mode; every routine here keeps the
dtype of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InvalidInputError

JACOBI_TOL = 1e-14
MAX_SWEEPS = 60

PRECISIONS = ("64", "32")


def dtype_for(precision: str):
    if precision == "64":
        return np.float64
    if precision == "32":
        return np.float32
    raise InvalidInputError(f"unknown precision {precision!r}; expected one of {PRECISIONS}")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must have positive dimensions, got {arr.shape}")
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(np.float64)
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def d(self) -> int:
        return len(self.s)

    def reconstruct(self, lo: int = 0, hi: int | None = None) -> np.ndarray:
        hi = self.d if hi is None else hi
        return (self.u[:, lo:hi] * self.s[lo:hi]) @ self.vt[lo:hi, :]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    out = u.copy()
    candidate = 0
    for j in range(k):
        if keep[j]:
            continue
        while True:
            if candidate >= m:
                raise ConvergenceError("could not complete orthonormal basis")
            v = np.zeros(m)
            v[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 0.5:
                v /= nv
                break
        basis.append(v)
        out[:, j] = v
    return out


def _jacobi_tall(a: np.ndarray) -> SvdResult:
    m, n = a.shape
    g = a.copy()
    v = np.eye(n)
    scale = frobenius_norm(a)
    if scale == 0.0:
        return SvdResult(np.eye(m, n), np.zeros(n), np.eye(n))
    negligible = (max(m, n) * np.finfo(np.float64).eps * scale) ** 2

    # pad with a dummy zero column so every round pairs all columns
    width = n + (n % 2)
    if width != n:
        g = np.hstack([g, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    rounds = _round_robin(width) if width > 1 else []

    converged = width <= 1
    off = 0.0
    for _ in range(MAX_SWEEPS):
        rotated = False
        off = 0.0
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.sum(gp * gp, axis=0)
            beta = np.sum(gq * gq, axis=0)
            gamma = np.sum(gp * gq, axis=0)
            denom = np.sqrt(alpha * beta)
            active = (np.minimum(alpha, beta) > negligible) & (np.abs(gamma) > JACOBI_TOL * denom)
            if not np.any(active):
                continue
            rotated = True
            with np.errstate(divide="ignore", invalid="ignore"):
                off = max(off, float(np.max(np.abs(gamma[active]) / denom[active])))
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (max relative off-diagonal {off:.3e})",
            residual=off,
        )

    g, v = g[:, :n], v[:n, :n]
    sigma = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    keep = sigma * sigma > negligible
    u = np.zeros((m, n))
    u[:, keep] = g[:, keep] / sigma[keep]
    if not np.all(keep):
        u = _complete_basis(u, keep)
    return SvdResult(u, sigma, v.T)


def _fix_signs(res: SvdResult) -> SvdResult:
    u, vt = res.u.copy(), res.vt.copy()
    idx = np.argmax(np.abs(u), axis=0)
    flip = u[idx, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1
    vt[flip, :] *= -1
    return SvdResult(u, res.s, vt)


def svd(a) -> SvdResult:
    """Thin SVD via cyclic one-sided Jacobi rotations.

    Sign convention: the largest-magnitude entry of every left singular
    vector is non-negative.
    """
    a = as_matrix(a).astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("svd input contains non-finite entries")
    m, n = a.shape
    if m >= n:
        res = _jacobi_tall(a)
    else:
        t = _jacobi_tall(a.T)
        res = SvdResult(t.vt.T, t.s, t.u.T)
    return _fix_signs(res)


def truncate(res: SvdResult, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """Split components ``lo:hi`` into ``(U sqrt(S), sqrt(S) V^T)``."""
    if not (0 <= lo < hi <= res.d):
        raise InvalidInputError(f"component slice [{lo}, {hi}) out of range for d={res.d}")
    root = np.sqrt(res.s[lo:hi])
    return res.u[:, lo:hi] * root, root[:, None] * res.vt[lo:hi, :]


def orthonormal_columns(g) -> np.ndarray:
    """Modified Gram-Schmidt (two passes) on the columns of ``g``."""
    q = as_matrix(g).astype(np.float64).copy()
    for j in range(q.shape[1]):
        for _ in range(2):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        nrm = np.linalg.norm(q[:, j])
        if nrm == 0.0:
            raise InvalidInputError("columns are linearly dependent")
        q[:, j] /= nrm
    return q
