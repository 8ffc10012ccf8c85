"""Triplet and NT-Xent losses with their gradients, plus feature augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError


def triplet_loss(a, p, n, margin: float = 1.0) -> float:
    """max(|a - p| - |a - n| + margin, 0) with Euclidean distances."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    return max(float(np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin), 0.0)


def triplet_loss_grad(A: np.ndarray, P: np.ndarray, N: np.ndarray, margin: float):
    """Mean hinge loss over a batch of embeddings and its gradients.

    Rows where the hinge is inactive (including exactly at the kink)
    contribute zero gradient; a zero distance contributes zero gradient
    through its norm.
    """
    B = A.shape[0]
    dap_vec = A - P
    dan_vec = A - N
    dap = np.sqrt((dap_vec * dap_vec).sum(axis=1))
    dan = np.sqrt((dan_vec * dan_vec).sum(axis=1))
    hinge = dap - dan + margin
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).astype(np.float64).sum() / B)

    def unit(vec, norm):
        safe = np.where(norm > 0, norm, 1)
        return np.where((norm > 0)[:, None], vec / safe[:, None], 0)

    scale = (active / B).astype(A.dtype)[:, None]
    u_ap = unit(dap_vec, dap) * scale
    u_an = unit(dan_vec, dan) * scale
    return loss, u_ap - u_an, -u_ap, u_an


def _normalize_rows(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((Z * Z).sum(axis=1))
    if np.any(norms == 0):
        raise DataError("cannot normalize a zero-norm embedding")
    return Z / norms[:, None], norms


def _ntxent_core(Z: np.ndarray, temperature: float):
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    m = Z.shape[0]
    if m % 2 or m < 4:
        raise DataError(f"NT-Xent needs 2N rows with N >= 2, got {m}")
    n = m // 2
    U, norms = _normalize_rows(Z.astype(np.float64))
    S = (U @ U.T) / temperature
    np.fill_diagonal(S, -np.inf)
    pos = (np.arange(m) + n) % m
    row_max = S.max(axis=1, keepdims=True)
    E = np.exp(S - row_max)
    denom = E.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + row_max[:, 0]
    loss = float(np.mean(lse - S[np.arange(m), pos]))
    return loss, U, norms, E / denom, pos


def ntxent_loss(Z, temperature: float = 0.5) -> float:
    """NT-Xent over 2N embeddings; row i and row i + N are the augmented pair.

    Each row's positive is scored against all other 2N - 2 rows, self
    excluded, using cosine similarity divided by ``temperature``.
    """
    return _ntxent_core(np.asarray(Z), temperature)[0]


def ntxent_loss_grad(Z: np.ndarray, temperature: float = 0.5) -> tuple[float, np.ndarray]:
    loss, U, norms, soft, pos = _ntxent_core(Z, temperature)
    m = U.shape[0]
    G = soft.copy()
    G[np.arange(m), pos] -= 1.0
    G /= m
    dU = (G + G.T) @ U / temperature
    dZ = (dU - U * (U * dU).sum(axis=1, keepdims=True)) / norms[:, None]
    return loss, dZ.astype(Z.dtype, copy=False)


@dataclass(frozen=True)
class Augmentation:
    noise_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    drop_prob: float = 0.1


def augment(x, cfg: Augmentation, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise, one uniform rescale per vector, then random feature drop.

    Works on a single vector or a batch of row vectors.
    """
    x = np.asarray(x)
    batch = np.atleast_2d(x)
    noise = rng.normal(0.0, cfg.noise_sigma, size=batch.shape) if cfg.noise_sigma > 0 else 0.0
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi, size=(batch.shape[0], 1)) if hi > lo else lo
    keep = rng.random(batch.shape) >= cfg.drop_prob
    out = ((batch + noise) * scale * keep).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    return out[0] if x.ndim == 1 else out
