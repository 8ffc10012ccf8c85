"""Two-component PCA of embeddings, for scatter plots of the clusters."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import DataError


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (2, d), orthonormal rows
    explained_variance: np.ndarray  # (2,), non-increasing


def pca_fit(embeddings, n_components: int = 2) -> PcaModel:
    """Top principal directions of the sample covariance.

    Each component is oriented so that its largest-magnitude entry is
    positive.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("PCA needs at least 2 rows")
    if n_components > X.shape[1]:
        raise DataError(f"cannot take {n_components} components of {X.shape[1]}-d data")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        raise DataError("degenerate data: all points identical")
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    variance = np.clip(evals[order], 0.0, None)
    return PcaModel(mean, comps, variance)


def pca_project(model: PcaModel, embeddings) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    return (X - model.mean) @ model.components.T


def write_scatter(
    path: str | Path,
    specimen_ids: Sequence[str],
    knot_index: Sequence[int],
    cluster_ids: Sequence[int],
    xy: np.ndarray,
) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["specimen_id", "knot_index", "cluster_id", "x", "y"])
        for sid, k, c, (x, y) in zip(specimen_ids, knot_index, cluster_ids, xy):
            w.writerow([sid, k, c, repr(float(x)), repr(float(y))])


def _color(key: str) -> str:
    h = hashlib.sha1(key.encode()).hexdigest()
    return f"#{h[:6]}"


def scatter_svg(
    specimen_ids: Sequence[str], cluster_ids: Sequence[int], xy: np.ndarray, size: int = 600
) -> str:
    pad = 20
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if xy.shape[0]:
        lo, hi = xy.min(axis=0), xy.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.ones(2)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scaled = (xy - lo) / span * (size - 2 * pad) + pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for sid, cid, (x, y) in zip(specimen_ids, cluster_ids, scaled):
        key = f"{sid}/{cid}"
        parts.append(
            f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="4" fill="{_color(key)}">'
            f"<title>{escape(key)}</title></circle>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
