"""Distance-threshold clustering of knot embeddings and pairing accuracy.

Within one board, two knots are linked when their embedding distance is at
most the threshold; clusters are the connected components of that graph
(a single-linkage dendrogram cut). Accuracy counts ground-truth clusters that
are reproduced exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

GRID_START = 0.1
GRID_STOP = 100.0
GRID_STEP = 0.01


@dataclass(frozen=True)
class Partition:
    """Disjoint clusters of knot indices, sorted by their smallest member."""

    specimen_id: str
    clusters: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        normed = tuple(sorted((tuple(sorted(c)) for c in self.clusters), key=lambda c: c[0] if c else -1))
        if any(len(c) == 0 for c in normed):
            raise DataError("clusters must be non-empty")
        members = [i for c in normed for i in c]
        if len(members) != len(set(members)):
            raise DataError("clusters overlap")
        object.__setattr__(self, "clusters", normed)

    @classmethod
    def from_labels(cls, specimen_id: str, labels: Sequence) -> "Partition":
        """Group positions ``0..n-1`` by equal label."""
        groups: dict = {}
        for i, lab in enumerate(labels):
            groups.setdefault(lab, []).append(i)
        return cls(specimen_id, tuple(tuple(g) for g in groups.values()))

    @property
    def members(self) -> frozenset[int]:
        return frozenset(i for c in self.clusters for i in c)

    def labels(self) -> dict[int, int]:
        return {i: cid for cid, c in enumerate(self.clusters) for i in c}


@dataclass
class ThresholdSearchResult:
    threshold: float
    accuracy: float
    grid: np.ndarray
    curve: np.ndarray = field(repr=False)


def pairwise_distances(embeddings) -> np.ndarray:
    """Euclidean distance matrix; exactly symmetric with a zero diagonal."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2:
        raise DataError("embeddings must be a 2-D array")
    n = E.shape[0]
    D = np.zeros((n, n))
    for i in range(n - 1):
        diff = E[i + 1 :] - E[i]
        d = np.sqrt((diff * diff).sum(axis=1))
        D[i, i + 1 :] = d
        D[i + 1 :, i] = d
    return D


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> bool:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if rj < ri:
            ri, rj = rj, ri
        self.parent[rj] = ri
        return True


def cluster_at_threshold(dm: np.ndarray, threshold: float, specimen_id: str = "") -> Partition:
    """Connected components of the graph with an edge wherever ``dm[i, j] <= threshold``."""
    if threshold < 0:
        raise DataError(f"threshold must be >= 0, got {threshold}")
    dm = np.asarray(dm)
    n = dm.shape[0]
    ds = _DisjointSet(n)
    ii, jj = np.nonzero(np.triu(dm <= threshold, k=1))
    for i, j in zip(ii.tolist(), jj.tolist()):
        ds.union(i, j)
    return Partition.from_labels(specimen_id, [ds.find(i) for i in range(n)])


def clustering_accuracy(predicted: Partition, truth: Partition) -> float:
    """Share of ground-truth clusters that appear exactly as a predicted cluster."""
    if predicted.members != truth.members:
        raise DataError("predicted and true partitions cover different knots")
    if not truth.clusters:
        raise DataError("ground truth has no clusters")
    pred = set(predicted.clusters)
    return sum(c in pred for c in truth.clusters) / len(truth.clusters)


def threshold_grid(
    start: float = GRID_START, stop: float = GRID_STOP, step: float = GRID_STEP
) -> np.ndarray:
    """Inclusive grid ``start, start + step, ..., stop``, rounded to clean decimals."""
    if step <= 0 or stop < start:
        raise DataError(f"invalid grid start={start} stop={stop} step={step}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 10)


def _merge_history(dm: np.ndarray, truth: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Single-linkage merge heights and the matched-cluster count after each merge.

    ``matched[k]`` is the number of exactly reproduced truth clusters once
    the first ``k`` merges are applied.
    """
    n = dm.shape[0]
    target = set(truth.clusters)
    ds = _DisjointSet(n)
    comp = {i: (i,) for i in range(n)}
    matched = sum((i,) in target for i in range(n))
    iu, ju = np.triu_indices(n, k=1)
    w = dm[iu, ju]
    order = np.lexsort((ju, iu, w))
    heights, counts = [], [matched]
    for e in order:
        i, j = int(iu[e]), int(ju[e])
        ri, rj = ds.find(i), ds.find(j)
        if ri == rj:
            continue
        a, b = comp.pop(ri), comp.pop(rj)
        matched -= (a in target) + (b in target)
        ds.union(ri, rj)
        merged = tuple(sorted(a + b))
        comp[ds.find(ri)] = merged
        matched += merged in target
        heights.append(w[e])
        counts.append(matched)
        if len(comp) == 1:
            break
    return np.asarray(heights, dtype=np.float64), np.asarray(counts, dtype=np.int64)


def threshold_search(
    embeddings: Mapping[str, np.ndarray],
    truths: Mapping[str, Partition],
    grid: np.ndarray | None = None,
) -> ThresholdSearchResult:
    """Micro-averaged accuracy at every grid threshold; picks the smallest argmax.

    Each board is clustered on its own. The accuracy at threshold t is the
    number of exactly matched truth clusters over all boards divided by the
    total number of truth clusters.
    """
    if grid is None:
        grid = threshold_grid()
    grid = np.asarray(grid, dtype=np.float64)
    if not truths:
        raise DataError("threshold search needs at least one specimen with ground truth")
    matched = np.zeros(grid.shape[0], dtype=np.int64)
    total = 0
    for sid, truth in truths.items():
        E = np.asarray(embeddings[sid])
        if truth.members != frozenset(range(E.shape[0])):
            raise DataError(f"{sid}: truth does not cover knots 0..{E.shape[0] - 1}")
        heights, counts = _merge_history(pairwise_distances(E), truth)
        k = np.searchsorted(heights, grid, side="right")
        matched += counts[k]
        total += len(truth.clusters)
    curve = matched / total
    best = int(np.argmax(curve))
    return ThresholdSearchResult(float(grid[best]), float(curve[best]), grid, curve)


def truth_partitions(specimen_ids: Sequence[str], knot_ids: Sequence) -> dict[str, Partition]:
    """Ground-truth partition per board; indices are positions within the board."""
    labels: dict[str, list] = {}
    for sid, kid in zip(specimen_ids, knot_ids):
        if kid is None:
            raise DataError(f"{sid}: missing knot_id, ground truth unavailable")
        labels.setdefault(sid, []).append(kid)
    return {sid: Partition.from_labels(sid, labs) for sid, labs in labels.items()}


def group_embeddings(specimen_ids: Sequence[str], E: np.ndarray) -> dict[str, np.ndarray]:
    rows: dict[str, list[int]] = {}
    for i, sid in enumerate(specimen_ids):
        rows.setdefault(sid, []).append(i)
    return {sid: E[ix] for sid, ix in rows.items()}


def cluster_specimens(
    embeddings: Mapping[str, np.ndarray], threshold: float
) -> dict[str, Partition]:
    return {
        sid: cluster_at_threshold(pairwise_distances(E), threshold, sid)
        for sid, E in embeddings.items()
    }


def micro_accuracy(predicted: Mapping[str, Partition], truths: Mapping[str, Partition]) -> float:
    hit = total = 0
    for sid, truth in truths.items():
        pred = set(predicted[sid].clusters)
        hit += sum(c in pred for c in truth.clusters)
        total += len(truth.clusters)
    if total == 0:
        raise DataError("no ground-truth clusters")
    return hit / total


@dataclass
class EvalReport:
    variant: str
    threshold: float
    validation_accuracy: float
    test_accuracy: float
    search: ThresholdSearchResult = field(repr=False)


def evaluate_split(
    params,
    features,
    split,
    grid: np.ndarray | None = None,
) -> EvalReport:
    """Pick the threshold on validation boards and score the test boards with it."""
    from .nn.network import embed_all

    E = embed_all(params, features.X).astype(np.float64)
    by_sid = group_embeddings(features.specimen_ids, E)
    truth = truth_partitions(features.specimen_ids, features.knot_ids)
    val = {s: truth[s] for s in truth if s in split.validation}
    test = {s: truth[s] for s in truth if s in split.test}
    if not val:
        raise DataError("validation split has no specimens with features")
    if not test:
        raise DataError("test split has no specimens with features")
    search = threshold_search(by_sid, val, grid)
    pred = cluster_specimens({s: by_sid[s] for s in test}, search.threshold)
    return EvalReport(
        variant=params.variant,
        threshold=search.threshold,
        validation_accuracy=search.accuracy,
        test_accuracy=micro_accuracy(pred, test),
        search=search,
    )


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def write_pairs(path: str | Path, partitions: Iterable[Partition]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["specimen_id", "cluster_id", "knot_index"])
        for part in partitions:
            for cid, members in enumerate(part.clusters):
                for i in members:
                    w.writerow([part.specimen_id, cid, i])


def read_pairs(path: str | Path) -> dict[str, Partition]:
    groups: dict[str, dict[int, list[int]]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            groups.setdefault(row["specimen_id"], {}).setdefault(int(row["cluster_id"]), []).append(
                int(row["knot_index"])
            )
    return {
        sid: Partition(sid, tuple(tuple(c) for c in cl.values())) for sid, cl in groups.items()
    }


def write_curve(path: str | Path, result: ThresholdSearchResult) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        for t, a in zip(result.grid, result.curve):
            w.writerow([repr(float(t)), repr(float(a))])
