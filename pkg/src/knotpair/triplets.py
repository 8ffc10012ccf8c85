"""Triplet generation and specimen-level train/validation/test splits.

Indices everywhere are row indices into the feature table, so triplets can be
written to disk and used to index the feature matrix directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import DataError, ParseError

TRIPLETS_HEADER = ("specimen_id", "anchor", "positive", "negative")
SPLIT_HEADER = ("specimen_id", "split")
SPLIT_NAMES = ("train", "validation", "test")


class _Keyed(Protocol):
    specimen_id: str
    knot_id: int | None


@dataclass(frozen=True, order=True)
class Triplet:
    specimen_id: str
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise DataError("split sets overlap")

    def of(self, specimen_id: str) -> str | None:
        for name in SPLIT_NAMES:
            if specimen_id in getattr(self, name):
                return name
        return None

    def get(self, name: str) -> frozenset[str]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def group_by_knot_class(records: Sequence[_Keyed]) -> dict[str, dict[int, list[int]]]:
    """specimen -> knot_id -> row indices, preserving input order."""
    groups: dict[str, dict[int, list[int]]] = {}
    for i, rec in enumerate(records):
        if rec.knot_id is None:
            raise DataError(f"row {i} ({rec.specimen_id}) has no knot_id")
        groups.setdefault(rec.specimen_id, {}).setdefault(rec.knot_id, []).append(i)
    return groups


def generate_positive_pairs(group: Sequence[int]) -> list[tuple[int, int]]:
    return list(combinations(group, 2))


def sample_negative(
    pair: tuple[int, int], other_classes: Sequence[int], rng: np.random.Generator
) -> int | None:
    """Uniform draw from ``other_classes``; None when the pool is empty."""
    if len(other_classes) == 0:
        return None
    return int(other_classes[int(rng.integers(len(other_classes)))])


def build_triplets(records: Sequence[_Keyed], rng: np.random.Generator) -> list[Triplet]:
    """One triplet per positive pair, with a negative from the same specimen.

    Pairs in specimens that have a single knot class are skipped.
    """
    groups = group_by_knot_class(records)
    out: list[Triplet] = []
    for sid in sorted(groups):
        classes = groups[sid]
        pairs = []
        for kid, members in classes.items():
            pool = sorted(i for other, ix in classes.items() if other != kid for i in ix)
            for a, p in generate_positive_pairs(members):
                pairs.append((a, p, pool))
        pairs.sort(key=lambda t: (t[0], t[1]))
        for a, p, pool in pairs:
            neg = sample_negative((a, p), pool, rng)
            if neg is not None:
                out.append(Triplet(sid, a, p, neg))
    return out


def split_specimens(
    specimen_ids: Sequence[str],
    rng: np.random.Generator,
    ratios: tuple[int, int, int] = (8, 1, 1),
) -> SplitAssignment:
    """Shuffle boards and cut them into train/validation/test.

    Validation and test each get ``floor(N * r / sum(ratios))`` boards (at
    least one); the rest train.
    """
    ids = list(dict.fromkeys(specimen_ids))
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 specimens to split, got {n}")
    total = sum(ratios)
    n_val = max(1, n * ratios[1] // total)
    n_test = max(1, n * ratios[2] // total)
    if n_val + n_test >= n:
        raise DataError(f"ratios {ratios} leave no training specimens for N={n}")
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    return SplitAssignment(
        test=frozenset(shuffled[:n_test]),
        validation=frozenset(shuffled[n_test : n_test + n_val]),
        train=frozenset(shuffled[n_test + n_val :]),
    )


def write_triplets(path: str | Path, triplets: Iterable[Triplet]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLETS_HEADER)
        for t in triplets:
            w.writerow([t.specimen_id, t.anchor, t.positive, t.negative])


def read_triplets(path: str | Path) -> list[Triplet]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRIPLETS_HEADER:
            raise ParseError(f"bad header, expected {','.join(TRIPLETS_HEADER)}", 1, path.name)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(Triplet(row[0], int(row[1]), int(row[2]), int(row[3])))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), lineno, path.name) from None
    return out


def write_split(path: str | Path, split: SplitAssignment, order: Sequence[str]) -> None:
    """Write one row per specimen, following ``order``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_HEADER)
        for sid in dict.fromkeys(order):
            name = split.of(sid)
            if name is not None:
                w.writerow([sid, name])


def read_split(path: str | Path) -> SplitAssignment:
    path = Path(path)
    sets: dict[str, set[str]] = {name: set() for name in SPLIT_NAMES}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SPLIT_HEADER:
            raise ParseError(f"bad header, expected {','.join(SPLIT_HEADER)}", 1, path.name)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1] not in sets:
                raise ParseError(f"bad split row {row!r}", lineno, path.name)
            sets[row[1]].add(row[0])
    return SplitAssignment(**{k: frozenset(v) for k, v in sets.items()})
