"""Normalized 9-dimensional knot feature vectors.

Board-relative measurements are made comparable across boards: the
longitudinal coordinate is divided by board length, and per-surface
measurements by the board width (surfaces 1 and 3) or thickness (surfaces
2 and 4). Categorical codes pass through unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError, ParseError
from .ingest import KnotRecord

SURFACE = 0
D_MIN = 1
D_MAX = 2
K1 = 3
K2 = 4
LONGITUDINAL = 5
DIST_CENTER = 6
KNOT_TYPE = 7
PITH_TYPE = 8

N_FEATURES = 9

FEATURE_COLUMNS = (
    "surface",
    "d_min",
    "d_max",
    "k1",
    "k2",
    "longitudinal",
    "dist_center",
    "knot_type",
    "pith_type",
)

# Display labels, same order as FEATURE_COLUMNS.
FEATURE_LABELS = (
    "Surface",
    "d_min",
    "d_max",
    "k1",
    "k2",
    "Longitudinal Coordinate",
    "Distance of knot center to bottom",
    "Knot Type",
    "Pith Type",
)

BOARD_HEADER = ("specimen_id", "length_mm", "width_mm", "thickness_mm")
FEATURES_HEADER = ("specimen_id", "knot_id") + FEATURE_COLUMNS

_BOUND_EPS = 1e-9
_BOUNDED = (K1, K2, LONGITUDINAL, DIST_CENTER)
_INT_COLUMNS = (SURFACE, KNOT_TYPE, PITH_TYPE)


@dataclass(frozen=True)
class BoardGeometry:
    specimen_id: str
    length_mm: float
    width_mm: float
    thickness_mm: float

    def __post_init__(self):
        for name in ("length_mm", "width_mm", "thickness_mm"):
            if not getattr(self, name) > 0:
                raise DataError(f"{self.specimen_id}: {name} must be positive")


def surface_divisor(surface: int, board: BoardGeometry) -> float:
    if surface in (1, 3):
        return board.width_mm
    if surface in (2, 4):
        return board.thickness_mm
    raise DataError(f"surface must be 1..4, got {surface}")


def build_feature_vector(rec: KnotRecord, board: BoardGeometry) -> np.ndarray:
    """Return the 9 features in canonical order (see ``FEATURE_COLUMNS``).

    A missing pith distance is encoded as 0.0. Raises ``DataError`` when a
    bounded feature (k1, k2, longitudinal, pith distance) normalizes above 1.
    """
    if rec.specimen_id != board.specimen_id:
        raise DataError(
            f"record specimen {rec.specimen_id!r} does not match board {board.specimen_id!r}"
        )
    div = surface_divisor(rec.surface, board)
    v = np.empty(N_FEATURES, dtype=np.float64)
    v[SURFACE] = rec.surface
    v[D_MIN] = rec.d_min_mm / div
    v[D_MAX] = rec.d_max_mm / div
    v[K1] = rec.k1_mm / div
    v[K2] = rec.k2_mm / div
    v[LONGITUDINAL] = rec.longitudinal_mm / board.length_mm
    v[DIST_CENTER] = 0.0 if rec.dist_center_mm is None else rec.dist_center_mm / div
    v[KNOT_TYPE] = rec.knot_type
    v[PITH_TYPE] = rec.pith_location
    for i in _BOUNDED:
        if not 0.0 <= v[i] <= 1.0 + _BOUND_EPS:
            raise DataError(
                f"{rec.specimen_id}: normalized {FEATURE_COLUMNS[i]} = {v[i]!r} outside [0, 1]; "
                "measurement exceeds board dimension"
            )
    return v


class RowId(NamedTuple):
    specimen_id: str
    knot_id: int | None


@dataclass(eq=False)
class FeatureTable:
    """Feature rows plus their identity columns, in file order."""

    specimen_ids: list[str]
    knot_ids: list[int | None]
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, N_FEATURES)
        if not (len(self.specimen_ids) == len(self.knot_ids) == self.X.shape[0]):
            raise DataError("feature table columns have inconsistent lengths")

    def __len__(self):
        return self.X.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (
            self.specimen_ids == other.specimen_ids
            and self.knot_ids == other.knot_ids
            and np.array_equal(self.X, other.X)
        )

    @property
    def rows(self) -> list[RowId]:
        return [RowId(s, k) for s, k in zip(self.specimen_ids, self.knot_ids)]

    def specimens(self) -> list[str]:
        """Distinct specimen ids in first-appearance order."""
        return list(dict.fromkeys(self.specimen_ids))

    def indices_by_specimen(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, s in enumerate(self.specimen_ids):
            out.setdefault(s, []).append(i)
        return {s: np.asarray(ix, dtype=np.intp) for s, ix in out.items()}


def build_feature_table(
    records: Sequence[KnotRecord], boards: Mapping[str, BoardGeometry]
) -> FeatureTable:
    rows = []
    for rec in records:
        board = boards.get(rec.specimen_id)
        if board is None:
            raise DataError(f"no board geometry for specimen {rec.specimen_id!r}")
        rows.append(build_feature_vector(rec, board))
    X = np.vstack(rows) if rows else np.empty((0, N_FEATURES))
    return FeatureTable(
        specimen_ids=[r.specimen_id for r in records],
        knot_ids=[r.knot_id for r in records],
        X=X,
    )


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def _check_header(header, expected, path: Path):
    if header is None or tuple(h.strip() for h in header) != tuple(expected):
        raise ParseError(f"bad header, expected {','.join(expected)}", 1, path.name)


def read_boards(path: str | Path) -> dict[str, BoardGeometry]:
    path = Path(path)
    boards: dict[str, BoardGeometry] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), BOARD_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid, length, width, thick = row
                board = BoardGeometry(sid, float(length), float(width), float(thick))
            except (ValueError, DataError) as exc:
                raise ParseError(str(exc), lineno, path.name) from None
            if sid in boards:
                raise ParseError(f"duplicate specimen {sid!r}", lineno, path.name)
            boards[sid] = board
    return boards


def write_boards(path: str | Path, boards: Iterable[BoardGeometry]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOARD_HEADER)
        for b in boards:
            w.writerow([b.specimen_id, repr(b.length_mm), repr(b.width_mm), repr(b.thickness_mm)])


def _fmt_feature(i: int, value: float) -> str:
    if i in _INT_COLUMNS and float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def write_features(path: str | Path, table: FeatureTable) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURES_HEADER)
        for sid, kid, x in zip(table.specimen_ids, table.knot_ids, table.X):
            w.writerow(
                [sid, "" if kid is None else kid]
                + [_fmt_feature(i, v) for i, v in enumerate(x)]
            )


def read_features(path: str | Path) -> FeatureTable:
    path = Path(path)
    sids, kids, rows = [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        _check_header(next(reader, None), FEATURES_HEADER, path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(FEATURES_HEADER):
                raise ParseError(f"expected {len(FEATURES_HEADER)} fields", lineno, path.name)
            try:
                kids.append(None if row[1].strip() == "" else int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path.name) from None
            sids.append(row[0])
    X = np.asarray(rows, dtype=np.float64) if rows else np.empty((0, N_FEATURES))
    return FeatureTable(sids, kids, X)
