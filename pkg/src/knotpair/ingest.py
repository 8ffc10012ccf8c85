"""Frame images, detection label files and per-knot measurements.

Images arrive as binary PPM (P6). Frames that show almost no wood (the
conveyor's black background while boards are loaded) are dropped by a
color-fraction rule. Detection boxes come in YOLO text format, one file per
frame, and are joined with the hand-measured knot attributes to produce
``KnotRecord`` rows.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .errors import AssemblyError, DataError, FormatError, ParseError

log = logging.getLogger(__name__)

WOOD_RGB = (190, 161, 125)
WOOD_TOLERANCE = 5
MIN_WOOD_FRACTION = 0.05

MEASUREMENT_HEADER = (
    "specimen_id",
    "surface",
    "frame",
    "ordinal",
    "knot_id",
    "k1_mm",
    "k2_mm",
    "d_min_mm",
    "d_max_mm",
    "dist_center_mm",
    "knot_type",
    "pith_location",
)

Decision = Literal["keep", "remove"]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RawImage:
    """8-bit RGB image; ``pixels`` has shape (height, width, 3)."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"image dimensions must be positive, got {self.width}x{self.height}")
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise DataError(
                f"pixel array shape {px.shape} does not match {self.height}x{self.width}x3"
            )
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise DataError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_pixels(cls, pixels) -> "RawImage":
        px = np.asarray(pixels)
        return cls(width=px.shape[1], height=px.shape[0], pixels=px)

    def __eq__(self, other):
        if not isinstance(other, RawImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


_WS = b" \t\n\r\v\f"


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skips whitespace and '#' comments, then reads one token.
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
            pos += 1
        elif c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", pos)
    return data[start:pos], pos


def _header_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, pos = _read_header_token(data, pos)
    if not tok.isdigit():
        raise FormatError(f"invalid {what} {tok!r}", pos - len(tok))
    return int(tok), pos


def parse_ppm(data: bytes) -> RawImage:
    """Decode a binary P6 PPM with max value 255."""
    if data[:2] != b"P6":
        raise FormatError("missing P6 magic number", 0)
    pos = 2
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("expected whitespace after magic number", pos)
    width, pos = _header_int(data, pos, "width")
    height, pos = _header_int(data, pos, "height")
    maxval, pos = _header_int(data, pos, "max value")
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive dimensions {width}x{height}", pos)
    if maxval != 255:
        raise FormatError(f"unsupported max value {maxval}, expected 255", pos)
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("expected single whitespace before pixel data", pos)
    pos += 1
    expected = 3 * width * height
    payload = data[pos:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: {len(payload)} bytes, expected {expected}", pos + len(payload)
        )
    if len(payload) > expected:
        raise FormatError(
            f"{len(payload) - expected} trailing bytes after pixel data", pos + expected
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return RawImage(width=width, height=height, pixels=pixels)


def write_ppm(img: RawImage) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()


def read_ppm(path: str | Path) -> RawImage:
    return parse_ppm(Path(path).read_bytes())


def wood_pixel_fraction(
    img: RawImage, reference: Sequence[int] = WOOD_RGB, tolerance: int = WOOD_TOLERANCE
) -> float:
    """Fraction of pixels whose every channel is within ``tolerance`` of ``reference``.

    The bound is inclusive.
    """
    if tolerance < 0:
        raise DataError(f"tolerance must be >= 0, got {tolerance}")
    px = img.pixels.reshape(-1, 3)
    if px.shape[0] == 0:
        raise DataError("wood fraction undefined for an empty image")
    ref = np.asarray(reference, dtype=np.int16)
    close = np.all(np.abs(px.astype(np.int16) - ref) <= tolerance, axis=1)
    return int(close.sum()) / px.shape[0]


def filter_outlier(
    img: RawImage,
    reference: Sequence[int] = WOOD_RGB,
    tolerance: int = WOOD_TOLERANCE,
    min_fraction: float = MIN_WOOD_FRACTION,
) -> Decision:
    if not 0.0 < min_fraction < 1.0:
        raise DataError(f"min_fraction must be in (0, 1), got {min_fraction}")
    frac = wood_pixel_fraction(img, reference, tolerance)
    return "remove" if frac < min_fraction else "keep"


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameMeta:
    specimen_id: str
    surface: int
    frame_index: int
    frame_advance_mm: float
    frame_length_mm: float

    def __post_init__(self):
        if self.surface not in (1, 2, 3, 4):
            raise DataError(f"surface must be 1..4, got {self.surface}")
        if self.frame_index < 1:
            raise DataError(f"frame_index must be >= 1, got {self.frame_index}")
        if not self.frame_advance_mm > 0 or not self.frame_length_mm > 0:
            raise DataError("frame advance and frame length must be positive")


@dataclass(frozen=True)
class DetectionRecord:
    frame: FrameMeta
    x_center: float
    y_center: float
    box_width: float
    box_height: float
    ordinal: int = 0  # line position within the label file

    @property
    def key(self) -> tuple[str, int, int, int]:
        f = self.frame
        return (f.specimen_id, f.surface, f.frame_index, self.ordinal)


_BOX_EPS = 1e-9


def _check_box(xc: float, yc: float, w: float, h: float) -> str | None:
    for name, v in (("x_center", xc), ("y_center", yc)):
        if not 0.0 <= v <= 1.0:
            return f"{name} {v} out of range [0, 1]"
    for name, v in (("width", w), ("height", h)):
        if not 0.0 < v <= 1.0:
            return f"{name} {v} out of range (0, 1]"
    if xc - w / 2 < -_BOX_EPS or xc + w / 2 > 1 + _BOX_EPS:
        return "box exceeds the frame horizontally"
    if yc - h / 2 < -_BOX_EPS or yc + h / 2 > 1 + _BOX_EPS:
        return "box exceeds the frame vertically"
    return None


def parse_detection_file(
    text: str | Iterable[str], frame: FrameMeta, source: str | None = None
) -> list[DetectionRecord]:
    """Parse YOLO label lines ``class xc yc w h``; the class token is ignored."""
    lines = text.splitlines() if isinstance(text, str) else list(text)
    out: list[DetectionRecord] = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise ParseError(f"expected 5 tokens, found {len(tokens)}", lineno, source)
        try:
            _cls, xc, yc, w, h = (float(t) for t in tokens)
        except ValueError:
            raise ParseError(f"non-numeric token in {line.strip()!r}", lineno, source) from None
        if not all(math.isfinite(v) for v in (xc, yc, w, h)):
            raise ParseError("non-finite value", lineno, source)
        problem = _check_box(xc, yc, w, h)
        if problem:
            raise ParseError(problem, lineno, source)
        out.append(DetectionRecord(frame, xc, yc, w, h, ordinal=len(out)))
    return out


def longitudinal_coordinate(det: DetectionRecord) -> float:
    """Board-axis distance (mm) from the board start to the detection center.

    Frame ``n`` starts at ``(n - 1) * advance``; the box center adds its
    within-frame offset.
    """
    f = det.frame
    return (f.frame_index - 1) * f.frame_advance_mm + det.x_center * f.frame_length_mm


_LABEL_NAME = re.compile(r"^(?P<specimen>.+)_(?P<surface>\d+)_(?P<frame>\d+)\.txt$")


def label_filename(specimen_id: str, surface: int, frame_index: int) -> str:
    return f"{specimen_id}_{surface}_{frame_index}.txt"


def load_detections(
    labels_dir: str | Path, frame_advance_mm: float, frame_length_mm: float
) -> list[DetectionRecord]:
    """Read every ``<specimen>_<surface>_<frame>.txt`` in ``labels_dir``."""
    labels_dir = Path(labels_dir)
    out: list[DetectionRecord] = []
    for path in sorted(labels_dir.iterdir()):
        m = _LABEL_NAME.match(path.name)
        if not m:
            if path.suffix == ".txt":
                log.warning("skipping label file with unrecognised name: %s", path.name)
            continue
        meta = FrameMeta(
            specimen_id=m["specimen"],
            surface=int(m["surface"]),
            frame_index=int(m["frame"]),
            frame_advance_mm=frame_advance_mm,
            frame_length_mm=frame_length_mm,
        )
        out.extend(parse_detection_file(path.read_text(), meta, source=path.name))
    out.sort(key=lambda d: d.key)
    return out


def format_detection_line(det: DetectionRecord, cls: int = 0) -> str:
    return f"{cls} {det.x_center!r} {det.y_center!r} {det.box_width!r} {det.box_height!r}"


# ---------------------------------------------------------------------------
# Knot records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnotRecord:
    specimen_id: str
    knot_id: int | None
    surface: int
    longitudinal_mm: float
    k1_mm: float
    k2_mm: float
    d_min_mm: float
    d_max_mm: float
    dist_center_mm: float | None
    knot_type: int
    pith_location: int

    def __post_init__(self):
        problems = []
        if self.surface not in (1, 2, 3, 4):
            problems.append(f"surface {self.surface} not in 1..4")
        if self.knot_type not in (1, 2, 3, 4, 5):
            problems.append(f"knot_type {self.knot_type} not in 1..5")
        if not 0 <= self.pith_location <= 6:
            problems.append(f"pith_location {self.pith_location} not in 0..6")
        if self.knot_id is not None and self.knot_id < 0:
            problems.append(f"knot_id {self.knot_id} negative")
        if not self.longitudinal_mm >= 0:
            problems.append(f"longitudinal_mm {self.longitudinal_mm} negative")
        if not (self.k1_mm >= 0 and self.k2_mm >= 0):
            problems.append("k1/k2 must be non-negative")
        if not self.k2_mm >= self.k1_mm:
            problems.append(f"k2_mm {self.k2_mm} < k1_mm {self.k1_mm}")
        if not (self.d_min_mm > 0 and self.d_max_mm > 0):
            problems.append("d_min/d_max must be positive")
        if not self.d_max_mm >= self.d_min_mm:
            problems.append(f"d_max_mm {self.d_max_mm} < d_min_mm {self.d_min_mm}")
        if self.dist_center_mm is not None and not self.dist_center_mm >= 0:
            problems.append(f"dist_center_mm {self.dist_center_mm} negative")
        if problems:
            raise DataError("; ".join(problems))


@dataclass(frozen=True)
class Measurement:
    """One row of the measurements file."""

    specimen_id: str
    surface: int
    frame: int
    ordinal: int
    knot_id: int | None
    k1_mm: float
    k2_mm: float
    d_min_mm: float
    d_max_mm: float
    dist_center_mm: float | None
    knot_type: int
    pith_location: int

    @property
    def key(self) -> tuple[str, int, int, int]:
        return (self.specimen_id, self.surface, self.frame, self.ordinal)


def _opt(cast, value: str):
    value = value.strip()
    return None if value == "" else cast(value)


def read_measurements(path: str | Path) -> list[Measurement]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MEASUREMENT_HEADER:
            raise ParseError(f"bad header, expected {','.join(MEASUREMENT_HEADER)}", 1, path.name)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MEASUREMENT_HEADER):
                raise ParseError(f"expected {len(MEASUREMENT_HEADER)} fields", lineno, path.name)
            try:
                rows.append(
                    Measurement(
                        specimen_id=row[0],
                        surface=int(row[1]),
                        frame=int(row[2]),
                        ordinal=int(row[3]),
                        knot_id=_opt(int, row[4]),
                        k1_mm=float(row[5]),
                        k2_mm=float(row[6]),
                        d_min_mm=float(row[7]),
                        d_max_mm=float(row[8]),
                        dist_center_mm=_opt(float, row[9]),
                        knot_type=int(row[10]),
                        pith_location=int(row[11]),
                    )
                )
            except ValueError as exc:
                raise ParseError(str(exc), lineno, path.name) from None
    return rows


def _fmt_opt(value) -> str:
    return "" if value is None else repr(float(value))


def write_measurements(path: str | Path, rows: Iterable[Measurement]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MEASUREMENT_HEADER)
        for m in rows:
            w.writerow(
                [
                    m.specimen_id,
                    m.surface,
                    m.frame,
                    m.ordinal,
                    "" if m.knot_id is None else m.knot_id,
                    repr(float(m.k1_mm)),
                    repr(float(m.k2_mm)),
                    repr(float(m.d_min_mm)),
                    repr(float(m.d_max_mm)),
                    _fmt_opt(m.dist_center_mm),
                    m.knot_type,
                    m.pith_location,
                ]
            )


def assemble_knot_records(
    detections: Sequence[DetectionRecord],
    measurements: Sequence[Measurement],
    boards: Mapping[str, object] | None = None,
) -> list[KnotRecord]:
    """Join detections with measurement rows on (specimen, surface, frame, ordinal).

    Records come out in measurement-file order. When ``boards`` is given,
    every specimen must have a board entry and knots must lie on the board.
    """
    by_key: dict[tuple, DetectionRecord] = {}
    for det in detections:
        if det.key in by_key:
            raise AssemblyError("duplicate detection", det.key)
        by_key[det.key] = det

    seen: set[tuple] = set()
    records: list[KnotRecord] = []
    for m in measurements:
        if m.key in seen:
            raise AssemblyError("duplicate measurement row", m.key)
        seen.add(m.key)
        det = by_key.get(m.key)
        if det is None:
            raise AssemblyError("measurement row has no detection", m.key)
        lon = longitudinal_coordinate(det)
        if boards is not None:
            board = boards.get(m.specimen_id)
            if board is None:
                raise AssemblyError("no board geometry", m.key)
            if lon > board.length_mm * (1 + 1e-9):
                raise AssemblyError(
                    f"longitudinal coordinate {lon} mm beyond board length {board.length_mm} mm",
                    m.key,
                )
        try:
            rec = KnotRecord(
                specimen_id=m.specimen_id,
                knot_id=m.knot_id,
                surface=m.surface,
                longitudinal_mm=lon,
                k1_mm=m.k1_mm,
                k2_mm=m.k2_mm,
                d_min_mm=m.d_min_mm,
                d_max_mm=m.d_max_mm,
                dist_center_mm=m.dist_center_mm,
                knot_type=m.knot_type,
                pith_location=m.pith_location,
            )
        except DataError as exc:
            raise AssemblyError(str(exc), m.key) from None
        records.append(rec)

    missing = sorted(set(by_key) - seen)
    if missing:
        raise AssemblyError("detection has no measurement row", missing[0])
    return records
