"""Synthetic boards with known knot pairs.

Each knot is a straight branch crossing the board at one longitudinal
position. Where it reaches a surface it leaves an occurrence whose extent on
that surface is centred at a fixed fraction of the surface span: the same
fraction on opposite faces, the complementary fraction on adjacent faces.
Two-face knots pass straight through unless ``adjacent_prob`` says
otherwise. Per-record measurement noise is added on top.

The generator writes the same files a real capture would produce: boards,
measurements, one YOLO label file per frame, and a truth table.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cluster import Partition
from .errors import ConfigError
from .features import BoardGeometry, FeatureTable, build_feature_table, write_boards
from .ingest import (
    DetectionRecord,
    FrameMeta,
    KnotRecord,
    Measurement,
    format_detection_line,
    label_filename,
    longitudinal_coordinate,
    write_measurements,
)

TRUTH_HEADER = ("specimen_id", "knot_index", "knot_id")

# encased, loose, intergrown, overgrown, dead
KNOT_TYPE_PROBS = (0.1, 0.05, 0.55, 0.1, 0.2)
_OPPOSITE = {1: 3, 3: 1, 2: 4, 4: 2}


@dataclass
class SynthConfig:
    n_specimens: int = 40
    knots_per_specimen: tuple[int, int] = (8, 16)
    length_mm: tuple[float, float] = (2000.0, 5000.0)
    width_mm: tuple[float, float] = (100.0, 250.0)
    thickness_mm: tuple[float, float] = (40.0, 80.0)
    surfaces_per_knot: tuple[int, int] = (2, 2)
    knot_size_mm: tuple[float, float] = (10.0, 35.0)
    min_spacing_mm: float = 60.0
    jitter_sigma: float | None = None  # mm; None means 1% of the measured span
    adjacent_prob: float = 0.0  # chance a two-face knot shows on adjacent faces
    frame_advance_mm: float = 500.0
    frame_length_mm: float = 500.0
    seed: int = 0

    def __post_init__(self):
        for name in ("knots_per_specimen", "length_mm", "width_mm", "thickness_mm",
                     "surfaces_per_knot", "knot_size_mm"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range ({lo}, {hi})")
            setattr(self, name, (lo, hi))
        lo, hi = self.surfaces_per_knot
        if lo < 1 or hi > 4:
            raise ConfigError("surfaces_per_knot must lie within 1..4")
        if self.knots_per_specimen[0] < 0 or self.n_specimens < 0:
            raise ConfigError("counts must be non-negative")
        if not 0.0 <= self.adjacent_prob <= 1.0:
            raise ConfigError("adjacent_prob must lie within [0, 1]")
        if self.jitter_sigma is not None and self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        if min(self.width_mm[0], self.thickness_mm[0], self.length_mm[0]) <= 0:
            raise ConfigError("board dimensions must be positive")
        if self.knot_size_mm[0] <= 0:
            raise ConfigError("knot sizes must be positive")
        if self.knot_size_mm[1] > min(self.width_mm[0], self.thickness_mm[0]):
            raise ConfigError("largest knot does not fit the smallest board cross-section")
        needed = self.knots_per_specimen[1] * self.min_spacing_mm
        if needed > self.length_mm[0]:
            raise ConfigError(
                f"{self.knots_per_specimen[1]} knots at {self.min_spacing_mm} mm spacing "
                f"do not fit a {self.length_mm[0]} mm board"
            )
        if not (self.frame_advance_mm > 0 and self.frame_length_mm > 0):
            raise ConfigError("frame advance and length must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SynthSpecimen:
    board: BoardGeometry
    records: list[KnotRecord]
    truth: Partition
    detections: list[DetectionRecord] = field(default_factory=list)


def _fit_box(center: float, size: float) -> tuple[float, float]:
    center = min(max(center, 1e-6), 1 - 1e-6)
    size = min(max(size, 1e-6), 2 * min(center, 1 - center))
    return center, size


def _choose_surfaces(k: int, rng: np.random.Generator, adjacent_prob: float) -> list[int]:
    first = int(rng.integers(1, 5))
    if k == 1:
        return [first]
    if k == 4:
        return [1, 2, 3, 4]
    if k == 2:
        # a branch passing straight through shows on opposite faces
        if rng.random() >= adjacent_prob:
            return sorted([first, _OPPOSITE[first]])
        adj = [s for s in (1, 2, 3, 4) if s not in (first, _OPPOSITE[first])]
        return sorted([first, adj[int(rng.integers(2))]])
    missing = int(rng.integers(1, 5))
    return [s for s in (1, 2, 3, 4) if s != missing]


def generate_specimen(
    cfg: SynthConfig, rng: np.random.Generator, specimen_id: str = "SYN0001"
) -> SynthSpecimen:
    board = BoardGeometry(
        specimen_id,
        float(rng.uniform(*cfg.length_mm)),
        float(rng.uniform(*cfg.width_mm)),
        float(rng.uniform(*cfg.thickness_mm)),
    )
    pith = int(rng.integers(0, 7))
    n_knots = int(rng.integers(cfg.knots_per_specimen[0], cfg.knots_per_specimen[1] + 1))
    div = {1: board.width_mm, 2: board.thickness_mm, 3: board.width_mm, 4: board.thickness_mm}
    # pith-to-bottom distance, used only when the board contains the pith;
    # opposite faces see it at the same fraction of their span
    across, through = (float(x) for x in rng.uniform(0.3, 0.7, size=2))
    pith_dist = {1: across * div[1], 3: across * div[3], 2: through * div[2], 4: through * div[4]}

    # positions with a guaranteed minimum gap, 1/2 gap clear of both ends
    gap = cfg.min_spacing_mm
    slack = board.length_mm - gap * n_knots
    cuts = np.sort(rng.uniform(0.0, slack, size=n_knots))
    positions = cuts + gap * (np.arange(n_knots) + 0.5)
    positions = positions[rng.permutation(n_knots)]

    def jit(span: float) -> float:
        sigma = 0.01 * span if cfg.jitter_sigma is None else cfg.jitter_sigma
        return float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0

    records: list[KnotRecord] = []
    detections: list[DetectionRecord] = []
    labels: list[int] = []
    for knot_id in range(n_knots):
        knot_type = int(rng.choice(5, p=KNOT_TYPE_PROBS)) + 1
        size = float(rng.uniform(*cfg.knot_size_mm))
        aspect = float(rng.uniform(0.6, 0.95))
        frac = float(rng.uniform(0.15, 0.85))
        k = int(rng.integers(cfg.surfaces_per_knot[0], cfg.surfaces_per_knot[1] + 1))
        surfaces = _choose_surfaces(k, rng, cfg.adjacent_prob)
        ref = surfaces[0]
        for surface in surfaces:
            D = div[surface]
            same_axis = surface in (ref, _OPPOSITE[ref])
            c = (frac if same_axis else 1.0 - frac) * D
            k1 = min(max(c - size / 2 + jit(D), 0.0), D)
            k2 = min(max(c + size / 2 + jit(D), k1), D)
            d_max = max(size + jit(D), 0.1)
            d_min = min(max(size * aspect + jit(D), 0.1), d_max)
            dist = None
            if pith == 0:
                dist = min(max(pith_dist[surface] + jit(D), 0.0), D)

            lon = min(max(float(positions[knot_id]) + jit(board.width_mm), 0.0), board.length_mm)
            frame = int(lon // cfg.frame_advance_mm) + 1
            xc = (lon - (frame - 1) * cfg.frame_advance_mm) / cfg.frame_length_mm
            xc, bw = _fit_box(xc, d_max / cfg.frame_length_mm)
            yc, bh = _fit_box((k1 + k2) / (2 * D), (k2 - k1) / D)
            meta = FrameMeta(specimen_id, surface, frame, cfg.frame_advance_mm, cfg.frame_length_mm)
            det = DetectionRecord(meta, xc, yc, bw, bh)
            # the recorded coordinate is what a reader of the label file recovers
            lon = longitudinal_coordinate(det)
            detections.append(det)
            records.append(
                KnotRecord(
                    specimen_id=specimen_id,
                    knot_id=knot_id,
                    surface=surface,
                    longitudinal_mm=lon,
                    k1_mm=k1,
                    k2_mm=k2,
                    d_min_mm=d_min,
                    d_max_mm=d_max,
                    dist_center_mm=dist,
                    knot_type=knot_type,
                    pith_location=pith,
                )
            )
            labels.append(knot_id)

    # ordinals follow emission order within each (surface, frame)
    counter: dict[tuple, int] = {}
    numbered = []
    for det in detections:
        key = (det.frame.surface, det.frame.frame_index)
        numbered.append(
            DetectionRecord(det.frame, det.x_center, det.y_center, det.box_width,
                            det.box_height, ordinal=counter.get(key, 0))
        )
        counter[key] = counter.get(key, 0) + 1
    return SynthSpecimen(board, records, Partition.from_labels(specimen_id, labels), numbered)


def specimen_id(i: int) -> str:
    return f"SYN{i + 1:04d}"


def generate_specimens(cfg: SynthConfig) -> list[SynthSpecimen]:
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_specimens)
    return [
        generate_specimen(cfg, np.random.default_rng(ss), specimen_id(i))
        for i, ss in enumerate(children)
    ]


def feature_table(specimens: list[SynthSpecimen]) -> FeatureTable:
    records = [r for s in specimens for r in s.records]
    return build_feature_table(records, {s.board.specimen_id: s.board for s in specimens})


def generate_dataset(cfg: SynthConfig, out_dir: str | Path | None = None) -> list[SynthSpecimen]:
    """Generate all specimens and, when ``out_dir`` is given, write them out.

    Files: ``boards.csv``, ``measurements.csv``, ``truth.csv``,
    ``labels/<specimen>_<surface>_<frame>.txt`` and ``synth_config.json``.
    """
    specimens = generate_specimens(cfg)
    if out_dir is not None:
        write_dataset(specimens, cfg, out_dir)
    return specimens


def write_dataset(specimens: list[SynthSpecimen], cfg: SynthConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    labels_dir = out / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    write_boards(out / "boards.csv", [s.board for s in specimens])

    measurements = []
    files: dict[str, list[str]] = {}
    for spec in specimens:
        for rec, det in zip(spec.records, spec.detections):
            f = det.frame
            measurements.append(
                Measurement(
                    specimen_id=rec.specimen_id,
                    surface=rec.surface,
                    frame=f.frame_index,
                    ordinal=det.ordinal,
                    knot_id=rec.knot_id,
                    k1_mm=rec.k1_mm,
                    k2_mm=rec.k2_mm,
                    d_min_mm=rec.d_min_mm,
                    d_max_mm=rec.d_max_mm,
                    dist_center_mm=rec.dist_center_mm,
                    knot_type=rec.knot_type,
                    pith_location=rec.pith_location,
                )
            )
            name = label_filename(f.specimen_id, f.surface, f.frame_index)
            lines = files.setdefault(name, [])
            assert len(lines) == det.ordinal
            lines.append(format_detection_line(det))
    write_measurements(out / "measurements.csv", measurements)
    for name in sorted(files):
        (labels_dir / name).write_text("\n".join(files[name]) + "\n")

    with (out / "truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for spec in specimens:
            for idx, rec in enumerate(spec.records):
                w.writerow([rec.specimen_id, idx, rec.knot_id])
    (out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def read_truth(path: str | Path) -> dict[str, Partition]:
    labels: dict[str, dict[int, int]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            labels.setdefault(row["specimen_id"], {})[int(row["knot_index"])] = int(row["knot_id"])
    out = {}
    for sid, by_idx in labels.items():
        ordered = [by_idx[i] for i in range(len(by_idx))]
        out[sid] = Partition.from_labels(sid, ordered)
    return out
