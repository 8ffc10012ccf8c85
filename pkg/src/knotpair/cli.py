"""Command line front end: one subcommand per pipeline stage.

Stages only talk through files. Each subcommand writes its outputs into
``--out`` together with a ``manifest_<command>.json`` recording the resolved
options, the seed, and content hashes of inputs and outputs.

Options resolve in order: explicit flag, then the ``--config`` JSON file
(keys are the option names with underscores), then built-in defaults.

Exit codes: 0 success, 1 validation error, 2 I/O error. Errors are reported
on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .cluster import (
    GRID_START,
    GRID_STEP,
    GRID_STOP,
    cluster_specimens,
    evaluate_split,
    group_embeddings,
    read_pairs,
    threshold_grid,
    threshold_search,
    truth_partitions,
    write_curve,
    write_pairs,
)
from .errors import ConfigError, DataError, KnotPairError
from .features import build_feature_table, read_boards, read_features, write_features
from .ingest import (
    MIN_WOOD_FRACTION,
    WOOD_TOLERANCE,
    assemble_knot_records,
    filter_outlier,
    load_detections,
    read_measurements,
    read_ppm,
    wood_pixel_fraction,
)
from .nn import (
    TrainConfig,
    embed_all,
    load_model,
    report_learned_weights,
    save_model,
    train,
    write_train_log,
)
from .project import pca_fit, pca_project, scatter_svg, write_scatter
from .synth import SynthConfig, generate_dataset
from .triplets import build_triplets, read_split, read_triplets, split_specimens, write_split, write_triplets

log = logging.getLogger("knotpair")

VARIANT_CHOICES = ("standard", "learnable", "custom", "simclr")
VARIANT_LABELS = {
    "standard": "Standard Triplet Network",
    "learnable_weights": "Triplet Network with Learnable Weights",
    "custom_weights": "Triplet Network with Custom Weights",
    "simclr": "SimCLR-based Method",
}

COMMON_DEFAULTS = {"seed": 0, "grid_start": GRID_START, "grid_stop": GRID_STOP, "grid_step": GRID_STEP}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(opts: dict, *names: str) -> None:
    missing = [n for n in names if opts.get(n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"missing required option(s): {flags}")


def _out_dir(opts: dict) -> Path:
    _require(opts, "out")
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(command: str, opts: dict, inputs: dict, outputs: list[Path]) -> None:
    out = Path(opts["out"])
    echo = {k: v for k, v in sorted(opts.items()) if k not in inputs and k not in ("out", "config")}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": opts.get("seed"),
        "options": echo,
        "inputs": {
            k: {"name": Path(v).name, "sha256": _sha256(Path(v))}
            for k, v in sorted(inputs.items())
            if v is not None and Path(v).is_file()
        },
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _grid(opts: dict) -> np.ndarray:
    return threshold_grid(float(opts["grid_start"]), float(opts["grid_stop"]), float(opts["grid_step"]))


def _parse_weights(value) -> tuple[float, ...] | None:
    if value is None:
        return None
    if isinstance(value, str):
        try:
            value = [float(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse weight vector {value!r}") from None
    return tuple(float(v) for v in value)


def write_embeddings(path: Path, specimen_ids, E: np.ndarray) -> None:
    counters: dict[str, int] = {}
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["specimen_id", "knot_index"] + [f"e{i}" for i in range(E.shape[1])])
        for sid, row in zip(specimen_ids, E):
            k = counters.get(sid, 0)
            counters[sid] = k + 1
            w.writerow([sid, k] + [repr(float(v)) for v in row])


def read_embeddings(path: Path) -> tuple[list[str], np.ndarray]:
    sids, rows = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["specimen_id", "knot_index"]:
            raise DataError(f"{path}: not an embeddings file")
        for row in reader:
            if row:
                sids.append(row[0])
                rows.append([float(v) for v in row[2:]])
    width = len(header) - 2
    return sids, np.asarray(rows, dtype=np.float64).reshape(-1, width)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(opts: dict) -> int:
    out = _out_dir(opts)
    cfg = SynthConfig(
        n_specimens=int(opts["n_specimens"]),
        knots_per_specimen=(int(opts["knots_min"]), int(opts["knots_max"])),
        surfaces_per_knot=(int(opts["surfaces_min"]), int(opts["surfaces_max"])),
        jitter_sigma=None if opts.get("jitter_sigma") is None else float(opts["jitter_sigma"]),
        adjacent_prob=float(opts["adjacent_prob"]),
        frame_advance_mm=float(opts["frame_advance_mm"]),
        frame_length_mm=float(opts["frame_length_mm"]),
        seed=int(opts["seed"]),
    )
    specimens = generate_dataset(cfg, out)
    log.info("wrote %d synthetic specimens to %s", len(specimens), out)
    outputs = [out / n for n in ("boards.csv", "measurements.csv", "truth.csv", "synth_config.json")]
    _write_manifest("synth", opts, {}, outputs)
    return 0


def cmd_filter(opts: dict) -> int:
    _require(opts, "images")
    out = _out_dir(opts)
    images = Path(opts["images"])
    if not images.is_dir():
        raise FileNotFoundError(f"images directory not found: {images}")
    report = out / "filter_report.csv"
    rows = []
    for path in sorted(images.glob("*.ppm")):
        try:
            img = read_ppm(path)
        except OSError as exc:
            raise OSError(f"{path}: {exc.strerror or exc}") from exc
        frac = wood_pixel_fraction(img, tolerance=int(opts["tolerance"]))
        decision = filter_outlier(
            img, tolerance=int(opts["tolerance"]), min_fraction=float(opts["min_fraction"])
        )
        rows.append([path.name, repr(frac), decision])
    with report.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "fraction", "decision"])
        w.writerows(rows)
    removed = sum(r[2] == "remove" for r in rows)
    log.info("%d of %d frames flagged as outliers", removed, len(rows))
    _write_manifest("filter", opts, {"images": opts["images"]}, [report])
    return 0


def cmd_extract(opts: dict) -> int:
    _require(opts, "boards", "measurements", "labels")
    out = _out_dir(opts)
    boards = read_boards(opts["boards"])
    dets = load_detections(
        opts["labels"], float(opts["frame_advance_mm"]), float(opts["frame_length_mm"])
    )
    records = assemble_knot_records(dets, read_measurements(opts["measurements"]), boards)
    table = build_feature_table(records, boards)
    path = out / "features.csv"
    write_features(path, table)
    log.info("wrote %d feature rows", len(table))
    _write_manifest(
        "extract",
        opts,
        {k: opts[k] for k in ("boards", "measurements", "labels")},
        [path],
    )
    return 0


def cmd_triplets(opts: dict) -> int:
    _require(opts, "features")
    out = _out_dir(opts)
    table = read_features(opts["features"])
    ss = np.random.SeedSequence(int(opts["seed"]))
    trip_rng, split_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    triplets = build_triplets(table.rows, trip_rng)
    split = split_specimens(table.specimens(), split_rng)
    write_triplets(out / "triplets.csv", triplets)
    write_split(out / "split.csv", split, table.specimens())
    log.info(
        "%d triplets; %d/%d/%d specimens train/validation/test",
        len(triplets), len(split.train), len(split.validation), len(split.test),
    )
    _write_manifest(
        "triplets", opts, {"features": opts["features"]}, [out / "triplets.csv", out / "split.csv"]
    )
    return 0


_TRAIN_KEYS = (
    "margin", "learning_rate", "weight_decay", "epochs", "batch_size", "temperature",
    "noise_sigma", "drop_prob", "dtype",
)


def train_config_from_opts(opts: dict) -> TrainConfig:
    kwargs = {k: opts[k] for k in _TRAIN_KEYS if opts.get(k) is not None}
    if opts.get("scale_range") is not None:
        kwargs["scale_range"] = tuple(_parse_weights(opts["scale_range"]))
    return TrainConfig(
        variant=opts["variant"],
        seed=int(opts["seed"]),
        input_weights=_parse_weights(opts.get("custom_weights")),
        **kwargs,
    )


def cmd_train(opts: dict) -> int:
    _require(opts, "features", "split")
    cfg = train_config_from_opts(opts)
    if cfg.variant != "simclr":
        _require(opts, "triplets")
    out = _out_dir(opts)
    table = read_features(opts["features"])
    split = read_split(opts["split"])
    triplets = read_triplets(opts["triplets"]) if opts.get("triplets") else None
    result = train(table, triplets, cfg, split)
    model_path, log_path = out / "model.json", out / "train_log.csv"
    save_model(result.params, model_path)
    write_train_log(log_path, result.log)
    log.info("best epoch %d", result.best_epoch)
    if result.params.input_weights is not None:
        for name, w in report_learned_weights(result.params).items():
            log.info("input weight %-12s %.3f", name, w)
    _write_manifest(
        "train",
        opts,
        {k: opts.get(k) for k in ("features", "split", "triplets")},
        [model_path, log_path],
    )
    return 0


def cmd_embed(opts: dict) -> int:
    _require(opts, "model", "features")
    out = _out_dir(opts)
    params = load_model(opts["model"])
    table = read_features(opts["features"])
    E = embed_all(params, table.X)
    path = out / "embeddings.csv"
    write_embeddings(path, table.specimen_ids, E)
    _write_manifest("embed", opts, {"model": opts["model"], "features": opts["features"]}, [path])
    return 0


def cmd_cluster(opts: dict) -> int:
    _require(opts, "embeddings")
    out = _out_dir(opts)
    sids, E = read_embeddings(Path(opts["embeddings"]))
    by_sid = group_embeddings(sids, E)
    outputs = []
    threshold = opts.get("threshold")
    if threshold is None:
        _require(opts, "features")
        table = read_features(opts["features"])
        if table.specimen_ids != sids:
            raise DataError("embeddings and features rows do not line up")
        truth = truth_partitions(table.specimen_ids, table.knot_ids)
        if opts.get("split"):
            split = read_split(opts["split"])
            truth = {s: p for s, p in truth.items() if s in split.validation}
        search = threshold_search(by_sid, truth, _grid(opts))
        threshold = search.threshold
        write_curve(out / "threshold_curve.csv", search)
        outputs.append(out / "threshold_curve.csv")
        log.info("threshold %.2f, search accuracy %.4f", search.threshold, search.accuracy)
    parts = cluster_specimens(by_sid, float(threshold))
    write_pairs(out / "pairs.csv", parts.values())
    outputs.append(out / "pairs.csv")
    _write_manifest(
        "cluster",
        {**opts, "threshold_used": float(threshold)},
        {k: opts.get(k) for k in ("embeddings", "features", "split")},
        outputs,
    )
    return 0


def cmd_eval(opts: dict) -> int:
    _require(opts, "model", "features", "split")
    out = _out_dir(opts)
    table = read_features(opts["features"])
    split = read_split(opts["split"])
    models = opts["model"] if isinstance(opts["model"], list) else [opts["model"]]
    grid = _grid(opts)
    rows = []
    outputs = []
    for i, mpath in enumerate(models):
        params = load_model(mpath)
        report = evaluate_split(params, table, split, grid)
        rows.append((VARIANT_LABELS[params.variant], report))
        curve = out / f"threshold_curve_{i}.csv"
        write_curve(curve, report.search)
        outputs.append(curve)

    name_w = max([len("Model")] + [len(r[0]) for r in rows])
    print(f"{'Model':<{name_w}}  {'Optimal Threshold':>17}  {'Accuracy':>8}")
    for label, rep in rows:
        print(f"{label:<{name_w}}  {rep.threshold:>17.2f}  {rep.test_accuracy:>8.4f}")

    path = out / "eval.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "variant", "optimal_threshold", "validation_accuracy", "test_accuracy"])
        for mpath, (label, rep) in zip(models, rows):
            w.writerow([Path(mpath).name, rep.variant, repr(rep.threshold),
                        repr(rep.validation_accuracy), repr(rep.test_accuracy)])
    outputs.insert(0, path)
    inputs = {"features": opts["features"], "split": opts["split"]}
    inputs.update({f"model_{i}": m for i, m in enumerate(models)})
    _write_manifest("eval", {k: v for k, v in opts.items() if k != "model"}, inputs, outputs)
    return 0


def cmd_viz(opts: dict) -> int:
    _require(opts, "embeddings", "pairs")
    out = _out_dir(opts)
    sids, E = read_embeddings(Path(opts["embeddings"]))
    parts = read_pairs(opts["pairs"])
    index = []
    counters: dict[str, int] = {}
    for sid in sids:
        k = counters.get(sid, 0)
        counters[sid] = k + 1
        index.append(k)
    keep = np.asarray(
        [opts.get("specimen") in (None, sid) for sid in sids], dtype=bool
    )
    if keep.sum() < 2:
        raise DataError("need at least two knots to project")
    sel_sids = [s for s, k in zip(sids, keep) if k]
    sel_idx = [i for i, k in zip(index, keep) if k]
    labels = {sid: p.labels() for sid, p in parts.items()}
    try:
        cids = [labels[s][i] for s, i in zip(sel_sids, sel_idx)]
    except KeyError as exc:
        raise DataError(f"pairs file lacks knot {exc}") from None
    model = pca_fit(E[keep])
    xy = pca_project(model, E[keep])
    write_scatter(out / "scatter.csv", sel_sids, sel_idx, cids, xy)
    (out / "scatter.svg").write_text(scatter_svg(sel_sids, cids, xy))
    _write_manifest(
        "viz", opts, {"embeddings": opts["embeddings"], "pairs": opts["pairs"]},
        [out / "scatter.csv", out / "scatter.svg"],
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

S = argparse.SUPPRESS

COMMANDS: dict[str, tuple[Callable[[dict], int], dict]] = {
    "synth": (cmd_synth, {
        "n_specimens": 40, "knots_min": 8, "knots_max": 16, "surfaces_min": 2,
        "surfaces_max": 2, "jitter_sigma": None, "adjacent_prob": 0.0, "frame_advance_mm": 500.0,
        "frame_length_mm": 500.0,
    }),
    "filter": (cmd_filter, {"tolerance": WOOD_TOLERANCE, "min_fraction": MIN_WOOD_FRACTION}),
    "extract": (cmd_extract, {"frame_advance_mm": 500.0, "frame_length_mm": 500.0}),
    "triplets": (cmd_triplets, {}),
    "train": (cmd_train, {"variant": "standard"}),
    "embed": (cmd_embed, {}),
    "cluster": (cmd_cluster, {}),
    "eval": (cmd_eval, {}),
    "viz": (cmd_viz, {}),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=S, help="JSON file with option values")
    common.add_argument("--seed", type=int, default=S, help="random seed (default 0)")
    common.add_argument("--out", default=S, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--grid-start", type=float, default=S, help=f"default {GRID_START}")
    grid.add_argument("--grid-stop", type=float, default=S, help=f"default {GRID_STOP}")
    grid.add_argument("--grid-step", type=float, default=S, help=f"default {GRID_STEP}")

    frames = argparse.ArgumentParser(add_help=False)
    frames.add_argument("--frame-advance-mm", type=float, default=S,
                        help="conveyor advance per frame (default 500)")
    frames.add_argument("--frame-length-mm", type=float, default=S,
                        help="board length covered by one frame (default 500)")

    p = argparse.ArgumentParser(prog="knotpair", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common, frames], help="generate a synthetic dataset")
    s.add_argument("--n-specimens", type=int, default=S)
    s.add_argument("--knots-min", type=int, default=S)
    s.add_argument("--knots-max", type=int, default=S)
    s.add_argument("--surfaces-min", type=int, default=S)
    s.add_argument("--surfaces-max", type=int, default=S)
    s.add_argument("--jitter-sigma", type=float, default=S, help="mm (default 1%% of width)")
    s.add_argument("--adjacent-prob", type=float, default=S,
                   help="share of two-face knots placed on adjacent faces")

    s = sub.add_parser("filter", parents=[common], help="flag outlier frames by wood color")
    s.add_argument("--images", default=S, help="directory of .ppm frames")
    s.add_argument("--tolerance", type=int, default=S)
    s.add_argument("--min-fraction", type=float, default=S)

    s = sub.add_parser("extract", parents=[common, frames], help="build the feature table")
    s.add_argument("--boards", default=S)
    s.add_argument("--measurements", default=S)
    s.add_argument("--labels", default=S, help="directory of YOLO label files")

    s = sub.add_parser("triplets", parents=[common], help="build triplets and the 8:1:1 split")
    s.add_argument("--features", default=S)

    s = sub.add_parser("train", parents=[common], help="train an embedding network")
    s.add_argument("--features", default=S)
    s.add_argument("--triplets", default=S)
    s.add_argument("--split", default=S)
    s.add_argument("--variant", choices=VARIANT_CHOICES, default=S)
    s.add_argument("--custom-weights", default=S, help="comma-separated 9-vector (custom variant)")
    s.add_argument("--epochs", type=int, default=S)
    s.add_argument("--batch-size", type=int, default=S)
    s.add_argument("--learning-rate", type=float, default=S)
    s.add_argument("--weight-decay", type=float, default=S)
    s.add_argument("--margin", type=float, default=S)
    s.add_argument("--temperature", type=float, default=S)
    s.add_argument("--noise-sigma", type=float, default=S)
    s.add_argument("--scale-range", default=S, help="lo,hi")
    s.add_argument("--drop-prob", type=float, default=S)
    s.add_argument("--dtype", choices=("float32", "float64"), default=S)

    s = sub.add_parser("embed", parents=[common], help="embed every knot with a trained model")
    s.add_argument("--model", default=S)
    s.add_argument("--features", default=S)

    s = sub.add_parser("cluster", parents=[common, grid], help="pair knots by distance threshold")
    s.add_argument("--embeddings", default=S)
    s.add_argument("--threshold", type=float, default=S, help="skip the search and use this value")
    s.add_argument("--features", default=S, help="ground truth source for the threshold search")
    s.add_argument("--split", default=S, help="restrict the search to validation boards")

    s = sub.add_parser("eval", parents=[common, grid], help="validation threshold, test accuracy")
    s.add_argument("--model", action="append", default=S, help="repeat to compare models")
    s.add_argument("--features", default=S)
    s.add_argument("--split", default=S)

    s = sub.add_parser("viz", parents=[common], help="2-D PCA scatter of embeddings")
    s.add_argument("--embeddings", default=S)
    s.add_argument("--pairs", default=S)
    s.add_argument("--specimen", default=S, help="limit to one board")
    return p


def resolve_options(args: argparse.Namespace) -> dict:
    explicit = {k: v for k, v in vars(args).items() if k != "command"}
    config: dict = {}
    if explicit.get("config"):
        try:
            config = json.loads(Path(explicit["config"]).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{explicit['config']}: invalid JSON: {exc}") from None
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
    _, defaults = COMMANDS[args.command]
    return {**COMMON_DEFAULTS, **defaults, **config, **explicit}


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        opts = resolve_options(args)
        handler, _ = COMMANDS[args.command]
        return handler(opts)
    except KnotPairError as exc:
        _error("validation", exc)
        return 1
    except OSError as exc:
        _error("io", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
