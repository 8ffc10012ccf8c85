"""Training loops for the triplet and contrastive variants."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, DataError
from ..features import FeatureTable
from ..triplets import SplitAssignment, Triplet
from .losses import Augmentation, augment, ntxent_loss_grad, triplet_loss_grad
from .network import (
    DROPOUT_LAYERS,
    DROPOUT_RATE,
    ENCODER_DIMS,
    PROJECTION_DIMS,
    ModelParams,
    backward,
    forward_cached,
    init_model,
    normalize_variant,
)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

# variant-specific defaults: (learning_rate, weight_decay, epochs, batch_size)
_TRIPLET_DEFAULTS = (1e-4, 1e-5, 2000, 32)
_SIMCLR_DEFAULTS = (1e-3, 0.0, 2500, 18)


@dataclass
class TrainConfig:
    variant: str = "standard"
    margin: float = 1.0
    learning_rate: float | None = None
    weight_decay: float | None = None
    epochs: int | None = None
    batch_size: int | None = None
    temperature: float = 0.5
    seed: int = 0
    noise_sigma: float = 0.05
    scale_range: tuple[float, float] = (0.9, 1.1)
    drop_prob: float = 0.1
    input_weights: tuple[float, ...] | None = None
    dtype: str = "float32"
    encoder_dims: tuple[int, ...] = ENCODER_DIMS
    projection_dims: tuple[int, ...] = PROJECTION_DIMS
    dropout_rate: float = DROPOUT_RATE
    dropout_layers: int = DROPOUT_LAYERS

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        lr, wd, ep, bs = _SIMCLR_DEFAULTS if self.variant == "simclr" else _TRIPLET_DEFAULTS
        if self.learning_rate is None:
            self.learning_rate = lr
        if self.weight_decay is None:
            self.weight_decay = wd
        if self.epochs is None:
            self.epochs = ep
        if self.batch_size is None:
            self.batch_size = bs
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.encoder_dims = tuple(int(v) for v in self.encoder_dims)
        self.projection_dims = tuple(int(v) for v in self.projection_dims)
        if self.input_weights is not None:
            self.input_weights = tuple(float(v) for v in self.input_weights)

        if self.variant == "custom_weights" and self.input_weights is None:
            raise ConfigError("custom_weights variant requires input_weights")
        if self.variant != "custom_weights" and self.input_weights is not None:
            raise ConfigError(f"input_weights only apply to custom_weights, not {self.variant}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad scale_range {self.scale_range}")
        if not 0 <= self.drop_prob < 1 or self.noise_sigma < 0:
            raise ConfigError("drop_prob must be in [0, 1) and noise_sigma >= 0")

    @property
    def augmentation(self) -> Augmentation:
        return Augmentation(self.noise_sigma, self.scale_range, self.drop_prob)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def triplet_objective(
    params: ModelParams,
    X: np.ndarray,
    batch: np.ndarray,
    margin: float,
    rng: np.random.Generator | None,
    mode: str = "train",
    need_grad: bool = True,
):
    """Mean triplet loss over ``batch`` (rows of anchor/positive/negative indices).

    Returns ``(loss, grads)``; grads is None when ``need_grad`` is false.
    """
    b = batch.shape[0]
    idx = np.concatenate([batch[:, 0], batch[:, 1], batch[:, 2]])
    out, cache = forward_cached(params, X[idx], mode, rng)
    loss, dA, dP, dN = triplet_loss_grad(out[:b], out[b : 2 * b], out[2 * b :], margin)
    if not need_grad:
        return loss, None
    return loss, backward(params, cache, np.concatenate([dA, dP, dN]))


def simclr_objective(
    params: ModelParams,
    X: np.ndarray,
    temperature: float,
    aug: Augmentation,
    aug_rng: np.random.Generator,
    rng: np.random.Generator | None,
    mode: str = "train",
    need_grad: bool = True,
):
    """NT-Xent over two augmented views of the rows of ``X``."""
    views = np.concatenate([augment(X, aug, aug_rng), augment(X, aug, aug_rng)])
    out, cache = forward_cached(params, views, mode, rng, project=True)
    loss, dZ = ntxent_loss_grad(out, temperature)
    if not need_grad:
        return loss, None
    return loss, backward(params, cache, dZ)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _triplet_array(triplets: Sequence[Triplet], keep: frozenset[str]) -> np.ndarray:
    rows = [(t.anchor, t.positive, t.negative) for t in triplets if t.specimen_id in keep]
    return np.asarray(rows, dtype=np.intp).reshape(-1, 3)


def train(
    features: FeatureTable,
    triplets: Sequence[Triplet] | None,
    cfg: TrainConfig,
    split: SplitAssignment,
    progress: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train one variant and return the epoch with the lowest validation loss.

    Triplet variants consume ``triplets`` from training boards; the
    contrastive variant uses the feature rows of training boards directly.
    Ties in validation loss go to the later epoch.
    """
    dtype = np.dtype(cfg.dtype)
    X = features.X.astype(dtype)
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, shuffle_ss, dropout_ss, aug_ss, val_ss = ss.spawn(5)
    init_rng = np.random.default_rng(init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    aug_rng = np.random.default_rng(aug_ss)

    params = init_model(
        cfg.variant,
        init_rng,
        encoder_dims=cfg.encoder_dims,
        projection_dims=cfg.projection_dims,
        dropout_rate=cfg.dropout_rate,
        dropout_layers=cfg.dropout_layers,
        input_weights=cfg.input_weights,
        dtype=dtype,
    )
    if params.in_dim != X.shape[1]:
        raise DataError(f"features have {X.shape[1]} columns, network expects {params.in_dim}")

    contrastive = cfg.variant == "simclr"
    if contrastive:
        rows_train = np.asarray(
            [i for i, s in enumerate(features.specimen_ids) if s in split.train], dtype=np.intp
        )
        rows_val = np.asarray(
            [i for i, s in enumerate(features.specimen_ids) if s in split.validation],
            dtype=np.intp,
        )
        if rows_train.size < 2:
            raise DataError("contrastive training needs at least 2 training rows")
        n_items = rows_train.size
    else:
        if not triplets:
            raise DataError("no triplets to train on")
        t_train = _triplet_array(triplets, split.train)
        t_val = _triplet_array(triplets, split.validation)
        if t_train.shape[0] == 0:
            raise DataError("no triplets belong to training specimens")
        n_items = t_train.shape[0]

    def val_loss(train_loss: float) -> float:
        if contrastive:
            if rows_val.size < 2:
                return train_loss
            loss, _ = simclr_objective(
                params, X[rows_val], cfg.temperature, cfg.augmentation,
                np.random.default_rng(val_ss), None, "infer", need_grad=False,
            )
            return loss
        if t_val.shape[0] == 0:
            return train_loss
        loss, _ = triplet_objective(params, X, t_val, cfg.margin, None, "infer", need_grad=False)
        return loss

    state = AdamState.zeros_like(params.parameters())
    result = TrainResult(params=params.copy())
    best = np.inf
    bs = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n_items)
        total, seen = 0.0, 0
        for start in range(0, n_items, bs):
            sel = order[start : start + bs]
            if contrastive:
                if sel.size < 2:
                    continue
                loss, grads = simclr_objective(
                    params, X[rows_train[sel]], cfg.temperature, cfg.augmentation,
                    aug_rng, dropout_rng,
                )
            else:
                loss, grads = triplet_objective(params, X, t_train[sel], cfg.margin, dropout_rng)
            adam_step(params.parameters(), grads, state, cfg.learning_rate, cfg.weight_decay)
            total += loss * sel.size
            seen += sel.size
        train_loss = total / max(seen, 1)
        entry = EpochLog(epoch, train_loss, val_loss(train_loss))
        result.log.append(entry)
        if entry.val_loss <= best:
            best = entry.val_loss
            result.params = params.copy()
            result.best_epoch = epoch
        if progress is not None:
            progress(entry)
        if epoch == 1 or epoch % 100 == 0 or epoch == cfg.epochs:
            log.info(
                "epoch %d/%d train %.6f val %.6f", epoch, cfg.epochs, entry.train_loss, entry.val_loss
            )

    result.params.config = {
        **cfg.to_dict(),
        "best_epoch": result.best_epoch,
        "embedding_source": "encoder",
    }
    return result


def write_train_log(path: str | Path, entries: Sequence[EpochLog]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e in entries:
            w.writerow([e.epoch, repr(float(e.train_loss)), repr(float(e.val_loss))])
