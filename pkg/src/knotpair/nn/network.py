"""Fully connected embedding networks with hand-written reverse mode.

The encoder maps a 9-feature knot vector to a 128-d embedding through
9 -> 1024 -> 512 -> 256 -> 128 -> 64 -> 128, ReLU on every hidden layer and
inverted dropout (rate 0.3) after the first four. Variants differ only in what
happens before the first layer (an elementwise input weighting, trainable or
fixed) and, for contrastive training, a small projection head after it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from ..errors import ConfigError, DataError
from ..features import FEATURE_COLUMNS, N_FEATURES

ENCODER_DIMS = (N_FEATURES, 1024, 512, 256, 128, 64, 128)
PROJECTION_DIMS = (128, 64, 32)
DROPOUT_RATE = 0.3
DROPOUT_LAYERS = 4

# Domain-prior weighting that emphasises knot type and pith type.
CUSTOM_WEIGHTS = (0.06, 0.06, 0.06, 0.06, 0.06, 0.06, 0.06, 0.18, 0.4)

VARIANTS = ("standard", "learnable_weights", "custom_weights", "simclr")
_ALIASES = {"learnable": "learnable_weights", "custom": "custom_weights"}

Mode = Literal["train", "infer"]


def normalize_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DataError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        if self.activation not in ("relu", "none"):
            raise DataError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout rate {self.dropout} outside [0, 1)")
        if self.dropout and self.activation != "relu":
            raise DataError("dropout is only supported after a ReLU")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation, self.dropout)

    def same_as(self, other: "Layer") -> bool:
        return (
            self.activation == other.activation
            and self.dropout == other.dropout
            and self.weight.dtype == other.weight.dtype
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
        )


def _check_chain(layers: Sequence[Layer], what: str) -> None:
    if not layers:
        raise DataError(f"{what} has no layers")
    for i in range(1, len(layers)):
        if layers[i].in_dim != layers[i - 1].out_dim:
            raise DataError(
                f"{what} layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} "
                f"produces {layers[i - 1].out_dim}"
            )
    last = layers[-1]
    if last.activation != "none" or last.dropout != 0.0:
        raise DataError(f"{what} final layer must be linear without dropout")


@dataclass(eq=False)
class ModelParams:
    variant: str
    layers: list[Layer]
    input_weights: np.ndarray | None = None
    projection_head: list[Layer] | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        _check_chain(self.layers, "encoder")
        if self.variant in ("learnable_weights", "custom_weights"):
            if self.input_weights is None:
                raise DataError(f"variant {self.variant} requires input weights")
        elif self.input_weights is not None:
            raise DataError(f"variant {self.variant} takes no input weights")
        if self.input_weights is not None and self.input_weights.shape != (self.in_dim,):
            raise DataError(
                f"input weights have shape {self.input_weights.shape}, expected ({self.in_dim},)"
            )
        if self.projection_head is not None:
            _check_chain(self.projection_head, "projection head")
            if self.projection_head[0].in_dim != self.embed_dim:
                raise DataError("projection head input does not match embedding width")
        elif self.variant == "simclr":
            raise DataError("simclr variant requires a projection head")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weight.dtype

    @property
    def trains_input_weights(self) -> bool:
        return self.variant == "learnable_weights"

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. The arrays are live; updating them updates the model."""
        out: dict[str, np.ndarray] = {}
        if self.trains_input_weights:
            out["input_weights"] = self.input_weights
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weight"] = layer.weight
            out[f"layers.{i}.bias"] = layer.bias
        for i, layer in enumerate(self.projection_head or ()):
            out[f"head.{i}.weight"] = layer.weight
            out[f"head.{i}.bias"] = layer.bias
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            variant=self.variant,
            layers=[l.copy() for l in self.layers],
            input_weights=None if self.input_weights is None else self.input_weights.copy(),
            projection_head=None
            if self.projection_head is None
            else [l.copy() for l in self.projection_head],
            config=dict(self.config),
        )

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.variant != other.variant or self.config != other.config:
            return False
        if len(self.layers) != len(other.layers):
            return False
        if not all(a.same_as(b) for a, b in zip(self.layers, other.layers)):
            return False
        if (self.input_weights is None) != (other.input_weights is None):
            return False
        if self.input_weights is not None and not (
            self.input_weights.dtype == other.input_weights.dtype
            and np.array_equal(self.input_weights, other.input_weights)
        ):
            return False
        ha, hb = self.projection_head or [], other.projection_head or []
        return len(ha) == len(hb) and all(a.same_as(b) for a, b in zip(ha, hb))


def _init_stack(dims, rng, dtype, dropout_rate=0.0, dropout_layers=0) -> list[Layer]:
    layers = []
    n = len(dims) - 1
    for i in range(n):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        last = i == n - 1
        layers.append(
            Layer(
                weight=w,
                bias=np.zeros(fan_out, dtype=dtype),
                activation="none" if last else "relu",
                dropout=dropout_rate if (i < dropout_layers and not last) else 0.0,
            )
        )
    return layers


def init_model(
    variant: str,
    rng: np.random.Generator,
    *,
    encoder_dims: Sequence[int] = ENCODER_DIMS,
    projection_dims: Sequence[int] = PROJECTION_DIMS,
    dropout_rate: float = DROPOUT_RATE,
    dropout_layers: int = DROPOUT_LAYERS,
    input_weights: Sequence[float] | None = None,
    dtype=np.float32,
    config: dict | None = None,
) -> ModelParams:
    """Fresh parameters: weights uniform in +-sqrt(6 / fan_in), biases zero.

    Learnable input weights start at 1.0; the custom variant needs its fixed
    ``input_weights`` supplied.
    """
    variant = normalize_variant(variant)
    dtype = np.dtype(dtype)
    layers = _init_stack(encoder_dims, rng, dtype, dropout_rate, dropout_layers)
    iw = None
    if variant == "learnable_weights":
        iw = np.ones(encoder_dims[0], dtype=dtype)
    elif variant == "custom_weights":
        if input_weights is None:
            raise ConfigError("custom_weights variant requires an input weight vector")
        iw = np.asarray(input_weights, dtype=dtype)
        if iw.shape != (encoder_dims[0],):
            raise ConfigError(f"custom weight vector must have {encoder_dims[0]} entries")
    elif input_weights is not None:
        raise ConfigError(f"variant {variant} does not accept input weights")
    head = None
    if variant == "simclr":
        if projection_dims[0] != encoder_dims[-1]:
            raise ConfigError("projection head must start at the embedding width")
        head = _init_stack(projection_dims, rng, dtype)
    return ModelParams(variant, layers, iw, head, dict(config or {}))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Cache:
    """Activations recorded by a forward pass, consumed by ``backward``.

    ``encoder[i]`` / ``head[i]`` hold the input of layer ``i``; the last
    entry is the stack output.
    """

    x: np.ndarray
    encoder: list[np.ndarray]
    head: list[np.ndarray] | None
    train: bool = False


def _run_stack(layers, h, train, rng, acts):
    if acts is not None:
        acts.append(h)
    for layer in layers:
        h = h @ layer.weight.T
        h += layer.bias
        if layer.activation == "relu":
            np.maximum(h, 0, out=h)
        if train and layer.dropout > 0.0:
            keep = 1.0 - layer.dropout
            h *= rng.random(h.shape, dtype=h.dtype) < keep
            h *= h.dtype.type(1.0 / keep)
        if acts is not None:
            acts.append(h)
    return h


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x).astype(params.dtype, copy=False)
    if x.shape[1] != params.in_dim:
        raise DataError(f"expected {params.in_dim} input features, got {x.shape[1]}")
    return x, single


def forward_cached(
    params: ModelParams,
    x,
    mode: Mode = "train",
    rng: np.random.Generator | None = None,
    *,
    project: bool = False,
) -> tuple[np.ndarray, Cache]:
    """Batched forward pass that records what ``backward`` needs."""
    x, _ = _as_batch(params, x)
    train = mode == "train"
    if train and rng is None:
        raise ConfigError("train mode needs a random generator for dropout")
    h = x * params.input_weights if params.input_weights is not None else x
    enc: list[np.ndarray] = []
    h = _run_stack(params.layers, h, train, rng, enc)
    head = None
    if project:
        if params.projection_head is None:
            raise ConfigError("model has no projection head")
        head = []
        h = _run_stack(params.projection_head, h, train, rng, head)
    return h, Cache(x, enc, head, train)


def forward(
    params: ModelParams,
    x,
    mode: Mode = "infer",
    rng: np.random.Generator | None = None,
    *,
    project: bool = False,
) -> np.ndarray:
    """Embed one vector (shape (9,)) or a batch (shape (B, 9))."""
    xb, single = _as_batch(params, x)
    train = mode == "train"
    if train and rng is None:
        raise ConfigError("train mode needs a random generator for dropout")
    h = xb * params.input_weights if params.input_weights is not None else xb
    h = _run_stack(params.layers, h, train, rng, None)
    if project:
        if params.projection_head is None:
            raise ConfigError("model has no projection head")
        h = _run_stack(params.projection_head, h, train, rng, None)
    return h[0] if single else h


def _back_stack(layers, acts, g, grads, prefix, need_input_grad, train):
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        out = acts[i + 1]
        if layer.activation == "relu":
            # a positive output means the unit was active and, under dropout,
            # kept, so the local derivative is 1 or 1/keep
            g = np.where(out > 0, g, 0)
            if train and layer.dropout > 0.0:
                g *= g.dtype.type(1.0 / (1.0 - layer.dropout))
        grads[f"{prefix}.{i}.weight"] = g.T @ acts[i]
        grads[f"{prefix}.{i}.bias"] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ layer.weight
    return g


def backward(params: ModelParams, cache: Cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss with respect to every trainable array.

    ``grad_out`` is dLoss/dOutput for the batch recorded in ``cache``; keys of
    the result match ``params.parameters()``.
    """
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(grad_out, dtype=params.dtype)
    if cache.head is not None:
        g = _back_stack(params.projection_head, cache.head, g, grads, "head", True, cache.train)
    need_x = params.trains_input_weights
    g = _back_stack(params.layers, cache.encoder, g, grads, "layers", need_x, cache.train)
    if need_x:
        grads["input_weights"] = (g * cache.x).sum(axis=0)
    return {k: grads[k] for k in params.parameters()}


def embed_all(params: ModelParams, X, chunk: int = 4096) -> np.ndarray:
    """Infer-mode encoder outputs for every row, order preserved."""
    X = np.asarray(X)
    if X.shape[0] == 0:
        return np.empty((0, params.embed_dim), dtype=params.dtype)
    parts = [forward(params, X[i : i + chunk], "infer") for i in range(0, X.shape[0], chunk)]
    return np.vstack(parts)


def report_learned_weights(params: ModelParams) -> dict[str, float]:
    """Input weights as |w_i| / sum|w_j|, keyed by feature name in canonical order."""
    if params.input_weights is None:
        raise ConfigError(f"variant {params.variant} has no input weights to report")
    w = np.abs(params.input_weights.astype(np.float64))
    total = w.sum()
    if total == 0:
        raise DataError("all input weights are zero")
    names = FEATURE_COLUMNS if len(w) == N_FEATURES else [f"x{i}" for i in range(len(w))]
    return {name: float(v) for name, v in zip(names, w / total)}
